"""Command-line surface.

Subcommands: simulate, match, specdec, loadplan, trace.  Every subcommand
is deterministic given its flags and seed.  Exit codes: 0 ok, 2 config or
usage error, 3 cache-thrash abort, 4 I/O or input-format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional

from . import __version__
from .blocks import parse_key
from .cache_managers import MATCH_SEMANTICS, load_map_snapshot
from .config import SimConfig, config_from_dict
from .errors import CacheThrashError, ConfigError, TraceFormatError
from .load_planner import (
    FileManifest,
    IoParams,
    assign_files,
    baseline_timeline,
    compare_strategies,
    plan_timeline,
)
from .rng import CounterRng
from .simulator import run as run_simulation
from .spec_decode import TableModel, greedy_generate, speculative_generate
from .workload import ingest_trace, synth_trace, write_trace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_THRASH = 3
EXIT_IO = 4


def _merge_config(config_path: Optional[str], overrides: dict) -> SimConfig:
    base = {}
    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as f:
            base = json.load(f)
    base.update(overrides)
    return config_from_dict(base)


def _simulate_one(job) -> str:
    config_path, overrides, trace_path, profile, n, seed, out_path = job
    config = _merge_config(config_path, overrides)
    if trace_path is not None:
        trace = ingest_trace(trace_path)
    else:
        trace = synth_trace(profile, n, seed)
    with open(out_path, "wb") as f:
        f.write(run_simulation(trace, config, seed).to_json_bytes())
    return out_path


def cmd_simulate(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.routing is not None:
        overrides["routing"] = args.routing
    if args.match_semantics is not None:
        overrides["match_semantics"] = args.match_semantics
    try:
        config = _merge_config(args.config, overrides)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO

    if args.seeds is not None:
        try:
            lo, hi = (int(x) for x in args.seeds.split(".."))
        except ValueError:
            print("error: --seeds expects `lo..hi`", file=sys.stderr)
            return EXIT_CONFIG
        jobs = [
            (
                args.config,
                {**overrides, "seed": seed},
                args.trace,
                args.profile,
                args.n,
                seed,
                f"{args.out}.{seed}",
            )
            for seed in range(lo, hi + 1)
        ]
        with ProcessPoolExecutor() as pool:
            for path in pool.map(_simulate_one, jobs):
                print(path)
        return EXIT_OK

    try:
        if args.trace is not None:
            trace = ingest_trace(args.trace)
        else:
            trace = synth_trace(args.profile, args.n, config.seed)
    except TraceFormatError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        report = run_simulation(trace, config)
    except CacheThrashError as exc:
        print(f"thrash abort: {exc}", file=sys.stderr)
        return EXIT_THRASH
    try:
        with open(args.out, "wb") as f:
            f.write(report.to_json_bytes())
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_match(args) -> int:
    try:
        with open(args.hashes, "r", encoding="utf-8") as f:
            hashes = [parse_key(line.strip()) for line in f if line.strip()]
        with open(args.snapshot, "r", encoding="utf-8") as f:
            cache_map = load_map_snapshot(f)
    except TraceFormatError as exc:
        print(f"snapshot error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"hash list error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not hashes:
        print("hash list error: no hashes", file=sys.stderr)
        return EXIT_IO
    result = MATCH_SEMANTICS[args.semantics](hashes, cache_map)
    for worker in cache_map.workers():
        print(f"{worker}:{result.per_worker.get(worker, 0)}")
    print(f"global:{result.global_prefix_len}")
    return EXIT_OK


def cmd_specdec(args) -> int:
    try:
        with open(args.prompt, "r", encoding="utf-8") as f:
            prompt = [int(tok) for tok in f.read().split()]
        with open(args.model, "r", encoding="utf-8") as f:
            model = TableModel.from_text(f.read())
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not prompt:
        print("input error: empty prompt", file=sys.stderr)
        return EXIT_IO
    if any(t >= model.vocab_size or t < 0 for t in prompt):
        print("input error: prompt token outside model vocabulary", file=sys.stderr)
        return EXIT_IO
    rng = CounterRng(args.seed).derive("specdec")
    result = speculative_generate(
        prompt,
        model,
        args.n_tokens,
        k=args.k,
        ngram_n=args.ngram_n,
        mode=args.mode,
        rng=rng,
    )
    print(" ".join(map(str, result.tokens)))
    print(
        f"iterations={result.iterations} "
        f"mean_accepted_per_iteration={result.mean_accepted:.3f}",
        file=sys.stderr,
    )
    if args.mode == "greedy" and args.check_lossless:
        baseline = greedy_generate(prompt, model, args.n_tokens)
        status = "match" if baseline == result.tokens else "MISMATCH"
        print(f"greedy_baseline={status}", file=sys.stderr)
    return EXIT_OK


def cmd_loadplan(args) -> int:
    if args.world_size < 1:
        print("error: --world-size must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with open(args.manifest, "r", encoding="utf-8") as f:
            manifest = FileManifest.from_text(f.read())
    except TraceFormatError as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, ValueError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    params = IoParams(
        read_bytes_per_sec=args.read_bandwidth,
        broadcast_bytes_per_sec=args.broadcast_bandwidth,
        pinned_alloc_overhead_us=args.alloc_overhead_us,
        shm_reuse=args.shm_reuse,
        overlap=args.overlap,
        baseline_nonseq_penalty=args.baseline_penalty,
    )
    if args.baseline:
        schedule = baseline_timeline(manifest, params, args.world_size)
    else:
        schedule = plan_timeline(
            assign_files(manifest, args.world_size), manifest, params, args.world_size
        )
    print(schedule.to_text(), end="")
    if args.compare:
        cmp = compare_strategies(manifest, params, args.world_size)
        print(
            f"fileorder_makespan_us={cmp.fileorder_makespan_us} "
            f"baseline_makespan_us={cmp.baseline_makespan_us} "
            f"speedup={cmp.speedup:.3f}"
        )
    return EXIT_OK


def cmd_trace(args) -> int:
    try:
        records = synth_trace(args.profile, args.n, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        write_trace(records, args.out)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{args.out}: {len(records)} requests")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="servesim",
        description="Desk-scale control-plane simulator for disaggregated LLM serving.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a cluster simulation and write a report")
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--trace", help="trace file to replay")
    src.add_argument("--profile", default="qa", help="synthesize a trace from this profile")
    p.add_argument("--n", type=int, default=100, help="requests to synthesize (with --profile)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--seeds", help="`lo..hi` seed sweep, fanned out across processes")
    p.add_argument("--routing", choices=["cache_aware", "random"])
    p.add_argument("--match-semantics", choices=["global", "strict"])
    p.add_argument("--out", required=True, help="report output path (JSON)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("match", help="run prefix matching against a map snapshot")
    p.add_argument("hashes", help="file with one hex hash per line")
    p.add_argument("snapshot", help="map snapshot: hash<TAB>worker per line")
    p.add_argument("--semantics", choices=["global", "strict"], default="global")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("specdec", help="speculative decoding harness")
    p.add_argument("--prompt", required=True, help="whitespace-separated token id file")
    p.add_argument("--model", required=True, help="table model file")
    p.add_argument("--mode", choices=["greedy", "stochastic"], default="greedy")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--ngram-n", type=int, default=2)
    p.add_argument("--n-tokens", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--check-lossless",
        action="store_true",
        help="also run plain greedy decoding and compare",
    )
    p.set_defaults(func=cmd_specdec)

    p = sub.add_parser("loadplan", help="plan model loading for a manifest")
    p.add_argument("manifest", help="manifest file (manifest v1)")
    p.add_argument("--world-size", type=int, default=1)
    p.add_argument("--overlap", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--shm-reuse", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--baseline", action="store_true", help="plan the structure-driven baseline")
    p.add_argument("--compare", action="store_true", help="print both makespans and the speedup")
    p.add_argument("--read-bandwidth", type=float, default=float(2 * 2**30))
    p.add_argument("--broadcast-bandwidth", type=float, default=float(20 * 2**30))
    p.add_argument("--alloc-overhead-us", type=int, default=600_000)
    p.add_argument("--baseline-penalty", type=float, default=1.5)
    p.set_defaults(func=cmd_loadplan)

    p = sub.add_parser("trace", help="synthesize a trace file")
    p.add_argument("profile", help="workload profile name")
    p.add_argument("n", type=int, help="number of requests")
    p.add_argument("seed", type=int, help="rng seed")
    p.add_argument("out", help="output trace path")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CacheThrashError as exc:
        print(f"thrash abort: {exc}", file=sys.stderr)
        return EXIT_THRASH


if __name__ == "__main__":
    sys.exit(main())
