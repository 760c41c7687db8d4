from __future__ import annotations

import json

import pytest

from servesim.blocks import format_key
from servesim.cli import main
from servesim.spec_decode import TableModel
from servesim.rng import CounterRng

GIB = 2**30


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture
def manifest_2x2(tmp_path):
    path = tmp_path / "m.manifest"
    path.write_text(
        "manifest v1\n"
        f"a.bin\t{2 * GIB}\tta\n"
        f"b.bin\t{2 * GIB}\ttb\n"
    )
    return str(path)


class TestTrace:
    def test_writes_header_and_lines(self, tmp_path, capsys):
        out = tmp_path / "t.trace"
        assert run_cli("trace", "qa", "100", "3", str(out)) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "trace v1"
        assert len(lines) == 101

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli("trace", "qa", "50", "9", str(a))
        run_cli("trace", "qa", "50", "9", str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_profile_exit_2(self, tmp_path, capsys):
        assert run_cli("trace", "bogus", "10", "0", str(tmp_path / "x")) == 2
        assert "qa" in capsys.readouterr().err


class TestSimulate:
    def test_profile_run_writes_report(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = run_cli("simulate", "--profile", "qa", "--n", "30", "--seed", "5",
                       "--out", str(out))
        assert code == 0
        data = json.loads(out.read_text())
        assert data["format"] == "report v1"
        assert data["n_requests"] == 30
        assert "TTFT P95" in capsys.readouterr().out

    def test_unknown_config_key_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"topology": {"prefil_workers": 2}}))
        code = run_cli("simulate", "--config", str(cfg), "--profile", "qa",
                       "--n", "5", "--out", str(tmp_path / "r.json"))
        assert code == 2
        assert "prefil_workers" in capsys.readouterr().err

    def test_same_seed_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for out in (a, b):
            assert run_cli("simulate", "--profile", "qa", "--n", "40",
                           "--seed", "11", "--out", str(out)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_trace_replay_and_flags(self, tmp_path):
        trace = tmp_path / "t.trace"
        run_cli("trace", "qa", "30", "2", str(trace))
        out = tmp_path / "r.json"
        code = run_cli("simulate", "--trace", str(trace), "--routing", "random",
                       "--match-semantics", "strict", "--seed", "1", "--out", str(out))
        assert code == 0

    def test_thrash_abort_exit_3(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(
            json.dumps(
                {
                    "max_requeues": 3,
                    "tiers": {
                        "capacities": {
                            "gpu": 64 * 1024,
                            "local_cpu": 1,
                            "remote_cpu": 1,
                            "dist_store": None,
                        }
                    },
                }
            )
        )
        code = run_cli("simulate", "--config", str(cfg), "--profile", "qa",
                       "--n", "5", "--out", str(tmp_path / "r.json"))
        assert code == 3
        assert "thrash" in capsys.readouterr().err

    def test_missing_trace_exit_4(self, tmp_path):
        assert run_cli("simulate", "--trace", str(tmp_path / "nope.trace"),
                       "--out", str(tmp_path / "r.json")) == 4

    def test_seed_sweep_fans_out(self, tmp_path, capsys):
        out = tmp_path / "r.json"
        code = run_cli("simulate", "--profile", "qa", "--n", "10",
                       "--seeds", "3..5", "--out", str(out))
        assert code == 0
        for seed in (3, 4, 5):
            assert (tmp_path / f"r.json.{seed}").exists()


class TestMatch:
    def test_fixture_lengths(self, tmp_path, capsys):
        h1, h2, h3 = 0xAA, 0xAB, 0xAC
        hashes = tmp_path / "h.txt"
        hashes.write_text("\n".join(format_key(h) for h in (h1, h2, h3)) + "\n")
        snap = tmp_path / "s.txt"
        snap.write_text(
            f"{format_key(h1)}\tw1\n{format_key(h2)}\tw1\n{format_key(h1)}\tw2\n"
        )
        assert run_cli("match", str(hashes), str(snap)) == 0
        out = capsys.readouterr().out
        assert "w1:2" in out and "w2:1" in out and "global:2" in out

    def test_empty_snapshot_zeroes(self, tmp_path, capsys):
        hashes = tmp_path / "h.txt"
        hashes.write_text(format_key(0xAA) + "\n")
        snap = tmp_path / "s.txt"
        snap.write_text("")
        assert run_cli("match", str(hashes), str(snap)) == 0
        assert "global:0" in capsys.readouterr().out

    def test_strict_semantics_gap(self, tmp_path, capsys):
        h1, h2 = 0xAA, 0xAB
        hashes = tmp_path / "h.txt"
        hashes.write_text("\n".join(format_key(h) for h in (h1, h2)) + "\n")
        snap = tmp_path / "s.txt"
        snap.write_text(f"{format_key(h1)}\tw1\n{format_key(h2)}\tw2\n")
        assert run_cli("match", str(hashes), str(snap), "--semantics", "strict") == 0
        out = capsys.readouterr().out
        assert "w1:1" in out and "w2:0" in out

    def test_parse_error_exit_4(self, tmp_path, capsys):
        hashes = tmp_path / "h.txt"
        hashes.write_text("zzzz\n")
        snap = tmp_path / "s.txt"
        snap.write_text("")
        assert run_cli("match", str(hashes), str(snap)) == 4


class TestSpecdec:
    @pytest.fixture
    def model_file(self, tmp_path):
        model = TableModel.random(16, 2, 8, CounterRng(4))
        path = tmp_path / "model.txt"
        path.write_text(model.to_text())
        return str(path)

    def test_copy_heavy_stats(self, tmp_path, capsys):
        prompt = tmp_path / "prompt.txt"
        prompt.write_text(" ".join(str(i) for i in range(32)))
        model = tmp_path / "copy.model"
        lines = ["tablemodel v1 vocab=32 context=1"]
        for t in range(32):
            lines.append(f"{t} : {(t + 1) % 32} 1.0")
        lines.append("default : 0 1.0")
        model.write_text("\n".join(lines) + "\n")
        code = run_cli("specdec", "--prompt", str(prompt), "--model", str(model),
                       "--k", "8", "--n-tokens", "40", "--check-lossless")
        assert code == 0
        err = capsys.readouterr().err
        assert "greedy_baseline=match" in err
        mean = float(err.split("mean_accepted_per_iteration=")[1].split()[0])
        assert mean > 1.5

    def test_stochastic_replayable(self, tmp_path, capsys, model_file):
        prompt = tmp_path / "p.txt"
        prompt.write_text("1 2 3 4 5")
        outs = []
        for _ in range(2):
            assert run_cli("specdec", "--prompt", str(prompt), "--model", model_file,
                           "--mode", "stochastic", "--seed", "9",
                           "--n-tokens", "20") == 0
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]

    def test_bad_model_exit_4(self, tmp_path):
        prompt = tmp_path / "p.txt"
        prompt.write_text("1 2")
        bad = tmp_path / "bad.model"
        bad.write_text("garbage\n")
        assert run_cli("specdec", "--prompt", str(prompt), "--model", str(bad)) == 4


class TestLoadplan:
    def test_worked_fixture_makespan(self, manifest_2x2, capsys):
        code = run_cli("loadplan", manifest_2x2, "--world-size", "1",
                       "--read-bandwidth", str(float(1 * GIB)),
                       "--broadcast-bandwidth", str(float(2 * GIB)))
        assert code == 0
        out = capsys.readouterr().out
        assert "makespan_us=5600000" in out

    def test_world_size_zero_usage_error(self, manifest_2x2, capsys):
        assert run_cli("loadplan", manifest_2x2, "--world-size", "0") == 2

    def test_compare_prints_speedup(self, manifest_2x2, capsys):
        code = run_cli("loadplan", manifest_2x2, "--world-size", "2", "--compare")
        assert code == 0
        assert "speedup=" in capsys.readouterr().out

    def test_missing_manifest_exit_4(self, tmp_path):
        assert run_cli("loadplan", str(tmp_path / "nope"), "--world-size", "1") == 4
