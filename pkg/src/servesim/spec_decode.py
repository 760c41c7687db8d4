"""Speculative sampling pipeline: propose, score, verify, update.

The four stages are plain functions with no hidden state besides
ProposeState, so proposers are swappable without touching verification:

* ``propose_ngram``      prompt-lookup proposer (degenerate proposal
                         distribution, cursor-tracked for sequential copy)
* ``propose_table_draft`` naive draft proposer backed by a smaller table
                         model (non-degenerate proposal distribution)

Verification is lossless: greedy mode reproduces plain greedy decoding
token for token, and stochastic mode emits tokens whose law equals the
target model's distribution exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .rng import CounterRng

TokenId = int
Distribution = List[float]

_DIST_TOLERANCE = 1e-9


@dataclass
class ProposeState:
    """Lookup-proposer state carried across iterations."""

    cursor: int = 0
    ngram_n: int = 2
    k: int = 8
    first_iteration: bool = True
    skip_initial: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.ngram_n < 1:
            raise ValueError("ngram_n must be >= 1")
        if self.cursor < 0:
            raise ValueError("cursor must be >= 0")


@dataclass
class Draft:
    """Candidate tokens plus their proposal probabilities.

    Lookup proposals are degenerate: probability 1.0 at each candidate and
    no proposal distributions.  Draft-model proposals carry the full
    per-position proposal distribution for residual sampling.
    """

    candidates: List[TokenId] = field(default_factory=list)
    proposal_probs: List[float] = field(default_factory=list)
    proposal_dists: Optional[List[Distribution]] = None
    origin: Optional[int] = None  # prompt index where the copied run starts

    def __post_init__(self):
        if len(self.proposal_probs) != len(self.candidates):
            raise ValueError("one proposal prob per candidate")

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass
class VerifyOutcome:
    accepted: List[TokenId]
    bonus: TokenId
    origin: Optional[int] = None

    @property
    def accepted_len(self) -> int:
        return len(self.accepted)

    @property
    def emitted(self) -> List[TokenId]:
        return self.accepted + [self.bonus]


class ScoreModel:
    """Deterministic next-token distribution over a fixed vocabulary.

    Subclasses implement next_distribution; score_positions defaults to
    scoring sequentially and may be overridden with a joint implementation,
    which must return identical distributions (parallel-scoring contract).
    """

    vocab_size: int = 0

    def next_distribution(self, prefix: Sequence[TokenId]) -> Distribution:
        raise NotImplementedError

    def score_positions(
        self, prefix: Sequence[TokenId], candidates: Sequence[TokenId]
    ) -> List[Distribution]:
        prefix = list(prefix)
        dists = []
        for c in list(candidates) + [None]:
            dists.append(self.next_distribution(prefix))
            if c is not None:
                prefix.append(c)
        return dists


def _validate_dist(dist: Distribution) -> Distribution:
    total = sum(dist)
    if abs(total - 1.0) > _DIST_TOLERANCE:
        raise ValueError(f"distribution sums to {total!r}, not 1")
    if any(p < 0 for p in dist):
        raise ValueError("negative probability")
    return dist


def argmax(dist: Distribution) -> int:
    """Lowest index attaining the maximum (the tie rule both decode paths share)."""
    best = 0
    for i in range(1, len(dist)):
        if dist[i] > dist[best]:
            best = i
    return best


def sample(dist: Distribution, rng: CounterRng) -> int:
    u = rng.random()
    acc = 0.0
    for i, p in enumerate(dist):
        acc += p
        if u < acc:
            return i
    return len(dist) - 1


class TableModel(ScoreModel):
    """n-gram table model: last `context_len` tokens pick the distribution.

    Unknown contexts fall back to progressively shorter suffixes and
    finally to the default distribution.  Deterministic by construction.
    """

    def __init__(
        self,
        vocab_size: int,
        context_len: int,
        table: Dict[Tuple[TokenId, ...], Distribution],
        default: Distribution,
    ):
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        self.vocab_size = vocab_size
        self.context_len = context_len
        self.table = {ctx: _validate_dist(list(d)) for ctx, d in table.items()}
        self.default = _validate_dist(list(default))

    def next_distribution(self, prefix: Sequence[TokenId]) -> Distribution:
        for n in range(min(self.context_len, len(prefix)), 0, -1):
            ctx = tuple(prefix[-n:])
            if ctx in self.table:
                return self.table[ctx]
        return self.default

    def score_positions(
        self, prefix: Sequence[TokenId], candidates: Sequence[TokenId]
    ) -> List[Distribution]:
        # Joint scoring: one pass over an extended buffer instead of
        # repeated full calls; must match the sequential default exactly.
        buf = list(prefix)
        dists = []
        for c in list(candidates) + [None]:
            dists.append(self.next_distribution(buf))
            if c is not None:
                buf.append(c)
        return dists

    def to_text(self) -> str:
        lines = [f"tablemodel v1 vocab={self.vocab_size} context={self.context_len}"]
        for ctx in sorted(self.table):
            pairs = " ".join(f"{t} {p!r}" for t, p in enumerate(self.table[ctx]) if p > 0)
            lines.append(f"{' '.join(map(str, ctx))} : {pairs}")
        pairs = " ".join(f"{t} {p!r}" for t, p in enumerate(self.default) if p > 0)
        lines.append(f"default : {pairs}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TableModel":
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines or not lines[0].startswith("tablemodel v1"):
            raise ValueError("not a tablemodel v1 file")
        header = dict(kv.split("=") for kv in lines[0].split()[2:])
        vocab = int(header["vocab"])
        context_len = int(header["context"])
        table: Dict[Tuple[TokenId, ...], Distribution] = {}
        default: Optional[Distribution] = None
        for line in lines[1:]:
            ctx_part, _, dist_part = line.partition(":")
            items = dist_part.split()
            if len(items) % 2 != 0:
                raise ValueError(f"bad distribution line: {line!r}")
            dist = [0.0] * vocab
            for t, p in zip(items[::2], items[1::2]):
                dist[int(t)] = float(p)
            ctx_tokens = ctx_part.split()
            if ctx_tokens == ["default"]:
                default = dist
            else:
                table[tuple(int(t) for t in ctx_tokens)] = dist
        if default is None:
            raise ValueError("missing default distribution")
        return cls(vocab, context_len, table, default)

    @classmethod
    def random(
        cls,
        vocab_size: int,
        context_len: int,
        n_contexts: int,
        rng: CounterRng,
        concentration: int = 3,
    ) -> "TableModel":
        """Random sparse model; each distribution has `concentration` spikes."""

        def rand_dist() -> Distribution:
            dist = [0.0] * vocab_size
            support = set()
            while len(support) < min(concentration, vocab_size):
                support.add(rng.randrange(vocab_size))
            weights = {t: 1 + rng.randrange(99) for t in sorted(support)}
            total = sum(weights.values())
            for t, w in weights.items():
                dist[t] = w / total
            residual = 1.0 - sum(dist)
            dist[max(weights, key=lambda t: weights[t])] += residual
            return dist

        table = {}
        while len(table) < n_contexts:
            ctx = tuple(rng.randrange(vocab_size) for _ in range(context_len))
            table[ctx] = rand_dist()
        return cls(vocab_size, context_len, table, rand_dist())


class CyclicCopyModel(ScoreModel):
    """Target model whose greedy continuation copies the prompt cyclically.

    Ideal for exercising prompt lookup: the true next token after a prefix
    of length L is prompt[L mod len(prompt)].
    """

    def __init__(self, prompt: Sequence[TokenId], vocab_size: int):
        if not prompt:
            raise ValueError("prompt must be non-empty")
        self.prompt = list(prompt)
        self.vocab_size = max(vocab_size, max(self.prompt) + 1)

    def next_distribution(self, prefix: Sequence[TokenId]) -> Distribution:
        dist = [0.0] * self.vocab_size
        dist[self.prompt[len(prefix) % len(self.prompt)]] = 1.0
        return dist


def _rightmost_match(prompt: Sequence[TokenId], tail: Sequence[TokenId], lo: int) -> int:
    n = len(tail)
    for m in range(len(prompt) - n, lo - 1, -1):
        if list(prompt[m : m + n]) == list(tail):
            return m
    return -1


def propose_ngram(
    prompt: Sequence[TokenId], generated: Sequence[TokenId], state: ProposeState
) -> Tuple[Draft, ProposeState]:
    """Prompt-lookup proposal: continue the rightmost copy of the stream tail.

    The search prefers matches whose continuation lands at or after the
    cursor (sequential copying); on a miss there it falls back to a global
    rightmost search.  An empty draft means no match: the caller does one
    plain decoding step and retries.
    """
    if not prompt:
        raise ValueError("empty prompt")
    state = replace(state)
    if state.first_iteration and state.skip_initial:
        state.cursor = min(state.k, len(prompt))
        state.first_iteration = False
        cands = list(prompt[: state.k])
        return (
            Draft(candidates=cands, proposal_probs=[1.0] * len(cands), origin=0),
            state,
        )
    state.first_iteration = False
    stream = list(prompt) + list(generated)
    if len(stream) < state.ngram_n:
        return Draft(), state
    tail = stream[-state.ngram_n :]
    lo = max(0, state.cursor - state.ngram_n)
    m = _rightmost_match(prompt, tail, lo)
    if m < 0 and lo > 0:
        m = _rightmost_match(prompt, tail, 0)
    if m < 0:
        return Draft(), state
    start = m + state.ngram_n
    cands = list(prompt[start : start + state.k])
    if not cands:
        return Draft(), state
    return (
        Draft(candidates=cands, proposal_probs=[1.0] * len(cands), origin=start),
        state,
    )


def propose_table_draft(
    prompt: Sequence[TokenId],
    generated: Sequence[TokenId],
    k: int,
    draft_model: ScoreModel,
    mode: str = "greedy",
    rng: Optional[CounterRng] = None,
) -> Draft:
    """Draft-model proposal: roll the small model forward k tokens."""
    stream = list(prompt) + list(generated)
    cands: List[TokenId] = []
    probs: List[float] = []
    dists: List[Distribution] = []
    for _ in range(k):
        dist = draft_model.next_distribution(stream)
        if mode == "greedy":
            t = argmax(dist)
        else:
            if rng is None:
                raise ValueError("stochastic draft needs an rng")
            t = sample(dist, rng)
        cands.append(t)
        probs.append(dist[t])
        dists.append(dist)
        stream.append(t)
    return Draft(candidates=cands, proposal_probs=probs, proposal_dists=dists)


def score(
    prefix: Sequence[TokenId], candidates: Sequence[TokenId], model: ScoreModel
) -> List[Distribution]:
    """Target distributions at each candidate position plus the continuation."""
    dists = model.score_positions(prefix, candidates)
    if len(dists) != len(candidates) + 1:
        raise ValueError("model returned wrong number of distributions")
    return [_validate_dist(d) for d in dists]


def _residual(p: Distribution, q: Distribution) -> Optional[Distribution]:
    res = [max(0.0, pi - qi) for pi, qi in zip(p, q)]
    total = sum(res)
    if total <= 0.0:
        return None
    return [r / total for r in res]


def verify(
    draft: Draft,
    dists: Sequence[Distribution],
    mode: str = "greedy",
    rng: Optional[CounterRng] = None,
) -> VerifyOutcome:
    """Accept a verified prefix of the draft plus one bonus token.

    Greedy: accept while the candidate is the target argmax; the bonus is
    the argmax at the first rejection (or of the continuation position).
    Stochastic: accept candidate x with probability min(1, p(x)/q(x)); on
    rejection the bonus is drawn from normalize(max(0, p - q)), falling
    back to p itself when the residual vanishes.
    """
    if len(dists) != len(draft) + 1:
        raise ValueError("need one distribution per candidate plus continuation")
    accepted: List[TokenId] = []
    if mode == "greedy":
        for i, cand in enumerate(draft.candidates):
            if cand == argmax(dists[i]):
                accepted.append(cand)
            else:
                return VerifyOutcome(accepted, argmax(dists[i]), origin=draft.origin)
        return VerifyOutcome(accepted, argmax(dists[len(draft)]), origin=draft.origin)
    if mode != "stochastic":
        raise ValueError(f"unknown verify mode: {mode}")
    if rng is None:
        raise ValueError("stochastic verify needs an rng")
    for i, cand in enumerate(draft.candidates):
        p = dists[i]
        q_at_cand = draft.proposal_probs[i]
        ratio = 1.0 if q_at_cand <= 0 else min(1.0, p[cand] / q_at_cand)
        if rng.random() < ratio:
            accepted.append(cand)
            continue
        if draft.proposal_dists is not None:
            q_dist = draft.proposal_dists[i]
        else:
            q_dist = [0.0] * len(p)
            q_dist[cand] = 1.0
        res = _residual(p, q_dist)
        bonus = sample(res if res is not None else p, rng)
        return VerifyOutcome(accepted, bonus, origin=draft.origin)
    return VerifyOutcome(accepted, sample(dists[len(draft)], rng), origin=draft.origin)


def update(
    stream: List[TokenId], outcome: VerifyOutcome, state: ProposeState
) -> Tuple[List[TokenId], ProposeState]:
    """Append the iteration's tokens and advance or reset the cursor."""
    state = replace(state, first_iteration=False)
    stream = stream + outcome.emitted
    if outcome.origin is not None and outcome.accepted_len > 0:
        state.cursor = outcome.origin + outcome.accepted_len
    elif outcome.origin is not None:
        state.cursor = 0  # rejected outright: fall back to a global search
    return stream, state


@dataclass
class GenerationResult:
    tokens: List[TokenId]
    iterations: int
    accepted_per_iteration: List[int]

    @property
    def mean_accepted(self) -> float:
        if not self.accepted_per_iteration:
            return 0.0
        return sum(self.accepted_per_iteration) / len(self.accepted_per_iteration)


def greedy_generate(prompt: Sequence[TokenId], model: ScoreModel, n_new: int) -> List[TokenId]:
    """Plain greedy decoding baseline."""
    stream = list(prompt)
    out: List[TokenId] = []
    for _ in range(n_new):
        t = argmax(model.next_distribution(stream))
        out.append(t)
        stream.append(t)
    return out


def speculative_generate(
    prompt: Sequence[TokenId],
    model: ScoreModel,
    n_new: int,
    *,
    k: int = 8,
    ngram_n: int = 2,
    mode: str = "greedy",
    rng: Optional[CounterRng] = None,
    proposer: str = "lookup",
    draft_model: Optional[ScoreModel] = None,
    skip_initial: bool = True,
) -> GenerationResult:
    """Full propose/score/verify/update loop emitting exactly n_new tokens."""
    state = ProposeState(k=k, ngram_n=ngram_n, skip_initial=skip_initial)
    generated: List[TokenId] = []
    accepted_counts: List[int] = []
    iterations = 0
    while len(generated) < n_new:
        if proposer == "lookup":
            draft, state = propose_ngram(prompt, generated, state)
        elif proposer == "table_draft":
            if draft_model is None:
                raise ValueError("table_draft proposer needs a draft_model")
            draft = propose_table_draft(prompt, generated, k, draft_model, mode, rng)
            state = replace(state, first_iteration=False)
        else:
            raise ValueError(f"unknown proposer: {proposer}")
        budget = n_new - len(generated)
        if len(draft) > budget - 1:
            draft = Draft(
                candidates=draft.candidates[: budget - 1],
                proposal_probs=draft.proposal_probs[: budget - 1],
                proposal_dists=(
                    draft.proposal_dists[: budget - 1]
                    if draft.proposal_dists is not None
                    else None
                ),
                origin=draft.origin,
            )
        dists = score(list(prompt) + generated, draft.candidates, model)
        outcome = verify(draft, dists, mode, rng)
        stream, state = update(list(prompt) + generated, outcome, state)
        generated = stream[len(prompt) :]
        iterations += 1
        accepted_counts.append(outcome.accepted_len)
    return GenerationResult(
        tokens=generated[:n_new],
        iterations=iterations,
        accepted_per_iteration=accepted_counts,
    )
