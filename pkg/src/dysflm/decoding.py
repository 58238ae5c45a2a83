"""Greedy, beam, ancestral-sampling and Monte-Carlo MBR decoding.

Decoders talk to any object exposing ``eos_id`` and
``next_log_probs(context, prefix) -> ndarray`` (log-probabilities over the
model's vocabulary, EOS included). Both the toy LM (via
:class:`dysflm.lm.LMScorer`) and the simulated ASR channel
(:class:`dysflm.asr.ChannelModel`) implement it.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Protocol, Sequence

import numpy as np

from .metrics import edit_distance_matrix, neg_wer
from .vocab import SEP


class NextTokenModel(Protocol):
    eos_id: int

    def next_log_probs(self, context, prefix: Sequence[int]) -> np.ndarray: ...


@dataclass(frozen=True)
class Hypothesis:
    """A decoded token sequence (EOS stripped).

    ``score`` overrides ``log_prob`` for ranking when set, e.g. with the
    expected utility of an MBR-ranked candidate.
    """

    tokens: tuple
    log_prob: float = 0.0
    finished: bool = True
    score: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def rank_score(self) -> float:
        return self.log_prob if self.score is None else self.score

    @property
    def text(self) -> str:
        return " ".join(str(t) for t in self.tokens)


def _order(h: Hypothesis):
    return (-h.rank_score, h.tokens)


@dataclass
class NBestList:
    hypotheses: list[Hypothesis]
    width: int = 12
    n: int = 10
    padded: bool = False

    def __post_init__(self) -> None:
        self.hypotheses = sorted(self.hypotheses, key=_order)

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)

    def __getitem__(self, i):
        return self.hypotheses[i]


@dataclass
class MbrConfig:
    S: int = 10
    utility: str = "neg-wer"
    candidate_source: str = "samples"

    def __post_init__(self) -> None:
        if self.S < 1:
            raise ValueError("MBR needs at least one sample (S >= 1)")
        if self.utility not in UTILITIES:
            raise ValueError(f"unknown utility {self.utility!r}")
        if self.candidate_source not in ("samples", "provided"):
            raise ValueError(f"unknown candidate source {self.candidate_source!r}")


UTILITIES: dict[str, Callable] = {"neg-wer": neg_wer}


def greedy_decode(model: NextTokenModel, context, max_len: int) -> Hypothesis:
    """Argmax at each step (ties go to the lowest id) until EOS or ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    prefix: list[int] = []
    log_prob = 0.0
    for _ in range(max_len):
        logp = model.next_log_probs(context, prefix)
        tok = int(np.argmax(logp))
        log_prob += float(logp[tok])
        if tok == model.eos_id:
            return Hypothesis(tuple(prefix), log_prob, True)
        prefix.append(tok)
    return Hypothesis(tuple(prefix), log_prob, False)


def beam_decode(model: NextTokenModel, context, width: int = 12, n: int = 10, max_len: int = 64) -> NBestList:
    """Length-synchronous beam search over raw sequence log-probabilities.

    Finished hypotheses leave the beam; if fewer than ``n`` finish, the list
    is topped up with the best unfinished ones and ``padded`` is set.
    """
    if not 1 <= n <= width:
        raise ValueError(f"need 1 <= n <= width, got n={n}, width={width}")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    alive: list[tuple[tuple[int, ...], float, float]] = [((), 0.0, 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        expansions = []
        for toks, score, _ in alive:
            logp = model.next_log_probs(context, list(toks))
            for v in np.flatnonzero(np.isfinite(logp)):
                lp = float(logp[v])
                expansions.append((score + lp, lp, toks + (int(v),)))
        # Ties on the running score fall back to the step log-prob, then ids,
        # which keeps width=1 identical to greedy decoding.
        expansions.sort(key=lambda e: (-e[0], -e[1], e[2]))
        alive = []
        for score, lp, toks in expansions[:width]:
            if toks[-1] == model.eos_id:
                finished.append(Hypothesis(toks[:-1], score, True))
            else:
                alive.append((toks, score, lp))
        if not alive:
            break
    best = sorted(finished, key=_order)[:n]
    padded = False
    if len(best) < n:
        rest = sorted((Hypothesis(t, s, False) for t, s, _ in alive), key=_order)
        best += rest[: n - len(best)]
        padded = True
    return NBestList(best, width=width, n=n, padded=padded)


def _sample_index(p: np.ndarray, u: float) -> int:
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), len(p) - 1))


def ancestral_sample(model: NextTokenModel, context, S: int, max_len: int, rng: np.random.Generator) -> list[Hypothesis]:
    """``S`` independent untempered samples, each run to EOS or ``max_len``."""
    if S < 1:
        raise ValueError("S must be >= 1")
    out = []
    for _ in range(S):
        prefix: list[int] = []
        log_prob = 0.0
        done = False
        for _ in range(max_len):
            logp = model.next_log_probs(context, prefix)
            tok = _sample_index(np.exp(logp), rng.random())
            log_prob += float(logp[tok])
            if tok == model.eos_id:
                done = True
                break
            prefix.append(tok)
        out.append(Hypothesis(tuple(prefix), log_prob, done))
    return out


def _resolve_utility(utility) -> Callable:
    if callable(utility):
        return utility
    try:
        return UTILITIES[utility]
    except KeyError:
        raise ValueError(f"unknown utility {utility!r}") from None


def _neg_wer_matrix(cands: Sequence[tuple], refs: Sequence[tuple]) -> np.ndarray:
    dist = edit_distance_matrix(cands, refs).astype(np.float64)
    ref_len = np.array([len(r) for r in refs], dtype=np.float64)
    cand_len = np.array([len(c) for c in cands], dtype=np.float64)
    # Same convention as neg_wer: an empty reference costs one per candidate token.
    return np.where(ref_len > 0, -dist / np.maximum(ref_len, 1.0), -cand_len[:, None])


def mbr_rank(
    candidates: Sequence[Hypothesis],
    anchors: Sequence[Hypothesis],
    utility="neg-wer",
    weights: Sequence[float] | None = None,
) -> list[Hypothesis]:
    """Unique candidates sorted by expected utility against the anchors.

    Anchors are pseudo-references (Monte-Carlo samples, or an exact support
    with ``weights``). The returned hypotheses carry the expected utility in
    ``score``; ties fall back to log-probability, then token order.
    """
    if not candidates or not anchors:
        raise ValueError("MBR needs non-empty candidate and anchor lists")
    fn = _resolve_utility(utility)
    if weights is None:
        weights = [1.0] * len(anchors)
    if len(weights) != len(anchors):
        raise ValueError("one weight per anchor required")
    mass: Counter = Counter()
    for a, w in zip(anchors, weights):
        mass[a.tokens] += w
    refs = sorted(mass.items())
    total = math.fsum(w for _, w in refs)

    unique: dict[tuple, Hypothesis] = {}
    for c in candidates:
        if c.tokens not in unique or c.log_prob > unique[c.tokens].log_prob:
            unique[c.tokens] = c
    w = np.array([w for _, w in refs], dtype=np.float64)
    ref_tokens = [r for r, _ in refs]
    cands = list(unique.values())
    ranked = []
    for start in range(0, len(cands), 256):  # bounded memory for large sample sets
        block = cands[start:start + 256]
        if fn is neg_wer:
            util = _neg_wer_matrix([c.tokens for c in block], ref_tokens)
        else:
            util = np.array([[fn(c.tokens, r) for r in ref_tokens] for c in block], dtype=np.float64)
        for c, row in zip(block, util):
            # fsum is exact, so candidates with equal utility multisets tie exactly.
            eu = math.fsum(row * w) / total
            ranked.append(Hypothesis(c.tokens, c.log_prob, c.finished, eu))
    ranked.sort(key=lambda h: (-h.score, -h.log_prob, h.tokens))
    return ranked


def mbr_select(candidates: Sequence[Hypothesis], anchors: Sequence[Hypothesis], utility="neg-wer",
               weights: Sequence[float] | None = None) -> Hypothesis:
    """The candidate maximising mean utility against the anchors."""
    return mbr_rank(candidates, anchors, utility, weights)[0]


def flatten_candidates(hyps: NBestList | Iterable[Hypothesis], separator: Hashable = SEP) -> list:
    """Concatenate candidates best-first, delimited by ``separator``."""
    items = sorted(hyps, key=_order)
    if not items:
        raise ValueError("cannot flatten an empty candidate list")
    out: list = []
    for i, h in enumerate(items):
        if i:
            out.append(separator)
        out.extend(h.tokens)
    return out
