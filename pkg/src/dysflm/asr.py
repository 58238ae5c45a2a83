"""Simulated probabilistic ASR channel.

Given a truth transcript the channel is a left-to-right edit process over
``2n + 1`` slots: an optional insertion gap before every token and after
the last one, and a keep/substitute/delete decision for every token. Each
slot emits at most one token, which keeps the output distribution exactly
enumerable for short inputs and lets :class:`ChannelModel` expose exact
string-level next-token probabilities to the generic decoders.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .decoding import Hypothesis, NBestList, beam_decode, greedy_decode, mbr_rank

TOL = 1e-9


class ChannelConfigError(ValueError):
    pass


class EnumerationRefused(ValueError):
    def __init__(self, message: str, size_estimate: int):
        super().__init__(message)
        self.size_estimate = size_estimate


@dataclass
class ChannelSpec:
    """Confusion rows are conditional on the token not being deleted.

    A token ``t`` is deleted with ``p_delete`` (or ``delete_overrides[t]``);
    a token equal to its predecessor is additionally collapsed with
    ``p_collapse``. Otherwise it is emitted as ``v`` with ``confusion[t][v]``
    (identity when ``t`` has no row). Each gap inserts one token drawn from
    ``insertion`` with probability ``p_insert``.
    """

    alphabet: tuple[str, ...]
    confusion: dict[str, dict[str, float]] = field(default_factory=dict)
    p_delete: float = 0.0
    delete_overrides: dict[str, float] = field(default_factory=dict)
    p_insert: float = 0.0
    insertion: dict[str, float] = field(default_factory=dict)
    p_collapse: float = 0.0
    kind: str = "word"
    seed: int = 0

    def __post_init__(self) -> None:
        self.alphabet = tuple(self.alphabet)
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("word", "phone"):
            raise ChannelConfigError(f"alphabet kind must be 'word' or 'phone', got {self.kind!r}")
        if len(set(self.alphabet)) != len(self.alphabet) or not self.alphabet:
            raise ChannelConfigError("alphabet must be non-empty and duplicate-free")
        known = set(self.alphabet)
        probs = [("p_delete", self.p_delete), ("p_insert", self.p_insert), ("p_collapse", self.p_collapse)]
        probs += [(f"delete_overrides[{k}]", v) for k, v in self.delete_overrides.items()]
        for name, p in probs:
            if not 0.0 <= p <= 1.0:
                raise ChannelConfigError(f"{name}={p} is not a probability")
        for tok, row in self.confusion.items():
            if any(v not in known for v in row):
                raise ChannelConfigError(f"confusion row {tok!r} emits tokens outside the alphabet")
            if any(p < 0 for p in row.values()) or abs(sum(row.values()) - 1.0) > TOL:
                raise ChannelConfigError(f"confusion row {tok!r} does not sum to 1")
        if self.p_insert > 0:
            if any(v not in known for v in self.insertion):
                raise ChannelConfigError("insertion distribution emits tokens outside the alphabet")
            if any(p < 0 for p in self.insertion.values()) or abs(sum(self.insertion.values()) - 1.0) > TOL:
                raise ChannelConfigError("insertion distribution does not sum to 1")

    # -- (de)serialisation -----------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["alphabet"] = list(self.alphabet)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChannelSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ChannelConfigError(f"unknown channel fields {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ChannelSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    # -- slot structure ---------------------------------------------------
    def token_slot(self, truth: Sequence[str], i: int) -> list[tuple[str | None, float]]:
        tok = truth[i]
        p_del = self.delete_overrides.get(tok, self.p_delete)
        if i and truth[i - 1] == tok:
            p_del = p_del + (1.0 - p_del) * self.p_collapse
        row = self.confusion.get(tok, {tok: 1.0})
        opts = [(None, p_del)] + [(v, (1.0 - p_del) * p) for v, p in sorted(row.items())]
        return [(v, p) for v, p in opts if p > 0]

    def gap_slot(self) -> list[tuple[str | None, float]]:
        opts = [(None, 1.0 - self.p_insert)] + [(v, self.p_insert * p) for v, p in sorted(self.insertion.items())]
        return [(v, p) for v, p in opts if p > 0]

    def slots(self, truth: Sequence[str]) -> list[list[tuple[str | None, float]]]:
        truth = list(truth)
        missing = sorted({t for t in truth if t not in self.alphabet and t not in self.confusion})
        if missing:
            raise ChannelConfigError(f"truth tokens {missing} are not in the channel alphabet")
        out = []
        with_gaps = self.p_insert > 0
        for i in range(len(truth)):
            if with_gaps:
                out.append(self.gap_slot())
            out.append(self.token_slot(truth, i))
        if with_gaps:
            out.append(self.gap_slot())
        return out


def noiseless_channel(alphabet: Sequence[str], kind: str = "word") -> ChannelSpec:
    return ChannelSpec(tuple(alphabet), kind=kind)


def sample_hypothesis(spec: ChannelSpec, truth: Sequence[str], rng: np.random.Generator) -> Hypothesis:
    """One pass of the edit process; ``log_prob`` is the path log-probability."""
    if not truth:
        raise ValueError("truth transcript must be non-empty")
    out: list[str] = []
    log_prob = 0.0
    for slot in spec.slots(truth):
        if len(slot) == 1:
            choice, p = slot[0]
        else:
            u = rng.random()
            acc = 0.0
            choice, p = slot[-1]
            for v, q in slot:
                acc += q
                if u < acc:
                    choice, p = v, q
                    break
        log_prob += math.log(p)
        if choice is not None:
            out.append(choice)
    return Hypothesis(tuple(out), log_prob, True)


def exact_distribution(spec: ChannelSpec, truth: Sequence[str], max_truth_len: int = 4,
                       max_alphabet: int = 5) -> list[tuple[tuple[str, ...], float]]:
    """Every reachable output string with its probability (paths merged).

    Sorted by descending probability, then token order.
    """
    slots = spec.slots(truth)
    estimate = math.prod(len(s) for s in slots)
    if len(truth) > max_truth_len or len(spec.alphabet) > max_alphabet:
        raise EnumerationRefused(
            f"refusing to enumerate: |truth|={len(truth)} (max {max_truth_len}), "
            f"|alphabet|={len(spec.alphabet)} (max {max_alphabet}); about {estimate} edit paths",
            estimate,
        )
    dist: dict[tuple[str, ...], float] = {(): 1.0}
    for slot in slots:
        nxt: dict[tuple[str, ...], float] = defaultdict(float)
        for s, p in dist.items():
            for v, q in slot:
                nxt[s if v is None else s + (v,)] += p * q
        dist = nxt
    # Paths through vanishingly rare edits can underflow to exactly zero.
    return sorted(((s, p) for s, p in dist.items() if p > 0), key=lambda kv: (-kv[1], kv[0]))


class ChannelModel:
    """Exact autoregressive view of the channel's output-string distribution.

    Token ids index ``spec.alphabet``; ``eos_id == len(alphabet)``. The
    prefix probability is obtained with a forward pass over the slot lattice.
    """

    def __init__(self, spec: ChannelSpec, truth: Sequence[str]):
        self.spec = spec
        self.truth = tuple(truth)
        self.tokens = list(spec.alphabet)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.eos_id = len(self.tokens)
        self.vocab_size = self.eos_id + 1
        slots = spec.slots(truth)
        self.none = np.array([dict(s).get(None, 0.0) for s in slots])
        self.emit = np.zeros((len(slots), len(self.tokens)))
        for k, slot in enumerate(slots):
            for v, p in slot:
                if v is not None:
                    self.emit[k, self.index[v]] += p
        start = np.empty(len(slots) + 1)
        start[0] = 1.0
        for k in range(len(slots)):
            start[k + 1] = start[k] * self.none[k]
        self._alpha: dict[tuple[int, ...], np.ndarray] = {(): start}

    @property
    def max_len(self) -> int:
        return len(self.none) + 1

    def _forward(self, prefix: tuple[int, ...]) -> np.ndarray:
        if prefix in self._alpha:
            return self._alpha[prefix]
        prev = self._forward(prefix[:-1])
        y = prefix[-1]
        a = np.zeros_like(prev)
        for k in range(len(self.none)):
            a[k + 1] = a[k] * self.none[k] + prev[k] * self.emit[k, y]
        self._alpha[prefix] = a
        return a

    def next_log_probs(self, context, prefix: Sequence[int]) -> np.ndarray:
        a = self._forward(tuple(int(i) for i in prefix))
        p = np.empty(self.vocab_size)
        p[: self.eos_id] = a[:-1] @ self.emit
        p[self.eos_id] = a[-1]
        total = p.sum()
        with np.errstate(divide="ignore"):
            return np.log(p / total) if total > 0 else np.full(self.vocab_size, -np.inf)

    def string_log_prob(self, tokens: Sequence[str]) -> float:
        a = self._forward(tuple(self.index[t] for t in tokens))
        return math.log(a[-1]) if a[-1] > 0 else -math.inf

    def to_strings(self, hyp: Hypothesis) -> Hypothesis:
        return Hypothesis(tuple(self.tokens[i] for i in hyp.tokens), hyp.log_prob, hyp.finished, hyp.score)


def one_best(spec: ChannelSpec, truth: Sequence[str]) -> Hypothesis:
    model = ChannelModel(spec, truth)
    return model.to_strings(greedy_decode(model, None, model.max_len))


def n_best(spec: ChannelSpec, truth: Sequence[str], width: int = 12, n: int = 10) -> NBestList:
    model = ChannelModel(spec, truth)
    nb = beam_decode(model, None, width=width, n=n, max_len=model.max_len)
    return NBestList([model.to_strings(h) for h in nb], width=width, n=n, padded=nb.padded)


def mbr_candidates(spec: ChannelSpec, truth: Sequence[str], S: int, rng: np.random.Generator,
                   utility="neg-wer") -> list[Hypothesis]:
    """Sampling-based MBR: ``S`` channel samples act as candidates and anchors."""
    samples = [sample_hypothesis(spec, truth, rng) for _ in range(S)]
    return mbr_rank(samples, samples, utility)
