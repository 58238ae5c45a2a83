"""Edit distance, word error rate and multi-label precision/recall/F1."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .labels import Dysfluency, LabelSet, schema_classes, table_order


def _tokens(seq) -> list:
    if isinstance(seq, str):
        return seq.split()
    return list(seq)


def edit_distance(a: Sequence[Hashable] | str, b: Sequence[Hashable] | str) -> int:
    """Levenshtein distance over tokens (strings are split on whitespace)."""
    a, b = _tokens(a), _tokens(b)
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_distance_matrix(rows: Sequence[Sequence[Hashable]], cols: Sequence[Sequence[Hashable]],
                         max_cells: int = 4_000_000) -> np.ndarray:
    """All pairwise edit distances, ``out[i, j] = edit_distance(rows[i], cols[j])``.

    The DP runs over token positions and is vectorised over pairs, which
    pays off when there are many short sequences (MBR over samples).
    """
    rows, cols = [_tokens(r) for r in rows], [_tokens(c) for c in cols]
    ids: dict = {}
    def encode(seqs):
        L = max((len(s) for s in seqs), default=0)
        arr = np.full((len(seqs), L), -1, dtype=np.int64)
        for k, s in enumerate(seqs):
            arr[k, : len(s)] = [ids.setdefault(t, len(ids)) for t in s]
        return arr, np.array([len(s) for s in seqs], dtype=np.int64)

    A, la = encode(rows)
    B, lb = encode(cols)
    out = np.empty((len(rows), len(cols)), dtype=np.int64)
    if not len(rows) or not len(cols):
        return out
    chunk = max(1, max_cells // (len(cols) * (B.shape[1] + 1)))
    for start in range(0, len(rows), chunk):
        a, n_a = A[start:start + chunk], la[start:start + chunk]
        res = out[start:start + chunk]
        prev = np.broadcast_to(np.arange(B.shape[1] + 1)[:, None, None], (B.shape[1] + 1, len(a), len(cols))).copy()
        res[:] = prev[lb, :, np.arange(len(cols))].T
        for i in range(1, A.shape[1] + 1):
            cur = np.empty_like(prev)
            cur[0] = i
            for j in range(1, B.shape[1] + 1):
                sub = prev[j - 1] + (a[:, i - 1, None] != B[None, :, j - 1])
                cur[j] = np.minimum(np.minimum(prev[j] + 1, cur[j - 1] + 1), sub)
            done = n_a == i
            if done.any():
                res[done] = cur[lb, :, np.arange(len(cols))].T[done]
            prev = cur
    return out


def word_error_rate(hyp, ref) -> float:
    """Edit distance normalised by reference length; unclipped above 1."""
    ref_tokens = _tokens(ref)
    if not ref_tokens:
        raise ValueError("word error rate needs a non-empty reference")
    return edit_distance(hyp, ref_tokens) / len(ref_tokens)


def neg_wer(candidate, reference) -> float:
    """MBR utility: negated WER of ``candidate`` against a pseudo-reference.

    An empty pseudo-reference scores ``-len(candidate)`` (every token is an
    insertion) so that empty samples remain usable anchors.
    """
    ref_tokens = _tokens(reference)
    if not ref_tokens:
        return -float(len(_tokens(candidate)))
    return -word_error_rate(candidate, ref_tokens)


@dataclass
class PRF:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "PRF") -> "PRF":
        return PRF(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class F1Report:
    schema: str
    per_class: dict[Dysfluency, PRF] = field(default_factory=dict)

    @property
    def macro_f1(self) -> float:
        classes = schema_classes(self.schema)
        return sum(self.per_class[c].f1 for c in classes) / len(classes)

    def f1(self, cls: Dysfluency | str) -> float:
        return self.per_class[Dysfluency(cls)].f1

    def merge(self, other: "F1Report") -> "F1Report":
        if other.schema != self.schema:
            raise ValueError("cannot merge reports from different schemas")
        return F1Report(self.schema, {c: self.per_class[c] + other.per_class[c] for c in self.per_class})

    def to_table(self, title: str = "") -> str:
        cols = table_order(self.schema)
        width = 6
        head = f"{'':<10}" + "".join(f"{c.value:>{width}}" for c in cols) + f"{'Macro':>{width + 1}}"
        lines = [title] if title else []
        lines.append(head)
        for name in ("P", "R", "F1"):
            vals = []
            for c in cols:
                prf = self.per_class[c]
                v = {"P": prf.precision, "R": prf.recall, "F1": prf.f1}[name]
                vals.append(f"{v:>{width}.2f}")
            macro = f"{self.macro_f1:>{width + 1}.2f}" if name == "F1" else " " * (width + 1)
            lines.append(f"{name:<10}" + "".join(vals) + macro)
        return "\n".join(lines) + "\n"

    def to_key_values(self) -> str:
        lines = [f"schema={self.schema}"]
        for c in table_order(self.schema):
            prf = self.per_class[c]
            lines.append(
                f"{c.value}.tp={prf.tp} {c.value}.fp={prf.fp} {c.value}.fn={prf.fn} "
                f"{c.value}.precision={prf.precision:.6f} {c.value}.recall={prf.recall:.6f} "
                f"{c.value}.f1={prf.f1:.6f}"
            )
        lines.append(f"macro_f1={self.macro_f1:.6f}")
        return "\n".join(lines) + "\n"


def multilabel_prf(predictions: Sequence[LabelSet], golds: Sequence[LabelSet], schema: str = "ksof") -> F1Report:
    """Clip-wise per-class counts accumulated into a report."""
    if len(predictions) != len(golds):
        raise ValueError(f"got {len(predictions)} predictions for {len(golds)} gold label sets")
    classes = schema_classes(schema)
    report = F1Report(schema, {c: PRF() for c in classes})
    for pred, gold in zip(predictions, golds):
        pred.validate(schema)
        gold.validate(schema)
        for c in classes:
            p, g = c in pred, c in gold
            prf = report.per_class[c]
            if p and g:
                prf.tp += 1
            elif p:
                prf.fp += 1
            elif g:
                prf.fn += 1
    return report
