"""Acoustic-prefix fusion: projector, prompt assembly, masked loss, generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .labels import LabelSet, parse_labels, serialize_labels
from .lm import CausalLM, LMScorer, ModelInput
from .lora import dropout
from .vocab import Vocabulary, label_text_to_tokens, tokens_to_label_text

MAX_LABEL_STEPS = 20


class DataError(ValueError):
    """Malformed clip data (non-finite features, missing hypotheses, ...)."""


class AssemblyError(ValueError):
    pass


@dataclass
class AcousticFeatures:
    """``L x a`` frame matrix with its simulated encoder provenance."""

    values: np.ndarray
    layer: int = 24
    finetuned: bool = True

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise DataError(f"acoustic features must be a non-empty L x a matrix, got shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


class AcousticProjector(nn.Module):
    """Mean-pool over frames, then linear -> ReLU -> dropout -> linear."""

    def __init__(self, a: int, d_model: int, hidden: int = 512, dropout_p: float = 0.10, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.w1 = nn.Parameter(torch.randn(hidden, a, generator=gen, dtype=dtype) / a ** 0.5)
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=dtype))
        self.w2 = nn.Parameter(torch.randn(d_model, hidden, generator=gen, dtype=dtype) * 0.02)
        self.b2 = nn.Parameter(torch.zeros(d_model, dtype=dtype))
        self.dropout_p = dropout_p
        self.rng: torch.Generator | None = None
        self.zero_output = False

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        h = F.relu(F.linear(pooled.to(self.w1.dtype), self.w1, self.b1))
        if self.training:
            h = dropout(h, self.dropout_p, self.rng)
        out = F.linear(h, self.w2, self.b2)
        if self.zero_output:
            out = torch.zeros_like(out)
        return out


def pool_features(feats: AcousticFeatures | np.ndarray) -> np.ndarray:
    values = feats.values if isinstance(feats, AcousticFeatures) else np.asarray(feats, dtype=np.float32)
    if not np.all(np.isfinite(values)):
        raise DataError("acoustic features contain non-finite values")
    return values.astype(np.float64).mean(axis=0)


def project_acoustic(projector: AcousticProjector, feats: AcousticFeatures | np.ndarray, training: bool = False,
                     rng: torch.Generator | None = None) -> torch.Tensor:
    pooled = torch.as_tensor(pool_features(feats))
    was_training, old_rng = projector.training, projector.rng
    projector.train(training)
    projector.rng = rng
    try:
        return projector(pooled)
    finally:
        projector.train(was_training)
        projector.rng = old_rng


def assemble_input(prefix: torch.Tensor | None, hyp: Sequence[int], labels: Sequence[int] | None,
                   vocab: Vocabulary, max_tokens: int = 1024) -> ModelInput:
    """``[prefix] [BOS] hyp [LAB] labels [EOS]``, truncating the hypothesis tail."""
    hyp = list(hyp)
    tail = [] if labels is None else list(labels) + [vocab.eos_id]
    budget = max_tokens - 2 - len(tail)
    if budget < 0:
        raise AssemblyError(f"label tokens alone ({len(tail)} incl. EOS) exceed the {max_tokens}-token budget")
    hyp = hyp[:budget]
    ids = [vocab.bos_id] + hyp + [vocab.lab_id] + tail
    mask = [False] * (len(ids) - len(tail)) + [True] * len(tail)
    if prefix is not None:
        prefix = prefix.reshape(1, -1)
    return ModelInput(ids=ids, prefix=prefix, loss_mask=mask)


@dataclass
class Batch:
    ids: torch.Tensor  # (B, T) right-padded
    targets_mask: torch.Tensor  # (B, T) bool
    prefix: torch.Tensor | None  # (B, P, d)
    lengths: list[int] = field(default_factory=list)
    pooled: torch.Tensor | None = None  # (B, a) mean-pooled features, projected at step time
    ids_list: list[str] = field(default_factory=list)
    targets: torch.Tensor | None = None  # (B, T) next-token targets; defaults to ``ids``


def collate(inputs: Sequence[ModelInput], pad_id: int, pad_to: int | None = None) -> Batch:
    """Right-pad token ids; padding is never a target."""
    T = max(len(x.ids) for x in inputs)
    if pad_to is not None:
        T = max(T, pad_to)
    ids = torch.full((len(inputs), T), pad_id, dtype=torch.long)
    mask = torch.zeros((len(inputs), T), dtype=torch.bool)
    for i, x in enumerate(inputs):
        ids[i, : len(x.ids)] = torch.tensor(x.ids)
        mask[i, : len(x.ids)] = torch.tensor(x.loss_mask)
    prefix = None
    if inputs[0].prefix is not None:
        prefix = torch.stack([x.prefix for x in inputs])
    return Batch(ids, mask, prefix, [len(x.ids) for x in inputs])


def label_loss_terms(model: CausalLM, batch: Batch) -> tuple[torch.Tensor, int]:
    """Summed cross-entropy over target tokens and the number of targets."""
    if not bool(batch.targets_mask.any()):
        raise ValueError("label_loss needs at least one target token")
    if any(not bool(batch.targets_mask[i].any()) for i in range(batch.ids.shape[0])):
        raise ValueError("every sequence in the batch needs at least one target token")
    # Trailing all-padding columns are dropped so extra padding is a no-op.
    T = max(batch.lengths) if batch.lengths else int(batch.ids.shape[1])
    ids, mask = batch.ids[:, :T], batch.targets_mask[:, :T]
    targets = ids if batch.targets is None else batch.targets[:, :T]
    P = 0 if batch.prefix is None else batch.prefix.shape[1]
    logits = model(ids, batch.prefix)
    rows, cols = mask.nonzero(as_tuple=True)
    picked = logits[rows, cols + P - 1]
    ce = F.cross_entropy(picked, targets[rows, cols], reduction="sum")
    return ce, int(rows.numel())


def label_loss(model: CausalLM, batch: Batch | Sequence[ModelInput], pad_id: int = 0) -> torch.Tensor:
    """Mean next-token cross-entropy over the label/EOS positions."""
    if not isinstance(batch, Batch):
        batch = collate(batch, pad_id)
    total, n = label_loss_terms(model, batch)
    return total / n


class DysfluencyDetector(nn.Module):
    """Backbone + projector + vocabulary: everything needed to label a clip."""

    def __init__(self, lm: CausalLM, projector: AcousticProjector, vocab: Vocabulary, schema: str = "ksof"):
        super().__init__()
        self.lm = lm
        self.projector = projector
        self.vocab = vocab
        self.schema = schema

    def prefix_for(self, feats, training: bool = False, rng: torch.Generator | None = None) -> torch.Tensor:
        return project_acoustic(self.projector, feats, training, rng)

    def make_input(self, feats, hyp_tokens: Sequence[str], labels: LabelSet | None, training: bool = False,
                   rng: torch.Generator | None = None) -> ModelInput:
        prefix = self.prefix_for(feats, training, rng)
        label_ids = None
        if labels is not None:
            label_ids = self.vocab.encode(label_text_to_tokens(serialize_labels(labels, self.schema)))
        return assemble_input(prefix, self.vocab.encode(hyp_tokens), label_ids, self.vocab, self.lm.cfg.max_seq_len)


def generate_label_string(model: CausalLM, prefix: torch.Tensor | None, hyp: Sequence[int], vocab: Vocabulary,
                          max_steps: int = MAX_LABEL_STEPS) -> str:
    """Greedy decoding from the ``[LAB]`` marker, at most ``max_steps`` tokens."""
    from .decoding import greedy_decode

    context = assemble_input(prefix, hyp, None, vocab, model.cfg.max_seq_len - max_steps)
    was_training = model.training
    model.eval()
    try:
        hyp_out = greedy_decode(LMScorer(model, vocab.eos_id), context, max_steps)
    finally:
        model.train(was_training)
    return tokens_to_label_text(vocab.decode(hyp_out.tokens))


def predict(detector: DysfluencyDetector, example, mode: str) -> tuple[LabelSet, str]:
    """Label one clip from its acoustic features and ``mode`` hypotheses.

    Returns the parsed label set and the raw generated string.
    """
    from .decoding import flatten_candidates

    candidates = example.hypotheses.get(mode)
    if candidates is None:
        raise DataError(f"clip {example.id!r} has no hypotheses for mode {mode!r}")
    with torch.no_grad():
        prefix = detector.prefix_for(example.features)
        hyp = detector.vocab.encode(flatten_candidates(candidates)) if candidates else []
        raw = generate_label_string(detector.lm, prefix, hyp, detector.vocab)
    return parse_labels(raw, detector.schema), raw
