"""Glue: build a detector for a manifest, encode splits, train, predict."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .data import ClipExample, EncodedClip, Manifest, encode_example
from .fusion import AcousticProjector, DysfluencyDetector, predict
from .labels import LabelSet
from .lm import CausalLM, LMConfig
from .lora import LoraConfig
from .metrics import F1Report, multilabel_prf
from .vocab import Vocabulary

ABLATIONS = ("fused", "acoustic-only", "lexical-only")


@dataclass
class ModelSpec:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 1024
    projector_hidden: int = 512
    projector_dropout: float = 0.10
    lora: LoraConfig = field(default_factory=LoraConfig)
    seed: int = 0


def build_detector(vocab: Vocabulary, feat_dim: int, schema: str, spec: ModelSpec | None = None,
                   dtype: torch.dtype = torch.float32) -> DysfluencyDetector:
    spec = spec or ModelSpec()
    cfg = LMConfig(
        vocab_size=len(vocab), d_model=spec.d_model, n_layers=spec.n_layers, n_heads=spec.n_heads,
        d_ff=spec.d_ff, max_seq_len=spec.max_seq_len, seed=spec.seed, trainable_ids=tuple(vocab.trainable_ids),
    )
    lm = CausalLM(cfg, dtype)
    lm.attach_lora(spec.lora, seed=spec.seed + 1)
    projector = AcousticProjector(feat_dim, spec.d_model, spec.projector_hidden, spec.projector_dropout,
                                  seed=spec.seed + 2, dtype=dtype)
    return DysfluencyDetector(lm, projector, vocab, schema)


def vocabulary_for(manifest: Manifest) -> Vocabulary:
    from .data import phone_alphabet, word_alphabet

    return Vocabulary.build(set(word_alphabet()) | set(phone_alphabet()) | manifest.lexicon())


def encode_split(examples: Sequence[ClipExample], detector: DysfluencyDetector, mode: str,
                 ablation: str = "fused") -> list[EncodedClip]:
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    return [
        encode_example(e, detector.vocab, mode, detector.schema, drop_hypotheses=ablation == "acoustic-only",
                       max_tokens=detector.lm.cfg.max_seq_len)
        for e in examples
    ]


def apply_ablation(detector: DysfluencyDetector, ablation: str) -> None:
    detector.projector.zero_output = ablation == "lexical-only"


def predict_split(detector: DysfluencyDetector, examples: Sequence[ClipExample], mode: str,
                  ablation: str = "fused") -> list[tuple[str, LabelSet, str]]:
    """``(clip_id, labels, raw_generated_string)`` for each clip."""
    apply_ablation(detector, ablation)
    out = []
    for e in examples:
        if ablation == "acoustic-only":
            e = ClipExample(e.id, e.features, e.transcript, {mode: []}, e.labels, e.split)
        labels, raw = predict(detector, e, mode)
        out.append((e.id, labels, raw))
    return out


def evaluate_predictions(preds: Sequence[tuple[str, LabelSet, str]], examples: Sequence[ClipExample],
                         schema: str) -> F1Report:
    gold = {e.id: e.labels for e in examples}
    return multilabel_prf([p[1] for p in preds], [gold[p[0]] for p in preds], schema)
