"""Optimisation loop: AdamW, linear warmup/decay, accumulation, early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .data import EncodedClip, make_batches, torch_substream
from .fusion import Batch, DysfluencyDetector, label_loss_terms

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    weight_decay: float = 1e-4
    eps: float = 1e-8
    beta1: float = 0.99
    beta2: float = 0.999
    effective_batch: int = 32
    micro_batch: int = 32
    warmup_frac: float = 0.05
    patience: int = 5
    max_epochs: int = 30
    max_len: int = 1024
    seed: int = 0
    decoder_mode: str = "1-best"

    def __post_init__(self) -> None:
        if self.micro_batch < 1 or self.effective_batch % self.micro_batch:
            raise ValueError("effective_batch must be a positive multiple of micro_batch")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie strictly between 0 and 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")

    @property
    def accumulation(self) -> int:
        return self.effective_batch // self.micro_batch


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_dev_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0


@dataclass
class TrainResult:
    best_epoch: int
    best_dev_loss: float
    best_params: dict[str, torch.Tensor]
    log: list[dict] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)
    stopped_early: bool = False


def warmup_steps(cfg: TrainConfig, total_steps: int) -> int:
    return max(1, math.ceil(cfg.warmup_frac * total_steps))


def lr_at_step(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear ramp 0 -> lr0 over the warmup, then linear decay to 0 at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(cfg, total_steps)
    if step < w:
        return cfg.lr0 * step / w
    return cfg.lr0 * (total_steps - step) / max(1, total_steps - w)


def trainable_parameters(detector: DysfluencyDetector) -> dict[str, torch.nn.Parameter]:
    return {name: p for name, p in detector.named_parameters() if p.requires_grad}


def _set_rngs(detector: DysfluencyDetector, rng: torch.Generator | None) -> None:
    detector.lm.set_dropout_rng(rng)
    detector.projector.rng = rng


def batch_loss_terms(detector: DysfluencyDetector, batch: Batch) -> tuple[torch.Tensor, int]:
    """Project the pooled features into the prefix slot, then score labels."""
    if batch.pooled is not None:
        prefix = detector.projector(batch.pooled)[:, None, :]
        batch = Batch(batch.ids, batch.targets_mask, prefix, batch.lengths)
    return label_loss_terms(detector.lm, batch)


@torch.no_grad()
def evaluate_loss(detector: DysfluencyDetector, items: Sequence[EncodedClip], micro_batch: int = 64,
                  max_len: int = 1024) -> float:
    """Eval-mode mean label loss over ``items`` (fixed order)."""
    was = detector.training
    detector.eval()
    try:
        vocab = detector.vocab
        total, count = 0.0, 0
        for batch in make_batches(items, micro_batch, vocab.pad_id, vocab.lab_id, max_len, shuffle=False):
            s, n = batch_loss_terms(detector, batch)
            total += float(s)
            count += n
        return total / count
    finally:
        detector.train(was)


DevLossFn = Callable[[DysfluencyDetector, int], float]


def train(
    detector: DysfluencyDetector,
    train_items: Sequence[EncodedClip],
    dev_items: Sequence[EncodedClip],
    cfg: TrainConfig,
    dev_loss_fn: DevLossFn | None = None,
    log_path: str | Path | None = None,
    on_improvement: Callable[[int, DysfluencyDetector], None] | None = None,
) -> TrainResult:
    """Train the adapters, projector and task-token rows; restore the best epoch.

    ``dev_loss_fn(detector, epoch)`` replaces the dev-set evaluation when
    given. ``on_improvement(epoch, detector)`` runs after every new best
    epoch, e.g. to write a checkpoint.
    """
    if not train_items or not dev_items:
        raise ValueError("training needs non-empty train and dev splits")
    vocab = detector.vocab
    params = trainable_parameters(detector)
    opt = torch.optim.AdamW(
        list(params.values()), lr=0.0, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
        weight_decay=cfg.weight_decay, foreach=False,
    )
    steps_per_epoch = math.ceil(len(train_items) / cfg.effective_batch)
    total_steps = cfg.max_epochs * steps_per_epoch
    state = TrainState()
    result_log: list[dict] = []
    best = {k: p.detach().clone() for k, p in params.items()}
    dropout_rng = torch_substream(cfg.seed, "dropout")
    if log_path is not None:
        Path(log_path).write_text("", encoding="utf-8")
    stopped_early = False

    for epoch in range(1, cfg.max_epochs + 1):
        state.epoch = epoch
        detector.train()
        _set_rngs(detector, dropout_rng)
        batches = make_batches(train_items, cfg.micro_batch, vocab.pad_id, vocab.lab_id, cfg.max_len,
                               seed=cfg.seed, epoch=epoch)
        ep_loss, ep_count = 0.0, 0
        for start in range(0, len(batches), cfg.accumulation):
            group = batches[start:start + cfg.accumulation]
            n_targets = int(sum(int(b.targets_mask.sum()) for b in group))
            opt.zero_grad(set_to_none=True)
            for b in group:
                s, n = batch_loss_terms(detector, b)
                if not torch.isfinite(s):
                    raise NumericError(f"non-finite training loss at epoch {epoch}, step {state.step}")
                (s / n_targets).backward()
                ep_loss += float(s.detach())
                ep_count += n
            lr = lr_at_step(cfg, state.step, total_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            try:
                opt.step()
            except RuntimeError as err:  # e.g. a step size that overflows fp32
                raise NumericError(f"optimizer step {state.step} failed: {err}") from err
            if not all(bool(torch.isfinite(p).all()) for p in params.values()):
                raise NumericError(f"non-finite parameters after step {state.step}")
            state.step += 1
        _set_rngs(detector, None)
        detector.eval()

        dev_loss = dev_loss_fn(detector, epoch) if dev_loss_fn else evaluate_loss(detector, dev_items, max_len=cfg.max_len)
        if not math.isfinite(dev_loss):
            raise NumericError(f"non-finite dev loss at epoch {epoch}")
        if dev_loss < state.best_dev_loss:
            state.best_dev_loss = dev_loss
            state.best_epoch = epoch
            state.epochs_since_improvement = 0
            best = {k: p.detach().clone() for k, p in params.items()}
            if on_improvement is not None:
                on_improvement(epoch, detector)
        else:
            state.epochs_since_improvement += 1
        record = {
            "epoch": epoch,
            "train_loss": ep_loss / max(1, ep_count),
            "dev_loss": float(dev_loss),
            "lr": lr_at_step(cfg, state.step, total_steps),
            "patience_counter": state.epochs_since_improvement,
            "best_epoch": state.best_epoch,
        }
        result_log.append(record)
        log.info("epoch %d train %.4f dev %.4f", epoch, record["train_loss"], dev_loss)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        if state.epochs_since_improvement >= cfg.patience:
            stopped_early = True
            break

    with torch.no_grad():
        for k, p in params.items():
            p.copy_(best[k])
    return TrainResult(state.best_epoch, state.best_dev_loss, best, result_log, state, stopped_early)


def config_dict(cfg) -> dict:
    return asdict(cfg)
