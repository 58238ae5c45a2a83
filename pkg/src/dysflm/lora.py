"""Low-rank adapters over frozen linear maps."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.10
    targets: tuple[str, ...] = ("q", "v")


def dropout(x: torch.Tensor, p: float, rng: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        return torch.zeros_like(x)
    keep = torch.rand(x.shape, generator=rng, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


class LoraAdapter(nn.Module):
    """Trainable pair ``A (r x n)``, ``B (m x r)``; the update is ``alpha/r * B @ A``."""

    def __init__(self, A: torch.Tensor, B: torch.Tensor, alpha: float, dropout_p: float = 0.0, target: str = ""):
        super().__init__()
        r, n = A.shape
        m, r2 = B.shape
        if r != r2:
            raise ValueError(f"rank mismatch: A has {r} rows, B has {r2} columns")
        self.A = nn.Parameter(A)
        self.B = nn.Parameter(B)
        self.alpha = float(alpha)
        self.dropout_p = float(dropout_p)
        self.target = target

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    def delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)


def init_adapter(
    m: int,
    n: int,
    r: int,
    alpha: float,
    seed: int | torch.Generator = 0,
    dropout_p: float = 0.10,
    target: str = "",
    dtype: torch.dtype = torch.float32,
) -> LoraAdapter:
    """Gaussian ``A`` (std 0.02) and zero ``B``, so the update starts at zero."""
    if not 1 <= r <= min(m, n):
        raise ValueError(f"LoRA rank must satisfy 1 <= r <= min(m, n) = {min(m, n)}, got {r}")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    A = torch.randn(r, n, generator=gen, dtype=dtype) * 0.02
    B = torch.zeros(m, r, dtype=dtype)
    return LoraAdapter(A, B, alpha, dropout_p, target)


def _check_shapes(W: torch.Tensor, adapter: LoraAdapter) -> None:
    if tuple(W.shape) != adapter.shape:
        raise ValueError(f"adapter shape {adapter.shape} does not match weight shape {tuple(W.shape)}")


def adapted_forward(
    W: torch.Tensor,
    adapter: LoraAdapter | None,
    x: torch.Tensor,
    training: bool = False,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """``W x + alpha/r * B A drop(x)`` over the last axis of ``x``.

    Dropout only touches the adapter branch and only in training mode.
    """
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} does not match weight with {W.shape[1]} columns")
    out = x @ W.T
    if adapter is None:
        return out
    _check_shapes(W, adapter)
    h = dropout(x, adapter.dropout_p, rng) if training else x
    return out + adapter.scale * ((h @ adapter.A.T) @ adapter.B.T)


@torch.no_grad()
def merge(W: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    """Fold the adapter into a new weight; ``W`` itself is left untouched."""
    _check_shapes(W, adapter)
    return W + adapter.delta().to(W.dtype)


class LoraLinear(nn.Module):
    """Frozen bias-free linear map with an optional adapter."""

    def __init__(self, weight: torch.Tensor):
        super().__init__()
        self.register_buffer("weight", weight)
        self.adapter: LoraAdapter | None = None
        self.rng: torch.Generator | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return adapted_forward(self.weight, self.adapter, x, self.training, self.rng)
