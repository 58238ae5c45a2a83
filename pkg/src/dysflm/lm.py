"""A small pre-norm causal transformer with continuous prefix inputs.

Every base weight lives in a buffer and never receives gradients. The only
parameters are the LoRA adapters and the rows of the input/output
embedding tables that belong to the task-specific tokens (label alphabet,
``[LAB]`` and ``[EOS]``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .lora import LoraConfig, LoraLinear, init_adapter


class SequenceLengthError(ValueError):
    pass


@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 1024
    n_prefix: int = 1
    seed: int = 0
    trainable_ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.trainable_ids = tuple(int(i) for i in self.trainable_ids)
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if any(not 0 <= i < self.vocab_size for i in self.trainable_ids):
            raise ValueError("trainable token id outside the vocabulary")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_ids"] = list(self.trainable_ids)
        return d


@dataclass
class ModelInput:
    """One sequence: ``prefix`` vectors (P x d) followed by token ids.

    ``loss_mask[t]`` marks token ``t`` as a prediction target; its logits come
    from the preceding position.
    """

    ids: list[int]
    prefix: torch.Tensor | None = None
    loss_mask: list[bool] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.loss_mask:
            self.loss_mask = [False] * len(self.ids)
        if len(self.loss_mask) != len(self.ids):
            raise ValueError("loss_mask must have one flag per token")

    @property
    def n_prefix(self) -> int:
        return 0 if self.prefix is None else int(self.prefix.shape[0])

    def __len__(self) -> int:
        return self.n_prefix + len(self.ids)


def _layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps=1e-5)


class Block(nn.Module):
    def __init__(self, cfg: LMConfig, gen: torch.Generator, dtype: torch.dtype):
        super().__init__()
        d, f = cfg.d_model, cfg.d_ff
        randn = lambda *shape: torch.randn(*shape, generator=gen, dtype=dtype) * 0.02  # noqa: E731
        self.n_heads = cfg.n_heads
        self.register_buffer("ln1_g", torch.ones(d, dtype=dtype))
        self.register_buffer("ln1_b", torch.zeros(d, dtype=dtype))
        self.q = LoraLinear(randn(d, d))
        self.k = LoraLinear(randn(d, d))
        self.v = LoraLinear(randn(d, d))
        self.o = LoraLinear(randn(d, d))
        self.register_buffer("ln2_g", torch.ones(d, dtype=dtype))
        self.register_buffer("ln2_b", torch.zeros(d, dtype=dtype))
        self.register_buffer("w1", randn(f, d))
        self.register_buffer("b1", torch.zeros(f, dtype=dtype))
        self.register_buffer("w2", randn(d, f))
        self.register_buffer("b2", torch.zeros(d, dtype=dtype))

    def forward(self, x: torch.Tensor, causal: torch.Tensor) -> torch.Tensor:
        B, T, d = x.shape
        h = _layer_norm(x, self.ln1_g, self.ln1_b)
        hd = d // self.n_heads
        q = self.q(h).view(B, T, self.n_heads, hd).transpose(1, 2)
        k = self.k(h).view(B, T, self.n_heads, hd).transpose(1, 2)
        v = self.v(h).view(B, T, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        att = att.masked_fill(causal[:T, :T], float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + self.o(y)
        h = _layer_norm(x, self.ln2_g, self.ln2_b)
        return x + F.linear(F.relu(F.linear(h, self.w1, self.b1)), self.w2, self.b2)


class CausalLM(nn.Module):
    def __init__(self, cfg: LMConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        d = cfg.d_model
        n_pos = cfg.max_seq_len + cfg.n_prefix
        self.register_buffer("tok_emb", torch.randn(cfg.vocab_size, d, generator=gen, dtype=dtype) * 0.02)
        self.register_buffer("pos_emb", torch.randn(n_pos, d, generator=gen, dtype=dtype) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg, gen, dtype) for _ in range(cfg.n_layers))
        self.register_buffer("lnf_g", torch.ones(d, dtype=dtype))
        self.register_buffer("lnf_b", torch.zeros(d, dtype=dtype))
        self.register_buffer("out_w", torch.randn(cfg.vocab_size, d, generator=gen, dtype=dtype) * 0.02)
        self.register_buffer("causal", torch.ones(n_pos, n_pos, dtype=torch.bool).triu(1), persistent=False)
        idx = torch.tensor(cfg.trainable_ids, dtype=torch.long)
        self.register_buffer("trainable_idx", idx, persistent=False)
        # Task-token rows start as copies of the base rows: at init the model
        # computes exactly the base function.
        self.task_emb = nn.Parameter(self.tok_emb[idx].clone())
        self.task_out = nn.Parameter(self.out_w[idx].clone())

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.dtype

    # -- LoRA management -------------------------------------------------
    def attach_lora(self, cfg: LoraConfig, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        for i, block in enumerate(self.blocks):
            for name in cfg.targets:
                lin: LoraLinear = getattr(block, name)
                m, n = lin.weight.shape
                lin.adapter = init_adapter(m, n, cfg.rank, cfg.alpha, gen, cfg.dropout, f"blocks.{i}.{name}", self.dtype)

    def detach_lora(self) -> None:
        for lin in self.lora_layers():
            lin.adapter = None

    def lora_layers(self) -> list[LoraLinear]:
        return [m for m in self.modules() if isinstance(m, LoraLinear)]

    def set_dropout_rng(self, rng: torch.Generator | None) -> None:
        for lin in self.lora_layers():
            lin.rng = rng

    # -- forward ----------------------------------------------------------
    def embedding_table(self) -> torch.Tensor:
        return torch.index_copy(self.tok_emb, 0, self.trainable_idx, self.task_emb)

    def output_table(self) -> torch.Tensor:
        return torch.index_copy(self.out_w, 0, self.trainable_idx, self.task_out)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return F.embedding(ids, self.embedding_table())

    def forward(self, ids: torch.Tensor, prefix: torch.Tensor | None = None) -> torch.Tensor:
        """Logits of shape ``(B, P + T, V)`` for ids ``(B, T)`` and prefix ``(B, P, d)``."""
        if ids.dim() == 1:
            ids = ids[None]
        x = self.embed_tokens(ids)
        n_tok = x.shape[1]
        if n_tok > self.cfg.max_seq_len:
            raise SequenceLengthError(f"{n_tok} tokens exceed max_seq_len={self.cfg.max_seq_len}")
        if prefix is not None and prefix.shape[1]:
            if prefix.shape[1] > self.cfg.n_prefix:
                raise SequenceLengthError(f"{prefix.shape[1]} prefix vectors exceed n_prefix={self.cfg.n_prefix}")
            x = torch.cat([prefix.to(x.dtype), x], dim=1)
        T = x.shape[1]
        x = x + self.pos_emb[:T]
        for block in self.blocks:
            x = block(x, self.causal)
        x = _layer_norm(x, self.lnf_g, self.lnf_b)
        return x @ self.output_table().T


def _input_tensors(model: CausalLM, inp: ModelInput, extra: Sequence[int] = ()):
    ids = torch.tensor([list(inp.ids) + list(extra)], dtype=torch.long)
    prefix = None if inp.prefix is None else inp.prefix.reshape(1, -1, model.cfg.d_model)
    return ids, prefix


def next_token_logits(model: CausalLM, inp: ModelInput) -> torch.Tensor:
    """Per-position logits ``(P + T, V)`` for a single input."""
    ids, prefix = _input_tensors(model, inp)
    return model(ids, prefix)[0]


def sequence_log_prob(model: CausalLM, context: ModelInput, continuation: Sequence[int]) -> float:
    """Sum of next-token log-probabilities of ``continuation`` after ``context``."""
    continuation = list(continuation)
    if not continuation:
        return 0.0
    if not context.ids and context.n_prefix == 0:
        raise ValueError("scoring needs a non-empty context")
    ids, prefix = _input_tensors(model, context, continuation)
    with torch.no_grad():
        logp = model(ids, prefix)[0].double().log_softmax(-1)
    start = len(context) - 1
    rows = torch.arange(start, start + len(continuation))
    return float(logp[rows, torch.tensor(continuation)].sum())


class LMScorer:
    """Adapts a :class:`CausalLM` to the decoder protocol of :mod:`dysflm.decoding`."""

    def __init__(self, model: CausalLM, eos_id: int, vocab_size: int | None = None):
        self.model = model
        self.eos_id = eos_id
        self.vocab_size = vocab_size or model.cfg.vocab_size

    def next_log_probs(self, context: ModelInput, prefix: Sequence[int]):
        ids, pre = _input_tensors(self.model, context, prefix)
        with torch.no_grad():
            logits = self.model(ids, pre)[0, -1]
        return logits.double().log_softmax(-1).numpy()
