"""Post-LN transformer encoder exposing every layer's states and pooled vectors.

The building blocks are plain functions over tensors so they can be checked
one by one against finite differences; :class:`Encoder` wires them together.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Callable, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

LN_EPS = 1e-12
INIT_STD = 0.02
POOLING_MODES = ("cls", "mean")

Dropout = Callable[[Tensor], Tensor]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 4
    hidden_dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    max_len: int = 512
    dropout: float = 0.2
    pooling: str = "cls"

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.heads < 1 or self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}")
        if self.max_len < 3:
            raise ConfigError("max_len must be >= 3")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.vocab_size < 8:
            raise ConfigError("vocab_size must cover the specials plus at least one word")
        if self.ffn_dim < 1:
            raise ConfigError("ffn_dim must be >= 1")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "EncoderConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


def param_count(cfg: EncoderConfig) -> int:
    d, f, v = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    embeddings = v * d + cfg.max_len * d + 2 * d
    block = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d
    mlm_head = d * d + d + 2 * d + v  # transform, its layer norm, output bias (weights tied)
    return embeddings + cfg.layers * block + mlm_head


# ----------------------------------------------------------------- primitives

def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def embed(ids: Tensor, token_table: Tensor, position_table: Tensor) -> Tensor:
    positions = torch.arange(ids.shape[-1], device=ids.device)
    return token_table[ids] + position_table[positions]


def attention(
    x: Tensor,
    key_mask: Tensor,
    wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
    heads: int,
    dropout: Optional[Dropout] = None,
) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention. Keys with ``key_mask == 0`` get exactly zero weight.

    Returns the projected output ``(B, T, d)`` and attention probabilities ``(B, h, T, T)``.
    """
    b, t, d = x.shape
    hd = d // heads

    def split(z: Tensor) -> Tensor:
        return z.view(b, t, heads, hd).transpose(1, 2)

    q = split(F.linear(x, wq, bq))
    k = split(F.linear(x, wk, bk))
    v = split(F.linear(x, wv, bv))
    scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
    scores = scores.masked_fill(key_mask[:, None, None, :] == 0, float("-inf"))
    probs = torch.softmax(scores, dim=-1)
    mixed = (dropout(probs) if dropout else probs) @ v
    mixed = mixed.transpose(1, 2).reshape(b, t, d)
    return F.linear(mixed, wo, bo), probs


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return F.linear(gelu(F.linear(x, w1, b1)), w2, b2)


def pool(states: Tensor, mask: Tensor, mode: str = "cls") -> Tensor:
    """Reduce ``(..., T, d)`` token states to ``(..., d)``: position 0, or the masked mean."""
    if mode not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    active = mask.sum(-1)
    if bool((active < 1).any()):
        raise ValueError("pooling needs at least one active position")
    if mode == "cls":
        return states[..., 0, :]
    weights = mask.to(states.dtype).unsqueeze(-1)
    return (states * weights).sum(-2) / active.to(states.dtype).unsqueeze(-1)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine along the last axis. Zero-norm inputs are rejected rather than smoothed."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity of a zero-norm vector")
    return (a * b).sum(-1) / (na * nb)


def make_dropout(p: float, generator: Optional[torch.Generator]) -> Optional[Dropout]:
    """Inverted dropout drawing from an explicit generator, for bit-reproducible runs."""
    if p <= 0 or generator is None:
        return None

    def apply(x: Tensor) -> Tensor:
        keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
        return x * keep / (1.0 - p)

    return apply


# --------------------------------------------------------------------- module

@dataclass
class LayerOutputs:
    states: list[Tensor]            # L x (B, T, d)
    pooled: Tensor                  # (B, L, d)
    mask: Tensor                    # (B, T)
    logits: Optional[Tensor] = None  # (B, T, V)
    attentions: Optional[list[Tensor]] = None

    @property
    def last(self) -> Tensor:
        return self.pooled[:, -1]


class _LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


class _Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out))


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.heads = cfg.heads
        self.q, self.k, self.v, self.o = (_Linear(d, d) for _ in range(4))
        self.attn_ln = _LayerNorm(d)
        self.ffn_in = _Linear(d, cfg.ffn_dim)
        self.ffn_out = _Linear(cfg.ffn_dim, d)
        self.ffn_ln = _LayerNorm(d)

    def forward(self, x: Tensor, mask: Tensor, drop: Optional[Dropout]) -> tuple[Tensor, Tensor]:
        a, probs = attention(
            x, mask,
            self.q.weight, self.q.bias, self.k.weight, self.k.bias,
            self.v.weight, self.v.bias, self.o.weight, self.o.bias,
            self.heads, drop,
        )
        x = self.attn_ln(x + (drop(a) if drop else a))
        h = feed_forward(x, self.ffn_in.weight, self.ffn_in.bias, self.ffn_out.weight, self.ffn_out.bias)
        return self.ffn_ln(x + (drop(h) if drop else h)), probs


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.token_embedding = nn.Parameter(torch.zeros(cfg.vocab_size, d))
        self.position_embedding = nn.Parameter(torch.zeros(cfg.max_len, d))
        self.embedding_ln = _LayerNorm(d)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.mlm_transform = _Linear(d, d)
        self.mlm_ln = _LayerNorm(d)
        self.mlm_bias = nn.Parameter(torch.zeros(cfg.vocab_size))

    def forward(
        self,
        ids: Tensor,
        mask: Tensor,
        train: bool = False,
        generator: Optional[torch.Generator] = None,
        with_logits: bool = False,
        with_attentions: bool = False,
        pooling: Optional[str] = None,
    ) -> LayerOutputs:
        if ids.shape[-1] > self.cfg.max_len:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_len {self.cfg.max_len}")
        if train and self.cfg.dropout > 0 and generator is None:
            raise ValueError("train mode needs an explicit dropout generator")
        drop = make_dropout(self.cfg.dropout, generator) if train else None
        x = self.embedding_ln(embed(ids, self.token_embedding, self.position_embedding))
        if drop:
            x = drop(x)
        states, attns = [], []
        for i, block in enumerate(self.blocks):
            x, probs = block(x, mask, drop)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations at layer {i + 1}")
            states.append(x)
            if with_attentions:
                attns.append(probs)
        mode = pooling or self.cfg.pooling
        pooled = torch.stack([pool(s, mask, mode) for s in states], dim=1)
        logits = self.mlm_logits(x) if with_logits else None
        return LayerOutputs(states, pooled, mask, logits, attns if with_attentions else None)

    def mlm_logits(self, x: Tensor) -> Tensor:
        h = self.mlm_ln(gelu(F.linear(x, self.mlm_transform.weight, self.mlm_transform.bias)))
        return h @ self.token_embedding.T + self.mlm_bias


def init_params(cfg: EncoderConfig, seed: int) -> Encoder:
    """Fresh encoder with N(0, 0.02) weights, zero biases and unit layer-norm scales."""
    model = Encoder(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("ln.weight") or name.endswith("_ln.weight"):
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * INIT_STD)
    return model


def copy_params(src: nn.Module, dst: nn.Module) -> None:
    with torch.no_grad():
        for (name, a), (_, b) in zip(src.named_parameters(), dst.named_parameters(), strict=True):
            b.copy_(a)


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
        p.grad = None
    return model
