"""Patch-based transformer encoder for the temporal branch."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .autodiff import Dropout, LayerNorm, Linear, Module, Tensor, ops
from .series import patch_count, patchify


class ConfigError(ValueError):
    pass


@dataclass
class TemporalEncoderConfig:
    d_model: int = 128
    e_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    patch_len: int = 16
    stride: int = 8
    padding: int = 8

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positions")


@dataclass
class TemporalOutput:
    h: Tensor  # B x d_model
    tokens: Tensor  # B x N x d_model
    attention: Optional[Tensor]  # B x n_heads x N x N, last block, pre-dropout

    def attention_mean(self) -> Optional[Tensor]:
        """Head-averaged attention, B x N x N."""
        return None if self.attention is None else ops.mean(self.attention, axis=1)


def positional_encode(n_tokens: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ConfigError("positional encoding needs an even d_model")
    pos = np.arange(n_tokens, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.empty((n_tokens, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def embed_patches(patches, weight, bias) -> Tensor:
    """e_i = W flatten(p_i) + b for every patch; weight is (d_model, patch_dim)."""
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape[-1] != weight.shape[1]:
        raise ConfigError(f"patch dim {patches.shape[-1]} does not match embedding input {weight.shape[1]}")
    return ops.linear(patches, weight, bias)


class MultiHeadSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng):
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        return ops.transpose(ops.reshape(x, (B, N, self.n_heads, D // self.n_heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor):
        B, N, D = x.shape
        dk = D // self.n_heads
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk))
        attn = ops.softmax(scores, axis=-1)
        ctx = ops.matmul(attn, v)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (B, N, D))
        return self.o(ctx), attn


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)) with a 4x GELU MLP."""

    def __init__(self, d_model: int, n_heads: int, dropout: float, rng, drop_rng):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, n_heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, 4 * d_model, rng)
        self.ff2 = Linear(4 * d_model, d_model, rng)
        self.drop = Dropout(dropout, drop_rng)

    def __call__(self, x: Tensor):
        a, attn = self.attn(self.ln1(x))
        x = x + self.drop(a)
        f = self.ff2(ops.gelu(self.ff1(self.ln2(x))))
        return x + self.drop(f), attn


class TemporalEncoder(Module):
    def __init__(self, cfg: TemporalEncoderConfig, n_vars: int, rng, drop_rng):
        cfg.validate()
        self.cfg = cfg
        self.embed = Linear(cfg.patch_len * n_vars, cfg.d_model, rng)
        self.blocks: List[TransformerBlock] = [
            TransformerBlock(cfg.d_model, cfg.n_heads, cfg.dropout, rng, drop_rng)
            for _ in range(cfg.e_layers)
        ]
        self.drop = Dropout(cfg.dropout, drop_rng)

    def n_tokens(self, L: int) -> int:
        c = self.cfg
        return patch_count(L, c.patch_len, c.stride, c.padding)

    def __call__(self, x) -> TemporalOutput:
        c = self.cfg
        patches = patchify(x, c.patch_len, c.stride, c.padding)
        e = embed_patches(patches, self.embed.weight, self.embed.bias)
        h = self.drop(e + positional_encode(e.shape[1], c.d_model))
        attn = None
        for block in self.blocks:
            h, attn = block(h)
        return TemporalOutput(ops.mean(h, axis=1), h, attn)


def encode(x, encoder: TemporalEncoder) -> TemporalOutput:
    return encoder(x)
