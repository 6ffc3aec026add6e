"""
Post-norm Transformer encoder and decoder layers on top of ``binflow.autodiff``.

Shapes: batches are (B, S, d); ``mask`` arrays are boolean (B, S) with True on
real tokens and False on padding.
"""

import math
from typing import Optional, Tuple

import numpy as np

from binflow.autodiff import ops
from binflow.autodiff.tensor import Tensor, is_grad_enabled
from binflow.config import ModelConfig
from binflow.model.base import Dropout, LayerNorm, Linear, Module

NEG_INF = -1e9


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: Dropout):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim={dim} is not divisible by heads={heads}")
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.drop = dropout
        # last attention map; left untouched under no_grad
        self.last_weights: Optional[np.ndarray] = None

    def __call__(self, query, memory, key_mask: Optional[np.ndarray] = None, causal: bool = False) -> Tensor:
        batch, t_len, dim = query.shape
        s_len = memory.shape[1]
        head_dim = dim // self.heads

        q = ops.transpose(ops.reshape(self.wq(query), (batch, t_len, self.heads, head_dim)), axes=(0, 2, 1, 3))
        k = ops.transpose(ops.reshape(self.wk(memory), (batch, s_len, self.heads, head_dim)), axes=(0, 2, 3, 1))
        v = ops.transpose(ops.reshape(self.wv(memory), (batch, s_len, self.heads, head_dim)), axes=(0, 2, 1, 3))
        scores = ops.mul(ops.matmul(q, k), 1.0 / math.sqrt(head_dim))

        blocked = np.zeros((batch, 1, t_len, s_len), dtype=bool)
        if key_mask is not None:
            blocked |= ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            blocked |= np.triu(np.ones((t_len, s_len), dtype=bool), k=1)[None, None]
        if blocked.any():
            scores = ops.masked_fill(scores, blocked, NEG_INF)

        weights = ops.softmax(scores, axis=-1)
        if is_grad_enabled():
            self.last_weights = weights.data
        context = ops.matmul(self.drop(weights), v)
        context = ops.reshape(ops.transpose(context, axes=(0, 2, 1, 3)), (batch, t_len, dim))
        return self.wo(context)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dropout: Dropout):
        super().__init__()
        self.inner = Linear(dim, hidden, rng)
        self.outer = Linear(hidden, dim, rng)
        self.drop = dropout

    def __call__(self, x) -> Tensor:
        return self.outer(self.drop(ops.relu(self.inner(x))))


class EncoderLayer(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dropout: Dropout):
        super().__init__()
        self.attn = MultiHeadAttention(config.dim, config.heads, rng, dropout)
        self.norm1 = LayerNorm(config.dim)
        self.ffn = FeedForward(config.dim, config.dim * config.ffn_mult, rng, dropout)
        self.norm2 = LayerNorm(config.dim)
        self.drop = dropout

    def __call__(self, x, mask) -> Tensor:
        x = self.norm1(ops.add(x, self.drop(self.attn(x, x, mask))))
        return self.norm2(ops.add(x, self.drop(self.ffn(x))))


class DecoderLayer(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dropout: Dropout):
        super().__init__()
        self.self_attn = MultiHeadAttention(config.dim, config.heads, rng, dropout)
        self.norm1 = LayerNorm(config.dim)
        self.cross_attn = MultiHeadAttention(config.dim, config.heads, rng, dropout)
        self.norm2 = LayerNorm(config.dim)
        self.ffn = FeedForward(config.dim, config.dim * config.ffn_mult, rng, dropout)
        self.norm3 = LayerNorm(config.dim)
        self.drop = dropout

    def __call__(self, x, mask, memory=None, memory_mask=None) -> Tensor:
        x = self.norm1(ops.add(x, self.drop(self.self_attn(x, x, mask, causal=True))))
        if memory is not None:
            x = self.norm2(ops.add(x, self.drop(self.cross_attn(x, memory, memory_mask))))
        return self.norm3(ops.add(x, self.drop(self.ffn(x))))


class Encoder(Module):
    """Bidirectional stack for one ISA."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dropout: Dropout):
        super().__init__()
        self.layers = [EncoderLayer(config, rng, dropout) for _ in range(config.layers)]
        self.drop = dropout

    def __call__(self, x, mask) -> Tensor:
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x, mask)
        return x


class Decoder(Module):
    """
    Causal stack for one ISA plus the latent gate.

    The gate mixes each decoder state with the block latent:
    ``g = sigmoid(U [s; z] + b)`` and ``o = (1 - g) * s + g * z``.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dropout: Dropout):
        super().__init__()
        self.layers = [DecoderLayer(config, rng, dropout) for _ in range(config.layers)]
        self.gate_proj = Linear(2 * config.dim, config.dim, rng)
        self.drop = dropout
        # left untouched under no_grad
        self.last_gate: Optional[np.ndarray] = None

    def __call__(self, x, mask, memory=None, memory_mask=None) -> Tensor:
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x, mask, memory, memory_mask)
        return x

    def gate(self, states, latent) -> Tuple[Tensor, Tensor]:
        """
        :param states: decoder states s, shape (B, T, d)
        :param latent: block latent z, shape (B, d)
        :return: (o, g), both (B, T, d)
        """
        z = ops.expand(latent, axis=1, size=states.shape[1])
        g = ops.sigmoid(self.gate_proj(ops.concat([states, z], axis=-1)))
        if is_grad_enabled():
            self.last_gate = g.data
        out = ops.add(ops.mul(ops.sub(1.0, g), states), ops.mul(g, z))
        return out, g
