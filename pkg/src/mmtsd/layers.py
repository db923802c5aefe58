"""Pre-norm Transformer building blocks shared by the text base and the TSD network."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .promptenc.lora import LoRALinear


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention.  Query and value projections accept LoRA adapters.

    ``attn_mask`` is boolean with True meaning "may attend"; it broadcasts
    against (batch, heads, L_q, L_k).  ``key_padding_mask`` is (batch, L_k) with
    True marking padding.  Disallowed scores become -inf, so their softmax
    weight is exactly zero.
    """

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        assert d_model % n_heads == 0, "d_model must be divisible by n_heads"
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = LoRALinear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = LoRALinear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query, key, value, attn_mask=None, key_padding_mask=None):
        B, Lq, D = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        allowed = None
        if attn_mask is not None:
            allowed = attn_mask.to(torch.bool)
        if key_padding_mask is not None:
            kp = ~key_padding_mask.to(torch.bool)[:, None, None, :]
            allowed = kp if allowed is None else (allowed & kp)
        if allowed is not None:
            scores = scores.masked_fill(~allowed, float("-inf"))
        weights = self.dropout(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(B, Lq, D)
        return self.out_proj(out)


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__(
            nn.Linear(d_model, d_ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(d_ff, d_model))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, dropout=0.1):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, attn_mask=None, key_padding_mask=None):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, h, attn_mask, key_padding_mask))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    """Masked self-attention over prompt tokens, cross-attention into memory, feed-forward."""

    def __init__(self, d_model, n_heads, d_ff, dropout=0.1):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, self_mask=None):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, h, self_mask))
        x = x + self.drop(self.cross_attn(self.norm2(x), memory, memory))
        return x + self.drop(self.ff(self.norm3(x)))


def sinusoidal_positions(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)
