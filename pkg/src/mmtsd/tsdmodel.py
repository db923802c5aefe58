"""Prompt-as-query Transformer encoder-decoder for target speech diarization.

The encoder turns frame features into memory ``F_e`` (T x D).  Each prompt
embedding is one decoder query token; decoder self-attention is restricted by
a block-diagonal mask so independent prompts never see each other, while an
audio token and the text command that controls it share a 2-block.  The
prediction for prompt p at frame t is ``sigmoid(F_d[p] . F_e[t])``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InputError
from .layers import DecoderLayer, EncoderLayer, sinusoidal_positions

PROB_EPS = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    d_a: int = 32
    d_model: int = 192
    n_heads: int = 8
    d_ff: int = 768
    enc_layers: int = 4
    dec_layers: int = 4
    dropout: float = 0.1
    use_positions: bool = True
    max_frames: int = 4096


@dataclass
class PredictionBatch:
    probs: torch.Tensor  # (B, P, T)
    logits: torch.Tensor
    meta: list | None = None


class TSDModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        if cfg.d_model % cfg.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        self.cfg = cfg
        self.front_end = nn.Linear(cfg.d_a, cfg.d_model)
        self.register_buffer("positions", sinusoidal_positions(cfg.max_frames, cfg.d_model),
                             persistent=False)
        self.encoder = nn.ModuleList(
            EncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(
            DecoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout) for _ in range(cfg.dec_layers))
        self.enc_norm = nn.LayerNorm(cfg.d_model)
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        # keeps initial logits O(1): a raw dot of two layer-normed D-vectors has std sqrt(D)
        gain = cfg.d_model ** -0.25
        nn.init.constant_(self.enc_norm.weight, gain)
        nn.init.constant_(self.dec_norm.weight, gain)

    def encode_speech(self, features) -> torch.Tensor:
        x = torch.as_tensor(features, dtype=self.front_end.weight.dtype)
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        if x.dim() != 3 or x.shape[-1] != self.cfg.d_a:
            raise InputError(f"expected (..., T, {self.cfg.d_a}) features, got {tuple(x.shape)}")
        T = x.shape[1]
        if T < 1:
            raise InputError("need at least one frame")
        if T > self.cfg.max_frames:
            raise InputError(f"{T} frames exceed max_frames={self.cfg.max_frames}")
        h = self.front_end(x)
        if self.cfg.use_positions:
            h = h + self.positions[:T].to(h.dtype)
        for layer in self.encoder:
            h = layer(h)
        h = self.enc_norm(h)
        return h[0] if squeeze else h

    def decode_prompts(self, prompts, memory, mask) -> torch.Tensor:
        e = torch.as_tensor(prompts, dtype=self.front_end.weight.dtype)
        squeeze = e.dim() == 2
        if squeeze:
            e = e[None]
        mem = memory[None] if memory.dim() == 2 else memory
        if e.shape[-1] != self.cfg.d_model or mem.shape[-1] != self.cfg.d_model:
            raise InputError("prompt and memory widths must equal d_model")
        if e.shape[0] != mem.shape[0]:
            raise InputError("prompt and memory batch sizes differ")
        m = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
        P = e.shape[1]
        if m.shape != (P, P):
            raise InputError(f"mask shape {tuple(m.shape)} does not match {P} prompts")
        h = e
        for layer in self.decoder:
            h = layer(h, mem, m)
        h = self.dec_norm(h)
        return h[0] if squeeze else h

    def forward(self, features, prompts, mask) -> PredictionBatch:
        mem = self.encode_speech(features)
        dec = self.decode_prompts(prompts, mem, mask)
        return predict_tracks(dec, mem)


def build_decoder_mask(groups) -> np.ndarray:
    """Block-diagonal boolean mask (True = may attend) for consecutive prompt groups of size 1 or 2."""
    sizes = [int(g) for g in groups]
    for g in sizes:
        if g < 1 or g > 2:
            raise ConfigurationError(f"prompt group sizes must be 1 or 2, got {g}")
    P = sum(sizes)
    mask = np.zeros((P, P), dtype=bool)
    start = 0
    for g in sizes:
        mask[start:start + g, start:start + g] = True
        start += g
    return mask


def predict_tracks(decoded: torch.Tensor, memory: torch.Tensor) -> PredictionBatch:
    """Frame probabilities ``sigmoid(F_d F_e^T)``, kept strictly inside (0, 1)."""
    if decoded.shape[-1] != memory.shape[-1]:
        raise InputError("decoder and encoder widths differ")
    logits = decoded @ memory.transpose(-2, -1)
    eps = torch.finfo(logits.dtype).eps
    probs = torch.sigmoid(logits).clamp(eps, 1.0 - eps)
    return PredictionBatch(probs=probs, logits=logits)


def bce_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    """Binary cross-entropy averaged over frames, then over prompts (and batch).

    ``probs`` and ``labels`` share shape (..., T).
    """
    labels = torch.as_tensor(labels, dtype=probs.dtype)
    if probs.shape != labels.shape:
        raise InputError(f"prediction shape {tuple(probs.shape)} != label shape {tuple(labels.shape)}")
    p = probs.clamp(eps, 1.0 - eps)
    per_frame = -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p))
    return per_frame.mean(dim=-1).mean()


def bce_with_logits(logits: torch.Tensor, labels: torch.Tensor,
                    weights: torch.Tensor | None = None) -> torch.Tensor:
    """Same objective computed stably from logits (no clamp); used for optimisation."""
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    per_track = F.binary_cross_entropy_with_logits(logits, labels, reduction="none").mean(dim=-1)
    if weights is None:
        return per_track.mean()
    return (per_track * weights).sum() / weights.sum()
