"""Enrollment-audio prompt encoder: statistics pooling followed by a two-layer perceptron."""

from __future__ import annotations

import torch
from torch import nn

from ..errors import InputError
from . import PromptEmbedding

MIN_ENROLL_FRAMES = 10


def stats_pool(frames: torch.Tensor) -> torch.Tensor:
    """Concatenated per-channel mean and (population) standard deviation over time."""
    mean = frames.mean(dim=-2)
    std = (frames - mean.unsqueeze(-2)).pow(2).mean(dim=-2).sqrt()
    return torch.cat([mean, std], dim=-1)


class SpeakerEmbedder(nn.Module):
    def __init__(self, d_a: int = 32, hidden: int = 256, out_dim: int = 192):
        super().__init__()
        self.d_a = d_a
        self.net = nn.Sequential(nn.Linear(2 * d_a, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.net(pooled)

    def embed(self, segments) -> torch.Tensor:
        """Embed a list of (T_i, d_a) arrays of possibly different lengths."""
        pooled = []
        for seg in segments:
            x = torch.as_tensor(seg, dtype=self.net[0].weight.dtype)
            if x.dim() != 2 or x.shape[1] != self.d_a:
                raise InputError(f"enrollment must be (T, {self.d_a}), got {tuple(x.shape)}")
            if x.shape[0] < MIN_ENROLL_FRAMES:
                raise InputError(
                    f"enrollment has {x.shape[0]} frames, need at least {MIN_ENROLL_FRAMES}")
            pooled.append(stats_pool(x))
        return self(torch.stack(pooled))


def encode_audio_prompt(enrollment, embedder: SpeakerEmbedder) -> PromptEmbedding:
    with torch.no_grad():
        vec = embedder.embed([enrollment])[0]
    return PromptEmbedding(vec, "audio")
