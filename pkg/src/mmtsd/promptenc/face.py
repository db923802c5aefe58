"""Face prompt encoder and voice-face aligner.

The face encoder is a fixed random affine map followed by GeLU, frozen for
the lifetime of a world seed.  The aligner is an MLP trained with MSE to map
face embeddings onto the voice embeddings of the same person.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import InputError
from . import PromptEmbedding

ALIGNER_WIDTHS = (1024, 1024, 256, 512)


class FaceEncoder(nn.Module):
    def __init__(self, d_face: int = 64, d_out: int = 128, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(int(seed) + 7919)
        self.register_buffer("weight", torch.randn(d_out, d_face, generator=g) / np.sqrt(d_face))
        self.register_buffer("bias", 0.5 * torch.randn(d_out, generator=g))
        self.d_face = d_face

    def forward(self, face_obs) -> torch.Tensor:
        x = torch.as_tensor(face_obs, dtype=self.weight.dtype)
        if x.shape[-1] != self.d_face:
            raise InputError(f"face observation must have {self.d_face} entries, got {x.shape[-1]}")
        return F.gelu(F.linear(x, self.weight, self.bias))


def encode_face(face_obs, encoder: FaceEncoder) -> torch.Tensor:
    with torch.no_grad():
        return encoder(face_obs)


class VoiceFaceAligner(nn.Module):
    """Four Linear+GeLU layers (1024, 1024, 256, 512) and a final projection to D."""

    def __init__(self, d_in: int = 128, out_dim: int = 192, widths=ALIGNER_WIDTHS):
        super().__init__()
        layers = []
        prev = d_in
        for w in widths:
            layers += [nn.Linear(prev, w), nn.GELU()]
            prev = w
        self.mlp = nn.Sequential(*layers)
        self.proj = nn.Linear(prev, out_dim)

    def forward(self, face_emb: torch.Tensor) -> torch.Tensor:
        return self.proj(self.mlp(face_emb))


def align_face(raw_face_emb, aligner: VoiceFaceAligner) -> PromptEmbedding:
    with torch.no_grad():
        vec = aligner(torch.as_tensor(raw_face_emb, dtype=aligner.proj.weight.dtype))
    return PromptEmbedding(vec, "face")


@dataclass
class AlignerHyper:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 128
    val_fraction: float = 0.1
    seed: int = 0
    d_out: int = 192


@dataclass
class AlignerHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1


def train_aligner(pairs, hyper: AlignerHyper = AlignerHyper(), aligner: VoiceFaceAligner | None = None):
    """Fit the aligner with MSE on (voice_emb, raw_face_emb) pairs.

    Returns ``(aligner, history)``; the parameters kept are those of the epoch
    with the lowest validation loss.  ``pairs`` is a list of tuples or a
    ``(voice, face)`` tuple of stacked tensors.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and torch.is_tensor(pairs[0]):
        voice, face = pairs
    else:
        if len(pairs) == 0:
            raise InputError("train_aligner needs at least one pair")
        voice = torch.stack([torch.as_tensor(v, dtype=torch.float32) for v, _ in pairs])
        face = torch.stack([torch.as_tensor(f, dtype=torch.float32) for _, f in pairs])
    if len(voice) == 0:
        raise InputError("train_aligner needs at least one pair")
    torch.manual_seed(hyper.seed)
    if aligner is None:
        aligner = VoiceFaceAligner(face.shape[1], voice.shape[1])
    history = AlignerHistory()
    if hyper.epochs <= 0:
        return aligner, history

    gen = torch.Generator().manual_seed(hyper.seed)
    order = torch.randperm(len(voice), generator=gen)
    n_val = int(round(hyper.val_fraction * len(voice))) if len(voice) > 1 else 0
    val_idx, tr_idx = order[:n_val], order[n_val:]
    opt = torch.optim.Adam(aligner.parameters(), lr=hyper.lr)
    best_state, best = copy.deepcopy(aligner.state_dict()), float("inf")
    for epoch in range(hyper.epochs):
        aligner.train()
        perm = tr_idx[torch.randperm(len(tr_idx), generator=gen)]
        total = 0.0
        for start in range(0, len(perm), hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            loss = F.mse_loss(aligner(face[idx]), voice[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.train_loss.append(total / max(1, len(perm)))
        aligner.eval()
        with torch.no_grad():
            if n_val:
                val = F.mse_loss(aligner(face[val_idx]), voice[val_idx]).item()
            else:
                val = history.train_loss[-1]
        history.val_loss.append(val)
        if val < best:
            best, history.best_epoch = val, epoch
            best_state = copy.deepcopy(aligner.state_dict())
    aligner.load_state_dict(best_state)
    aligner.eval()
    return aligner, history


def cross_modal_score(voice_emb, aligned_face_emb) -> float:
    v = torch.as_tensor(voice_emb, dtype=torch.float64).flatten()
    f = torch.as_tensor(aligned_face_emb, dtype=torch.float64).flatten()
    if v.shape != f.shape:
        raise InputError("voice and face embeddings differ in dimension")
    nv, nf = v.norm(), f.norm()
    if nv == 0 or nf == 0:
        raise InputError("cannot score a zero-norm embedding")
    return float(v @ f / (nv * nf))
