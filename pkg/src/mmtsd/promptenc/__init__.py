"""Prompt encoders: text (frozen base + LoRA), enrollment audio, and face (+ voice-face aligner).

Submodules are imported explicitly (``mmtsd.promptenc.text`` etc.) to keep
this package importable from the shared layer code.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ..errors import InputError

MODALITIES = ("text", "audio", "face", "audio_text")


@dataclass
class PromptEmbedding:
    vector: torch.Tensor
    modality: str
    target_meta: tuple | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise InputError(f"unknown modality {self.modality!r}")
        if self.vector.dim() != 1:
            raise InputError("prompt embedding must be a vector")
        if not torch.isfinite(self.vector).all():
            raise InputError("prompt embedding has non-finite entries")

    @property
    def dim(self) -> int:
        return self.vector.shape[0]
