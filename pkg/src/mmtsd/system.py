"""The assembled multimodal system: prompt encoders feeding the TSD network."""

from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InputError
from .io import load_checkpoint, load_into, save_checkpoint
from .promptenc.face import FaceEncoder, VoiceFaceAligner
from .promptenc.speaker import SpeakerEmbedder
from .promptenc.text import TextPromptEncoder
from .tsdmodel import PredictionBatch, TSDModel, build_decoder_mask, predict_tracks

FACE_ROUTES = ("aligner", "linear")
COMPONENTS = ("tsd", "text", "speaker", "face", "aligner", "face_proj")


class MMTSDSystem(nn.Module):
    """Text, audio and face prompt encoders plus the TSD network.

    ``face_route="aligner"`` feeds the frozen aligner output to the decoder;
    ``"linear"`` is the no-aligner baseline, where a trainable projection maps
    the raw face embedding to width D.
    """

    def __init__(self, tsd: TSDModel, text: TextPromptEncoder, speaker: SpeakerEmbedder,
                 face: FaceEncoder, aligner: VoiceFaceAligner | None = None,
                 face_route: str = "aligner"):
        super().__init__()
        if face_route not in FACE_ROUTES:
            raise ConfigurationError(f"face_route must be one of {FACE_ROUTES}, got {face_route!r}")
        if face_route == "aligner" and aligner is None:
            raise ConfigurationError("the aligner face route needs a trained aligner")
        self.tsd = tsd
        self.text = text
        self.speaker = speaker
        self.face = face
        self.aligner = aligner
        self.face_route = face_route
        self.face_proj = (nn.Linear(face.weight.shape[0], tsd.cfg.d_model)
                          if face_route == "linear" else None)

    def frozen_modules(self) -> dict[str, nn.Module]:
        mods = {"speaker": self.speaker, "text_base": self.text.base, "face": self.face}
        if self.aligner is not None:
            mods["aligner"] = self.aligner
        return mods

    def freeze(self):
        for mod in (self.speaker, self.face, self.aligner):
            if mod is not None:
                mod.requires_grad_(False)
                mod.eval()
        self.text.freeze_base()
        return self

    def train(self, mode: bool = True):
        super().train(mode)
        for mod in (self.speaker, self.face, self.aligner):
            if mod is not None:
                mod.eval()
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def _face_vectors(self, observations) -> torch.Tensor:
        raw = self.face(np.stack(observations))
        if self.face_route == "linear":
            return self.face_proj(raw)
        return self.aligner(raw)

    def embed_prompts(self, batch) -> torch.Tensor:
        """(B, P, D) embeddings for B equally long prompt lists."""
        P = len(batch[0])
        if any(len(prompts) != P for prompts in batch):
            raise InputError("every utterance in a batch needs the same number of prompts")
        flat = [p for prompts in batch for p in prompts]
        slots: list[torch.Tensor | None] = [None] * len(flat)
        by_source: dict[str, list[int]] = {"text": [], "audio": [], "face": []}
        for i, p in enumerate(flat):
            if p.source not in by_source:
                raise InputError(f"unknown prompt source {p.source!r}")
            by_source[p.source].append(i)
        encoders = {
            "text": self.text,
            "audio": self.speaker.embed,
            "face": self._face_vectors,
        }
        for source, idx in by_source.items():
            if idx:
                vecs = encoders[source]([flat[i].payload for i in idx])
                for i, v in zip(idx, vecs):
                    slots[i] = v
        dtype = self.tsd.front_end.weight.dtype
        return torch.stack([s.to(dtype) for s in slots]).view(len(batch), P, -1)

    def predict(self, features, batch, groups) -> PredictionBatch:
        """Probabilities for B utterances sharing one prompt layout ``groups`` (group sizes)."""
        mask = build_decoder_mask(groups)
        mem = self.tsd.encode_speech(np.asarray(features))
        embeds = self.embed_prompts(batch)
        dec = self.tsd.decode_prompts(embeds, mem, mask)
        return predict_tracks(dec, mem)


def module_checksum(module: nn.Module, skip_adapters: bool = True) -> str:
    """SHA-256 over a module's state, optionally ignoring LoRA adapter tensors."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        if skip_adapters and ".adapter." in f".{name}":
            continue
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def system_tensors(modules: dict[str, nn.Module | None]) -> "OrderedDict[str, torch.Tensor]":
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for prefix in COMPONENTS:
        mod = modules.get(prefix)
        if mod is None:
            continue
        for name, t in mod.state_dict().items():
            out[f"{prefix}.{name}"] = t
    return out


def save_modules(path, modules: dict[str, nn.Module | None], model_cfg):
    save_checkpoint(path, system_tensors(modules), model_cfg.d_model, model_cfg.enc_layers,
                    model_cfg.dec_layers)


def load_modules(path, modules: dict[str, nn.Module | None]):
    """Fill each named module from a checkpoint; returns the header."""
    header, tensors = load_checkpoint(path)
    for prefix, mod in modules.items():
        if mod is not None:
            load_into(mod, tensors, f"{prefix}.", path)
    return header


def has_component(path, prefix: str) -> bool:
    _, tensors = load_checkpoint(path)
    return any(k.startswith(prefix + ".") for k in tensors)
