"""Text prompt encoder: small Transformer base (pretrained, then frozen) with LoRA on q/v.

The command is tokenised, prefixed with ``[CLS]``, run through the base, and
the CLS state goes through Linear -> ReLU -> Dropout -> Linear to width D.
In training mode some words are replaced by ``[OOV]`` and word order is
shuffled for part of the batch, so the encoder keys on event words rather
than on the few sentence frames it has seen.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..errors import ConfigurationError, InputError
from ..layers import EncoderLayer
from . import PromptEmbedding
from .corpus import EVENT_TARGETS, OOV, Vocabulary


@dataclass(frozen=True)
class TextConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 2
    max_len: int = 48
    hidden: int = 128
    out_dim: int = 192
    dropout: float = 0.1
    lora_rank: int = 4
    lora_alpha: float = 8.0
    token_dropout: float = 0.1
    shuffle_prob: float = 0.5


class TextBase(nn.Module):
    def __init__(self, vocab_size: int, cfg: TextConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(vocab_size, cfg.d_model, padding_idx=0)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1])
        h = self.tok_emb(ids) + self.pos_emb(pos)[None]
        for layer in self.layers:
            h = layer(h, key_padding_mask=pad_mask)
        return self.norm(h[:, 0])

    def attention_projections(self):
        for i, layer in enumerate(self.layers):
            yield f"layer{i}.query", layer.self_attn.q_proj
            yield f"layer{i}.value", layer.self_attn.v_proj


class TextPromptEncoder(nn.Module):
    def __init__(self, vocab: Vocabulary, cfg: TextConfig = TextConfig()):
        super().__init__()
        for name in ("token_dropout", "shuffle_prob"):
            if not 0.0 <= getattr(cfg, name) < 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1), got {getattr(cfg, name)}")
        self.cfg = cfg
        self.vocab = vocab
        self.base = TextBase(len(vocab), cfg)
        self.head = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.hidden), nn.ReLU(), nn.Dropout(cfg.dropout),
            nn.Linear(cfg.hidden, cfg.out_dim))
        self.base_frozen = False

    def freeze_base(self):
        for name, p in self.base.named_parameters():
            if "adapter" not in name:
                p.requires_grad_(False)
        self.base_frozen = True
        self.base.eval()
        return self

    def attach_lora(self, rank: int | None = None, alpha: float | None = None):
        rank = self.cfg.lora_rank if rank is None else rank
        alpha = self.cfg.lora_alpha if alpha is None else alpha
        return [proj.attach(rank, alpha, name) for name, proj in self.base.attention_projections()]

    def detach_lora(self):
        for _, proj in self.base.attention_projections():
            proj.adapter = None

    def adapters(self):
        return [proj.adapter for _, proj in self.base.attention_projections() if proj.adapter is not None]

    def train(self, mode: bool = True):
        super().train(mode)
        if self.base_frozen:
            self.base.eval()
        return self

    def tokenize_batch(self, texts) -> tuple[torch.Tensor, torch.Tensor]:
        seqs = []
        for t in texts:
            if not isinstance(t, str) or not t.strip():
                raise InputError("empty text prompt")
            seqs.append(self.vocab.encode(t)[: self.cfg.max_len])
        L = max(len(s) for s in seqs)
        ids = torch.zeros(len(seqs), L, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s)
        return ids, ids == 0

    def noised_ids(self, texts, generator: torch.Generator | None = None):
        """Token ids with word order shuffled (per sentence) and words dropped to [OOV]."""
        ids, pad = self.tokenize_batch(texts)
        for r in range(ids.shape[0]):
            n = int((~pad[r]).sum())
            if n > 2 and torch.rand(1, generator=generator).item() < self.cfg.shuffle_prob:
                ids[r, 1:n] = ids[r, 1 + torch.randperm(n - 1, generator=generator)]
        if self.cfg.token_dropout > 0:
            drop = (torch.rand(ids.shape, generator=generator) < self.cfg.token_dropout) & ~pad
            drop[:, 0] = False
            ids = ids.masked_fill(drop, self.vocab.index[OOV])
        return ids, pad

    def pooled(self, texts, generator: torch.Generator | None = None) -> torch.Tensor:
        ids, pad = self.noised_ids(texts, generator) if self.training else self.tokenize_batch(texts)
        return self.base(ids, pad)

    def forward(self, texts, generator: torch.Generator | None = None) -> torch.Tensor:
        return self.head(self.pooled(texts, generator))


def encode_text(text: str, encoder: TextPromptEncoder, mode: str = "eval") -> PromptEmbedding:
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = encoder.training
    encoder.train(mode == "train")
    try:
        with torch.set_grad_enabled(mode == "train"):
            vec = encoder([text])[0]
    finally:
        encoder.train(was_training)
    return PromptEmbedding(vec, "text")


def event_classifier_head(cfg: TextConfig, n_events: int = len(EVENT_TARGETS)) -> nn.Module:
    return nn.Linear(cfg.out_dim, n_events)
