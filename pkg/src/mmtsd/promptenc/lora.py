"""Low-rank adapters on frozen linear projections."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigurationError


class LoraAdapter(nn.Module):
    """Trainable ``B @ A`` update scaled by ``alpha / rank``.

    ``B`` starts at zero, so a freshly attached adapter leaves the wrapped
    projection's output unchanged.
    """

    def __init__(self, d_in: int, d_out: int, rank: int = 4, alpha: float = 8.0,
                 attachment: str = ""):
        super().__init__()
        if rank < 1:
            raise ConfigurationError(f"LoRA rank must be >= 1, got {rank}")
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.attachment = attachment
        self.A = nn.Parameter(torch.empty(rank, d_in))
        self.B = nn.Parameter(torch.zeros(d_out, rank))
        nn.init.kaiming_uniform_(self.A, a=math.sqrt(5))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * F.linear(F.linear(x, self.A), self.B)

    def delta_weight(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)


def _check_shapes(W: torch.Tensor, adapter: LoraAdapter):
    d_out, d_in = W.shape
    if adapter.A.shape != (adapter.rank, d_in) or adapter.B.shape != (d_out, adapter.rank):
        raise ConfigurationError(
            f"adapter A{tuple(adapter.A.shape)} B{tuple(adapter.B.shape)} "
            f"incompatible with weight {tuple(W.shape)}")


def lora_forward(x: torch.Tensor, W_base: torch.Tensor, adapter: LoraAdapter | None,
                 bias: torch.Tensor | None = None) -> torch.Tensor:
    """``W_base x (+ bias) + (alpha/r) B A x``."""
    if adapter is None:
        return F.linear(x, W_base, bias)
    _check_shapes(W_base, adapter)
    return F.linear(x, W_base, bias) + adapter.delta(x)


def lora_merge(W_base: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    """Dense weight equivalent to ``lora_forward``. Not idempotent: merging twice adds the update twice."""
    _check_shapes(W_base, adapter)
    return W_base + adapter.delta_weight().to(W_base.dtype)


class LoRALinear(nn.Module):
    """A linear projection that can carry a LoRA adapter."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=bias)
        self.adapter: LoraAdapter | None = None

    def attach(self, rank: int, alpha: float, attachment: str = "") -> LoraAdapter:
        self.adapter = LoraAdapter(self.base.in_features, self.base.out_features, rank, alpha,
                                   attachment)
        self.adapter.to(dtype=self.base.weight.dtype)
        return self.adapter

    def forward(self, x):
        return lora_forward(x, self.base.weight, self.adapter, self.base.bias)
