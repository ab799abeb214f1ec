"""Streaming per-channel feature statistics."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn


class Normalizer(nn.Module):
    """Exponentially weighted running mean and standard deviation per channel.

    Until ``1 / (1 - decay)`` updates have been seen the weight of a new batch
    is ``1 / count``, so early statistics are plain running averages rather
    than being biased towards the zero initialisation.
    """

    def __init__(self, width: int, decay: float = 0.999, eps_std: float = 1e-8):
        super().__init__()
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        self.decay = float(decay)
        self.eps_std = float(eps_std)
        self.register_buffer("mean", torch.zeros(width, dtype=torch.float64))
        self.register_buffer("sq_mean", torch.zeros(width, dtype=torch.float64))
        self.register_buffer("count", torch.zeros((), dtype=torch.float64))

    @property
    def width(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> torch.Tensor:
        var = torch.clamp(self.sq_mean - self.mean**2, min=0.0)
        return torch.clamp(torch.sqrt(var), min=self.eps_std)

    @torch.no_grad()
    def update(self, batch) -> None:
        x = torch.as_tensor(np.asarray(batch) if not torch.is_tensor(batch) else batch.detach(), dtype=torch.float64)
        x = x.reshape(-1, self.width)
        if len(x) == 0:
            return
        self.count += 1
        w = max(1.0 - self.decay, 1.0 / float(self.count))
        self.mean.mul_(1 - w).add_(w * x.mean(0))
        self.sq_mean.mul_(1 - w).add_(w * (x * x).mean(0))

    def forward(self, x: torch.Tensor, update: bool = False) -> torch.Tensor:
        if x.shape[-1] != self.width:
            raise ValueError(f"expected {self.width} channels, got {x.shape[-1]}")
        if update:
            self.update(x)
        return (x - self.mean) / self.std

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        return y * self.std + self.mean
