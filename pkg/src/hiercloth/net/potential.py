"""The incremental potential as a differentiable torch loss.

The numpy energy supplies value and analytic gradients with respect to all
three frames; this module wires them into autograd so the potential can be
accumulated over an unrolled sequence of network predictions.
"""
from __future__ import annotations

from typing import Optional

import torch

from ..energy import BodyFrames, CollisionSet, EnergyBreakdown, Physics, SimState, total_potential


class _Potential(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x_next, x_curr, x_prev, evaluate, holder):
        bd = evaluate(x_next.detach().numpy(), x_curr.detach().numpy(), x_prev.detach().numpy())
        holder.append(bd)
        ctx.save_for_backward(*(torch.as_tensor(g, dtype=x_next.dtype) for g in (bd.gradient, bd.grad_curr, bd.grad_prev)))
        return torch.as_tensor(bd.total, dtype=x_next.dtype)

    @staticmethod
    def backward(ctx, g):
        gn, gc, gp = ctx.saved_tensors
        return g * gn, g * gc, g * gp, None, None


def potential_loss(x_next: torch.Tensor, x_curr: torch.Tensor, x_prev: torch.Tensor, physics: Physics, dt: float,
                   alpha: float = 1.0, body: Optional[BodyFrames] = None,
                   cset: Optional[CollisionSet] = None) -> tuple[torch.Tensor, EnergyBreakdown]:
    """Total potential of ``x_next`` given the history frames, differentiable in all three."""
    holder = []

    def evaluate(xn, xc, xp):
        return total_potential(xn, SimState(xp, xc, dt, alpha), physics, body, cset, with_history=True)

    loss = _Potential.apply(x_next, x_curr, x_prev, evaluate, holder)
    return loss, holder[0]
