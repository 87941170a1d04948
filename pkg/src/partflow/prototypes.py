"""Prototype bank: shared part-level priors in the slot-summary space.

Slot summaries soft-assign to M learnable prototype vectors by scaled
dot-product softmax; the resulting convex combination is injected back into
the slot tokens as a small residual, nudging recurring part shapes toward
shared prototypes without bottlenecking fine detail.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

ENT_EPS = 1e-12  # assignment weights are clamped before the log


class PrototypeBank(nn.Module):
    def __init__(self, m_protos: int, c_dim: int, init_std: float = 0.1,
                 generator: torch.Generator | None = None):
        super().__init__()
        if m_protos < 1:
            raise ValueError(f"m_protos must be >= 1, got {m_protos}")
        p = init_std * torch.randn(m_protos, c_dim, generator=generator)
        self.p = nn.Parameter(p)

    @property
    def m_protos(self) -> int:
        return self.p.shape[0]

    @property
    def c_dim(self) -> int:
        return self.p.shape[1]


def assign(s: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """Soft assignment of summaries to prototypes: (..., P, C) -> (..., P, M).

    Row-stable softmax over s_i . p_k / sqrt(C).
    """
    c = bank.c_dim
    if s.shape[-1] != c:
        raise ValueError(f"summary dim {s.shape[-1]} != prototype dim {c}")
    logits = s @ bank.p.transpose(0, 1) / math.sqrt(c)
    logits = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(logits)
    return e / e.sum(dim=-1, keepdim=True)


def aligned_summary(w: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """Convex combination of prototypes per slot: (..., P, M) -> (..., P, C)."""
    if w.shape[-1] != bank.m_protos:
        raise ValueError(f"assignment has {w.shape[-1]} columns, bank has "
                         f"{bank.m_protos} prototypes")
    return w @ bank.p


def _active_mask(z: torch.Tensor, active) -> torch.Tensor:
    p = z.shape[-3]
    if isinstance(active, torch.Tensor):
        mask = active.to(z.dtype)
        if mask.shape[-1] != p:
            raise ValueError(f"active mask must have last dim {p}")
        return mask
    mask = torch.zeros(p, dtype=z.dtype)
    for i in active:
        if not 0 <= i < p:
            raise ValueError(f"active slot index {i} out of range [0, {p})")
        mask[i] = 1.0
    return mask


def inject(z: torch.Tensor, s_tilde: torch.Tensor, beta: float,
           active) -> torch.Tensor:
    """Residual prototype guidance: add beta * s_tilde_i to every token of
    each active slot. Inactive and null slots pass through; the input is not
    mutated.

    `active` is either a list of slot indices or a {0,1} mask tensor
    broadcastable to (..., P) for batched use.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    mask = _active_mask(z, active)
    return z + beta * mask.unsqueeze(-1).unsqueeze(-1) * s_tilde.unsqueeze(-2)


def loss_rec(s: torch.Tensor, s_tilde: torch.Tensor,
             m: torch.Tensor) -> torch.Tensor:
    """Masked squared error between summaries and their prototype mixtures.

    Sum over real slots per object; batched inputs are averaged over the
    batch.
    """
    if s.shape != s_tilde.shape:
        raise ValueError("s and s_tilde must share a shape")
    per_slot = (s - s_tilde).pow(2).sum(dim=-1)
    return (m * per_slot).sum(dim=-1).mean()


def loss_ent(w: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Masked negative assignment entropy: sum_i m_i sum_k w log w (<= 0)."""
    wl = w.clamp_min(ENT_EPS)
    per_slot = (w * torch.log(wl)).sum(dim=-1)
    return (m * per_slot).sum(dim=-1).mean()


def loss_all(l_rec, l_ent, l_mflow, lambda_ent: float,
             lambda_flow: float):
    """Total objective: reconstruction + weighted entropy + weighted flow."""
    if lambda_ent < 0 or lambda_flow < 0:
        raise ValueError("loss weights must be >= 0")
    return l_rec + lambda_ent * l_ent + lambda_flow * l_mflow
