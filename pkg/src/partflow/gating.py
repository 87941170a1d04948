"""Slot gating: per-slot activation probabilities from the image feature.

The gate decides how many (and which) slots to use per instance. It is
supervised against the canonical slot mask and part count, never against
view-dependent visibility, and its losses never touch the flow backbone.
"""

from __future__ import annotations

import torch
import torch.nn as nn

ALPHA_EPS = 1e-7  # activations are clamped to [eps, 1-eps] for loss stability


class GateHead(nn.Module):
    def __init__(self, d_feat: int, p_max: int, hidden: int = 64):
        super().__init__()
        self.p_max = p_max
        self.net = nn.Sequential(
            nn.Linear(d_feat, hidden), nn.ReLU(),
            nn.Linear(hidden, p_max),
        )

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        """(B, D) -> (B, P) activation probabilities in (0, 1)."""
        return torch.sigmoid(self.net(f)).clamp(ALPHA_EPS, 1.0 - ALPHA_EPS)


def gate_forward(f: torch.Tensor, gate: GateHead) -> torch.Tensor:
    """Single-feature convenience wrapper: (D,) -> (P,)."""
    with torch.no_grad():
        return gate(f.unsqueeze(0)).squeeze(0)


def loss_ce(alpha: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Slot-wise binary cross-entropy against the canonical mask.

    Mean over the P_max slots; batched inputs are averaged over the batch.
    """
    if alpha.shape != m.shape:
        raise ValueError(f"shape mismatch: {tuple(alpha.shape)} vs {tuple(m.shape)}")
    a = alpha.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS)
    per_slot = -(m * torch.log(a) + (1.0 - m) * torch.log(1.0 - a))
    return per_slot.mean(dim=-1).mean()


def loss_count(alpha: torch.Tensor, n_obj) -> torch.Tensor:
    """Squared error between the activation sum and the canonical part count."""
    n = torch.as_tensor(n_obj, dtype=alpha.dtype)
    return (alpha.sum(dim=-1) - n).pow(2).mean()


def loss_gate(alpha: torch.Tensor, m: torch.Tensor, n_obj, lambda_ce: float,
              lambda_count: float) -> torch.Tensor:
    """Weighted sum of the activation and count losses."""
    if lambda_ce < 0 or lambda_count < 0:
        raise ValueError("loss weights must be >= 0")
    return lambda_ce * loss_ce(alpha, m) + lambda_count * loss_count(alpha, n_obj)


def select_active(alpha: torch.Tensor, tau: float) -> list[int]:
    """Slots with activation above tau; falls back to the argmax slot.

    Generation needs at least one slot, so an all-below-threshold gate output
    selects the single most activated slot.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if alpha.dim() != 1:
        raise ValueError("select_active expects a single (P,) activation vector")
    indices = [i for i, a in enumerate(alpha.tolist()) if a > tau]
    if not indices:
        indices = [int(alpha.argmax().item())]
    return indices
