"""Fixed-capacity slot tensors: canonical packing, masks, null padding.

A slot tensor holds P_max slots of K tokens with C channels each. Real parts
occupy a prefix of slots in canonical order; the remaining slots are filled
with a frozen null embedding that never receives gradient.
"""

from __future__ import annotations

import torch

from .errors import CapacityError


def init_null_embedding(c_dim: int, generator: torch.Generator | None = None,
                        dtype=torch.float32) -> torch.Tensor:
    """Standard-normal draw, fixed thereafter (a buffer, not a parameter)."""
    return torch.randn(c_dim, generator=generator, dtype=dtype)


def pack_slots(parts_tokens: list[torch.Tensor], p_max: int,
               e_null: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Pack per-part token matrices into (z, mask).

    Slots [0, n) take the inputs in order; slots [n, p_max) hold the null
    embedding broadcast over all K token rows. The null padding is detached,
    so no loss can backpropagate into e_null.
    """
    n = len(parts_tokens)
    if n < 1:
        raise CapacityError("need at least one part")
    if n > p_max:
        raise CapacityError(f"{n} parts exceed slot capacity {p_max}")
    k, c = parts_tokens[0].shape
    if e_null.shape != (c,):
        raise ValueError(f"e_null must have shape ({c},), got {tuple(e_null.shape)}")
    z = e_null.detach().to(parts_tokens[0].dtype).expand(p_max, k, c).clone()
    for i, tok in enumerate(parts_tokens):
        if tok.shape != (k, c):
            raise ValueError("all token matrices must share one (K, C) shape")
        z[i] = tok
    m = torch.zeros(p_max, dtype=z.dtype)
    m[:n] = 1.0
    return z, m


def unpack_slots(z: torch.Tensor, m: torch.Tensor) -> list[torch.Tensor]:
    """Inverse of pack_slots: the token matrices of the masked-in prefix."""
    n = int(m.sum().item())
    return [z[i] for i in range(n)]


def slot_summary(z: torch.Tensor) -> torch.Tensor:
    """Mean over the token axis: (..., P, K, C) -> (..., P, C)."""
    return z.mean(dim=-2)
