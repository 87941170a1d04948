"""Rectified-flow denoiser over slot tokens.

Training draws t ~ U(0,1), noises active slots along the straight path
z_t = t*z0 + (1-t)*eps, and regresses the velocity z0 - eps under the
canonical slot mask. Sampling integrates the learned field with Euler steps
from t=0 (noise) to t=1 (data), updating only gate-selected slots; null
slots carry the frozen null embedding at every step.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .codec import PartCodec, decode_part
from .gating import GateHead, select_active
from .prototypes import PrototypeBank, aligned_summary, assign, inject
from .slots import slot_summary
from .synth import ConditionImage, PartPointCloud
from .view import ViewEncoder


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of t in [0,1]: (B,) -> (B, dim). dim must be even."""
    if dim % 2 != 0:
        raise ValueError("time embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half
    )
    args = 1000.0 * t[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads != 0:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape
        hd = w // self.heads
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, w)
        return self.proj(y)


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(),
            nn.Linear(4 * width, width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class FlowBackbone(nn.Module):
    """Transformer over all P*K slot tokens plus one prepended condition token.

    The condition token is the projected image feature plus a sinusoidal time
    embedding; its output position is discarded.
    """

    def __init__(self, p_max: int, k_tokens: int, c_dim: int, d_feat: int,
                 hidden: int = 128, blocks: int = 4, heads: int = 4):
        super().__init__()
        self.p_max = p_max
        self.k_tokens = k_tokens
        self.c_dim = c_dim
        self.d_feat = d_feat
        self.in_proj = nn.Linear(c_dim, hidden)
        self.slot_pos = nn.Parameter(0.02 * torch.randn(p_max, hidden))
        self.token_pos = nn.Parameter(0.02 * torch.randn(k_tokens, hidden))
        self.cond_proj = nn.Linear(d_feat, hidden)
        self.blocks = nn.ModuleList(
            TransformerBlock(hidden, heads) for _ in range(blocks)
        )
        self.final_norm = nn.LayerNorm(hidden)
        self.out_proj = nn.Linear(hidden, c_dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, z: torch.Tensor, t: torch.Tensor,
                c: torch.Tensor) -> torch.Tensor:
        """(B, P, K, C), (B,), (B, D) -> velocity (B, P, K, C)."""
        b, p, k, _ = z.shape
        if (p, k) != (self.p_max, self.k_tokens):
            raise ValueError(
                f"latent is {p}x{k} slots/tokens, backbone expects "
                f"{self.p_max}x{self.k_tokens}"
            )
        x = self.in_proj(z) + self.slot_pos[:, None, :] + self.token_pos[None, :, :]
        x = x.reshape(b, p * k, -1)
        cond = self.cond_proj(c) + time_embedding(t, x.shape[-1])
        x = torch.cat([cond[:, None, :], x], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        return self.out_proj(x[:, 1:, :]).reshape(b, p, k, self.c_dim)


def velocity(backbone: FlowBackbone, z: torch.Tensor, t,
             c: torch.Tensor) -> torch.Tensor:
    """Single-instance forward: (P, K, C) with scalar t and (D,) feature."""
    if not torch.isfinite(z).all() or not torch.isfinite(c).all():
        raise ValueError("backbone inputs must be finite")
    t_t = torch.as_tensor([float(t)], dtype=z.dtype)
    return backbone(z.unsqueeze(0), t_t, c.unsqueeze(0)).squeeze(0)


def noise(z0: torch.Tensor, eps: torch.Tensor, t,
          m: torch.Tensor) -> torch.Tensor:
    """Straight-path noising of active slots: t*z0 + (1-t)*eps.

    Null slots pass through unchanged, so they keep the null embedding at
    every timestep. Shapes: z0, eps (..., P, K, C); m (..., P); t scalar or
    (...,) broadcastable over leading dims.
    """
    if z0.shape != eps.shape:
        raise ValueError("z0 and eps must share a shape")
    t_t = torch.as_tensor(t, dtype=z0.dtype)
    if ((t_t < 0) | (t_t > 1)).any():
        raise ValueError("t must lie in [0, 1]")
    while t_t.dim() < z0.dim():
        t_t = t_t.unsqueeze(-1)
    zt = t_t * z0 + (1.0 - t_t) * eps
    mask = m.unsqueeze(-1).unsqueeze(-1)
    return mask * zt + (1.0 - mask) * z0


def loss_mflow(v: torch.Tensor, z0: torch.Tensor, eps: torch.Tensor,
               m: torch.Tensor) -> torch.Tensor:
    """Masked flow-matching loss against the straight-path velocity z0 - eps.

    Per object: sum_i m_i sum_j ||v_ij - (z0_ij - eps_ij)||^2. Batched
    inputs are averaged over the batch, realizing the expectation over the
    minibatch's (t, eps) draws.
    """
    if not v.shape == z0.shape == eps.shape:
        raise ValueError("v, z0, eps must share a shape")
    per_token = (v - (z0 - eps)).pow(2).sum(dim=-1)   # (..., P, K)
    per_slot = per_token.sum(dim=-1)                  # (..., P)
    per_object = (m * per_slot).sum(dim=-1)
    return per_object.mean() if per_object.dim() > 0 else per_object


@torch.no_grad()
def sample(backbone: FlowBackbone, active: list[int], c: torch.Tensor,
           steps: int, seed: int, e_null: torch.Tensor,
           bank: PrototypeBank | None = None, beta: float = 0.0,
           ) -> torch.Tensor:
    """Euler integration from noise to data on the active slots.

    Active slots start from standard normal draws, null slots from the null
    embedding; only active slots are updated. From the second step on, slot
    summaries of the running clean estimate z0_hat = z + (1-t)*v_prev feed
    the prototype residual applied to the backbone input (never to the
    state). Deterministic given the seed.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not active:
        raise ValueError("active slot set must be nonempty")
    p, k, cd = backbone.p_max, backbone.k_tokens, backbone.c_dim
    gen = torch.Generator().manual_seed(seed)
    net_dtype = next(backbone.parameters()).dtype
    # the ODE state accumulates in float64; the net runs at its own precision
    z = e_null.detach().to(torch.float64).expand(p, k, cd).clone()
    idx = torch.tensor(sorted(active), dtype=torch.long)
    z[idx] = torch.randn((len(active), k, cd), generator=gen,
                         dtype=torch.float32).to(torch.float64)
    update_mask = torch.zeros(p, 1, 1, dtype=torch.float64)
    update_mask[idx] = 1.0
    dt = 1.0 / steps
    v_prev = None
    for step in range(steps):
        t = step * dt
        z_in = z.to(net_dtype)
        if bank is not None and beta > 0.0 and v_prev is not None:
            z0_hat = z_in + (1.0 - t) * v_prev
            s_tilde = aligned_summary(assign(slot_summary(z0_hat), bank), bank)
            z_in = inject(z_in, s_tilde, beta, sorted(active))
        v = velocity(backbone, z_in, t, c.to(net_dtype))
        z = z + dt * v.to(torch.float64) * update_mask
        v_prev = v
    return z.to(torch.float32)


def generate(image: ConditionImage, codec: PartCodec, view: ViewEncoder,
             gate: GateHead, bank: PrototypeBank | None,
             backbone: FlowBackbone, e_null: torch.Tensor, *, tau: float,
             steps: int, seed: int, beta: float,
             active_override: list[int] | None = None,
             ) -> tuple[list[PartPointCloud], dict]:
    """Full pipeline: render -> gate -> sample -> decode each active slot.

    active_override bypasses the gate's slot selection (used when gating is
    ablated and the part count is supplied externally).
    """
    pixels = torch.as_tensor(image.pixels, dtype=torch.float32)
    with torch.no_grad():
        f = view(pixels.unsqueeze(0)).squeeze(0)
        alpha = gate(f.unsqueeze(0)).squeeze(0)
    active = sorted(active_override) if active_override is not None \
        else select_active(alpha, tau)
    z = sample(backbone, active, f, steps, seed, e_null, bank=bank, beta=beta)
    parts = [decode_part(z[i], codec, part_index=i) for i in active]
    info = {
        "active_slots": active,
        "alpha": [round(a, 6) for a in alpha.tolist()],
        "seed": seed,
    }
    return parts, info
