"""Part codec: point cloud -> K latent tokens -> point cloud.

A deterministic autoencoder. The encoder is a pointwise feature map followed
by max pooling, so it is exactly permutation-invariant over input points; the
decoder emits a fixed number of points. Trained once on individual parts with
a Chamfer objective, then frozen for all later stages.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .errors import TrainingDivergedError
from .synth import PartPointCloud


class PartCodec(nn.Module):
    def __init__(self, k_tokens: int, c_dim: int, points_per_part: int,
                 decoder_hidden: int = 256):
        super().__init__()
        self.k_tokens = k_tokens
        self.c_dim = c_dim
        self.points_per_part = points_per_part
        self.enc_point = nn.Sequential(
            nn.Linear(3, 64), nn.ReLU(),
            nn.Linear(64, 128), nn.ReLU(),
        )
        self.enc_proj = nn.Linear(128, k_tokens * c_dim)
        self.dec = nn.Sequential(
            nn.Linear(k_tokens * c_dim, decoder_hidden), nn.ReLU(),
            nn.Linear(decoder_hidden, points_per_part * 3),
        )
        # fixed output standardization, calibrated once after training so the
        # denoiser sees unit-scale tokens; cancels exactly in decode(encode(.))
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        """(B, N, 3) -> (B, K, C); invariant to point order within each cloud."""
        if points.shape[-1] != 3:
            raise ValueError(f"points must end in dim 3, got {tuple(points.shape)}")
        feat = self.enc_point(points)            # (B, N, 128)
        pooled = feat.max(dim=-2).values         # (B, 128)
        tokens = self.enc_proj(pooled) / self.latent_scale
        return tokens.reshape(*points.shape[:-2], self.k_tokens, self.c_dim)

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, K, C) -> (B, points_per_part, 3)."""
        if tokens.shape[-2:] != (self.k_tokens, self.c_dim):
            raise ValueError(
                f"tokens must end in ({self.k_tokens}, {self.c_dim}), "
                f"got {tuple(tokens.shape)}"
            )
        flat = tokens.reshape(*tokens.shape[:-2], self.k_tokens * self.c_dim)
        out = self.dec(flat)
        return out.reshape(*tokens.shape[:-2], self.points_per_part, 3)


def encode_part(pc: PartPointCloud, codec: PartCodec) -> torch.Tensor:
    """Encode one part to a (K, C) token matrix with frozen weights."""
    pts = torch.as_tensor(np.asarray(pc.points), dtype=next(codec.parameters()).dtype)
    if pts.shape[0] != codec.points_per_part:
        raise ValueError(
            f"part has {pts.shape[0]} points, codec expects {codec.points_per_part}"
        )
    with torch.no_grad():
        return codec.encode(pts.unsqueeze(0)).squeeze(0)


def decode_part(tokens: torch.Tensor, codec: PartCodec,
                part_index: int = 0, type_id: int = 0) -> PartPointCloud:
    """Decode a (K, C) token matrix back to a fixed-size part cloud."""
    if not torch.isfinite(tokens).all():
        raise ValueError("tokens contain non-finite values")
    with torch.no_grad():
        pts = codec.decode(tokens.unsqueeze(0)).squeeze(0)
    return PartPointCloud(points=pts.numpy().astype(np.float32),
                          type_id=type_id, part_index=part_index)


def chamfer_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Differentiable batched Chamfer, same convention as metrics.chamfer_l2."""
    d = torch.cdist(pred, target)   # (B, N, M) Euclidean
    d2 = d.pow(2)
    return (d2.min(dim=-1).values.mean(dim=-1)
            + d2.min(dim=-2).values.mean(dim=-1)).mean()


def train_codec(codec: PartCodec, clouds: torch.Tensor, *, epochs: int,
                lr: float, batch_size: int, noise_std: float = 0.0,
                generator: torch.Generator | None = None,
                log_fn=None) -> list[float]:
    """Fit the codec on a (N_parts, n_pts, 3) stack of part clouds.

    Returns the mean Chamfer loss per epoch. Small Gaussian noise is added to
    the latent tokens during training for robustness; it is never used at
    inference. Raises TrainingDivergedError if the loss goes non-finite.
    """
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    n = clouds.shape[0]
    losses = []
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=generator)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            batch = clouds[perm[start:start + batch_size]]
            tokens = codec.encode(batch)
            if noise_std > 0:
                tokens = tokens + noise_std * torch.randn(
                    tokens.shape, generator=generator, dtype=tokens.dtype)
            recon = codec.decode(tokens)
            loss = chamfer_loss(recon, batch)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(
                    f"codec loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        losses.append(total / max(batches, 1))
        if log_fn is not None:
            log_fn(epoch, losses[-1])
    return losses
