"""View encoder: silhouette render -> feature vector.

One shared encoder conditions both the gate head and the flow backbone.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .synth import ConditionImage


class ViewEncoder(nn.Module):
    def __init__(self, render_size: int, d_feat: int, hidden: int = 256):
        super().__init__()
        self.render_size = render_size
        self.d_feat = d_feat
        self.net = nn.Sequential(
            nn.Linear(render_size * render_size, hidden), nn.ReLU(),
            nn.Linear(hidden, d_feat),
        )

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        """(B, H, W) -> (B, D)."""
        h, w = pixels.shape[-2:]
        if h != self.render_size or w != self.render_size:
            raise ValueError(
                f"image is {h}x{w}, encoder expects "
                f"{self.render_size}x{self.render_size}"
            )
        flat = pixels.reshape(*pixels.shape[:-2], h * w)
        return self.net(flat)


def encode_view(img: ConditionImage, view: ViewEncoder) -> torch.Tensor:
    """Encode one render to a (D,) feature with frozen weights."""
    pixels = torch.as_tensor(np.asarray(img.pixels),
                             dtype=next(view.parameters()).dtype)
    with torch.no_grad():
        return view(pixels.unsqueeze(0)).squeeze(0)
