import numpy as np
import pytest
import torch

from partflow.config import TrainConfig
from partflow.synth import GeneratorSpec, generate_dataset

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def tiny_config():
    """Small-but-real config for fast training-path tests."""
    return TrainConfig(
        seed=5,
        p_max=4, k_tokens=2, c_dim=8, m_protos=3, d_feat=16,
        points_per_part=32, render_size=16,
        min_parts=1, max_parts=3,
        epochs_stage0=2, epochs_stage1=2, epochs_stage2=2,
        batch_size=8,
        backbone_blocks=1, backbone_hidden=16, backbone_heads=2,
        sample_steps=4,
    )


@pytest.fixture
def tiny_items(tiny_config):
    spec = GeneratorSpec(
        min_parts=tiny_config.min_parts, max_parts=tiny_config.max_parts,
        p_max=tiny_config.p_max, points_per_part=tiny_config.points_per_part,
        render_size=tiny_config.render_size,
    )
    return generate_dataset(spec, 12, 4000)


def fd_gradient(fn, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central finite differences of a scalar fn w.r.t. every entry of x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_err(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-3) -> float:
    """Elementwise |a-b| / max(|a|, |b|, floor), maximized.

    The floor keeps finite-difference noise on near-zero coordinates from
    dominating; any real gradient bug shows up far above it.
    """
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()),
                          torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max().item())
