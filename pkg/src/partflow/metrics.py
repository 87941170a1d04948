"""Point-cloud evaluation metrics.

Conventions fixed here and pinned by the oracle tests:
- Chamfer: squared Euclidean distances, symmetric sum of per-set means.
- F-score: plain Euclidean threshold, defaults to 0.1 in the canonical
  [-0.5, 0.5]^3 frame; 0 when precision + recall is 0.
- Part overlap: IoU of point-occupancy sets on a shared voxel grid
  (default 64^3 over the canonical cube), averaged over unordered pairs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_GRID_RESOLUTION = 64
DEFAULT_FSCORE_TAU = 0.1
CANONICAL_BOUNDS = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


def _as_points(a, name: str) -> np.ndarray:
    pts = np.asarray(a, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.isfinite(pts).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    return pts


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def chamfer_l2(a, b) -> float:
    """Symmetric sum of mean squared nearest-neighbor distances."""
    pa = _as_points(a, "a")
    pb = _as_points(b, "b")
    d = _sq_dists(pa, pb)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def fscore(pred, gt, tau: float = DEFAULT_FSCORE_TAU) -> float:
    """Harmonic mean of precision and recall under a Euclidean threshold."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    pp = _as_points(pred, "pred")
    pg = _as_points(gt, "gt")
    d = np.sqrt(_sq_dists(pp, pg))
    precision = float((d.min(axis=1) <= tau).mean())
    recall = float((d.min(axis=0) <= tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class OccupancyGrid:
    """Set of occupied cells of a regular grid over an axis-aligned box."""

    resolution: int
    cells: np.ndarray  # (resolution, resolution, resolution) bool
    bounds: tuple
    n_clamped: int = 0  # points that fell outside bounds and were clamped in

    def occupied_count(self) -> int:
        return int(self.cells.sum())


def voxelize(points, resolution: int = DEFAULT_GRID_RESOLUTION,
             bounds=CANONICAL_BOUNDS) -> OccupancyGrid:
    """Mark every half-open cell containing at least one point.

    Points exactly on the upper boundary clamp into the last cell;
    out-of-bounds points are clamped into the grid and counted.
    """
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    pts = _as_points(points, "points")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if not (hi > lo).all():
        raise ValueError("bounds must be a nondegenerate box")
    idx = np.floor((pts - lo) / (hi - lo) * resolution).astype(np.int64)
    clamped = np.clip(idx, 0, resolution - 1)
    outside = (pts < lo) | (pts > hi)
    n_clamped = int(outside.any(axis=1).sum())
    cells = np.zeros((resolution,) * 3, dtype=bool)
    cells[clamped[:, 0], clamped[:, 1], clamped[:, 2]] = True
    return OccupancyGrid(resolution=int(resolution), cells=cells,
                         bounds=(tuple(lo), tuple(hi)), n_clamped=n_clamped)


def _pairwise_ious(part_clouds, resolution, bounds):
    grids = [voxelize(p, resolution, bounds).cells for p in part_clouds]
    ious = []
    for i in range(len(grids)):
        for j in range(i + 1, len(grids)):
            inter = np.logical_and(grids[i], grids[j]).sum()
            union = np.logical_or(grids[i], grids[j]).sum()
            ious.append(float(inter) / float(union) if union else 0.0)
    return ious


def mean_pairwise_iou(part_clouds, resolution: int = DEFAULT_GRID_RESOLUTION,
                      bounds=CANONICAL_BOUNDS) -> float:
    """Mean occupancy IoU over unordered part pairs; 0 for fewer than 2 parts."""
    if len(part_clouds) < 1:
        raise ValueError("need at least one part")
    if len(part_clouds) < 2:
        return 0.0
    return float(np.mean(_pairwise_ious(part_clouds, resolution, bounds)))


def max_pairwise_iou(part_clouds, resolution: int = DEFAULT_GRID_RESOLUTION,
                     bounds=CANONICAL_BOUNDS) -> float:
    """Largest occupancy IoU over unordered part pairs; 0 for fewer than 2."""
    if len(part_clouds) < 2:
        return 0.0
    return float(max(_pairwise_ious(part_clouds, resolution, bounds)))


METRICS_SCHEMA_VERSION = 1


@dataclass
class MetricsReport:
    chamfer_l2: float
    fscore: float
    mean_pair_iou: float
    gate_count_accuracy: float
    gate_count_mae: float
    n_objects: int = 0
    gate_mode: str = "predicted"  # "predicted" | "ground-truth" | "passthrough"

    def __post_init__(self):
        for name in ("chamfer_l2", "fscore", "mean_pair_iou",
                     "gate_count_accuracy", "gate_count_mae"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        for name in ("fscore", "mean_pair_iou", "gate_count_accuracy"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.chamfer_l2 < 0 or self.gate_count_mae < 0:
            raise ValueError("chamfer_l2 and gate_count_mae must be >= 0")

    def to_dict(self) -> dict:
        d = {"schema_version": METRICS_SCHEMA_VERSION}
        d.update(dataclasses.asdict(self))
        return d

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def table(self) -> str:
        rows = [
            ("chamfer_l2", self.chamfer_l2),
            ("fscore", self.fscore),
            ("mean_pair_iou", self.mean_pair_iou),
            ("gate_count_accuracy", self.gate_count_accuracy),
            ("gate_count_mae", self.gate_count_mae),
        ]
        lines = [f"{name:<22}{value:.6f}" for name, value in rows]
        lines.append(f"{'n_objects':<22}{self.n_objects}")
        lines.append(f"{'gate_mode':<22}{self.gate_mode}")
        return "\n".join(lines)
