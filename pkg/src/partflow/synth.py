"""Procedural composite objects: primitive parts arranged by templates.

Two template families keep the part count readable from a single +z
silhouette: "desk" objects are a box top over cylinder legs spread along x,
and "totem" objects stack spheres and cones along y with visible gaps.
Depth (z) extents are derived from the visible x/y dimensions and every
part centroid has z = 0, so both the geometry and the canonical slot order
are determined by the rendered view.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import primitives
from .errors import ConfigError
from .metrics import max_pairwise_iou

DEFAULT_IOU_CAP = 0.1
MAX_CANONICAL_PARTS = 16  # objects at or above this part count are filtered out
NORMALIZED_HALF_EXTENT = 0.45


@dataclass
class PartPointCloud:
    """A single part: fixed-size surface point cloud in the object frame."""

    points: np.ndarray  # (n_pts, 3) float32
    type_id: int
    part_index: int

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass
class CompositeObject:
    parts: list[PartPointCloud]
    n_obj: int
    object_id: str
    category_tag: str

    def assembled(self) -> np.ndarray:
        """All part points concatenated into one (N, 3) cloud."""
        return np.concatenate([p.points for p in self.parts], axis=0)


@dataclass
class ConditionImage:
    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    camera_tag: str = "ortho+z"


@dataclass
class GeneratorSpec:
    min_parts: int = 2
    max_parts: int = 6
    p_max: int = 8
    points_per_part: int = 256
    render_size: int = 32
    iou_cap: float = DEFAULT_IOU_CAP

    def __post_init__(self):
        if self.min_parts < 1:
            raise ConfigError(f"min_parts must be >= 1, got {self.min_parts}")
        if self.max_parts < self.min_parts:
            raise ConfigError("max_parts must be >= min_parts")
        if self.max_parts > self.p_max:
            raise ConfigError("max_parts must be <= p_max")
        if self.points_per_part < 1 or self.render_size < 1:
            raise ConfigError("points_per_part and render_size must be >= 1")


def canonical_part_order(parts: list[PartPointCloud]) -> list[PartPointCloud]:
    """Sort parts by (type_id, centroid z, y, x) and renumber part_index."""
    def key(p: PartPointCloud):
        cz, cy, cx = p.centroid()[[2, 1, 0]]
        return (p.type_id, round(float(cz), 9), round(float(cy), 9), round(float(cx), 9))

    ordered = sorted(parts, key=key)
    return [replace(p, part_index=i) for i, p in enumerate(ordered)]


def _normalize_parts(raw_parts: list[np.ndarray]) -> list[np.ndarray]:
    """Jointly center and scale so the assembled cloud fits the canonical cube."""
    assembled = np.concatenate(raw_parts, axis=0)
    lo, hi = assembled.min(axis=0), assembled.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float((hi - lo).max())
    scale = 2.0 * NORMALIZED_HALF_EXTENT / extent if extent > 0 else 1.0
    return [(p - center) * scale for p in raw_parts]


def _gen_desk(rng: np.random.Generator, n_parts: int, n_pts: int):
    """Box top plus (n_parts - 1) cylinder legs at distinct x positions."""
    n_legs = n_parts - 1
    top_w = rng.uniform(0.7, 1.0)
    top_h = rng.uniform(0.06, 0.12)
    top_y = rng.uniform(0.28, 0.4)
    clouds = [primitives.sample_box(rng, n_pts, (top_w, top_h, 0.75 * top_w))
              + np.array([0.0, top_y, 0.0])]
    types = [primitives.BOX]
    leg_r = rng.uniform(0.022, 0.045)
    leg_top = top_y - 0.5 * top_h - 0.02  # clearance keeps parts from interpenetrating
    leg_bottom = -0.42
    leg_h = leg_top - leg_bottom
    span = top_w - 4.0 * leg_r
    if n_legs == 1:
        xs = np.array([0.0])
    else:
        xs = np.linspace(-0.5 * span, 0.5 * span, n_legs)
        xs = xs + rng.uniform(-0.25, 0.25, size=n_legs) * (span / max(n_legs - 1, 1)) * 0.3
    for x in xs:
        leg = primitives.sample_cylinder(rng, n_pts, leg_r, leg_h)
        leg += np.array([x, leg_bottom + 0.5 * leg_h, 0.0])
        clouds.append(leg)
        types.append(primitives.CYLINDER)
    return clouds, types, "desk"


def _gen_totem(rng: np.random.Generator, n_parts: int, n_pts: int):
    """Spheres and cones stacked along y with visible gaps.

    Gaps scale with the stack height so they survive normalization and stay
    above one pixel at the default render size.
    """
    clouds, types = [], []
    y = 0.0
    gap = 0.055 * n_parts
    for _ in range(n_parts):
        type_id = int(rng.choice([primitives.SPHERE, primitives.CONE]))
        r = rng.uniform(0.07, 0.11)
        if type_id == primitives.SPHERE:
            cloud = primitives.sample_sphere(rng, n_pts, r)
            h = 2.0 * r
        else:
            h = 2.2 * r
            cloud = primitives.sample_cone(rng, n_pts, r, h)
        cloud += np.array([0.0, y + 0.5 * h, 0.0])
        clouds.append(cloud)
        types.append(type_id)
        y += h + gap
    return clouds, types, "totem"


def _gen_single(rng: np.random.Generator, n_pts: int):
    type_id = int(rng.integers(0, primitives.N_PRIMITIVE_TYPES))
    size = rng.uniform(0.4, 0.8)
    cloud = primitives.sample_primitive(rng, type_id, n_pts, size, size)
    return [cloud], [type_id], "single"


def gen_object(spec: GeneratorSpec, seed: int) -> CompositeObject:
    """Generate one composite object; a pure function of (spec, seed)."""
    rng = np.random.default_rng(seed)
    n_parts = int(rng.integers(spec.min_parts, spec.max_parts + 1))
    if n_parts == 1:
        clouds, types, tag = _gen_single(rng, spec.points_per_part)
    elif rng.uniform() < 0.5:
        clouds, types, tag = _gen_desk(rng, n_parts, spec.points_per_part)
    else:
        clouds, types, tag = _gen_totem(rng, n_parts, spec.points_per_part)
    clouds = _normalize_parts(clouds)
    parts = [
        PartPointCloud(points=c.astype(np.float32), type_id=t, part_index=i)
        for i, (c, t) in enumerate(zip(clouds, types))
    ]
    parts = canonical_part_order(parts)
    return CompositeObject(
        parts=parts,
        n_obj=n_parts,
        object_id=f"obj{seed:08d}",
        category_tag=tag,
    )


def filter_object(obj: CompositeObject, iou_cap: float = DEFAULT_IOU_CAP) -> bool:
    """Keep objects with a small part count and little part interpenetration."""
    if obj.n_obj >= MAX_CANONICAL_PARTS:
        return False
    if obj.n_obj >= 2 and max_pairwise_iou([p.points for p in obj.parts]) >= iou_cap:
        return False
    return True


def render_silhouette(obj: CompositeObject, render_size: int = 32) -> ConditionImage:
    """Binary orthographic silhouette along +z (z is dropped entirely).

    Pixel (row, col) covers the half-open cell
    [-0.5 + row/H, -0.5 + (row+1)/H) x [-0.5 + col/W, -0.5 + (col+1)/W)
    in (y, x); points on the max boundary clamp into the last cell.
    """
    size = int(render_size)
    img = np.zeros((size, size), dtype=np.float32)
    pts = obj.assembled()
    cols = np.clip(((pts[:, 0] + 0.5) * size).astype(np.int64), 0, size - 1)
    rows = np.clip(((pts[:, 1] + 0.5) * size).astype(np.int64), 0, size - 1)
    img[rows, cols] = 1.0
    return ConditionImage(pixels=img)


def generate_dataset(spec: GeneratorSpec, count: int, seed_base: int,
                     ) -> list[tuple[CompositeObject, ConditionImage]]:
    """Generate `count` filter-passing objects with their renders.

    Seeds are consumed sequentially starting at seed_base; rejected seeds are
    skipped, so the emitted sequence is deterministic in (spec, count,
    seed_base).
    """
    out = []
    seed = int(seed_base)
    while len(out) < count:
        obj = gen_object(spec, seed)
        seed += 1
        if not filter_object(obj, spec.iou_cap):
            continue
        out.append((obj, render_silhouette(obj, spec.render_size)))
    return out
