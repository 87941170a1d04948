"""Surface point samplers for the four geometric primitives.

All samplers return float64 points centered at the origin in a canonical
orientation (height along +y) and take an explicit numpy Generator so the
caller fully controls determinism.
"""

from __future__ import annotations

import numpy as np

BOX, SPHERE, CYLINDER, CONE = 0, 1, 2, 3
N_PRIMITIVE_TYPES = 4


def sample_box(rng: np.random.Generator, n: int, extents) -> np.ndarray:
    """Uniform points on the surface of an axis-aligned box.

    extents = (ex, ey, ez) are full side lengths; faces are picked with
    probability proportional to their area.
    """
    ex, ey, ez = (float(v) for v in extents)
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    # faces: -x, +x, -y, +y, -z, +z
    for axis in range(3):
        lo, hi = 2 * axis, 2 * axis + 1
        for f, sign in ((lo, -0.5), (hi, 0.5)):
            sel = face == f
            other = [a for a in range(3) if a != axis]
            pts[sel, axis] = sign
            pts[sel, other[0]] = u[sel]
            pts[sel, other[1]] = v[sel]
    return pts * np.array([ex, ey, ez])


def sample_sphere(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    """Uniform points on a sphere via normalized Gaussian draws."""
    vec = rng.normal(size=(n, 3))
    norms = np.linalg.norm(vec, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return vec / norms * float(radius)


def sample_cylinder(rng: np.random.Generator, n: int, radius: float,
                    height: float) -> np.ndarray:
    """Uniform points on a closed cylinder (lateral wall plus both caps)."""
    r, h = float(radius), float(height)
    lateral = 2.0 * np.pi * r * h
    cap = np.pi * r * r
    which = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    side = which == 0
    pts[side, 0] = r * np.cos(theta[side])
    pts[side, 2] = r * np.sin(theta[side])
    pts[side, 1] = rng.uniform(-0.5, 0.5, size=side.sum()) * h
    for w, y in ((1, -0.5 * h), (2, 0.5 * h)):
        sel = which == w
        rad = r * np.sqrt(rng.uniform(0.0, 1.0, size=sel.sum()))
        pts[sel, 0] = rad * np.cos(theta[sel])
        pts[sel, 2] = rad * np.sin(theta[sel])
        pts[sel, 1] = y
    return pts


def sample_cone(rng: np.random.Generator, n: int, radius: float,
                height: float) -> np.ndarray:
    """Uniform points on a cone: lateral surface plus base disc.

    Base sits at y = -height/2, apex at y = +height/2.
    """
    r, h = float(radius), float(height)
    slant = np.sqrt(r * r + h * h)
    lateral = np.pi * r * slant
    base = np.pi * r * r
    which = rng.choice(2, size=n, p=np.array([lateral, base]) / (lateral + base))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    lat = which == 0
    # uniform over the lateral surface: radial fraction ~ sqrt(u)
    frac = np.sqrt(rng.uniform(0.0, 1.0, size=lat.sum()))
    pts[lat, 0] = r * frac * np.cos(theta[lat])
    pts[lat, 2] = r * frac * np.sin(theta[lat])
    pts[lat, 1] = 0.5 * h - frac * h
    sel = which == 1
    rad = r * np.sqrt(rng.uniform(0.0, 1.0, size=sel.sum()))
    pts[sel, 0] = rad * np.cos(theta[sel])
    pts[sel, 2] = rad * np.sin(theta[sel])
    pts[sel, 1] = -0.5 * h
    return pts


def sample_primitive(rng: np.random.Generator, type_id: int, n: int,
                     size_x: float, size_y: float) -> np.ndarray:
    """Sample any primitive from two visible dimensions.

    size_x is the full width in x, size_y the full height in y; the z extent
    is derived from size_x so a silhouette along +z determines the shape.
    """
    if type_id == BOX:
        return sample_box(rng, n, (size_x, size_y, 0.75 * size_x))
    if type_id == SPHERE:
        return sample_sphere(rng, n, 0.5 * size_x)
    if type_id == CYLINDER:
        return sample_cylinder(rng, n, 0.5 * size_x, size_y)
    if type_id == CONE:
        return sample_cone(rng, n, 0.5 * size_x, size_y)
    raise ValueError(f"unknown primitive type_id {type_id}")
