"""Dataset serialization: ASCII PLY parts, PGM renders, JSON manifest.

Layout under a dataset directory:

    manifest.json
    objects/<object_id>/part_000.ply, part_001.ply, ...
    objects/<object_id>/view.pgm

Coordinates are stored as float32 printed with a round-trip-exact decimal
representation, so write -> read reproduces the stored float32 bits.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .synth import CompositeObject, ConditionImage, PartPointCloud

MANIFEST_VERSION = 1

DatasetItem = tuple[CompositeObject, ConditionImage]


def write_ply(points: np.ndarray, path: Path):
    pts = np.asarray(points, dtype=np.float32)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    # repr of the exact float64 value of each float32 round-trips its bits
    lines += [" ".join(repr(float(v)) for v in row) for row in pts]
    path.write_text("\n".join(lines) + "\n")


def read_ply(path: Path, object_id: str | None = None) -> np.ndarray:
    try:
        raw = path.read_text().splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read part file {path}: {exc}", object_id) from exc
    if not raw or raw[0].strip() != "ply":
        raise DatasetError(f"{path} is not a PLY file", object_id)
    n_vertices = None
    body_start = None
    for i, line in enumerate(raw):
        tokens = line.split()
        if tokens[:2] == ["element", "vertex"]:
            n_vertices = int(tokens[2])
        if line.strip() == "end_header":
            body_start = i + 1
            break
    if n_vertices is None or body_start is None:
        raise DatasetError(f"{path} has a malformed PLY header", object_id)
    body = [line for line in raw[body_start:] if line.strip()]
    if len(body) != n_vertices:
        raise DatasetError(
            f"{path} declares {n_vertices} vertices but has {len(body)} rows",
            object_id,
        )
    try:
        pts = np.array([[float(v) for v in line.split()[:3]] for line in body],
                       dtype=np.float32)
    except ValueError as exc:
        raise DatasetError(f"{path} has a malformed vertex row: {exc}", object_id) from exc
    if pts.size and pts.shape[1] != 3:
        raise DatasetError(f"{path} rows must have 3 coordinates", object_id)
    return pts.reshape(n_vertices, 3)


def write_pgm(image: ConditionImage, path: Path, maxval: int = 255):
    pix = np.asarray(image.pixels, dtype=np.float64)
    levels = np.rint(np.clip(pix, 0.0, 1.0) * maxval).astype(np.int64)
    h, w = levels.shape
    rows = [" ".join(str(v) for v in row) for row in levels]
    path.write_text(f"P2\n{w} {h}\n{maxval}\n" + "\n".join(rows) + "\n")


def read_pgm(path: Path, object_id: str | None = None) -> ConditionImage:
    try:
        tokens = []
        for line in path.read_text().splitlines():
            stripped = line.split("#", 1)[0]
            tokens.extend(stripped.split())
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}", object_id) from exc
    if not tokens or tokens[0] != "P2":
        raise DatasetError(f"{path} is not an ASCII PGM (P2) file", object_id)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        values = np.array([int(v) for v in tokens[4:]], dtype=np.float64)
    except (IndexError, ValueError) as exc:
        raise DatasetError(f"{path} has a malformed PGM body: {exc}", object_id) from exc
    if values.size != w * h:
        raise DatasetError(
            f"{path} declares {w * h} pixels but has {values.size}", object_id
        )
    pixels = (values.reshape(h, w) / maxval).astype(np.float32)
    return ConditionImage(pixels=pixels)


def write_dataset(items: list[DatasetItem], out_dir: str | Path,
                  points_per_part: int | None = None,
                  render_size: int | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if items:
        points_per_part = points_per_part or items[0][0].parts[0].points.shape[0]
        render_size = render_size or items[0][1].pixels.shape[0]
    records = []
    for obj, image in items:
        obj_dir = out / "objects" / obj.object_id
        obj_dir.mkdir(parents=True, exist_ok=True)
        part_files = []
        for i, part in enumerate(obj.parts):
            rel = f"objects/{obj.object_id}/part_{i:03d}.ply"
            write_ply(part.points, out / rel)
            part_files.append(rel)
        image_rel = f"objects/{obj.object_id}/view.pgm"
        write_pgm(image, out / image_rel)
        records.append({
            "object_id": obj.object_id,
            "n_obj": obj.n_obj,
            "category_tag": obj.category_tag,
            "part_files": part_files,
            "type_ids": [p.type_id for p in obj.parts],
            "image_file": image_rel,
        })
    manifest = {
        "format_version": MANIFEST_VERSION,
        "points_per_part": points_per_part,
        "render_size": render_size,
        "objects": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_dataset(data_dir: str | Path) -> list[DatasetItem]:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(
            f"unsupported manifest version {manifest.get('format_version')!r}"
        )
    points_per_part = manifest.get("points_per_part")
    items: list[DatasetItem] = []
    for rec in manifest.get("objects", []):
        object_id = rec.get("object_id", "<missing id>")
        part_files = rec["part_files"]
        type_ids = rec["type_ids"]
        if len(part_files) != rec["n_obj"] or len(type_ids) != rec["n_obj"]:
            raise DatasetError(
                f"object {object_id}: n_obj={rec['n_obj']} does not match "
                f"{len(part_files)} part files / {len(type_ids)} type ids",
                object_id,
            )
        parts = []
        for i, rel in enumerate(part_files):
            path = root / rel
            if not path.is_file():
                raise DatasetError(
                    f"object {object_id}: missing part file {rel}", object_id
                )
            pts = read_ply(path, object_id)
            if points_per_part is not None and pts.shape[0] != points_per_part:
                raise DatasetError(
                    f"object {object_id}: part {i} has {pts.shape[0]} points, "
                    f"manifest says {points_per_part}",
                    object_id,
                )
            parts.append(PartPointCloud(points=pts, type_id=int(type_ids[i]),
                                        part_index=i))
        image_path = root / rec["image_file"]
        if not image_path.is_file():
            raise DatasetError(
                f"object {object_id}: missing image file {rec['image_file']}",
                object_id,
            )
        image = read_pgm(image_path, object_id)
        items.append((
            CompositeObject(parts=parts, n_obj=int(rec["n_obj"]),
                            object_id=object_id,
                            category_tag=rec.get("category_tag", "")),
            image,
        ))
    return items
