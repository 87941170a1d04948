"""Checkpoint archive: JSON index plus contiguous binary tensor payload.

File layout:

    [8 bytes little-endian uint64: header length]
    [header: UTF-8 JSON]
    [payload: concatenated little-endian IEEE-754 float32 tensor data]

The header carries the format version, a config snapshot, the training-stage
marker, the step counter, and one index entry per tensor:
{"name", "dtype": "f32", "shape", "byte_offset", "byte_len"} with offsets
relative to the payload start. Tensors are written in sorted-name order so a
given state always produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bundle import ModelBundle, build_bundle, load_named_tensors, named_tensors
from .config import TrainConfig
from .errors import CheckpointError

FORMAT_VERSION = 1
_LEN_STRUCT = struct.Struct("<Q")


@dataclass
class Checkpoint:
    config: TrainConfig
    stage: int  # last completed training stage (0, 1, or 2)
    step: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def checkpoint_from_bundle(bundle: ModelBundle, cfg: TrainConfig, stage: int,
                           step: int) -> Checkpoint:
    tensors = {
        name: t.detach().cpu().to(torch.float32).numpy().copy()
        for name, t in named_tensors(bundle).items()
    }
    return Checkpoint(config=cfg, stage=stage, step=step, tensors=tensors)


def bundle_from_checkpoint(ckpt: Checkpoint) -> ModelBundle:
    bundle = build_bundle(ckpt.config)
    load_named_tensors(
        bundle, {name: torch.from_numpy(arr) for name, arr in ckpt.tensors.items()}
    )
    return bundle


def save_checkpoint(ckpt: Checkpoint, path: str | Path):
    index = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        data = arr.tobytes()
        index.append({
            "name": name,
            "dtype": "f32",
            "shape": list(arr.shape),
            "byte_offset": offset,
            "byte_len": len(data),
        })
        chunks.append(data)
        offset += len(data)
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "stage": ckpt.stage,
        "step": ckpt.step,
        "tensors": index,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LEN_STRUCT.pack(len(header)))
        fh.write(header)
        for data in chunks:
            fh.write(data)


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    blob = p.read_bytes()
    if len(blob) < _LEN_STRUCT.size:
        raise CheckpointError(f"checkpoint {p} is truncated before the header")
    (header_len,) = _LEN_STRUCT.unpack_from(blob)
    header_end = _LEN_STRUCT.size + header_len
    if len(blob) < header_end:
        raise CheckpointError(f"checkpoint {p} has a truncated header")
    try:
        header = json.loads(blob[_LEN_STRUCT.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {p} has a corrupt header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    cfg = TrainConfig.from_dict(header["config"])
    payload = blob[header_end:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        if entry.get("dtype") != "f32":
            raise CheckpointError(
                f"tensor {name} has unsupported dtype {entry.get('dtype')!r}",
                tensor=name,
            )
        start, length = entry["byte_offset"], entry["byte_len"]
        n_values = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        if length != 4 * n_values:
            raise CheckpointError(
                f"tensor {name} declares shape {entry['shape']} "
                f"but {length} payload bytes",
                tensor=name,
            )
        if start + length > len(payload):
            raise CheckpointError(
                f"tensor {name} extends past the end of the payload "
                f"(checkpoint truncated?)",
                tensor=name,
            )
        arr = np.frombuffer(payload, dtype="<f4", count=n_values, offset=start)
        tensors[name] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(config=cfg, stage=int(header["stage"]),
                      step=int(header["step"]), tensors=tensors)
