"""Desk-scale benchmark probe: times the default end-to-end run and prints
every acceptance-relevant number. Not part of the package deliverable tests;
used while calibrating."""

import json
import sys
import time
from pathlib import Path

import torch

torch.set_num_threads(1)

from partflow.checkpoint import bundle_from_checkpoint, load_checkpoint
from partflow.config import TrainConfig
from partflow.evaluate import evaluate_model
from partflow.synth import GeneratorSpec, generate_dataset
from partflow.training import codec_heldout_chamfer, run_training

out_root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/desk")
out_root.mkdir(parents=True, exist_ok=True)

cfg = TrainConfig(seed=0)
spec = GeneratorSpec(min_parts=cfg.min_parts, max_parts=cfg.max_parts,
                     p_max=cfg.p_max, points_per_part=cfg.points_per_part,
                     render_size=cfg.render_size, iou_cap=cfg.iou_cap)

t0 = time.time()
train_items = generate_dataset(spec, 512, 1000)
heldout_items = generate_dataset(spec, 64, 777000)
print(f"[data] {time.time()-t0:.1f}s", flush=True)

t1 = time.time()
paths = run_training(cfg, train_items, out_root / "full", stages="all")
print(f"[train full] {time.time()-t1:.1f}s", flush=True)

ckpt = load_checkpoint(paths[2])
bundle = bundle_from_checkpoint(ckpt)
print(f"[codec] heldout chamfer = {codec_heldout_chamfer(bundle, heldout_items):.6f}",
      flush=True)

t2 = time.time()
report, recs = evaluate_model(bundle, cfg, heldout_items)
print(f"[eval] {time.time()-t2:.1f}s", flush=True)
print(report.table(), flush=True)

log = [json.loads(line) for line in
       (out_root / "full" / "train_log.jsonl").read_text().splitlines()]
flow = [r["loss_mflow"] for r in log if r["stage"] == 2]
smooth = lambda xs: sum(xs) / len(xs)
print(f"[flow trend] first5={smooth(flow[:5]):.3f} last5={smooth(flow[-5:]):.3f}",
      flush=True)
print(f"[total] {time.time()-t0:.1f}s", flush=True)
