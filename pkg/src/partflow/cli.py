"""Command-line interface.

Subcommands: gen-data, train, sample, eval, ablate, inspect-gates,
export-prototypes. Exit codes: 0 success, 2 configuration problem, 3 dataset
problem, 4 checkpoint problem, 1 anything else; failures print one JSON line
to stderr. All commands are deterministic under a fixed --seed; torch runs
single-threaded (parallelism, where offered, is process-level via --jobs).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path

import torch

from .checkpoint import bundle_from_checkpoint, load_checkpoint
from .config import TrainConfig
from .dataset_io import read_dataset, write_dataset, write_ply
from .errors import (CheckpointError, ConfigError, DatasetError,
                     TrainingDivergedError)
from .evaluate import aggregate_records, eval_single, evaluate_model
from .flow import generate
from .gating import select_active
from .prototypes import assign
from .slots import slot_summary
from .synth import GeneratorSpec, filter_object, gen_object, render_silhouette
from .training import build_latent_dataset, run_training

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_CHECKPOINT = 4


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for flag in ("disable_gate", "disable_bank", "disable_warmup"):
        if getattr(args, flag, False):
            setattr(cfg, flag, True)
    if getattr(args, "steps", None) is not None:
        cfg.sample_steps = args.steps
    if getattr(args, "tau", None) is not None:
        cfg.tau = args.tau
    cfg.validate()
    return cfg


def _spec_from_config(cfg: TrainConfig) -> GeneratorSpec:
    return GeneratorSpec(
        min_parts=cfg.min_parts, max_parts=cfg.max_parts, p_max=cfg.p_max,
        points_per_part=cfg.points_per_part, render_size=cfg.render_size,
        iou_cap=cfg.iou_cap,
    )


def _gen_worker(spec: GeneratorSpec, seed: int):
    obj = gen_object(spec, seed)
    if not filter_object(obj, spec.iou_cap):
        return None
    return obj, render_silhouette(obj, spec.render_size)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    spec = _spec_from_config(cfg)
    items = []
    seed = args.seed if args.seed is not None else cfg.seed
    if args.jobs <= 1:
        while len(items) < args.count:
            result = _gen_worker(spec, seed)
            seed += 1
            if result is not None:
                items.append(result)
    else:
        # over-generate in deterministic seed chunks, keep the first `count`
        with concurrent.futures.ProcessPoolExecutor(args.jobs) as pool:
            while len(items) < args.count:
                chunk = range(seed, seed + max(args.jobs * 8, args.count))
                seed = chunk.stop
                for result in pool.map(_gen_worker, [spec] * len(chunk), chunk):
                    if result is not None and len(items) < args.count:
                        items.append(result)
    write_dataset(items, args.out, points_per_part=cfg.points_per_part,
                  render_size=cfg.render_size)
    print(f"wrote {len(items)} objects to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    items = read_dataset(args.data)
    start = load_checkpoint(args.ckpt) if args.ckpt else None
    paths = run_training(cfg, items, args.out, stages=args.stage,
                         start_ckpt=start)
    for stage, path in sorted(paths.items()):
        print(f"stage {stage} checkpoint: {path}")
    return EXIT_OK


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    if args.steps is not None:
        cfg.sample_steps = args.steps
    if args.tau is not None:
        cfg.tau = args.tau
    bundle = bundle_from_checkpoint(ckpt).eval_mode()
    items = read_dataset(args.data)
    if args.object_id is not None:
        items = [it for it in items if it[0].object_id == args.object_id]
        if not items:
            raise DatasetError(f"object {args.object_id} not in dataset",
                               args.object_id)
    out = Path(args.out)
    base_seed = args.seed if args.seed is not None else cfg.seed
    for i, (obj, image) in enumerate(items):
        active_override = list(range(obj.n_obj)) if cfg.disable_gate else None
        parts, info = generate(
            image, bundle.codec, bundle.view, bundle.gate,
            None if cfg.disable_bank else bundle.bank, bundle.backbone,
            bundle.e_null, tau=cfg.tau, steps=cfg.sample_steps,
            seed=base_seed + i, beta=cfg.beta,
            active_override=active_override,
        )
        obj_dir = out / obj.object_id
        obj_dir.mkdir(parents=True, exist_ok=True)
        for j, part in enumerate(parts):
            write_ply(part.points, obj_dir / f"part_{j:03d}.ply")
        record = {"object_id": obj.object_id, **info}
        (obj_dir / "record.json").write_text(json.dumps(record, indent=2) + "\n")
        print(json.dumps(record))
    return EXIT_OK


def _eval_worker(ckpt_path: str, data_dir: str, indices: list[int],
                 base_seed: int, steps: int, tau: float,
                 oracle_passthrough: bool) -> list[dict]:
    torch.set_num_threads(1)
    ckpt = load_checkpoint(ckpt_path)
    bundle = bundle_from_checkpoint(ckpt).eval_mode()
    items = read_dataset(data_dir)
    with torch.no_grad():
        return [
            eval_single(bundle, ckpt.config, items[i], i, base_seed=base_seed,
                        steps=steps, tau=tau,
                        oracle_passthrough=oracle_passthrough)
            for i in indices
        ]


def _run_eval(ckpt_path: str, data_dir: str, *, steps=None, tau=None,
              base_seed=None, oracle_passthrough=False, jobs=1):
    ckpt = load_checkpoint(ckpt_path)
    cfg = ckpt.config
    steps = cfg.sample_steps if steps is None else steps
    tau = cfg.tau if tau is None else tau
    base_seed = cfg.seed if base_seed is None else base_seed
    if jobs <= 1:
        bundle = bundle_from_checkpoint(ckpt)
        items = read_dataset(data_dir)
        return evaluate_model(bundle, cfg, items, base_seed=base_seed,
                              steps=steps, tau=tau,
                              oracle_passthrough=oracle_passthrough)
    n = len(read_dataset(data_dir))
    chunks = [list(range(start, n, jobs)) for start in range(jobs)]
    records: list[dict | None] = [None] * n
    with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
        futures = [
            pool.submit(_eval_worker, str(ckpt_path), str(data_dir), chunk,
                        base_seed, steps, tau, oracle_passthrough)
            for chunk in chunks if chunk
        ]
        for chunk, fut in zip([c for c in chunks if c], futures):
            for idx, rec in zip(chunk, fut.result()):
                records[idx] = rec
    records = [r for r in records if r is not None]
    if oracle_passthrough:
        gate_mode = "passthrough"
    elif cfg.disable_gate:
        gate_mode = "ground-truth"
    else:
        gate_mode = "predicted"
    return aggregate_records(records, gate_mode), records


def cmd_eval(args) -> int:
    report, records = _run_eval(
        args.ckpt, args.data, steps=args.steps, tau=args.tau,
        base_seed=args.seed, oracle_passthrough=args.oracle_passthrough,
        jobs=args.jobs,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "metrics.json")
    (out / "per_object.json").write_text(json.dumps(records, indent=2) + "\n")
    print(report.table())
    return EXIT_OK


ABLATION_ROWS = [
    ("no_gate", {"disable_gate": True}),
    ("no_bank", {"disable_bank": True}),
    ("no_warmup", {"disable_warmup": True}),
    ("full", {}),
]


def cmd_ablate(args) -> int:
    base_cfg = _load_config(args)
    items = read_dataset(args.data)
    heldout = read_dataset(args.heldout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, overrides in ABLATION_ROWS:
        cfg = TrainConfig.from_dict({**base_cfg.to_dict(), **overrides})
        run_dir = out / name
        paths = run_training(cfg, items, run_dir, stages="all")
        final = load_checkpoint(paths[2])
        bundle = bundle_from_checkpoint(final)
        report, _ = evaluate_model(bundle, cfg, heldout)
        report.save(run_dir / "metrics.json")
        rows.append({
            "name": name,
            "gate": not cfg.disable_gate,
            "bank": not cfg.disable_bank,
            "warmup": not cfg.disable_warmup,
            "chamfer_l2": report.chamfer_l2,
            "fscore": report.fscore,
            "mean_pair_iou": report.mean_pair_iou,
            "gate_count_accuracy": report.gate_count_accuracy,
        })
    (out / "ablation_results.json").write_text(json.dumps(rows, indent=2) + "\n")
    header = (f"{'setting':<12}{'gate':<6}{'bank':<6}{'warmup':<8}"
              f"{'iou':<8}{'fscore':<8}{'cd':<8}")
    print(header)
    for row in rows:
        print(f"{row['name']:<12}{str(row['gate']):<6}{str(row['bank']):<6}"
              f"{str(row['warmup']):<8}{row['mean_pair_iou']:<8.3f}"
              f"{row['fscore']:<8.3f}{row['chamfer_l2']:<8.3f}")
    return EXIT_OK


def cmd_inspect_gates(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    bundle = bundle_from_checkpoint(ckpt).eval_mode()
    items = read_dataset(args.data)
    tau = args.tau if args.tau is not None else ckpt.config.tau
    for obj, image in items:
        pixels = torch.from_numpy(image.pixels).to(torch.float32)
        with torch.no_grad():
            alpha = bundle.gate(bundle.view(pixels.unsqueeze(0))).squeeze(0)
        mask = [1 if i < obj.n_obj else 0 for i in range(ckpt.config.p_max)]
        print(json.dumps({
            "object_id": obj.object_id,
            "alpha": [round(a, 6) for a in alpha.tolist()],
            "selected": select_active(alpha, tau),
            "mask": mask,
        }))
    return EXIT_OK


def cmd_export_prototypes(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    bundle = bundle_from_checkpoint(ckpt).eval_mode()
    items = read_dataset(args.data)
    data = build_latent_dataset(bundle, ckpt.config, items)
    with torch.no_grad():
        w = assign(slot_summary(data.z0), bundle.bank)
    payload = {
        "prototypes": bundle.bank.p.detach().tolist(),
        "assignments": [
            {
                "object_id": obj.object_id,
                "n_obj": obj.n_obj,
                "w": [[round(v, 6) for v in row] for row in w[i].tolist()],
            }
            for i, (obj, _) in enumerate(items)
        ],
    }
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote prototypes for {len(items)} objects to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partflow",
        description="Part-based 3D generation with gated slots, a prototype "
                    "bank, and a rectified-flow denoiser.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file (defaults used if omitted)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run training stages")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", default="all", choices=["all", "0", "1", "2"])
    p.add_argument("--ckpt", help="checkpoint to resume from")
    p.add_argument("--disable-gate", action="store_true", dest="disable_gate")
    p.add_argument("--disable-bank", action="store_true", dest="disable_bank")
    p.add_argument("--disable-warmup", action="store_true", dest="disable_warmup")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate parts for dataset images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--object-id", dest="object_id")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--oracle-passthrough", action="store_true",
                   dest="oracle_passthrough",
                   help="score the ground truth against itself "
                        "(metric plumbing check)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the 4-row component grid")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--heldout", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-gates", help="print gate activations per object")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.set_defaults(func=cmd_inspect_gates)

    p = sub.add_parser("export-prototypes",
                       help="dump the prototype bank and slot assignments")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_prototypes)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(json.dumps({"error": "dataset", "message": str(exc),
                          "object_id": exc.object_id}), file=sys.stderr)
        return EXIT_DATASET
    except CheckpointError as exc:
        print(json.dumps({"error": "checkpoint", "message": str(exc),
                          "tensor": exc.tensor}), file=sys.stderr)
        return EXIT_CHECKPOINT
    except (TrainingDivergedError, ValueError, OSError) as exc:
        print(json.dumps({"error": "runtime", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
