"""Staged training: codec pretrain, gate/bank warm-up, joint fine-tune.

Stage 0 fits the part codec alone and freezes it. Stage 1 trains only the
gate head (with the view encoder) and the prototype bank on clean latents,
leaving the backbone untouched. Stage 2 jointly optimizes the masked flow
loss plus the prototype losses over backbone/bank/view and the gating losses
over view/gate; the flow mask is always the ground-truth canonical mask, so
gate quality never changes which slots the backbone is supervised on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .bundle import ModelBundle, build_bundle
from .checkpoint import (Checkpoint, bundle_from_checkpoint,
                         checkpoint_from_bundle, save_checkpoint)
from .codec import chamfer_loss, train_codec
from .config import TrainConfig
from .dataset_io import DatasetItem
from .errors import ConfigError, TrainingDivergedError
from .flow import loss_mflow, noise
from .gating import loss_gate
from .prototypes import (aligned_summary, assign, inject, loss_all, loss_ent,
                         loss_rec)
from .slots import pack_slots, slot_summary

SHAPE_KEYS = (
    "p_max", "k_tokens", "c_dim", "m_protos", "d_feat",
    "points_per_part", "render_size",
    "backbone_blocks", "backbone_hidden", "backbone_heads",
)


def _stage_generator(seed: int, stage: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + stage + 1)


def part_cloud_stack(items: list[DatasetItem]) -> torch.Tensor:
    """All parts of all objects as one (N_parts, n_pts, 3) float32 tensor."""
    clouds = [torch.from_numpy(p.points) for obj, _ in items for p in obj.parts]
    return torch.stack(clouds).to(torch.float32)


def check_bank_capacity(items: list[DatasetItem], m_protos: int):
    """The bank must stay much smaller than the part-shape vocabulary."""
    pairs = {(obj.category_tag, p.type_id) for obj, _ in items for p in obj.parts}
    limit = 4 * len(pairs)
    if m_protos >= limit:
        raise ConfigError(
            f"m_protos={m_protos} is not small relative to the dataset's "
            f"{len(pairs)} distinct part kinds (limit {limit})"
        )


@dataclass
class LatentDataset:
    """Frozen-codec training tensors for stages 1 and 2."""

    z0: torch.Tensor      # (N, P, K, C) packed clean latents
    masks: torch.Tensor   # (N, P)
    images: torch.Tensor  # (N, H, W)
    n_obj: torch.Tensor   # (N,)

    def __len__(self) -> int:
        return self.z0.shape[0]


def build_latent_dataset(bundle: ModelBundle, cfg: TrainConfig,
                         items: list[DatasetItem]) -> LatentDataset:
    clouds = part_cloud_stack(items)
    with torch.no_grad():
        tokens = bundle.codec.encode(clouds)  # (N_parts, K, C)
    z_list, m_list = [], []
    cursor = 0
    for obj, _ in items:
        per_obj = [tokens[cursor + i] for i in range(obj.n_obj)]
        cursor += obj.n_obj
        z, m = pack_slots(per_obj, cfg.p_max, bundle.e_null)
        z_list.append(z)
        m_list.append(m)
    images = torch.stack([
        torch.from_numpy(img.pixels).to(torch.float32) for _, img in items
    ])
    n_obj = torch.tensor([obj.n_obj for obj, _ in items], dtype=torch.long)
    return LatentDataset(z0=torch.stack(z_list), masks=torch.stack(m_list),
                         images=images, n_obj=n_obj)


class TrainLog:
    """JSON-lines epoch log, one record per epoch with all loss terms."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []

    def append(self, record: dict):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def gate_count_accuracy(bundle: ModelBundle, data: LatentDataset,
                        tau: float) -> float:
    """Fraction of objects whose thresholded slot count matches n_obj."""
    with torch.no_grad():
        alpha = bundle.gate(bundle.view(data.images))
    counts = (alpha > tau).sum(dim=-1)
    counts = torch.maximum(counts, torch.ones_like(counts))  # argmax fallback
    return float((counts == data.n_obj).float().mean().item())


def stage0_train_codec(bundle: ModelBundle, cfg: TrainConfig,
                       items: list[DatasetItem],
                       log: TrainLog | None = None) -> list[float]:
    clouds = part_cloud_stack(items)
    gen = _stage_generator(cfg.seed, 0)
    epoch_losses = train_codec(
        bundle.codec, clouds, epochs=cfg.epochs_stage0, lr=cfg.lr_stage0,
        batch_size=cfg.batch_size, noise_std=cfg.codec_noise_std,
        generator=gen,
        log_fn=(lambda epoch, loss: log.append(
            {"stage": 0, "epoch": epoch, "loss_chamfer": loss}
        )) if log is not None else None,
    )
    for param in bundle.codec.parameters():
        param.requires_grad_(False)
    return epoch_losses


def codec_heldout_chamfer(bundle: ModelBundle, items: list[DatasetItem]) -> float:
    """Mean reconstruction Chamfer of the frozen codec over all parts."""
    clouds = part_cloud_stack(items)
    with torch.no_grad():
        recon = bundle.codec.decode(bundle.codec.encode(clouds))
        total = 0.0
        for i in range(clouds.shape[0]):
            total += chamfer_loss(recon[i:i + 1], clouds[i:i + 1]).item()
    return total / clouds.shape[0]


def stage1_warmup(bundle: ModelBundle, cfg: TrainConfig,
                  data: LatentDataset, log: TrainLog | None = None) -> int:
    """Train gate (+view) and bank on clean latents; codec/backbone frozen.

    Returns the number of optimizer steps taken.
    """
    params = []
    if not cfg.disable_gate:
        params += list(bundle.view.parameters()) + list(bundle.gate.parameters())
    if not cfg.disable_bank:
        params += list(bundle.bank.parameters())
    if not params:
        return 0
    opt = torch.optim.Adam(params, lr=cfg.lr_stage1)
    gen = _stage_generator(cfg.seed, 1)
    n = len(data)
    steps = 0
    for epoch in range(cfg.epochs_stage1):
        perm = torch.randperm(n, generator=gen)
        sums = {"loss_gate": 0.0, "loss_rec": 0.0, "loss_ent": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            zero = torch.zeros(())
            l_gate = zero
            if not cfg.disable_gate:
                alpha = bundle.gate(bundle.view(data.images[sel]))
                l_gate = loss_gate(alpha, data.masks[sel], data.n_obj[sel],
                                   cfg.lambda_ce, cfg.lambda_count)
            l_rec, l_ent = zero, zero
            if not cfg.disable_bank:
                s = slot_summary(data.z0[sel])
                w = assign(s, bundle.bank)
                s_tilde = aligned_summary(w, bundle.bank)
                l_rec = loss_rec(s, s_tilde, data.masks[sel])
                l_ent = loss_ent(w, data.masks[sel])
            total = l_gate + l_rec + cfg.lambda_ent * l_ent
            if not math.isfinite(total.item()):
                raise TrainingDivergedError(
                    f"warm-up loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            steps += 1
            batches += 1
            for key, val in (("loss_gate", l_gate), ("loss_rec", l_rec),
                             ("loss_ent", l_ent)):
                sums[key] += float(val.item())
        if log is not None:
            record = {"stage": 1, "epoch": epoch}
            record.update({k: v / batches for k, v in sums.items()})
            if not cfg.disable_gate:
                record["gate_count_accuracy"] = gate_count_accuracy(
                    bundle, data, cfg.tau)
            log.append(record)
    return steps


def _stage2_params(bundle: ModelBundle, cfg: TrainConfig) -> list:
    if cfg.freeze_backbone_lower:
        keep = list(bundle.backbone.blocks)[len(bundle.backbone.blocks) // 2:]
        backbone_params = [p for name, p in bundle.backbone.named_parameters()
                           if not name.startswith("blocks.")]
        for block in keep:
            backbone_params += list(block.parameters())
    else:
        backbone_params = list(bundle.backbone.parameters())
    params = backbone_params + list(bundle.view.parameters())
    if not cfg.disable_gate:
        params += list(bundle.gate.parameters())
    if not cfg.disable_bank:
        params += list(bundle.bank.parameters())
    return params


def stage2_joint(bundle: ModelBundle, cfg: TrainConfig, data: LatentDataset,
                 log: TrainLog | None = None,
                 lastgood_path: Path | None = None) -> int:
    """Joint fine-tune of the flow backbone with gate and prototype losses.

    The flow supervision mask is the ground-truth canonical mask throughout;
    predicted gate activations never enter the flow loss. On divergence the
    previous epoch's weights are written to lastgood_path (when given) before
    aborting.
    """
    opt = torch.optim.Adam(_stage2_params(bundle, cfg), lr=cfg.lr_stage2)
    gen = _stage_generator(cfg.seed, 2)
    n = len(data)
    steps = 0
    last_good: Checkpoint | None = None
    for epoch in range(cfg.epochs_stage2):
        perm = torch.randperm(n, generator=gen)
        sums = {"loss_mflow": 0.0, "loss_rec": 0.0, "loss_ent": 0.0,
                "loss_gate": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            z0, m = data.z0[sel], data.masks[sel]
            t = torch.rand(z0.shape[0], generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            z_t = noise(z0, eps, t, m)
            zero = torch.zeros(())
            l_rec, l_ent = zero, zero
            z_in = z_t
            if not cfg.disable_bank:
                s = slot_summary(z0)
                w = assign(s, bundle.bank)
                s_tilde = aligned_summary(w, bundle.bank)
                z_in = inject(z_t, s_tilde, cfg.beta, m)
                l_rec = loss_rec(s, s_tilde, m)
                l_ent = loss_ent(w, m)
            f = bundle.view(data.images[sel])
            v = bundle.backbone(z_in, t, f)
            l_flow = loss_mflow(v, z0, eps, m)
            l_gate = zero
            if not cfg.disable_gate:
                alpha = bundle.gate(f)
                l_gate = loss_gate(alpha, m, data.n_obj[sel],
                                   cfg.lambda_ce, cfg.lambda_count)
            total = loss_all(l_rec, l_ent, l_flow, cfg.lambda_ent,
                             cfg.lambda_flow) + l_gate
            if not math.isfinite(total.item()):
                if last_good is not None and lastgood_path is not None:
                    save_checkpoint(last_good, lastgood_path)
                raise TrainingDivergedError(
                    f"joint loss became non-finite at epoch {epoch}"
                    + (f"; last good weights at {lastgood_path}"
                       if last_good is not None and lastgood_path is not None
                       else ""))
            opt.zero_grad()
            total.backward()
            opt.step()
            steps += 1
            batches += 1
            for key, val in (("loss_mflow", l_flow), ("loss_rec", l_rec),
                             ("loss_ent", l_ent), ("loss_gate", l_gate)):
                sums[key] += float(val.item())
        if lastgood_path is not None:
            last_good = checkpoint_from_bundle(bundle, cfg, stage=2, step=steps)
        if log is not None:
            record = {"stage": 2, "epoch": epoch}
            record.update({k: v / batches for k, v in sums.items()})
            log.append(record)
    return steps


def _check_resume_config(cfg: TrainConfig, ckpt_cfg: TrainConfig):
    for key in SHAPE_KEYS:
        if getattr(cfg, key) != getattr(ckpt_cfg, key):
            raise ConfigError(
                f"config {key}={getattr(cfg, key)} does not match checkpoint "
                f"{key}={getattr(ckpt_cfg, key)}"
            )


def run_training(cfg: TrainConfig, items: list[DatasetItem],
                 out_dir: str | Path, stages: str = "all",
                 start_ckpt: Checkpoint | None = None) -> dict[int, Path]:
    """Run the requested stages in order, checkpointing after each.

    stages is "all" (stage 1 is skipped when disable_warmup is set) or a
    single stage "0" / "1" / "2". Stages 1 and 2 refuse to run without a
    completed stage 0.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if stages == "all":
        wanted = [0] + ([] if cfg.disable_warmup else [1]) + [2]
    elif stages in ("0", "1", "2"):
        wanted = [int(stages)]
    else:
        raise ConfigError(f"unknown stage selector {stages!r}")

    if start_ckpt is not None:
        _check_resume_config(cfg, start_ckpt.config)
        bundle = bundle_from_checkpoint(start_ckpt)
        done_stage = start_ckpt.stage
        step = start_ckpt.step
    else:
        bundle = build_bundle(cfg)
        done_stage = -1
        step = 0

    if not cfg.disable_bank and any(s in wanted for s in (1, 2)):
        check_bank_capacity(items, cfg.m_protos)

    log = TrainLog(out / "train_log.jsonl")
    paths: dict[int, Path] = {}
    data: LatentDataset | None = None
    for stage in wanted:
        if stage >= 1 and done_stage < 0:
            raise ConfigError(
                f"stage {stage} requires a checkpoint with completed stage 0")
        if stage == 0:
            stage0_train_codec(bundle, cfg, items, log)
        else:
            if data is None:
                data = build_latent_dataset(bundle, cfg, items)
            if stage == 1:
                step += stage1_warmup(bundle, cfg, data, log)
            else:
                step += stage2_joint(bundle, cfg, data, log,
                                     lastgood_path=out / "checkpoint_stage2_lastgood.ckpt")
        done_stage = max(done_stage, stage)
        path = out / f"checkpoint_stage{stage}.ckpt"
        save_checkpoint(checkpoint_from_bundle(bundle, cfg, done_stage, step), path)
        paths[stage] = path
    return paths
