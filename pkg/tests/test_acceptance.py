"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete. The end-to-end criteria (6 and 7) train the
desk-scale benchmark from scratch and take the bulk of the runtime.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import fd_gradient, max_rel_err
from partflow.bundle import build_bundle
from partflow.checkpoint import (bundle_from_checkpoint, checkpoint_from_bundle,
                                 load_checkpoint, save_checkpoint)
from partflow.config import TrainConfig
from partflow.dataset_io import read_dataset, write_dataset
from partflow.errors import CheckpointError
from partflow.evaluate import evaluate_model
from partflow.flow import FlowBackbone, loss_mflow, noise, sample, velocity
from partflow.gating import loss_ce, loss_count, loss_gate
from partflow.metrics import chamfer_l2, fscore, mean_pairwise_iou
from partflow.prototypes import (PrototypeBank, aligned_summary, assign,
                                 loss_ent, loss_rec)
from partflow.slots import init_null_embedding, pack_slots
from partflow.synth import GeneratorSpec, generate_dataset
from partflow.training import (build_latent_dataset, codec_heldout_chamfer,
                               run_training, stage0_train_codec, stage2_joint)

RESULTS: list[str] = []


def report(name: str, passed: bool, detail: str = ""):
    line = f"ACCEPTANCE {name}: {'PASS' if passed else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    RESULTS.append(line)
    print(line, flush=True)
    assert passed, line


# --- criterion 1: metric oracle equivalence ---------------------------------

def _chamfer_oracle(a, b):
    ta = sum(min(sum((p[k] - q[k]) ** 2 for k in range(3)) for q in b) for p in a)
    tb = sum(min(sum((p[k] - q[k]) ** 2 for k in range(3)) for p in a) for q in b)
    return ta / len(a) + tb / len(b)


def _fscore_oracle(pred, gt, tau):
    hp = sum(1 for p in pred
             if min(sum((p[k] - q[k]) ** 2 for k in range(3)) for q in gt)
             <= tau * tau)
    hg = sum(1 for q in gt
             if min(sum((p[k] - q[k]) ** 2 for k in range(3)) for p in pred)
             <= tau * tau)
    precision, recall = hp / len(pred), hg / len(gt)
    return 0.0 if precision + recall == 0 else \
        2 * precision * recall / (precision + recall)


def _iou_oracle(parts, resolution):
    sets = []
    for pts in parts:
        cells = set()
        for p in pts:
            idx = tuple(
                min(max(int(np.floor((p[k] + 0.5) * resolution)), 0),
                    resolution - 1)
                for k in range(3)
            )
            cells.add(idx)
        sets.append(cells)
    ious = [len(sets[i] & sets[j]) / len(sets[i] | sets[j])
            for i in range(len(sets)) for j in range(i + 1, len(sets))
            if sets[i] | sets[j]]
    return float(np.mean(ious)) if ious else 0.0


def test_criterion_1_metric_oracles():
    start = time.time()
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(200):
        a = rng.uniform(-0.5, 0.5, (int(rng.integers(1, 129)), 3))
        b = rng.uniform(-0.5, 0.5, (int(rng.integers(1, 129)), 3))
        worst = max(worst, abs(chamfer_l2(a, b) - _chamfer_oracle(a, b)))
        assert fscore(a, b, 0.1) == _fscore_oracle(a, b, 0.1)
        if trial % 10 == 0:
            n_parts = int(rng.integers(1, 6))
            parts = [rng.uniform(-0.5, 0.5, (int(rng.integers(1, 129)), 3))
                     for _ in range(n_parts)]
            assert abs(mean_pairwise_iou(parts, 16) - _iou_oracle(parts, 16)) \
                <= 1e-12
    elapsed = time.time() - start
    report("criterion-1 metric-oracles", worst <= 1e-9 and elapsed < 60,
           f"max chamfer dev {worst:.2e}, {elapsed:.1f}s")


# --- criterion 2: gradient suite ---------------------------------------------

def test_criterion_2_gradient_suite():
    start = time.time()
    worst = {"ce": 0.0, "count": 0.0, "rec": 0.0, "ent": 0.0, "mflow": 0.0}

    for trial in range(20):
        g = torch.Generator().manual_seed(1000 + trial)
        logits = (1.5 * torch.randn(6, generator=g, dtype=torch.float64)
                  ).requires_grad_(True)
        m = (torch.rand(6, generator=g) > 0.5).double()
        n_obj = max(int(m.sum().item()), 1)
        for key, fn in (
            ("ce", lambda: loss_ce(torch.sigmoid(logits), m)),
            ("count", lambda: loss_count(torch.sigmoid(logits), n_obj)),
        ):
            grad = torch.autograd.grad(fn(), logits)[0]
            worst[key] = max(worst[key], max_rel_err(grad, fd_gradient(fn, logits.data)))

    for trial in range(20):
        g = torch.Generator().manual_seed(2000 + trial)
        bank = PrototypeBank(3, 4, generator=g).double()
        s = torch.randn(3, 4, generator=g, dtype=torch.float64).requires_grad_(True)
        m = torch.tensor([1.0, 1.0, 0.0], dtype=torch.float64)

        def l_rec():
            w = assign(s, bank)
            return loss_rec(s, aligned_summary(w, bank), m)

        def l_ent():
            return loss_ent(assign(s, bank), m)

        for key, fn in (("rec", l_rec), ("ent", l_ent)):
            for target in (s, bank.p):
                grad = torch.autograd.grad(fn(), target)[0]
                worst[key] = max(worst[key],
                                 max_rel_err(grad, fd_gradient(fn, target.data)))

    for trial in range(20):
        torch.manual_seed(3000 + trial)
        backbone = FlowBackbone(2, 2, 4, 4, hidden=8, blocks=1, heads=2).double()
        g = torch.Generator().manual_seed(4000 + trial)
        toks = [torch.randn(2, 4, generator=g, dtype=torch.float64)]
        e = init_null_embedding(4, g, dtype=torch.float64)
        z0, m = pack_slots(toks, 2, e)
        eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
        c_feat = torch.randn(4, generator=g, dtype=torch.float64)
        t_val = float(torch.rand((), generator=g))
        z_t = noise(z0, eps, t_val, m)

        def l_mflow():
            t_t = torch.tensor([t_val], dtype=torch.float64)
            v = backbone(z_t.unsqueeze(0), t_t, c_feat.unsqueeze(0)).squeeze(0)
            return loss_mflow(v, z0, eps, m)

        params = list(backbone.parameters())
        grads = torch.autograd.grad(l_mflow(), params, allow_unused=True)
        for p, grad in zip(params, grads):
            if grad is None:
                grad = torch.zeros_like(p)
            worst["mflow"] = max(worst["mflow"],
                                 max_rel_err(grad, fd_gradient(l_mflow, p.data)))

    elapsed = time.time() - start
    detail = ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    report("criterion-2 gradient-suite",
           max(worst.values()) < 1e-4 and elapsed < 120,
           f"{detail}, {elapsed:.1f}s")


# --- criterion 3: flow identities --------------------------------------------

class _ConstantField(FlowBackbone):
    def __init__(self, field):
        super().__init__(field.shape[0], field.shape[1], field.shape[2], 4,
                         hidden=8, blocks=1, heads=2)
        self.field = field

    def forward(self, z, t, c):
        return self.field.unsqueeze(0).expand(z.shape[0], -1, -1, -1)


def test_criterion_3_flow_identities():
    g = torch.Generator().manual_seed(30)
    toks = [torch.randn(3, 6, generator=g) for _ in range(2)]
    e = init_null_embedding(6, g)
    z0, m = pack_slots(toks, 4, e)
    eps = torch.randn(z0.shape, generator=g)

    endpoint_ok = (
        torch.equal(noise(z0, eps, 1.0, m)[:2], z0[:2])
        and torch.equal(noise(z0, eps, 0.0, m)[:2], eps[:2])
    )
    loss_zero_ok = (
        loss_mflow(torch.randn(z0.shape, generator=g), z0, eps,
                   torch.zeros(4)).item() == 0.0
        and loss_mflow(z0 - eps, z0, eps, m).item() == 0.0
    )

    sampler_ok = True
    worst = 0.0
    target = torch.randn(4, 3, 6, generator=g)
    seed = 1234
    for steps in (1, 4, 32):
        init = torch.randn((2, 3, 6),
                           generator=torch.Generator().manual_seed(seed))
        field = target.clone()
        field[[0, 1]] = target[[0, 1]] - init
        out = sample(_ConstantField(field), [0, 1], torch.randn(4, generator=g),
                     steps, seed, e)
        dev = float((out[[0, 1]] - target[[0, 1]]).abs().max())
        worst = max(worst, dev)
        sampler_ok = sampler_ok and dev <= 1e-6

    report("criterion-3 flow-identities",
           endpoint_ok and loss_zero_ok and sampler_ok,
           f"max sampler dev {worst:.2e}")


# --- criterion 4: null-slot isolation ----------------------------------------

def test_criterion_4_null_slot_isolation(tiny_config, tiny_items):
    g = torch.Generator().manual_seed(40)
    e = init_null_embedding(4, g).requires_grad_(True)
    toks = [torch.randn(2, 4, generator=g)]
    z0, m = pack_slots(toks, 3, e)
    eps = torch.randn(z0.shape, generator=g)
    torch.manual_seed(41)
    backbone = FlowBackbone(3, 2, 4, 4, hidden=8, blocks=1, heads=2)
    c_feat = torch.randn(4, generator=g)

    v = velocity(backbone, noise(z0, eps, 0.5, m), 0.5, c_feat)
    grad = torch.autograd.grad(loss_mflow(v, z0, eps, m), e,
                               allow_unused=True)[0]
    grad_ok = grad is None or torch.equal(grad, torch.zeros_like(e))

    def full_loss(eps_in):
        vv = velocity(backbone, noise(z0, eps_in, 0.5, m), 0.5, c_feat)
        return loss_mflow(vv, z0, eps_in, m).item()

    perturbed = eps.clone()
    perturbed[1:] += 77.7
    perturb_ok = full_loss(eps) == full_loss(perturbed)

    bundle = build_bundle(tiny_config)
    stage0_train_codec(bundle, tiny_config, tiny_items)
    data = build_latent_dataset(bundle, tiny_config, tiny_items)
    before = bundle.e_null.clone()
    cfg_one_epoch = TrainConfig(**{**tiny_config.to_dict(), "epochs_stage2": 1})
    stage2_joint(bundle, cfg_one_epoch, data)
    e_null_ok = torch.equal(before, bundle.e_null)

    report("criterion-4 null-slot-isolation",
           grad_ok and perturb_ok and e_null_ok,
           f"grad-zero={grad_ok} perturb-invariant={perturb_ok} "
           f"e-null-frozen={e_null_ok}")


# --- criterion 5: gate decoupling --------------------------------------------

def test_criterion_5_gate_decoupling(tiny_config, tiny_items):
    bundle = build_bundle(tiny_config)
    stage0_train_codec(bundle, tiny_config, tiny_items)
    data = build_latent_dataset(bundle, tiny_config, tiny_items)

    alpha = bundle.gate(bundle.view(data.images))
    l_gate = loss_gate(alpha, data.masks, data.n_obj, 1.0, 0.1)
    grads = torch.autograd.grad(l_gate, list(bundle.backbone.parameters()),
                                allow_unused=True)
    grad_ok = all(gr is None or torch.equal(gr, torch.zeros_like(gr))
                  for gr in grads)

    gen = torch.Generator().manual_seed(50)
    t = torch.rand(len(data), generator=gen)
    eps = torch.randn(data.z0.shape, generator=gen)
    z_t = noise(data.z0, eps, t, data.masks)
    with torch.no_grad():
        f = bundle.view(data.images)
        base = loss_mflow(bundle.backbone(z_t, t, f), data.z0, eps,
                          data.masks).item()
        for p in bundle.gate.parameters():
            p.normal_(generator=gen)  # scramble predicted activations
        again = loss_mflow(bundle.backbone(z_t, t, f), data.z0, eps,
                           data.masks).item()
    invariant_ok = base == again

    report("criterion-5 gate-decoupling", grad_ok and invariant_ok,
           f"grad-zero={grad_ok} flow-invariant={invariant_ok}")


# --- criteria 6 and 7: desk-scale benchmark and ablation grid ----------------

BENCH_SEED = 0
N_TRAIN, N_HELDOUT = 512, 64


@pytest.fixture(scope="module")
def desk_benchmark(tmp_path_factory):
    """Train the full pipeline and the three single-toggle ablations."""
    root = tmp_path_factory.mktemp("desk")
    cfg = TrainConfig(seed=BENCH_SEED)
    spec = GeneratorSpec(min_parts=cfg.min_parts, max_parts=cfg.max_parts,
                         p_max=cfg.p_max, points_per_part=cfg.points_per_part,
                         render_size=cfg.render_size, iou_cap=cfg.iou_cap)
    t0 = time.time()
    train_items = generate_dataset(spec, N_TRAIN, 1000)
    heldout_items = generate_dataset(spec, N_HELDOUT, 777000)

    results = {}
    for name, overrides in (
        ("full", {}),
        ("no_gate", {"disable_gate": True}),
        ("no_bank", {"disable_bank": True}),
        ("no_warmup", {"disable_warmup": True}),
    ):
        t_run = time.time()
        variant = TrainConfig(**{**cfg.to_dict(), **overrides})
        paths = run_training(variant, train_items, root / name, stages="all")
        bundle = bundle_from_checkpoint(load_checkpoint(paths[2]))
        rep, _ = evaluate_model(bundle, variant, heldout_items)
        results[name] = {
            "report": rep,
            "bundle": bundle,
            "cfg": variant,
            "log": root / name / "train_log.jsonl",
            "runtime": time.time() - t_run,
        }
        print(f"[desk] {name}: fscore={rep.fscore:.3f} iou={rep.mean_pair_iou:.4f} "
              f"gate_acc={rep.gate_count_accuracy:.3f} ({results[name]['runtime']:.0f}s)",
              flush=True)
    results["_heldout"] = heldout_items
    results["_full_runtime"] = (
        (time.time() - t0)
        - sum(results[n]["runtime"] for n in ("no_gate", "no_bank", "no_warmup"))
    )
    return results


def test_criterion_6_desk_scale_end_to_end(desk_benchmark):
    full = desk_benchmark["full"]
    rep = full["report"]
    runtime_min = desk_benchmark["_full_runtime"] / 60.0
    codec_bar = codec_heldout_chamfer(full["bundle"], desk_benchmark["_heldout"])

    records = [json.loads(line)
               for line in Path(full["log"]).read_text().splitlines()]
    flow = [r["loss_mflow"] for r in records if r["stage"] == 2]
    smoothed_first = float(np.mean(flow[:5]))
    smoothed_last = float(np.mean(flow[-5:]))

    checks = {
        "gate_acc>=0.90": rep.gate_count_accuracy >= 0.90,
        "count_mae<=0.15": rep.gate_count_mae <= 0.15,
        "fscore>=0.60": rep.fscore >= 0.60,
        "iou<=0.10": rep.mean_pair_iou <= 0.10,
        "flow_decreases": smoothed_last <= smoothed_first,
        "codec_chamfer<=0.01": codec_bar <= 0.01,
        "runtime<=60min": runtime_min <= 60.0,
    }
    detail = (f"fscore={rep.fscore:.3f} iou={rep.mean_pair_iou:.4f} "
              f"gate_acc={rep.gate_count_accuracy:.3f} mae={rep.gate_count_mae:.3f} "
              f"codec={codec_bar:.4f} flow {smoothed_first:.1f}->{smoothed_last:.1f} "
              f"{runtime_min:.1f}min")
    failed = [k for k, ok in checks.items() if not ok]
    report("criterion-6 desk-scale", not failed,
           detail + (f" FAILED: {failed}" if failed else ""))


def test_criterion_7_ablation_direction(desk_benchmark):
    full_f = desk_benchmark["full"]["report"].fscore
    margins = {
        name: full_f - desk_benchmark[name]["report"].fscore
        for name in ("no_gate", "no_bank", "no_warmup")
    }
    ok = all(margin >= -0.02 for margin in margins.values())
    detail = f"full={full_f:.3f} " + " ".join(
        f"{k}={desk_benchmark[k]['report'].fscore:.3f}" for k in margins)
    report("criterion-7 ablation-direction", ok, detail)


# --- criterion 8: plumbing ----------------------------------------------------

def test_criterion_8_plumbing(tiny_config, tiny_items, tmp_path):
    bundle = build_bundle(tiny_config)
    ckpt = checkpoint_from_bundle(bundle, tiny_config, stage=0, step=0)
    save_checkpoint(ckpt, tmp_path / "rt.ckpt")
    loaded = load_checkpoint(tmp_path / "rt.ckpt")
    ckpt_ok = all(
        np.array_equal(loaded.tensors[k], v) for k, v in ckpt.tensors.items()
    ) and loaded.config == tiny_config

    write_dataset(tiny_items, tmp_path / "ds")
    reread = read_dataset(tmp_path / "ds")
    data_ok = len(reread) == len(tiny_items) and all(
        np.array_equal(p.points, q.points) and p.type_id == q.type_id
        for (a, _), (b, _) in zip(tiny_items, reread)
        for p, q in zip(a.parts, b.parts)
    )

    cfg_path = tmp_path / "cfg.json"
    tiny_config.save(cfg_path)
    env_dir = tmp_path / "runs"

    def cli(*args):
        proc = subprocess.run(
            [sys.executable, "-m", "partflow.cli", *args],
            capture_output=True, text=True, timeout=600,
        )
        assert proc.returncode == 0, proc.stderr
        return proc

    cli("gen-data", "--config", str(cfg_path), "--count", "10",
        "--seed", "50", "--out", str(env_dir / "data"))
    for run in ("a", "b"):
        cli("train", "--config", str(cfg_path),
            "--data", str(env_dir / "data"), "--out", str(env_dir / run))
    repro_ok = (
        (env_dir / "a" / "checkpoint_stage2.ckpt").read_bytes()
        == (env_dir / "b" / "checkpoint_stage2.ckpt").read_bytes()
    )

    cli("eval", "--ckpt", str(env_dir / "a" / "checkpoint_stage2.ckpt"),
        "--data", str(env_dir / "data"), "--out", str(env_dir / "oracle"),
        "--oracle-passthrough")
    oracle = json.loads((env_dir / "oracle" / "metrics.json").read_text())
    oracle_ok = oracle["chamfer_l2"] == 0.0 and oracle["fscore"] == 1.0

    report("criterion-8 plumbing",
           ckpt_ok and data_ok and repro_ok and oracle_ok,
           f"ckpt={ckpt_ok} dataset={data_ok} repro={repro_ok} oracle={oracle_ok}")


def test_zz_acceptance_summary():
    print("\n=== acceptance summary ===")
    for line in RESULTS:
        print(line)
    assert RESULTS, "acceptance criteria did not run"
