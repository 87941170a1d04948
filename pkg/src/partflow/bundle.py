"""All learnable components of one run, built deterministically from a config."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .codec import PartCodec
from .config import TrainConfig
from .errors import CheckpointError
from .flow import FlowBackbone
from .gating import GateHead
from .prototypes import PrototypeBank
from .slots import init_null_embedding
from .view import ViewEncoder


@dataclass
class ModelBundle:
    codec: PartCodec
    view: ViewEncoder
    gate: GateHead
    bank: PrototypeBank
    backbone: FlowBackbone
    e_null: torch.Tensor  # frozen buffer; never optimized

    def eval_mode(self):
        for mod in (self.codec, self.view, self.gate, self.bank, self.backbone):
            mod.eval()
        return self


def build_bundle(cfg: TrainConfig) -> ModelBundle:
    """Construct every module under a fixed torch seed.

    All modules are always built (ablations merely skip training/using some),
    so parameter initialization draws are identical across ablation variants
    with a shared seed.
    """
    torch.manual_seed(cfg.seed)
    codec = PartCodec(cfg.k_tokens, cfg.c_dim, cfg.points_per_part)
    view = ViewEncoder(cfg.render_size, cfg.d_feat)
    gate = GateHead(cfg.d_feat, cfg.p_max)
    bank = PrototypeBank(cfg.m_protos, cfg.c_dim)
    backbone = FlowBackbone(
        cfg.p_max, cfg.k_tokens, cfg.c_dim, cfg.d_feat,
        hidden=cfg.backbone_hidden, blocks=cfg.backbone_blocks,
        heads=cfg.backbone_heads,
    )
    e_null = init_null_embedding(cfg.c_dim)
    return ModelBundle(codec=codec, view=view, gate=gate, bank=bank,
                       backbone=backbone, e_null=e_null)


def named_tensors(bundle: ModelBundle) -> dict[str, torch.Tensor]:
    """Flat name -> tensor map covering every learnable tensor plus e_null."""
    out: dict[str, torch.Tensor] = {}
    for prefix, module in (
        ("codec", bundle.codec), ("view", bundle.view), ("gate", bundle.gate),
        ("bank", bundle.bank), ("backbone", bundle.backbone),
    ):
        for name, tensor in module.state_dict().items():
            out[f"{prefix}.{name}"] = tensor
    out["e_null"] = bundle.e_null
    return out


def load_named_tensors(bundle: ModelBundle, tensors: dict[str, torch.Tensor]):
    """Copy tensors into the bundle, validating names and shapes."""
    target = named_tensors(bundle)
    missing = sorted(set(target) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint is missing tensor {missing[0]}",
                              tensor=missing[0])
    extra = sorted(set(tensors) - set(target))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]}",
                              tensor=extra[0])
    for name, src in tensors.items():
        dst = target[name]
        if tuple(src.shape) != tuple(dst.shape):
            raise CheckpointError(
                f"tensor {name} has shape {tuple(src.shape)}, "
                f"model expects {tuple(dst.shape)}",
                tensor=name,
            )
        with torch.no_grad():
            dst.copy_(src)
