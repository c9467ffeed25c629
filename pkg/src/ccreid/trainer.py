"""Training loop: PK batches through the pipeline with Adam updates.

Everything is deterministic given the config seed: model init comes from
torch's global RNG (seeded at the start), and every batch draws from a seed
derived from (seed, epoch, step), so runs replay exactly and checkpoints
resume mid-schedule without RNG state.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from . import losses as L
from .backbone import load_backbone_weights
from .checkpoint import load_arrays, save_arrays
from .config import RunConfig, config_from_dict
from .data import DatasetManifest, PKBatch, SampleCache, sample_pk_batch
from .model import ModelOutput, ReidModel
from .parts import part_target


def lr_for_epoch(config: RunConfig, epoch: int, base: float | None = None) -> float:
    """Learning rate for a 1-indexed epoch: decayed after each decay epoch."""
    t = config.trainer
    base = t.base_lr if base is None else base
    passed = sum(1 for e in t.lr_decay_epochs if epoch > e)
    return base * t.lr_decay_factor ** passed


def batch_seed(seed: int, epoch: int, step: int) -> int:
    ss = np.random.SeedSequence(entropy=[seed, epoch, step])
    return int(ss.generate_state(1)[0])


def assemble_batch(cache: SampleCache, batch: PKBatch, need_parts: bool):
    """Stack a PK batch into tensors: images (B,h,w,3) u8, labels, part maps."""
    images = torch.from_numpy(
        np.stack([cache.image(r) for r in batch.samples]))
    labels = torch.from_numpy(batch.labels)
    parts = None
    if need_parts:
        parts = [cache.part_map(r) for r in batch.samples]
    return images, labels, parts


def part_targets_for(model: ReidModel, part_maps) -> torch.Tensor:
    """(B, n_branches, 14, 14) integer targets cropped per branch."""
    out_size = model.config.psa.out_size
    rows = [np.stack([part_target(m, bid, out_size)
                      for bid in model.branch_ids]) for m in part_maps]
    return torch.from_numpy(np.stack(rows)).long()


def compute_losses(out: ModelOutput, labels: torch.Tensor,
                   part_tgts: torch.Tensor | None,
                   config: RunConfig) -> dict[str, torch.Tensor]:
    """Loss terms for one batch, wired per the active ablation flags.

    The bare baseline trains with plain cross-entropy only; every other
    variant uses the weighted composite objective.
    """
    ablation = frozenset(config.trainer.ablation)
    cfg = config.losses
    if out.id_kind == "margin_lengths":
        l_id = L.margin_loss(out.id_scores, labels, cfg)
    else:
        l_id = F.cross_entropy(out.id_scores, labels)

    zero = torch.zeros((), dtype=out.descriptor.dtype)
    if not ablation:
        return {"L_id": l_id, "L_tri": zero, "L_part": zero, "L": l_id}

    l_tri = L.batch_hard_triplet(out.descriptor, labels, cfg)
    l_part = zero
    if part_tgts is not None and out.part_logits is not None:
        b, nb, k = out.part_logits.shape[:3]
        l_part = L.part_loss(out.part_logits.reshape(b * nb, k, *out.part_logits.shape[3:]),
                             part_tgts.reshape(b * nb, *part_tgts.shape[2:]))
    total = L.total_loss(l_id, l_tri, l_part, cfg)
    return {"L_id": l_id, "L_tri": l_tri, "L_part": l_part, "L": total}


def _check_finite(terms: dict[str, torch.Tensor], model: ReidModel,
                  epoch: int, step: int) -> None:
    for name in ("L_id", "L_tri", "L_part", "L"):
        if not torch.isfinite(terms[name]).all():
            raise RuntimeError(f"non-finite loss term {name} "
                               f"at epoch {epoch} step {step}")
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            raise RuntimeError(f"non-finite parameter {name} "
                               f"at epoch {epoch} step {step}")


def build_optimizer(model: ReidModel, config: RunConfig) -> torch.optim.Adam:
    t = config.trainer
    backbone_params = list(model.backbone.parameters())
    backbone_ids = {id(p) for p in backbone_params}
    head_params = [p for p in model.parameters() if id(p) not in backbone_ids]
    return torch.optim.Adam(
        [{"params": backbone_params, "lr": t.backbone_lr},
         {"params": head_params, "lr": t.base_lr}],
        betas=(t.adam_beta1, t.adam_beta2), eps=t.adam_eps)


@dataclass
class TrainResult:
    model: ReidModel
    optimizer: torch.optim.Adam
    log: list[dict]
    checkpoint_path: str | None
    log_path: str | None


def train(manifest: DatasetManifest, config: RunConfig,
          out_dir: str | None = None,
          resume_from: str | None = None) -> TrainResult:
    config.validate()
    t = config.trainer
    n_train = len(manifest.train_records)
    if n_train == 0:
        raise ValueError("manifest has no train records")
    ablation = frozenset(t.ablation)
    if ablation and (t.p < 2 or t.k < 2):
        raise ValueError("triplet mining needs P >= 2 and K >= 2")

    if resume_from is not None:
        model, optimizer, start_epoch, saved_config = load_training_checkpoint(
            resume_from)
        if _resume_fingerprint(saved_config) != _resume_fingerprint(config):
            raise ValueError("checkpoint config fingerprint does not match "
                             "the requested config")
    else:
        torch.manual_seed(t.seed)
        model = ReidModel(config, manifest.num_identities)
        if config.backbone.pretrained_weights_path:
            load_backbone_weights(model.backbone,
                                  config.backbone.pretrained_weights_path)
        optimizer = build_optimizer(model, config)
        start_epoch = 0

    cache = SampleCache(manifest)
    need_parts = "psa" in ablation
    steps_per_epoch = math.ceil(n_train / (t.p * t.k))
    log: list[dict] = []
    base_lrs = (t.backbone_lr, t.base_lr)

    model.train()
    for epoch in range(start_epoch + 1, t.epochs + 1):
        for group, base in zip(optimizer.param_groups, base_lrs):
            group["lr"] = lr_for_epoch(config, epoch, base)
        lr = lr_for_epoch(config, epoch)
        for step in range(1, steps_per_epoch + 1):
            batch = sample_pk_batch(manifest, t.p, t.k,
                                    batch_seed(t.seed, epoch, step))
            images, labels, part_maps = assemble_batch(cache, batch, need_parts)
            part_tgts = part_targets_for(model, part_maps) if need_parts else None

            out = model(images)
            terms = compute_losses(out, labels, part_tgts, config)
            _check_finite(terms, model, epoch, step)

            optimizer.zero_grad()
            terms["L"].backward()
            optimizer.step()

            log.append({"epoch": epoch, "step": step,
                        "L": terms["L"].item(), "L_id": terms["L_id"].item(),
                        "L_tri": terms["L_tri"].item(),
                        "L_part": terms["L_part"].item(), "lr": lr})

    checkpoint_path = log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, "checkpoint.ckpt")
        save_training_checkpoint(checkpoint_path, model, optimizer,
                                 t.epochs, config)
        log_path = os.path.join(out_dir, "train_log.jsonl")
        write_log(log_path, log)
    return TrainResult(model, optimizer, log, checkpoint_path, log_path)


def _resume_fingerprint(config: RunConfig) -> str:
    """Fingerprint ignoring the epoch budget: resuming may extend it."""
    c = copy.deepcopy(config)
    c.trainer.epochs = 0
    return c.fingerprint()


def write_log(path: str, log: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_training_checkpoint(path, model: ReidModel,
                             optimizer: torch.optim.Adam | None,
                             epoch: int, config: RunConfig) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"param.{name}"] = tensor.detach().numpy().astype(np.float64)
    if optimizer is not None:
        state_by_name = _optimizer_state_by_name(model, optimizer)
        for pname, state in state_by_name.items():
            arrays[f"opt.{pname}.exp_avg"] = state["exp_avg"]
            arrays[f"opt.{pname}.exp_avg_sq"] = state["exp_avg_sq"]
            arrays[f"opt.{pname}.step"] = np.array(state["step"], dtype=np.float64)
    meta = {"epoch": epoch, "config": config.to_dict(),
            "config_fingerprint": config.fingerprint(),
            "num_train_ids": model.num_train_ids,
            "has_optimizer": optimizer is not None}
    save_arrays(path, arrays, meta)


def _optimizer_state_by_name(model, optimizer) -> dict[str, dict]:
    by_name = {}
    for pname, param in model.named_parameters():
        state = optimizer.state.get(param)
        if state:
            by_name[pname] = {
                "exp_avg": state["exp_avg"].detach().numpy().astype(np.float64),
                "exp_avg_sq": state["exp_avg_sq"].detach().numpy().astype(np.float64),
                "step": float(state["step"]),
            }
    return by_name


def load_training_checkpoint(path):
    """Returns (model, optimizer, epoch, config) rebuilt from a checkpoint."""
    arrays, meta = load_arrays(path)
    config = config_from_dict(meta["config"])
    model = ReidModel(config, meta["num_train_ids"])
    state = {name[len("param."):]: torch.from_numpy(arr)
             for name, arr in arrays.items() if name.startswith("param.")}
    model.load_state_dict(state)
    optimizer = build_optimizer(model, config)
    if meta.get("has_optimizer"):
        for pname, param in model.named_parameters():
            key = f"opt.{pname}.exp_avg"
            if key not in arrays:
                continue
            optimizer.state[param] = {
                "step": torch.tensor(float(arrays[f"opt.{pname}.step"])),
                "exp_avg": torch.from_numpy(arrays[key].copy()).to(param.dtype),
                "exp_avg_sq": torch.from_numpy(
                    arrays[f"opt.{pname}.exp_avg_sq"].copy()).to(param.dtype),
            }
    return model, optimizer, meta["epoch"], config
