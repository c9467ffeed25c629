"""End-to-end network: backbone -> branches -> capsule/part heads.

Ablation flags select the architecture:
  {}                  global average pooling + linear classifier
  {mgr}               six-branch pooled features, concatenated
  {mgr, cdn}          capsule descriptor per branch, identity capsules
  {mgr, cdn, psa}     plus part heads feeding one semantic capsule per branch
cdn without mgr runs the capsule head on the whole feature map only.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import ToyBackbone, extract_features
from .branches import BRANCH_IDS, partition
from .capsules import CapsuleLayer, build_branch_capsules
from .config import RunConfig
from .parts import PartHead, pool_semantic


@dataclass
class ModelOutput:
    descriptor: torch.Tensor            # (B, D)
    id_scores: torch.Tensor             # (B, M) lengths or logits
    id_kind: str                        # "margin_lengths" | "class_logits"
    part_logits: torch.Tensor | None    # (B, n_branches, K, 14, 14)
    semantic: torch.Tensor | None       # (B, n_branches, K)


class ReidModel(nn.Module):
    def __init__(self, config: RunConfig, num_train_ids: int):
        super().__init__()
        config.trainer.validate()
        config.backbone.validate()
        self.config = config
        self.ablation = frozenset(config.trainer.ablation)
        self.num_train_ids = num_train_ids

        self.backbone = ToyBackbone(config.backbone)
        self.branch_ids = list(BRANCH_IDS) if "mgr" in self.ablation else ["F1"]
        c_f = config.backbone.out_channels
        grid = (config.backbone.out_height, config.backbone.out_width)

        if "cdn" in self.ablation:
            with_sem = "psa" in self.ablation
            if config.cdn.share_across_branches:
                shared = build_branch_capsules(c_f, with_sem, config.cdn, grid)
                self.branch_caps = nn.ModuleDict(
                    {bid: shared for bid in self.branch_ids})
            else:
                self.branch_caps = nn.ModuleDict(
                    {bid: build_branch_capsules(c_f, with_sem, config.cdn, grid)
                     for bid in self.branch_ids})
            self.descriptor_dim = len(self.branch_ids) * config.cdn.j_out
            self.identity_caps = CapsuleLayer(
                n_in=len(self.branch_ids) * config.cdn.j_out,
                d_in=config.cdn.d_out, n_out=num_train_ids,
                d_out=config.cdn.d_id, coupling=config.cdn.coupling,
                routing_iters=1, squash_output=True)
        else:
            self.descriptor_dim = len(self.branch_ids) * c_f
            self.classifier = nn.Linear(self.descriptor_dim, num_train_ids)
            nn.init.zeros_(self.classifier.bias)

        if "psa" in self.ablation:
            self.part_heads = nn.ModuleDict(
                {bid: PartHead(c_f, config.psa) for bid in self.branch_ids})
        self.to(getattr(torch, config.trainer.precision))

    def branch_maps(self, features: torch.Tensor) -> list[torch.Tensor]:
        if "mgr" in self.ablation:
            return partition(features, self.config.backbone.out_height)
        return [features]

    def forward(self, images: torch.Tensor) -> ModelOutput:
        features = extract_features(images, self.backbone, self.config.backbone)
        maps = self.branch_maps(features)

        part_logits = semantic = None
        if "psa" in self.ablation:
            logits = [self.part_heads[bid](m)
                      for bid, m in zip(self.branch_ids, maps)]
            part_logits = torch.stack(logits, dim=1)
            semantic = torch.stack([pool_semantic(l) for l in logits], dim=1)

        if "cdn" in self.ablation:
            caps_all, lengths_all = [], []
            for i, (bid, m) in enumerate(zip(self.branch_ids, maps)):
                sem = semantic[:, i] if semantic is not None else None
                _, caps, lengths = self.branch_caps[bid](m, sem)
                caps_all.append(caps)
                lengths_all.append(lengths)
            descriptor = torch.cat(lengths_all, dim=1)
            _, id_lengths = self.identity_caps(torch.cat(caps_all, dim=1))
            return ModelOutput(descriptor, id_lengths, "margin_lengths",
                               part_logits, semantic)

        pooled = [m.mean(dim=(2, 3)) for m in maps]
        descriptor = torch.cat(pooled, dim=1)
        return ModelOutput(descriptor, self.classifier(descriptor),
                           "class_logits", part_logits, semantic)
