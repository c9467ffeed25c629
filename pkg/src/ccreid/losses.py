"""Composite objective: capsule margin loss, batch-hard triplet, part CE.

Total objective is lambda1 * L_id + lambda2 * L_tri + lambda3 * L_part.
"""

from __future__ import annotations

import torch
from torch.nn import functional as F

from .config import LossConfig

# Floor under the squared distances before the sqrt; keeps the Euclidean
# gradient bounded when two embeddings coincide.
_DIST_FLOOR = 1e-16


def margin_margins(cfg: LossConfig, num_classes: int) -> tuple[float, float]:
    if cfg.margin_mode == "fixed":
        return cfg.m_plus, cfg.m_minus
    if num_classes < 2:
        raise ValueError("class_count margin mode needs at least 2 classes")
    return num_classes / (num_classes - 1), 1.0 / num_classes


def margin_loss(lengths: torch.Tensor, labels: torch.Tensor,
                cfg: LossConfig) -> torch.Tensor:
    """Two-sided hinge on capsule lengths, summed over classes, batch-averaged.

    For the true class the length is pushed above m_plus, for the others
    below m_minus, with the negative side down-weighted by lambda_neg.
    """
    if lengths.dim() != 2:
        raise ValueError("lengths must be (batch, num_classes)")
    b, m = lengths.shape
    if labels.min() < 0 or labels.max() >= m:
        raise ValueError(f"label out of range 0..{m - 1}")
    m_plus, m_minus = margin_margins(cfg, m)
    y = F.one_hot(labels, num_classes=m).to(lengths.dtype)
    pos = torch.clamp(m_plus - lengths, min=0.0) ** 2
    neg = torch.clamp(lengths - m_minus, min=0.0) ** 2
    per_sample = (y * pos + cfg.lambda_neg * (1.0 - y) * neg).sum(dim=1)
    return per_sample.mean()


def pairwise_distances(features: torch.Tensor, metric: str = "euclidean",
                       normalize: bool = True) -> torch.Tensor:
    """(B, D) -> (B, B) distance matrix."""
    if normalize:
        features = F.normalize(features, p=2, dim=1, eps=1e-12)
    if metric == "euclidean":
        sq = (features * features).sum(dim=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * features @ features.T
        return torch.sqrt(torch.clamp(d2, min=_DIST_FLOOR))
    if metric == "cosine":
        sims = features @ features.T
        return 1.0 - sims
    raise ValueError(f"unknown distance metric {metric!r}")


def mine_batch_hard(dist: torch.Tensor, labels: torch.Tensor):
    """Hardest positive/negative per anchor; ties break at the lowest index.

    Returns (pos_idx, neg_idx, valid) where valid marks anchors that have
    at least one positive and one negative.
    """
    b = dist.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(b, dtype=torch.bool, device=dist.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    ninf = torch.full_like(dist, float("-inf"))
    pinf = torch.full_like(dist, float("inf"))
    # argmax/argmin return the first occurrence, which is the lowest index
    pos_idx = torch.where(pos_mask, dist, ninf).argmax(dim=1)
    neg_idx = torch.where(neg_mask, dist, pinf).argmin(dim=1)
    valid = pos_mask.any(dim=1) & neg_mask.any(dim=1)
    return pos_idx, neg_idx, valid


def batch_hard_triplet(features: torch.Tensor, labels: torch.Tensor,
                       cfg: LossConfig) -> torch.Tensor:
    """Mean over valid anchors of [alpha + d(a, hardest p) - d(a, hardest n)]+."""
    if features.shape[0] < 2:
        raise ValueError("degenerate batch: need at least 2 samples")
    dist = pairwise_distances(features, cfg.distance)
    pos_idx, neg_idx, valid = mine_batch_hard(dist, labels)
    if not valid.any():
        raise ValueError("degenerate batch: no anchor has both a positive "
                         "and a negative")
    idx = torch.arange(dist.shape[0], device=dist.device)
    hinge = cfg.alpha + dist[idx, pos_idx] - dist[idx, neg_idx]
    return torch.clamp(hinge[valid], min=0.0).mean()


def part_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel softmax cross-entropy.

    logits: (N, K, H, W); targets: (N, H, W) integer labels. N may fold
    batch and branch axes together.
    """
    k = logits.shape[1]
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"part target label out of range 0..{k - 1}")
    return F.cross_entropy(logits, targets, reduction="mean")


def total_loss(l_id, l_tri, l_part, cfg: LossConfig):
    return cfg.lambda1 * l_id + cfg.lambda2 * l_tri + cfg.lambda3 * l_part
