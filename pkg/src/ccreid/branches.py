"""Multigranular horizontal partitioning of the backbone feature map.

The feature map's rows are average-pooled to 6 (the LCM of 2 and 3), sliced
into one whole, two halves and three thirds, and each slice is pooled back
to the row count the downstream heads expect. Pooling uses interval-overlap
weights, so every output row is a convex combination of input rows (each
weight-matrix row sums to 1) and the whole partition is one fixed linear map.

Tensors are channel-first: (B, C, H, W).
"""

from __future__ import annotations

import math
from fractions import Fraction

import torch

BRANCH_IDS = ("F1", "F2", "F3", "F4", "F5", "F6")

# Row coverage of each branch as fractions of the image height.
ROW_RANGES = {
    "F1": (Fraction(0), Fraction(1)),
    "F2": (Fraction(0), Fraction(1, 2)),
    "F3": (Fraction(1, 2), Fraction(1)),
    "F4": (Fraction(0), Fraction(1, 3)),
    "F5": (Fraction(1, 3), Fraction(2, 3)),
    "F6": (Fraction(2, 3), Fraction(1)),
}

# Slices of the 6-row intermediate map, per branch.
_ROW_SLICES = {
    "F1": (0, 6), "F2": (0, 3), "F3": (3, 6),
    "F4": (0, 2), "F5": (2, 4), "F6": (4, 6),
}


def pool_matrix(n_in: int, n_out: int) -> torch.Tensor:
    """Interval-overlap average-pooling weights, shape (n_out, n_in).

    Output cell i covers [i*n_in/n_out, (i+1)*n_in/n_out); weights are the
    overlap of that interval with each unit input cell, normalized so each
    row sums to exactly 1. Computed in exact rational arithmetic.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("pooling sizes must be positive")
    step = Fraction(n_in, n_out)
    w = torch.zeros(n_out, n_in, dtype=torch.float64)
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        for j in range(int(lo), n_in):
            overlap = min(hi, Fraction(j + 1)) - max(lo, Fraction(j))
            if overlap <= 0:
                break
            w[i, j] = float(overlap / step)
    return w


def branch_matrices(n_rows: int, out_rows: int = 7) -> dict[str, torch.Tensor]:
    """Per-branch (out_rows, n_rows) row-mixing matrices.

    Composition of pool-to-6, slice, pool-back; rows still sum to 1.
    """
    if n_rows < 3:
        raise ValueError(f"partitioning needs at least 3 feature rows, got {n_rows}")
    to6 = pool_matrix(n_rows, 6)
    mats = {}
    for bid in BRANCH_IDS:
        a, b = _ROW_SLICES[bid]
        mats[bid] = pool_matrix(b - a, out_rows) @ to6[a:b, :]
    return mats


def partition(feature: torch.Tensor, out_rows: int = 7) -> list[torch.Tensor]:
    """Split (B, C, H, W) into the six branch maps, each (B, C, out_rows, W)."""
    mats = branch_matrices(feature.shape[-2], out_rows)
    return [torch.einsum("oh,bchw->bcow", mats[bid].to(feature.dtype), feature)
            for bid in BRANCH_IDS]


def branch_row_mask(branch_id: str, image_height: int) -> tuple[int, int]:
    """Pixel row interval [start, end) a branch covers at image resolution."""
    if branch_id not in ROW_RANGES:
        raise ValueError(f"unknown branch id {branch_id!r}")
    if image_height < 6:
        raise ValueError("image height must be at least 6 pixels")
    start, end = ROW_RANGES[branch_id]
    return math.floor(start * image_height), math.ceil(end * image_height)
