"""Part-alignment head: per-branch part-label prediction and semantic pooling.

A 2x2 stride-2 transposed convolution upsamples the (7, 7) branch map to
(14, 14, hidden), followed by GroupNorm + ReLU and a 2x2 single-stride
classifier convolution (same-padded on the bottom/right) that emits one
logit map per part class. The per-pixel class posterior, averaged over the
map, is the 8-d semantic capsule handed to the capsule head.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .branches import branch_row_mask
from .config import PartHeadConfig
from .data import nearest_resample

DTYPE = torch.float64


class PartHead(nn.Module):
    """(B, C, 7, 7) branch map -> (B, K, 14, 14) part logits."""

    def __init__(self, in_channels: int, config: PartHeadConfig | None = None):
        super().__init__()
        self.config = config or PartHeadConfig()
        hidden = self.config.hidden_channels
        self.deconv = nn.ConvTranspose2d(in_channels, hidden,
                                         kernel_size=2, stride=2)
        self.norm = nn.GroupNorm(8, hidden)
        self.classifier = nn.Conv2d(hidden, self.config.num_classes,
                                    kernel_size=2)
        nn.init.zeros_(self.deconv.bias)
        nn.init.zeros_(self.classifier.bias)
        self.to(DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.deconv(x)
        x = F.relu(self.norm(x))
        # 2x2 kernel at stride 1 keeps size with one pad on bottom/right
        return self.classifier(F.pad(x, (0, 1, 0, 1)))


def pool_semantic(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel class softmax averaged over the map: (B, K, H, W) -> (B, K).

    The result is a probability vector, so it lives in the same bounded
    domain as the squashed capsules it joins.
    """
    if not torch.isfinite(logits.detach()).all():
        raise ValueError("part logits contain NaN/Inf")
    return torch.softmax(logits, dim=1).mean(dim=(2, 3))


def part_target(full_map: np.ndarray, branch_id: str,
                out_size: int = 14) -> np.ndarray:
    """Crop a native-resolution part map to a branch's rows, resample to 14x14."""
    lo, hi = branch_row_mask(branch_id, full_map.shape[0])
    crop = full_map[lo:hi]
    if crop.size == 0:
        raise ValueError(f"branch {branch_id} crop is empty for "
                         f"map height {full_map.shape[0]}")
    return nearest_resample(crop, (out_size, out_size))
