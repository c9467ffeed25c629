"""Capsule layers for the clothing-desensitization head.

Each branch feature map is projected by eight parallel 2x2 stride-2
convolutions into 288 eight-dimensional primary capsules (one per spatial
site and channel of the 3x3x32 projection grid), optionally joined by the
pooled semantic capsule from the part-alignment head. After squashing, a
learned per-pair transform and softmax-normalized coupling combine them
into output capsules whose lengths form the clothes-insensitive descriptor.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import CapsuleConfig

DTYPE = torch.float64

# Norm floor: the squash scale uses sqrt(|v|^2 + SQUASH_EPS^2), which keeps
# the gradient finite at v = 0 without perturbing values at ordinary norms.
SQUASH_EPS = 1e-9


def squash(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Scale vectors to norm |v|^2 / (1 + |v|^2), direction preserved.

    Maps the zero vector to itself (the removable singularity of the
    closed form); every output norm is strictly below 1.
    """
    if not torch.isfinite(v.detach()).all():
        raise ValueError("squash input contains NaN/Inf")
    sq = (v * v).sum(dim=dim, keepdim=True)
    norm = torch.sqrt(sq + SQUASH_EPS ** 2)
    return v * (sq / (1.0 + sq) / norm)


class PrimaryCapsules(nn.Module):
    """Eight parallel 2x2 stride-2 convolutions, reshaped into capsules.

    A (B, C, 7, 7) branch map becomes (B, 288, 8): component m of capsule
    (site p, channel c) is parallel map m at (p, c). Output is not squashed;
    squashing happens after the semantic capsule is appended.
    """

    CAPS_DIM = 8

    def __init__(self, in_channels: int, conv_channels: int = 32):
        super().__init__()
        if in_channels < 1:
            raise ValueError("primary capsules need at least one input channel")
        self.conv_channels = conv_channels
        # one fused conv == 8 parallel convs; output channel m*C+c is
        # parallel map m, channel c
        self.conv = nn.Conv2d(in_channels, self.CAPS_DIM * conv_channels,
                              kernel_size=2, stride=2)
        nn.init.zeros_(self.conv.bias)
        self.to(DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        maps = self.conv(x)                       # (B, 8*C, H', W')
        _, _, hh, ww = maps.shape
        maps = maps.view(b, self.CAPS_DIM, self.conv_channels, hh * ww)
        # bank index runs sites first, channels second: i = p*C + c
        return maps.permute(0, 3, 2, 1).reshape(b, hh * ww * self.conv_channels,
                                                self.CAPS_DIM)

    def num_capsules(self, height: int, width: int) -> int:
        return primary_capsule_count(height, width, self.conv_channels)


def primary_capsule_count(height: int, width: int,
                          conv_channels: int = 32) -> int:
    """Capsules a 2x2 stride-2 projection yields on an (height, width) grid."""
    return ((height - 2) // 2 + 1) * ((width - 2) // 2 + 1) * conv_channels


class CapsuleLayer(nn.Module):
    """Per-pair transform plus coupled aggregation of a capsule bank.

    Input (B, n_in, d_in) of squashed capsules; predictions are
    u_hat[i, j] = W[i, j] @ v[i], combined as s[j] = sum_i u[i, j] u_hat[i, j]
    with u = softmax over i of the coupling logits. With routing_iters > 1
    the logits are refined per sample by the usual agreement increment.
    Returns (capsules (B, n_out, d_out), lengths (B, n_out)).
    """

    def __init__(self, n_in: int, d_in: int, n_out: int, d_out: int,
                 coupling: str = "per_input", routing_iters: int = 1,
                 squash_output: bool = True, w_groups: int | None = None):
        super().__init__()
        if w_groups is not None and n_in % w_groups:
            raise ValueError(f"w_groups={w_groups} must divide n_in={n_in}")
        self.n_in, self.d_in = n_in, d_in
        self.n_out, self.d_out = n_out, d_out
        self.routing_iters = routing_iters
        self.squash_output = squash_output
        self.w_groups = w_groups
        rows = w_groups if w_groups else n_in
        bound = 1.0 / d_in ** 0.5
        self.weight = nn.Parameter(
            torch.empty(rows, n_out, d_out, d_in, dtype=DTYPE).uniform_(-bound, bound))
        if coupling == "per_input":
            self.coupling_logits = nn.Parameter(torch.zeros(n_in, 1, dtype=DTYPE))
        elif coupling == "per_pair":
            self.coupling_logits = nn.Parameter(torch.zeros(n_in, n_out, dtype=DTYPE))
        else:
            raise ValueError(f"unknown coupling mode {coupling!r}")

    def _expanded_weight(self) -> torch.Tensor:
        if self.w_groups is None:
            return self.weight
        # capsule i sits in channel group i % w_groups (banks are site-major)
        reps = self.n_in // self.w_groups
        return self.weight.repeat(reps, 1, 1, 1)

    def coupling(self, logits: torch.Tensor | None = None) -> torch.Tensor:
        """Softmax over the input-capsule axis; columns sum to 1."""
        if logits is None:
            logits = self.coupling_logits
        return torch.softmax(logits, dim=-2)

    def forward(self, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if v.shape[-2:] != (self.n_in, self.d_in):
            raise ValueError(f"expected capsules (*, {self.n_in}, {self.d_in}), "
                             f"got {tuple(v.shape)}")
        weight = self._expanded_weight()
        if self.routing_iters == 1:
            # static coupling folds into the transform; the per-pair
            # prediction tensor never needs materializing
            u = self.coupling(self.coupling_logits.expand(self.n_in, self.n_out))
            s = torch.einsum("ijod,bid->bjo", weight * u[:, :, None, None], v)
            out = squash(s) if self.squash_output else s
            return out, out.norm(dim=-1)
        u_hat = torch.einsum("ijod,bid->bijo", weight, v)
        logits = self.coupling_logits.expand(self.n_in, self.n_out)
        logits = logits.expand(v.shape[0], -1, -1)
        out = None
        for it in range(self.routing_iters):
            u = self.coupling(logits)
            s = torch.einsum("bij,bijo->bjo", u, u_hat)
            out = squash(s) if self.squash_output else s
            if it + 1 < self.routing_iters:
                logits = logits + torch.einsum("bijo,bjo->bij", u_hat, out)
        lengths = out.norm(dim=-1)
        return out, lengths


class BranchCapsules(nn.Module):
    """Primary plus attribute capsules for one branch."""

    def __init__(self, in_channels: int, n_caps: int, cfg: CapsuleConfig):
        super().__init__()
        self.n_caps = n_caps
        self.primary = PrimaryCapsules(in_channels, cfg.conv_channels)
        groups = cfg.conv_channels if cfg.share_w_channel_groups else None
        if groups is not None and n_caps % groups:
            groups = None  # the semantic capsule breaks exact grouping
        self.attribute = CapsuleLayer(
            n_caps, PrimaryCapsules.CAPS_DIM, cfg.j_out, cfg.d_out,
            coupling=cfg.coupling, routing_iters=cfg.routing_iters,
            squash_output=cfg.squash_output, w_groups=groups)
        self.to(DTYPE)

    def forward(self, branch_map: torch.Tensor,
                semantic: torch.Tensor | None = None):
        bank = self.primary(branch_map)
        if semantic is not None:
            bank = torch.cat([bank, semantic.unsqueeze(1)], dim=1)
        if bank.shape[1] != self.n_caps:
            raise ValueError(f"capsule bank has {bank.shape[1]} rows, "
                             f"layer was built for {self.n_caps}")
        bank = squash(bank)
        caps, lengths = self.attribute(bank)
        return bank, caps, lengths


def build_branch_capsules(in_channels: int, with_semantic: bool,
                          cfg: CapsuleConfig,
                          grid: tuple[int, int] = (7, 7)) -> BranchCapsules:
    n_conv = primary_capsule_count(*grid, cfg.conv_channels)
    return BranchCapsules(in_channels, n_conv + int(with_semantic), cfg)
