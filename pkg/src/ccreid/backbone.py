"""Feature-extractor contract plus a small convolutional default backbone.

Any module mapping a normalized (B, 3, h, w) image batch to a
(B, out_channels, out_height, out_width) feature map satisfies the backbone
contract; a full-scale pretrained network can be dropped in through a thin
adapter. The default here is a four-stage conv stack sized for desk-scale
training from scratch.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .config import BackboneConfig

DTYPE = torch.float64


class ToyBackbone(nn.Module):
    """Four strided conv stages, per-channel output scale, adaptive pooling.

    Output spatial size is fixed by the config regardless of input size.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        c_out = config.out_channels
        widths = [max(16, c_out // 4), max(24, c_out // 2), max(32, c_out), c_out]
        strides = [2, 2, 2, 1]
        layers = []
        c_in = 3
        for c, s in zip(widths, strides):
            conv = nn.Conv2d(c_in, c, kernel_size=3, stride=s, padding=1)
            nn.init.zeros_(conv.bias)  # weights keep the fan-in uniform default
            layers.append(conv)
            c_in = c
        self.convs = nn.ModuleList(layers)
        # gates the pre-pooling activations channel-wise
        self.out_scale = nn.Parameter(torch.ones(c_out, dtype=DTYPE))
        self.to(DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.relu(conv(x))
        x = x * self.out_scale[:, None, None]
        return F.adaptive_avg_pool2d(
            x, (self.config.out_height, self.config.out_width))


def normalize_images(images: torch.Tensor, config: BackboneConfig,
                     dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """uint8/float (B, h, w, 3) or (B, 3, h, w) -> normalized (B, 3, h, w)."""
    if images.dim() != 4:
        raise ValueError(f"expected a 4-d image batch, got shape {tuple(images.shape)}")
    if images.shape[-1] == 3 and images.shape[1] != 3:
        images = images.permute(0, 3, 1, 2)
    if images.shape[1] != 3:
        raise ValueError("backbone input must be RGB (3 channels)")
    x = images.to(dtype)
    if x.max() > 2.0:  # uint8 range
        x = x / 255.0
    return (x - config.norm_mean) / config.norm_std


def load_backbone_weights(backbone: nn.Module, path) -> None:
    """Load a named-array container into the backbone's state dict."""
    from .checkpoint import load_arrays

    arrays, _ = load_arrays(path)
    state = backbone.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise ValueError(f"backbone weights at {path} lack entries: "
                         f"{sorted(missing)}")
    backbone.load_state_dict(
        {k: torch.from_numpy(arrays[k]).to(state[k].dtype) for k in state})


def extract_features(images: torch.Tensor, backbone: nn.Module,
                     config: BackboneConfig) -> torch.Tensor:
    """Normalize a batch and run the backbone; checks weight finiteness."""
    dtype = DTYPE
    for name, param in backbone.named_parameters():
        dtype = param.dtype
        if not torch.isfinite(param).all():
            raise ValueError(f"backbone parameter {name} contains NaN/Inf")
    out = backbone(normalize_images(images, config, dtype))
    expected = (config.out_channels, config.out_height, config.out_width)
    if tuple(out.shape[1:]) != expected:
        raise ValueError(f"backbone produced {tuple(out.shape[1:])}, "
                         f"config requires {expected}")
    return out
