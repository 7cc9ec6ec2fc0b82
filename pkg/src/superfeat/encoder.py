"""Local feature extraction.

A small strided convolutional encoder maps an RGB image to an L x D set of
local features, with L = W * H the output grid size.  Multi-scale extraction
resizes the image bilinearly before encoding and skips scales whose resized
side falls below the encoder minimum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (AllScalesSkipped, NonFiniteActivation, ScaleSkippedWarning,
                     ScaleTooSmall)

DEFAULT_SCALES = (2.0, 1.414, 1.0, 0.707, 0.5, 0.353, 0.25)


@dataclass
class ImageTensor:
    """An RGB image with values in [0, 1] and an opaque identifier."""

    pixels: np.ndarray  # H x W x 3, float
    id: str

    def validate(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"image {self.id}: expected HxWx3 pixels")
        if self.pixels.shape[0] < 16 or self.pixels.shape[1] < 16:
            raise ValueError(f"image {self.id}: sides must be >= 16 pixels")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass
class LocalFeatureSet:
    """L x D local features from one image at one scale.

    Rows are laid out row-major over the output grid: location l sits at
    grid coordinates (y, x) = divmod(l, W).  spatial_shape is (W, H).
    """

    features: torch.Tensor
    spatial_shape: tuple[int, int]
    scale: float

    @property
    def count(self) -> int:
        return self.features.shape[0]

    def __post_init__(self):
        w, h = self.spatial_shape
        if self.features.shape[0] != w * h:
            raise ValueError("feature count does not match spatial shape")


def seed_parameters(module: nn.Module, seed: int):
    """Deterministically initialize all parameters of a module.

    Matrix-shaped parameters get Kaiming-style normals from a dedicated
    generator; vectors are zeroed except layer-norm gains, which are one.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, param in module.named_parameters():
        with torch.no_grad():
            if param.ndim > 1:
                fan_in = param.shape[1] * (param[0, 0].numel() if param.ndim > 2 else 1)
                std = (2.0 / max(1, fan_in)) ** 0.5
                values = torch.randn(param.shape, generator=gen, dtype=torch.float64)
                param.copy_((values * std).to(param.dtype))
            elif "weight" in name:  # layer-norm gain
                param.fill_(1.0)
            else:
                param.zero_()


class ConvEncoder(nn.Module):
    """Four-block convolutional encoder with total stride 8.

    Three stride-2 blocks with ReLU, then a stride-1 projection to the
    output dimension.  Output activations keep their sign so feature norms
    carry saliency information for norm-weighted pooling.
    """

    stride = 8

    def __init__(self, dim: int = 256, base_channels: int = 32,
                 min_side: int = 16, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        c = base_channels
        self.dim = dim
        self.base_channels = base_channels
        self.min_side = min_side
        self.seed = seed
        self.blocks = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(4 * c, dim, 3, stride=1, padding=1),
        )
        seed_parameters(self, seed)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.blocks[0].weight.dtype

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: B x 3 x H x W -> B x L x dim feature rows (row-major grid)."""
        out = self.blocks(images)
        b, d, h, w = out.shape
        return out.permute(0, 2, 3, 1).reshape(b, h * w, d), (w, h)

    def resized(self, image: ImageTensor, scale: float) -> torch.Tensor:
        """Bilinearly resize an image to the given scale (corner alignment off)."""
        if not 0 < scale <= 4:
            raise ScaleTooSmall(f"scale {scale} outside (0, 4]")
        h, w = image.size
        th, tw = max(1, round(h * scale)), max(1, round(w * scale))
        if min(th, tw) < self.min_side:
            raise ScaleTooSmall(
                f"image {image.id} at scale {scale}: resized side "
                f"{min(th, tw)} < minimum {self.min_side}")
        x = torch.from_numpy(np.ascontiguousarray(image.pixels)).to(self.dtype)
        x = x.permute(2, 0, 1).unsqueeze(0)
        if (th, tw) != (h, w):
            x = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)
        return x

    def extract(self, image: ImageTensor, scale: float = 1.0) -> LocalFeatureSet:
        """Encode one image at one scale into a LocalFeatureSet."""
        x = self.resized(image, scale)
        rows, (w, h) = self.forward(x)
        rows = rows[0]
        if not torch.isfinite(rows).all():
            raise NonFiniteActivation(f"image {image.id} at scale {scale}")
        return LocalFeatureSet(features=rows, spatial_shape=(w, h), scale=scale)

    def extract_multiscale(self, image: ImageTensor,
                           scales=DEFAULT_SCALES) -> list[LocalFeatureSet]:
        """Extract at each scale in order, skipping too-small ones with a warning."""
        if not scales:
            raise AllScalesSkipped("empty scale list")
        sets = []
        for scale in scales:
            try:
                sets.append(self.extract(image, scale))
            except ScaleTooSmall as exc:
                warnings.warn(str(exc), ScaleSkippedWarning, stacklevel=2)
        if not sets:
            raise AllScalesSkipped(
                f"image {image.id}: no scale in {list(scales)} is usable")
        return sets
