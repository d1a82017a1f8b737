"""Temporal kernel selection: partition, select, excite.

Frame feature maps are pooled onto a coarse region grid, pushed through K
parallel dilated temporal convolutions, fused with input-conditioned
per-channel softmax weights, and the fused signal is upsampled back and
added residually. The block preserves its input shape, so it can sit
after any backbone stage.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .config import TksSettings
from .tensor import ConfigError, Parameter, Tensor


def partition(features: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """Average-pool a [T,C,H,W] map onto a uniform grid_h x grid_w grid."""
    _, _, height, width = features.shape
    if height % grid_h or width % grid_w:
        raise ConfigError(f"grid {grid_h}x{grid_w} does not divide map {height}x{width}")
    return T.avg_pool2d(features, height // grid_h, width // grid_w)


def excite(features: Tensor, fused: Tensor) -> Tensor:
    """Upsample the fused grid signal back to the input size and add it."""
    _, _, height, width = features.shape
    _, _, grid_h, grid_w = fused.shape
    if height % grid_h or width % grid_w:
        raise ConfigError(f"cannot upsample {grid_h}x{grid_w} onto {height}x{width}")
    return features + T.upsample_nearest2d(fused, height // grid_h, width // grid_w)


class TemporalKernelSelection(nn.Module):
    """K dilated temporal-conv paths fused by per-channel selection weights."""

    def __init__(self, channels: int, settings: TksSettings, rng, dtype=np.float32):
        super().__init__()
        settings.validate()
        self.settings = settings
        self.channels = channels
        self.dilations = settings.path_dilations()
        k = settings.k
        conv_bound = 1.0 / np.sqrt(channels * 3)
        sel_bound = 1.0 / np.sqrt(channels)
        self.path_weights = Parameter(
            rng.uniform(-conv_bound, conv_bound, size=(k, channels, channels, 3)).astype(dtype),
            name="path_weights",
        )
        self.select_weights = Parameter(
            rng.uniform(-sel_bound, sel_bound, size=(k, channels, channels)).astype(dtype),
            name="select_weights",
        )

    def select(self, regions: Tensor):
        """Fuse the K path outputs of a [T,C,h,w] region map.

        Returns (fused map [T,C,h,w], selection weights [K,C]).
        """
        if regions.shape[1] != self.channels:
            raise ConfigError(
                f"selection block built for C={self.channels}, got C={regions.shape[1]}"
            )
        k = self.settings.k
        paths = [
            T.temporal_conv1d(regions, self.path_weights[i], dilation=self.dilations[i])
            for i in range(k)
        ]
        if self.settings.fixed_fusion:
            weights = Tensor(np.full((k, self.channels), 1.0 / k, dtype=regions.dtype))
        else:
            summed = paths[0]
            for path in paths[1:]:
                summed = summed + path
            pooled = summed.mean(axis=(0, 2, 3))  # global feature over T,h,w -> [C]
            logits = T.batched_matvec(self.select_weights, pooled)
            weights = logits.softmax(axis=0)
        fused = None
        for i, path in enumerate(paths):
            contrib = path * weights[i].reshape(1, self.channels, 1, 1)
            fused = contrib if fused is None else fused + contrib
        return fused, weights

    def forward(self, features: Tensor):
        """[T,C,H,W] -> (same-shape output, selection weights [K,C])."""
        regions = partition(features, self.settings.grid_h, self.settings.grid_w)
        fused, weights = self.select(regions)
        return excite(features, fused), weights
