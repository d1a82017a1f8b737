"""Staged residual CNN feature extractor.

One instance serves both branches: the detail branch feeds full-resolution
frames and the context branch half-resolution frames through the *same*
parameters, so the two-branch model carries no extra backbone weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import BackboneConfig
from .tensor import Tensor, UsageError


@dataclass
class StageFeature:
    tensor: Tensor  # [frames, C, H, W]
    stage_index: int  # 0 = stem output, 1..4 = stage outputs
    branch: str  # "detail" | "context"


class BasicBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride, rng, dtype):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.bn1 = nn.BatchNorm2d(out_channels, dtype=dtype)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.bn2 = nn.BatchNorm2d(out_channels, dtype=dtype)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Conv2d(in_channels, out_channels, 1, stride=stride, rng=rng, dtype=dtype)
            self.downsample_bn = nn.BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x):
        out = self.bn1.forward(self.conv1.forward(x)).relu()
        out = self.bn2.forward(self.conv2.forward(out))
        shortcut = x if self.downsample is None else self.downsample_bn.forward(self.downsample.forward(x))
        return (out + shortcut).relu()


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3 (carries the stride), 1x1 expand; expansion factor 4."""

    def __init__(self, in_channels, out_channels, stride, rng, dtype):
        super().__init__()
        mid = out_channels // 4
        self.conv1 = nn.Conv2d(in_channels, mid, 1, rng=rng, dtype=dtype)
        self.bn1 = nn.BatchNorm2d(mid, dtype=dtype)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.bn2 = nn.BatchNorm2d(mid, dtype=dtype)
        self.conv3 = nn.Conv2d(mid, out_channels, 1, rng=rng, dtype=dtype)
        self.bn3 = nn.BatchNorm2d(out_channels, dtype=dtype)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Conv2d(in_channels, out_channels, 1, stride=stride, rng=rng, dtype=dtype)
            self.downsample_bn = nn.BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x):
        out = self.bn1.forward(self.conv1.forward(x)).relu()
        out = self.bn2.forward(self.conv2.forward(out)).relu()
        out = self.bn3.forward(self.conv3.forward(out))
        shortcut = x if self.downsample is None else self.downsample_bn.forward(self.downsample.forward(x))
        return (out + shortcut).relu()


class Stage(nn.Module):
    def __init__(self, block_cls, num_blocks, in_channels, out_channels, stride, rng, dtype):
        super().__init__()
        blocks = [block_cls(in_channels, out_channels, stride, rng, dtype)]
        for _ in range(num_blocks - 1):
            blocks.append(block_cls(out_channels, out_channels, 1, rng, dtype))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        for block in self.blocks:
            x = block.forward(x)
        return x


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig, rng, dtype):
        super().__init__()
        config.validate()
        self.config = config
        self.stem_conv = nn.Conv2d(3, config.stem_channels, config.stem_kernel,
                                   stride=config.stem_stride, padding=config.stem_kernel // 2,
                                   rng=rng, dtype=dtype)
        self.stem_bn = nn.BatchNorm2d(config.stem_channels, dtype=dtype)
        block_cls = BasicBlock if config.block_kind == "basic" else Bottleneck
        stages = []
        in_channels = config.stem_channels
        for spec in config.stages:
            stages.append(Stage(block_cls, spec.num_blocks, in_channels,
                                spec.out_channels, spec.stride, rng, dtype))
            in_channels = spec.out_channels
        self.stages = nn.ModuleList(stages)

    def stem_forward(self, frames: Tensor, branch: str) -> StageFeature:
        out = self.stem_bn.forward(self.stem_conv.forward(frames)).relu()
        if self.config.stem_pool:
            out = T.max_pool2d(out, kernel=3, stride=2, padding=1)
        return StageFeature(out, stage_index=0, branch=branch)

    def forward_stage(self, feature: StageFeature, stage_index: int) -> StageFeature:
        if stage_index != feature.stage_index + 1:
            raise UsageError(
                f"stage_{stage_index} requested on a stage_{feature.stage_index} feature; "
                "stages must run consecutively"
            )
        out = self.stages[stage_index - 1].forward(feature.tensor)
        return StageFeature(out, stage_index=stage_index, branch=feature.branch)

    def forward_features(self, frames: Tensor, branch: str) -> Tensor:
        feat = self.stem_forward(frames, branch)
        for stage in range(1, 5):
            feat = self.forward_stage(feat, stage)
        return feat.tensor

    @property
    def out_channels(self) -> int:
        return self.config.stages[-1].out_channels


def build_backbone(config: BackboneConfig, rng=None, dtype=np.float32) -> Backbone:
    if rng is None:
        rng = np.random.default_rng(0)
    return Backbone(config, rng, dtype)
