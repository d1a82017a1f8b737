"""Two-branch orchestration: frame split, staged forward, cross-scale fusion.

A segment of N frames is split into M big frames at full resolution and
alpha*M small frames at half resolution. Both groups run through the shared
backbone; after configured stages the detail branch's maps are pooled,
channel-expanded and reshaped onto the context branch's time axis and added
in. Diverse attention and temporal selection attach where configured, and
each branch ends in spatial pooling plus a temporal mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .backbone import build_backbone
from .config import ModelConfig
from .dao import DiverseAttention
from .images import resize_bilinear
from .tensor import ConfigError, InputError, Parameter, Tensor
from .tks import TemporalKernelSelection


@dataclass
class SegmentSplit:
    big_frames: Tensor  # [M, 3, H, W]
    small_frames: Tensor  # [alpha*M, 3, H/2, W/2]
    alpha: int

    @property
    def num_big(self) -> int:
        return self.big_frames.shape[0]


@dataclass
class BiCnetDiagnostics:
    divergence: Tensor = None  # scalar, averaged over branches
    attention: dict = field(default_factory=dict)  # branch -> [AttentionMap]
    selection: dict = field(default_factory=dict)  # branch -> np.ndarray [K, C]


def split_segment(segment, alpha: int, dtype=np.float32) -> SegmentSplit:
    """Split [N,3,H,W] frames into M big and alpha*M half-resolution small frames.

    The first M = N/(1+alpha) frames stay at full resolution; the rest are
    downsampled bilinearly. N must be divisible by 1+alpha.
    """
    frames = segment.data if isinstance(segment, Tensor) else np.asarray(segment, dtype=dtype)
    n, _, height, width = frames.shape
    if n % (1 + alpha) != 0:
        raise InputError(f"segment length {n} is not divisible by 1+alpha={1 + alpha}")
    if height % 2 or width % 2:
        raise InputError(f"frame size {height}x{width} must be even to halve")
    m = n // (1 + alpha)
    big = frames[:m].astype(dtype)
    if alpha == 0:
        small = np.zeros((0, 3, height // 2, width // 2), dtype=dtype)
    else:
        small = resize_bilinear(frames[m:], height // 2, width // 2).astype(dtype)
    return SegmentSplit(Tensor(big), Tensor(small), alpha)


def csp_transform(f_d: Tensor, w_c: Tensor, alpha: int) -> Tensor:
    """Map detail features [M,C,H,W] onto the context grid [alpha*M,C,H/2,W/2].

    Max-pool by 2, expand channels C -> alpha*C with a 1x1 convolution, then
    split the alpha*C channels into alpha per-frame groups: group j of big
    frame m becomes output frame m*alpha + j.
    """
    m, channels, height, width = f_d.shape
    if w_c.shape != (alpha * channels, channels, 1, 1):
        raise ConfigError(
            f"cross-scale weight must be [{alpha * channels},{channels},1,1], got {tuple(w_c.shape)}"
        )
    pooled = T.max_pool2d(f_d, kernel=2, stride=2)
    expanded = T.conv2d(pooled, w_c)  # [M, alpha*C, H/2, W/2]
    return expanded.reshape(m * alpha, channels, height // 2, width // 2)


def aggregate_branches(f_d: Tensor, f_c: Tensor) -> Tensor:
    if f_d.shape != f_c.shape:
        raise ConfigError(f"branch features disagree: {f_d.shape} vs {f_c.shape}")
    return (f_d + f_c) * 0.5


class CrossScalePaths(nn.Module):
    def __init__(self, config: ModelConfig, rng, dtype):
        super().__init__()
        self.stages = tuple(config.csp.stages)
        self.alpha = config.alpha
        for stage in self.stages:
            channels = config.backbone.stage_channels(stage)
            weight = nn.fan_in_uniform(rng, (config.alpha * channels, channels, 1, 1), channels, dtype)
            setattr(self, f"stage{stage}", Parameter(weight, name=f"stage{stage}"))

    def weight_for(self, stage: int) -> Parameter:
        return getattr(self, f"stage{stage}")


class BiCnet(nn.Module):
    """Shared-backbone two-branch network with fusion, attention and selection."""

    def __init__(self, config: ModelConfig, rng, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = build_backbone(config.backbone, rng=rng, dtype=dtype)
        if config.csp.enabled and config.alpha > 0:
            self.csp = CrossScalePaths(config, rng, dtype)
        else:
            self.csp = None
        if config.dao.enabled:
            stage = config.dao.stage
            m = config.num_big_frames
            c_d, h_d, w_d = config.branch_shapes("detail")[stage]
            c_c, h_c, w_c = config.branch_shapes("context")[stage]
            self.dao_detail = DiverseAttention(m, c_d, h_d, w_d, rng, dtype,
                                               gain=config.dao.gain, similarity=config.dao.similarity)
            self.dao_context = (
                DiverseAttention(config.alpha * m, c_c, h_c, w_c, rng, dtype,
                                 gain=config.dao.gain, similarity=config.dao.similarity)
                if config.alpha > 0 else None
            )
        else:
            self.dao_detail = None
            self.dao_context = None
        if config.tks.enabled:
            # one block per insertion stage, shared by both branches
            blocks = [
                TemporalKernelSelection(config.backbone.stage_channels(stage), config.tks, rng, dtype)
                for stage in config.tks.stages
            ]
            self.tks_blocks = nn.ModuleList(blocks)
        else:
            self.tks_blocks = None

    @property
    def feature_dim(self) -> int:
        return self.backbone.out_channels

    def forward(self, split: SegmentSplit):
        """Run a split segment; returns (f_d, f_c, diagnostics)."""
        cfg = self.config
        if split.alpha != cfg.alpha:
            raise ConfigError(f"split alpha {split.alpha} does not match model alpha {cfg.alpha}")
        diag = BiCnetDiagnostics()
        detail = self.backbone.stem_forward(split.big_frames, "detail")
        has_context = split.alpha > 0 and split.small_frames.shape[0] > 0
        context = self.backbone.stem_forward(split.small_frames, "context") if has_context else None

        divergences = []
        for stage in range(1, 5):
            detail = self.backbone.forward_stage(detail, stage)
            if context is not None:
                context = self.backbone.forward_stage(context, stage)
                if self.csp is not None and stage in self.csp.stages:
                    bridged = csp_transform(detail.tensor, self.csp.weight_for(stage), cfg.alpha)
                    context.tensor = context.tensor + bridged
            if self.dao_detail is not None and stage == cfg.dao.stage:
                updated, loss_d, maps_d = self.dao_detail.forward(detail.tensor, branch="detail")
                detail.tensor = updated
                diag.attention["detail"] = maps_d
                divergences.append(loss_d)
                if context is not None and self.dao_context is not None:
                    updated, loss_c, maps_c = self.dao_context.forward(context.tensor, branch="context")
                    context.tensor = updated
                    diag.attention["context"] = maps_c
                    divergences.append(loss_c)
            if self.tks_blocks is not None and stage in cfg.tks.stages:
                block = self.tks_blocks[list(cfg.tks.stages).index(stage)]
                detail.tensor, g_detail = block.forward(detail.tensor)
                diag.selection[f"detail_stage{stage}"] = np.array(g_detail.data)
                if context is not None:
                    context.tensor, g_context = block.forward(context.tensor)
                    diag.selection[f"context_stage{stage}"] = np.array(g_context.data)

        f_d = detail.tensor.mean(axis=(2, 3)).mean(axis=0)  # spatial GAP, temporal mean
        f_c = context.tensor.mean(axis=(2, 3)).mean(axis=0) if context is not None else f_d
        if divergences:
            total = divergences[0]
            for extra in divergences[1:]:
                total = total + extra
            diag.divergence = total * (1.0 / len(divergences))
        else:
            diag.divergence = Tensor(np.zeros((), dtype=f_d.dtype))
        return f_d, f_c, diag


def build_model(config: ModelConfig, rng=None, dtype=np.float32) -> BiCnet:
    if rng is None:
        rng = np.random.default_rng(0)
    return BiCnet(config, rng, dtype)
