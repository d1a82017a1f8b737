"""Diverse spatial attention over consecutive frames.

The first frame of a branch gets a parameter-free self-attention map
(softmax over the channel-mean activation); every later frame owns a small
learned module (1x1 channel compression, then a fully-connected layer over
the flattened spatial positions, then softmax). A divergence loss rewards
maps that differ from each other, and each map is folded back into its
frame with a multiplicative residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ConfigError, Parameter, Tensor


@dataclass
class AttentionMap:
    values: Tensor  # [H, W], sums to 1, strictly positive
    frame_index: int  # 1-based within the branch
    branch: str


def self_attention_map(frame: Tensor) -> Tensor:
    """Softmax over all positions of the channel-mean of a [C,H,W] frame."""
    height, width = frame.shape[1], frame.shape[2]
    pooled = frame.mean(axis=0)  # [H, W]
    return pooled.reshape(height * width).softmax(axis=0).reshape(height, width)


class AttentionModule(nn.Module):
    """Learned per-frame attention: conv C->1, then FC over the HW positions."""

    def __init__(self, channels, height, width, rng, dtype=np.float32):
        super().__init__()
        self.height = height
        self.width = width
        self.channel_compress = Parameter(
            nn.fan_in_uniform(rng, (1, channels, 1, 1), channels, dtype), name="channel_compress"
        )
        # small FC init keeps the initial maps near uniform (logits near zero)
        self.spatial_fc = nn.Linear(height * width, height * width, bias=True, rng=rng,
                                    dtype=dtype, scale=0.01)

    def forward(self, frame: Tensor) -> Tensor:
        channels, height, width = frame.shape
        if self.channel_compress.shape[1] != channels or (height, width) != (self.height, self.width):
            raise ConfigError(
                f"attention module built for C={self.channel_compress.shape[1]} "
                f"{self.height}x{self.width}, got C={channels} {height}x{width}"
            )
        compressed = T.conv2d(frame.reshape(1, channels, height, width), self.channel_compress)
        flat = compressed.reshape(height * width)
        embedded = self.spatial_fc.forward(flat)
        return embedded.softmax(axis=0).reshape(height, width)


def divergence_loss(maps, similarity: str = "cosine") -> Tensor:
    """Negative weighted mean of (1 - sim) over ordered attention-map pairs.

    For maps A_1..A_M the pair (k, l), l < k, enters with weight
    1 / ((M-1)(k-1)); with cosine similarity the value lies in [-1, 0] and
    is 0 iff all maps coincide.
    """
    values = [m.values if isinstance(m, AttentionMap) else m for m in maps]
    count = len(values)
    if count < 2:
        return Tensor(np.zeros((), dtype=values[0].dtype if values else np.float32))
    shape = values[0].shape
    if any(v.shape != shape for v in values):
        raise ConfigError("attention maps must share a shape")
    flat = [v.reshape(-1) for v in values]
    total = None
    for k in range(2, count + 1):
        inner = None
        for l in range(1, k):
            s = _similarity(flat[k - 1], flat[l - 1], similarity)
            term = 1.0 - s
            inner = term if inner is None else inner + term
        weighted = inner * (1.0 / (k - 1))
        total = weighted if total is None else total + weighted
    return total * (-1.0 / (count - 1))


def _similarity(a: Tensor, b: Tensor, kind: str) -> Tensor:
    dot = (a * b).sum()
    if kind == "dot":
        return dot
    if kind == "cosine":
        na = (a * a).sum() ** 0.5
        nb = (b * b).sum() ** 0.5
        return dot / (na * nb)
    raise ConfigError(f"unknown similarity '{kind}'")


def apply_attention_residual(frame: Tensor, attention: Tensor, gain: float = 1.0) -> Tensor:
    """Scale a [C,H,W] frame by (1 + gain * A) with A broadcast over channels."""
    height, width = attention.shape
    return frame * (attention.reshape(1, height, width) * gain + 1.0)


class DiverseAttention(nn.Module):
    """Per-branch block: one self-attention frame plus M-1 learned modules."""

    def __init__(self, num_frames, channels, height, width, rng, dtype=np.float32,
                 gain: float = 1.0, similarity: str = "cosine"):
        super().__init__()
        self.gain = gain
        self.similarity = similarity
        self.num_frames = num_frames
        self.modules_per_frame = nn.ModuleList(
            [AttentionModule(channels, height, width, rng, dtype) for _ in range(num_frames - 1)]
        )

    def forward(self, features: Tensor, branch: str = "detail"):
        """[M,C,H,W] -> (updated features, divergence loss, list of AttentionMap)."""
        frames = features.shape[0]
        if frames != len(self.modules_per_frame) + 1:
            raise ConfigError(
                f"{len(self.modules_per_frame)} attention modules cannot serve {frames} frames"
            )
        maps = []
        updated = []
        for k in range(frames):
            frame = features[k]
            if k == 0:
                attention = self_attention_map(frame)
            else:
                attention = self.modules_per_frame[k - 1].forward(frame)
            maps.append(AttentionMap(attention, frame_index=k + 1, branch=branch))
            updated.append(apply_attention_residual(frame, attention, self.gain))
        loss = divergence_loss(maps, self.similarity)
        return T.stack(updated, axis=0), loss, maps
