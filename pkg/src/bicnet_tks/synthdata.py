"""Procedural synthetic video-reID benchmark.

Identities are simple articulated figures (head / torso / legs, optional
bag) with per-part colors and stripe textures, walking with a sinusoidal
gait in front of per-camera backgrounds with per-camera photometry. Some
identity pairs share the torso appearance on purpose, so retrieval cannot
rely on a single salient part. Tracklets may contain occlusion spans where
a gray box hides part of the figure.

Frames are stored as 8-bit PNG under `<root>/tracklets/<id>_<cam>_<k>/`
with an `index.json` manifest; generation is byte-reproducible per seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .bicnet import SegmentSplit, split_segment
from .images import resize_bilinear, to_uint8
from .tensor import ConfigError, InputError

INDEX_NAME = "index.json"


@dataclass
class SyntheticIdentity:
    id: int
    head: list
    torso: list
    legs: list
    bag: list = None  # None: no bag
    stripe_freq: float = 3.0
    stripe_phase: float = 0.0
    gait_amp: float = 1.5
    gait_freq: float = 0.35
    gait_phase: float = 0.0
    shares_torso_with: int = None


@dataclass
class TrackletInfo:
    identity: int
    camera: int
    directory: str
    num_frames: int
    split: str  # "query" | "gallery"
    occlusions: list = field(default_factory=list)  # [start, end, region]


class SynthDataset:
    """Read access to a generated dataset directory."""

    def __init__(self, root, meta: dict):
        self.root = root
        self.resolution = tuple(meta["resolution"])
        self.channel_mean = np.asarray(meta["channel_mean"], dtype=np.float32)
        self.identities = [SyntheticIdentity(**raw) for raw in meta["identities"]]
        self.tracklets = [TrackletInfo(**raw) for raw in meta["tracklets"]]
        self._cache = {}

    @classmethod
    def load(cls, root) -> "SynthDataset":
        index = os.path.join(root, INDEX_NAME)
        if not os.path.isfile(index):
            raise InputError(f"{root}: no {INDEX_NAME} found (generate the dataset first)")
        with open(index) as fh:
            return cls(root, json.load(fh))

    def identity_ids(self):
        return sorted({t.identity for t in self.tracklets})

    def tracklets_of(self, identity: int):
        return [t for t in self.tracklets if t.identity == identity]

    def frames(self, tracklet: TrackletInfo) -> np.ndarray:
        """Tracklet frames as float32 [T,3,H,W] in [0,1]."""
        if tracklet.directory not in self._cache:
            frames = []
            for i in range(tracklet.num_frames):
                path = os.path.join(self.root, tracklet.directory, f"frame_{i:04d}.png")
                with Image.open(path) as img:
                    frames.append(np.asarray(img, dtype=np.float32) / 255.0)
            stacked = np.stack(frames).transpose(0, 3, 1, 2)
            self._cache[tracklet.directory] = np.ascontiguousarray(stacked)
        return self._cache[tracklet.directory]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _draw_color(rng) -> np.ndarray:
    return rng.uniform(0.15, 0.95, size=3)


def _distinct_color(rng, taken, min_dist=0.12, tries=200) -> np.ndarray:
    color = _draw_color(rng)
    for _ in range(tries):
        if all(np.abs(color - t).max() >= min_dist for t in taken):
            break
        color = _draw_color(rng)
    return color


def _make_identities(num_ids: int, rng) -> list:
    """Identity roster; ids 2k/2k+1 share the torso color by construction."""
    identities = []
    leg_colors = []
    for ident in range(num_ids):
        head = _draw_color(rng)
        torso = _draw_color(rng)
        legs = _distinct_color(rng, leg_colors)
        leg_colors.append(legs)
        shares = None
        if ident % 2 == 1:
            torso = np.asarray(identities[ident - 1].torso)  # twin torso
            shares = ident - 1
            identities[ident - 1].shares_torso_with = ident
        bag = _draw_color(rng) if rng.random() < 0.5 else None
        identities.append(SyntheticIdentity(
            id=ident,
            head=[round(float(v), 6) for v in head],
            torso=[round(float(v), 6) for v in torso],
            legs=[round(float(v), 6) for v in legs],
            bag=None if bag is None else [round(float(v), 6) for v in bag],
            stripe_freq=round(float(rng.uniform(2.0, 6.0)), 6),
            stripe_phase=round(float(rng.uniform(0, 2 * np.pi)), 6),
            gait_amp=round(float(rng.uniform(0.8, 2.5)), 6),
            gait_freq=round(float(rng.uniform(0.2, 0.6)), 6),
            gait_phase=round(float(rng.uniform(0, 2 * np.pi)), 6),
            shares_torso_with=shares,
        ))
    return identities


def _fill_striped(frame, y0, y1, x0, x1, color, freq, phase, height):
    ys = np.arange(y0, y1)
    stripe = 1.0 + 0.25 * np.sin(2 * np.pi * freq * ys / height + phase)
    patch = np.asarray(color).reshape(3, 1, 1) * stripe.reshape(1, -1, 1)
    frame[:, y0:y1, x0:x1] = np.clip(patch, 0, 1)


def _render_frame(ident: SyntheticIdentity, cam: dict, t: int, height, width, rng) -> np.ndarray:
    frame = np.empty((3, height, width), dtype=np.float64)
    gradient = np.linspace(0.0, 0.12, height).reshape(1, -1, 1)
    frame[:] = np.asarray(cam["background"]).reshape(3, 1, 1) + gradient

    sway = ident.gait_amp * np.sin(ident.gait_freq * t + ident.gait_phase)
    cx = int(round(width / 2 + sway + rng.normal(0, 0.4)))

    def xr(half_width):
        lo = max(0, cx - half_width)
        hi = min(width, cx + half_width)
        return lo, hi

    head_y = (int(0.06 * height), int(0.20 * height))
    torso_y = (int(0.22 * height), int(0.55 * height))
    legs_y = (int(0.57 * height), int(0.95 * height))

    x0, x1 = xr(max(2, int(0.22 * width)))
    _fill_striped(frame, torso_y[0], torso_y[1], x0, x1, ident.torso,
                  ident.stripe_freq, ident.stripe_phase, height)
    x0, x1 = xr(max(1, int(0.14 * width)))
    _fill_striped(frame, head_y[0], head_y[1], x0, x1, ident.head, 1.0, 0.0, height)

    # scissoring legs: separation oscillates with the gait
    swing = 0.5 + 0.5 * np.sin(ident.gait_freq * t * 2 + ident.gait_phase)
    offset = max(1, int((0.06 + 0.08 * swing) * width))
    leg_w = max(1, int(0.08 * width))
    for side in (-1, 1):
        lo = np.clip(cx + side * offset - leg_w, 0, width)
        hi = np.clip(cx + side * offset + leg_w, 0, width)
        if hi > lo:
            _fill_striped(frame, legs_y[0], legs_y[1], lo, hi, ident.legs,
                          ident.stripe_freq / 2, ident.stripe_phase, height)

    if ident.bag is not None:
        lo = np.clip(cx + int(0.18 * width), 0, width)
        hi = np.clip(cx + int(0.32 * width), 0, width)
        if hi > lo:
            _fill_striped(frame, int(0.26 * height), int(0.50 * height), lo, hi,
                          ident.bag, 1.0, 0.0, height)

    frame = frame * cam["brightness"] + np.asarray(cam["tint"]).reshape(3, 1, 1)
    frame += rng.normal(0, 0.02, size=frame.shape)
    return np.clip(frame, 0.0, 1.0)


_OCCLUSION_REGIONS = ("top", "bottom", "left", "right")


def _apply_occlusion(frame, region, height, width):
    if region == "top":
        frame[:, : height // 2, :] = 0.45
    elif region == "bottom":
        frame[:, height // 2 :, :] = 0.45
    elif region == "left":
        frame[:, :, : width // 2] = 0.45
    else:
        frame[:, :, width // 2 :] = 0.45


def generate_dataset(num_ids: int, cams_per_id: int, tracklet_len: int, seed: int,
                     out_dir, resolution=(64, 32)) -> SynthDataset:
    """Render the dataset to `out_dir`; byte-identical for a fixed seed."""
    if num_ids < 2:
        raise InputError("need at least 2 identities")
    if cams_per_id < 2:
        raise InputError("need at least 2 cameras so query and gallery are non-empty")
    height, width = resolution
    root = str(out_dir)
    os.makedirs(os.path.join(root, "tracklets"), exist_ok=True)

    master = np.random.SeedSequence(seed)
    id_rng = np.random.default_rng(master.spawn(1)[0])
    identities = _make_identities(num_ids, id_rng)

    cam_rng = np.random.default_rng(master.spawn(1)[0])
    cameras = []
    for _ in range(cams_per_id):
        cameras.append({
            "background": cam_rng.uniform(0.05, 0.35, size=3),
            "brightness": cam_rng.uniform(0.85, 1.15),
            "tint": cam_rng.uniform(-0.04, 0.04, size=3),
        })

    tracklets = []
    mean_acc = np.zeros(3, dtype=np.float64)
    pixel_count = 0
    for ident in identities:
        for cam_index in range(cams_per_id):
            track_rng = np.random.default_rng(master.spawn(1)[0])
            rel = f"tracklets/{ident.id:04d}_{cam_index}_0"
            os.makedirs(os.path.join(root, rel), exist_ok=True)
            occlusions = []
            if track_rng.random() < 0.5:
                span = max(2, tracklet_len // 4)
                start = int(track_rng.integers(0, tracklet_len - span + 1))
                region = _OCCLUSION_REGIONS[int(track_rng.integers(len(_OCCLUSION_REGIONS)))]
                occlusions.append([start, start + span, region])
            for t in range(tracklet_len):
                frame = _render_frame(ident, cameras[cam_index], t, height, width, track_rng)
                for start, end, region in occlusions:
                    if start <= t < end:
                        _apply_occlusion(frame, region, height, width)
                pixels = to_uint8(frame)
                mean_acc += pixels.reshape(3, -1).mean(axis=1) / 255.0
                pixel_count += 1
                Image.fromarray(pixels.transpose(1, 2, 0)).save(
                    os.path.join(root, rel, f"frame_{t:04d}.png"), format="PNG"
                )
            tracklets.append(TrackletInfo(
                identity=ident.id,
                camera=cam_index,
                directory=rel,
                num_frames=tracklet_len,
                split="query" if cam_index == 0 else "gallery",
                occlusions=occlusions,
            ))

    meta = {
        "format": "synth-reid",
        "version": 1,
        "seed": seed,
        "resolution": [height, width],
        "channel_mean": [round(float(v), 8) for v in mean_acc / pixel_count],
        "identities": [_identity_dict(i) for i in identities],
        "tracklets": [_tracklet_dict(t) for t in tracklets],
    }
    with open(os.path.join(root, INDEX_NAME), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return SynthDataset(root, meta)


def _identity_dict(ident: SyntheticIdentity) -> dict:
    return {
        "id": ident.id, "head": ident.head, "torso": ident.torso, "legs": ident.legs,
        "bag": ident.bag, "stripe_freq": ident.stripe_freq, "stripe_phase": ident.stripe_phase,
        "gait_amp": ident.gait_amp, "gait_freq": ident.gait_freq, "gait_phase": ident.gait_phase,
        "shares_torso_with": ident.shares_torso_with,
    }


def _tracklet_dict(t: TrackletInfo) -> dict:
    return {
        "identity": t.identity, "camera": t.camera, "directory": t.directory,
        "num_frames": t.num_frames, "split": t.split, "occlusions": t.occlusions,
    }


# ---------------------------------------------------------------------------
# sampling / augmentation / batching
# ---------------------------------------------------------------------------


def sample_segment(frames: np.ndarray, n: int = 8, stride: int = 4, rng=None) -> np.ndarray:
    """Pick n frames with a fixed stride from a uniformly random valid start."""
    total = frames.shape[0]
    span = (n - 1) * stride + 1
    if total < span:
        raise InputError(f"tracklet of {total} frames too short for {n} frames at stride {stride}")
    rng = np.random.default_rng(0) if rng is None else rng
    start = int(rng.integers(0, total - span + 1))
    return frames[start : start + span : stride].copy()


def resize_and_split(segment: np.ndarray, alpha: int, big_res, small_res) -> SegmentSplit:
    """Resize a raw segment to the model's input sizes and split the frames."""
    big_h, big_w = big_res
    if tuple(small_res) != (big_h // 2, big_w // 2):
        raise ConfigError(f"small resolution {small_res} must be half of {big_res}")
    resized = resize_bilinear(np.asarray(segment, dtype=np.float32), big_h, big_w)
    return split_segment(resized, alpha)


def augment(frames: np.ndarray, rng, channel_mean=None, p_flip: float = 0.5,
            p_erase: float = 0.5, area_range=(0.02, 0.4)) -> np.ndarray:
    """Segment-consistent horizontal flip plus per-frame random erasing."""
    out = frames.copy()
    if rng.random() < p_flip:
        out = out[:, :, :, ::-1].copy()
    if p_erase <= 0:
        return out
    fill = np.zeros(3, dtype=out.dtype) if channel_mean is None else np.asarray(channel_mean, dtype=out.dtype)
    _, _, height, width = out.shape
    for t in range(out.shape[0]):
        if rng.random() >= p_erase:
            continue
        for _ in range(10):  # retry until the box fits
            target = rng.uniform(*area_range) * height * width
            aspect = rng.uniform(0.3, 1.0 / 0.3)
            eh = int(round(np.sqrt(target * aspect)))
            ew = int(round(np.sqrt(target / aspect)))
            if 0 < eh < height and 0 < ew < width:
                y = int(rng.integers(0, height - eh + 1))
                x = int(rng.integers(0, width - ew + 1))
                out[t, :, y : y + eh, x : x + ew] = fill.reshape(3, 1, 1)
                break
    return out


class PKSampler:
    """Round-robin PK batches: P identities, S segments per identity."""

    def __init__(self, dataset: SynthDataset, p: int, s: int, segment_len: int,
                 stride: int, rng, augmented: bool = True):
        self.dataset = dataset
        self.ids = dataset.identity_ids()
        if len(self.ids) < p:
            raise InputError(f"dataset has {len(self.ids)} identities, batches need {p}")
        self.p = p
        self.s = s
        self.segment_len = segment_len
        self.stride = stride
        self.rng = rng
        self.augmented = augmented
        self._queue = []

    def _next_ids(self):
        batch = []
        while len(batch) < self.p:
            if not self._queue:
                self._queue = [int(i) for i in self.rng.permutation(self.ids)]
            take = [i for i in self._queue if i not in batch][: self.p - len(batch)]
            if not take:
                self._queue = [int(i) for i in self.rng.permutation(self.ids)]
                continue
            for i in take:
                self._queue.remove(i)
            batch.extend(take)
        return batch

    def batches_per_epoch(self) -> int:
        return -(-len(self.ids) // self.p)

    def epoch(self):
        """Yield (segments [B,N,3,H,W], labels [B]) with B = P*S."""
        for _ in range(self.batches_per_epoch()):
            segments = []
            labels = []
            for ident in self._next_ids():
                tracks = self.dataset.tracklets_of(ident)
                for _ in range(self.s):
                    track = tracks[int(self.rng.integers(len(tracks)))]
                    seg = sample_segment(self.dataset.frames(track), self.segment_len,
                                         self.stride, self.rng)
                    if self.augmented:
                        seg = augment(seg, self.rng, self.dataset.channel_mean)
                    segments.append(seg)
                    labels.append(ident)
            yield np.stack(segments), np.asarray(labels)
