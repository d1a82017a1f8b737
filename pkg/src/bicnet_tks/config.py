"""Configuration types shared by the runtime model and the static cost analyzer.

A `ModelConfig` fully describes the architecture: backbone stages, the
big/small frame split ratio, fusion-path placement, attention placement and
the temporal-selection block. `RunConfig` adds dataset and training
sections and round-trips through JSON for the CLI.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .tensor import ConfigError


def conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@dataclass
class StageSpec:
    num_blocks: int
    out_channels: int
    stride: int


@dataclass
class BackboneConfig:
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_channels: int = 64
    stem_pool: bool = True  # 3x3 stride-2 max pool after the stem conv
    stages: list = field(default_factory=list)  # exactly 4 StageSpec entries
    block_kind: str = "bottleneck"  # "basic" | "bottleneck"
    last_downsample_removed: bool = True

    def validate(self):
        if len(self.stages) != 4:
            raise ConfigError(f"backbone needs exactly 4 stages, got {len(self.stages)}")
        if self.block_kind not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block kind '{self.block_kind}'")
        if self.last_downsample_removed and self.stages[3].stride != 1:
            raise ConfigError("last_downsample_removed requires stage_4 stride 1")
        for spec in self.stages:
            if spec.num_blocks < 1 or spec.out_channels < 1 or spec.stride not in (1, 2):
                raise ConfigError(f"invalid stage spec {spec}")

    def stage_channels(self, index: int) -> int:
        """Output channels of stage 1..4 (0 = stem)."""
        if index == 0:
            return self.stem_channels
        return self.stages[index - 1].out_channels

    def stage_shapes(self, input_hw):
        """(channels, height, width) after the stem (index 0) and stages 1..4."""
        h, w = input_hw
        h = conv_out(h, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        w = conv_out(w, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        if self.stem_pool:
            h = conv_out(h, 3, 2, 1)
            w = conv_out(w, 3, 2, 1)
        shapes = [(self.stem_channels, h, w)]
        for spec in self.stages:
            h = conv_out(h, 3, spec.stride, 1)
            w = conv_out(w, 3, spec.stride, 1)
            shapes.append((spec.out_channels, h, w))
        return shapes


@dataclass
class CspSettings:
    enabled: bool = True
    stages: tuple = (1, 2, 3)


@dataclass
class DaoSettings:
    enabled: bool = True
    stage: int = 3
    gain: float = 1.0
    similarity: str = "cosine"  # "cosine" | "dot"


@dataclass
class TksSettings:
    enabled: bool = True
    k: int = 2
    grid_h: int = 4
    grid_w: int = 2
    stages: tuple = (2,)
    fixed_fusion: bool = False
    dilations: tuple = None  # defaults to (1, .., k)

    def path_dilations(self) -> tuple:
        if self.dilations is not None:
            return tuple(self.dilations)
        return tuple(range(1, self.k + 1))

    def validate(self):
        if self.k < 1:
            raise ConfigError("tks.k must be >= 1")
        if self.dilations is not None and len(self.dilations) != self.k:
            raise ConfigError("tks.dilations length must equal tks.k")
        if any(s not in (1, 2, 3, 4) for s in self.stages):
            raise ConfigError("tks.stages must be within 1..4")


@dataclass
class ModelConfig:
    backbone: BackboneConfig
    alpha: int = 3
    segment_len: int = 8
    big_res: tuple = (256, 128)
    csp: CspSettings = field(default_factory=CspSettings)
    dao: DaoSettings = field(default_factory=DaoSettings)
    tks: TksSettings = field(default_factory=TksSettings)
    num_branches: int = 2

    @property
    def num_big_frames(self) -> int:
        return self.segment_len // (1 + self.alpha)

    @property
    def small_res(self) -> tuple:
        return (self.big_res[0] // 2, self.big_res[1] // 2)

    def branch_shapes(self, branch: str):
        res = self.big_res if branch == "detail" else self.small_res
        return self.backbone.stage_shapes(res)

    def validate(self):
        self.backbone.validate()
        if self.num_branches != 2:
            raise ConfigError("only the two-branch architecture is supported")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.segment_len % (1 + self.alpha) != 0:
            raise ConfigError(
                f"segment length {self.segment_len} is not divisible by 1+alpha={1 + self.alpha}"
            )
        h, w = self.big_res
        if h % 2 or w % 2:
            raise ConfigError("big-frame resolution must be even in both dimensions")
        if self.dao.stage not in (1, 2, 3, 4):
            raise ConfigError("dao.stage must be within 1..4")
        if self.dao.similarity not in ("cosine", "dot"):
            raise ConfigError(f"unknown attention similarity '{self.dao.similarity}'")
        if self.tks.enabled:
            self.tks.validate()
            for stage in self.tks.stages:
                for branch in ("detail", "context"):
                    _, sh, sw = self.branch_shapes(branch)[stage]
                    if sh % self.tks.grid_h or sw % self.tks.grid_w:
                        raise ConfigError(
                            f"tks grid {self.tks.grid_h}x{self.tks.grid_w} does not divide the "
                            f"{branch} stage_{stage} map ({sh}x{sw})"
                        )
        for branch in ("detail", "context"):
            for _, sh, sw in self.branch_shapes(branch):
                if sh < 1 or sw < 1:
                    raise ConfigError(f"resolution {self.big_res} collapses the {branch} branch")


@dataclass
class TrainConfig:
    lr: float = 3.5e-4
    weight_decay: float = 5e-4
    lr_decay: float = 0.1
    lr_step_epochs: int = 40
    epochs: int = 150
    lambda_div: float = 1.0
    triplet_margin: float = 0.3
    batch_p: int = 16
    batch_s: int = 4
    sample_stride: int = 4

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_p < 2 or self.batch_s < 2:
            raise ConfigError("PK batches need >= 2 identities and >= 2 segments each")

    def lr_at_epoch(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_step_epochs)


@dataclass
class DataConfig:
    root: str = "data/synth"
    num_ids: int = 20
    cams_per_id: int = 2
    tracklet_len: int = 64
    gen_res: tuple = (64, 32)

    def validate(self):
        if self.num_ids < 2:
            raise ConfigError("need at least 2 identities")
        if self.cams_per_id < 2:
            raise ConfigError("need at least 2 tracklets per identity for query/gallery")


@dataclass
class RunConfig:
    model: ModelConfig
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def validate(self):
        self.model.validate()
        self.data.validate()
        self.train.validate()
        need = (self.model.segment_len - 1) * self.train.sample_stride + 1
        if self.data.tracklet_len < need:
            raise ConfigError(
                f"tracklet length {self.data.tracklet_len} too short for "
                f"{self.model.segment_len}-frame segments at stride {self.train.sample_stride}"
            )

    # -- JSON round trip ---------------------------------------------------

    def to_dict(self) -> dict:
        def enc(obj):
            if dataclasses.is_dataclass(obj):
                return {k: enc(v) for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        out = {
            "seed": self.seed,
            "model": enc(self.model),
            "data": enc(self.data),
            "train": enc(self.train),
        }
        out["model"]["backbone"]["stages"] = [
            list(dataclasses.astuple(s)) for s in self.model.backbone.stages
        ]
        return json.loads(json.dumps(out))  # normalize tuples/np scalars

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        m = dict(raw.get("model", {}))
        bb = dict(m.pop("backbone", {}))
        stages = [StageSpec(*s) if isinstance(s, (list, tuple)) else StageSpec(**s)
                  for s in bb.pop("stages", [])]
        backbone = BackboneConfig(stages=stages, **bb)
        csp = CspSettings(**_tupled(m.pop("csp", {}), ("stages",)))
        dao = DaoSettings(**m.pop("dao", {}))
        tks = TksSettings(**_tupled(m.pop("tks", {}), ("stages", "dilations")))
        for key in ("big_res",):
            if key in m and m[key] is not None:
                m[key] = tuple(m[key])
        model = ModelConfig(backbone=backbone, csp=csp, dao=dao, tks=tks, **m)
        data = DataConfig(**_tupled(raw.get("data", {}), ("gen_res",)))
        train = TrainConfig(**raw.get("train", {}))
        return cls(model=model, data=data, train=train, seed=raw.get("seed", 0))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
        try:
            cfg = cls.from_dict(raw)
        except TypeError as e:
            raise ConfigError(f"{path}: {e}") from e
        cfg.validate()
        return cfg


def _tupled(raw: dict, keys) -> dict:
    out = dict(raw)
    for key in keys:
        if key in out and out[key] is not None:
            out[key] = tuple(out[key])
    return out


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def resnet50_backbone() -> BackboneConfig:
    """Standard 50-layer residual backbone, final downsample removed."""
    return BackboneConfig(
        stem_kernel=7, stem_stride=2, stem_channels=64, stem_pool=True,
        stages=[
            StageSpec(3, 256, 1),
            StageSpec(4, 512, 2),
            StageSpec(6, 1024, 2),
            StageSpec(3, 2048, 1),
        ],
        block_kind="bottleneck",
        last_downsample_removed=True,
    )


def mini_backbone() -> BackboneConfig:
    """Desk-scale backbone: one basic block per stage, same stride plan."""
    return BackboneConfig(
        stem_kernel=7, stem_stride=2, stem_channels=16, stem_pool=True,
        stages=[
            StageSpec(1, 16, 1),
            StageSpec(1, 32, 2),
            StageSpec(1, 64, 2),
            StageSpec(1, 128, 1),
        ],
        block_kind="basic",
        last_downsample_removed=True,
    )


def fullscale_model(alpha: int = 3, segment_len: int = 8) -> ModelConfig:
    return ModelConfig(
        backbone=resnet50_backbone(),
        alpha=alpha,
        segment_len=segment_len,
        big_res=(256, 128),
    )


def mini_model(alpha: int = 3, segment_len: int = 8) -> ModelConfig:
    return ModelConfig(
        backbone=mini_backbone(),
        alpha=alpha,
        segment_len=segment_len,
        big_res=(64, 32),
    )


def preset(name: str) -> RunConfig:
    if name == "resnet50":
        return RunConfig(
            model=fullscale_model(),
            data=DataConfig(num_ids=100, cams_per_id=3, tracklet_len=128, gen_res=(256, 128)),
            train=TrainConfig(epochs=150, batch_p=16, batch_s=4),
        )
    if name == "mini":
        # 45 epochs: the final stretch runs at the decayed rate, which both
        # settles retrieval quality and stabilizes the attention statistics
        return RunConfig(
            model=mini_model(),
            data=DataConfig(num_ids=20, cams_per_id=2, tracklet_len=64, gen_res=(64, 32)),
            train=TrainConfig(lr=0.01, epochs=45, batch_p=4, batch_s=2),
        )
    raise ConfigError(f"unknown preset '{name}' (expected 'resnet50' or 'mini')")
