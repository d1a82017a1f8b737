"""Static FLOPs and parameter accounting, straight from the configuration.

Counts multiply-accumulate operations (1 MAC = 1 FLOP) for convolutions and
fully-connected layers; normalization, activations, pooling, upsampling and
residual additions are excluded. Parameter counts cover convolution and FC
weights plus 2*C per normalization layer; the identity classifier is never
included. Everything is derived from `ModelConfig` alone, so a full-scale
network can be priced without building it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import BackboneConfig, ModelConfig, conv_out
from .tensor import ConfigError

GIGA = 1e9


@dataclass
class LayerCost:
    name: str
    params: int
    macs: int


@dataclass
class CostReport:
    layers: list = field(default_factory=list)  # per-layer LayerCost
    components: dict = field(default_factory=dict)  # module -> {"params", "macs_per_segment"}
    total_params: int = 0
    total_macs: int = 0  # per frame, backbone at the requested resolution
    avg_macs_per_frame: float = None
    cost_fraction_vs_baseline: float = None
    notes: list = field(default_factory=list)

    @property
    def total_gflops(self) -> float:
        return self.total_macs / GIGA

    @property
    def avg_gflops_per_frame(self) -> float:
        return None if self.avg_macs_per_frame is None else self.avg_macs_per_frame / GIGA

    def to_dict(self) -> dict:
        out = {
            "total_params": int(self.total_params),
            "total_macs": int(self.total_macs),
            "total_gflops": self.total_gflops,
            "components": self.components,
            "notes": list(self.notes),
        }
        if self.avg_macs_per_frame is not None:
            out["avg_macs_per_frame"] = self.avg_macs_per_frame
            out["avg_gflops_per_frame"] = self.avg_gflops_per_frame
        if self.cost_fraction_vs_baseline is not None:
            out["cost_fraction_vs_baseline"] = self.cost_fraction_vs_baseline
        if self.layers:
            out["layers"] = [
                {"name": l.name, "params": int(l.params), "macs": int(l.macs)} for l in self.layers
            ]
        return out


def _conv_cost(name, cin, cout, kernel, in_hw, stride, padding) -> tuple:
    h = conv_out(in_hw[0], kernel, stride, padding)
    w = conv_out(in_hw[1], kernel, stride, padding)
    params = kernel * kernel * cin * cout
    macs = params * h * w
    return LayerCost(name, params, macs), (h, w)


def _norm_cost(name, channels) -> LayerCost:
    return LayerCost(name, 2 * channels, 0)


def backbone_layers(config: BackboneConfig, input_hw) -> list:
    """Per-layer costs of one frame through the backbone at `input_hw`."""
    config.validate()
    layers = []
    conv, hw = _conv_cost("stem.conv", 3, config.stem_channels, config.stem_kernel,
                          input_hw, config.stem_stride, config.stem_kernel // 2)
    layers.append(conv)
    layers.append(_norm_cost("stem.norm", config.stem_channels))
    if config.stem_pool:
        hw = (conv_out(hw[0], 3, 2, 1), conv_out(hw[1], 3, 2, 1))
    in_ch = config.stem_channels
    for si, spec in enumerate(config.stages, start=1):
        for bi in range(spec.num_blocks):
            stride = spec.stride if bi == 0 else 1
            prefix = f"stage{si}.block{bi}"
            block_in_hw = hw
            if config.block_kind == "basic":
                conv, hw = _conv_cost(f"{prefix}.conv1", in_ch, spec.out_channels, 3, hw, stride, 1)
                layers += [conv, _norm_cost(f"{prefix}.norm1", spec.out_channels)]
                conv, hw = _conv_cost(f"{prefix}.conv2", spec.out_channels, spec.out_channels, 3, hw, 1, 1)
                layers += [conv, _norm_cost(f"{prefix}.norm2", spec.out_channels)]
            else:
                mid = spec.out_channels // 4
                conv, _ = _conv_cost(f"{prefix}.conv1", in_ch, mid, 1, hw, 1, 0)
                layers += [conv, _norm_cost(f"{prefix}.norm1", mid)]
                conv, hw = _conv_cost(f"{prefix}.conv2", mid, mid, 3, hw, stride, 1)
                layers += [conv, _norm_cost(f"{prefix}.norm2", mid)]
                conv, _ = _conv_cost(f"{prefix}.conv3", mid, spec.out_channels, 1, hw, 1, 0)
                layers += [conv, _norm_cost(f"{prefix}.norm3", spec.out_channels)]
            if stride != 1 or in_ch != spec.out_channels:
                conv, _ = _conv_cost(f"{prefix}.downsample", in_ch, spec.out_channels, 1,
                                     block_in_hw, stride, 0)
                layers += [conv, _norm_cost(f"{prefix}.downsample_norm", spec.out_channels)]
            in_ch = spec.out_channels
    return layers


def _csp_costs(config: ModelConfig) -> tuple:
    """(params, MACs per segment) of the cross-scale paths."""
    if not (config.csp.enabled and config.alpha > 0):
        return 0, 0
    m = config.num_big_frames
    detail_shapes = config.backbone.stage_shapes(config.big_res)
    params = 0
    macs = 0
    for stage in config.csp.stages:
        channels, h, w = detail_shapes[stage]
        params += config.alpha * channels * channels
        macs += m * channels * (config.alpha * channels) * (h // 2) * (w // 2)
    return params, macs


def _dao_costs(config: ModelConfig) -> tuple:
    if not config.dao.enabled:
        return 0, 0
    m = config.num_big_frames
    params = 0
    macs = 0
    per_branch = [("detail", config.big_res, m)]
    if config.alpha > 0:
        per_branch.append(("context", config.small_res, config.alpha * m))
    for _, res, frames in per_branch:
        channels, h, w = config.backbone.stage_shapes(res)[config.dao.stage]
        hw = h * w
        module_params = channels + hw * hw + hw  # 1x1 compress + FC weight + bias
        module_macs = channels * hw + hw * hw
        params += (frames - 1) * module_params
        macs += (frames - 1) * module_macs
    return params, macs


def _tks_costs(config: ModelConfig) -> tuple:
    if not config.tks.enabled:
        return 0, 0
    k = config.tks.k
    cells = config.tks.grid_h * config.tks.grid_w
    m = config.num_big_frames
    params = 0
    macs = 0
    for stage in config.tks.stages:
        channels = config.backbone.stage_channels(stage)
        params += k * channels * channels * 3 + k * channels * channels
        frame_counts = [m] + ([config.alpha * m] if config.alpha > 0 else [])
        for frames in frame_counts:
            macs += k * 3 * channels * channels * frames * cells  # temporal conv paths
            macs += k * channels * channels  # selection matrices
    return params, macs


def count_params(config: ModelConfig) -> CostReport:
    """Exact parameter count per component (classifier excluded)."""
    config.validate()
    layers = backbone_layers(config.backbone, config.big_res)
    backbone_params = sum(l.params for l in layers)
    csp_params, _ = _csp_costs(config)
    dao_params, _ = _dao_costs(config)
    tks_params, _ = _tks_costs(config)
    report = CostReport(layers=layers)
    report.components = {
        "backbone": {"params": backbone_params},
        "csp": {"params": csp_params},
        "dao": {"params": dao_params},
        "tks": {"params": tks_params},
    }
    report.total_params = backbone_params + csp_params + dao_params + tks_params
    report.notes = _notes(config)
    return report


def count_flops(config: ModelConfig, input_resolution) -> CostReport:
    """Per-frame MACs of one frame through the backbone at a given resolution."""
    layers = backbone_layers(config.backbone, tuple(input_resolution))
    report = CostReport(layers=layers)
    report.total_macs = sum(l.macs for l in layers)
    report.total_params = sum(l.params for l in layers)
    report.components = {"backbone": {"params": report.total_params, "macs": report.total_macs}}
    report.notes = _notes(config)
    return report


def cost_fraction(alpha: int) -> float:
    """Fraction of single-branch cost kept when splitting frames 1 : alpha.

    Big frames cost p each and half-resolution frames p/4, so a segment
    averages (4 + alpha) / (4 * (1 + alpha)) of the baseline per frame.
    """
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    return (4.0 + alpha) / (4.0 * (1.0 + alpha))


def avg_flops_per_frame(config: ModelConfig, alpha: int = None) -> float:
    """Average per-frame cost in GFLOPs, fusion/attention/selection included."""
    return full_report(config, alpha).avg_gflops_per_frame


def full_report(config: ModelConfig, alpha: int = None) -> CostReport:
    """Complete cost report: parameters, per-resolution FLOPs, per-frame average.

    When `alpha` overrides the configured ratio and the segment length stops
    being divisible by 1+alpha, the length is rounded up to the next valid
    multiple; only the small per-segment overhead terms depend on it.
    """
    config.validate()
    if alpha is not None and alpha != config.alpha:
        import dataclasses as _dc

        n = config.segment_len
        if n % (1 + alpha):
            n = (n // (1 + alpha) + 1) * (1 + alpha)
        config = _dc.replace(config, alpha=alpha, segment_len=n)
        config.validate()
    n = config.segment_len
    m = config.num_big_frames
    big_macs = count_flops(config, config.big_res).total_macs
    small_macs = count_flops(config, config.small_res).total_macs if config.alpha > 0 else 0
    csp_params, csp_macs = _csp_costs(config)
    dao_params, dao_macs = _dao_costs(config)
    tks_params, tks_macs = _tks_costs(config)
    layers = backbone_layers(config.backbone, config.big_res)
    backbone_params = sum(l.params for l in layers)

    report = CostReport(layers=layers)
    report.components = {
        "backbone_big": {"params": backbone_params, "macs_per_frame": big_macs},
        "backbone_small": {"params": 0, "macs_per_frame": small_macs},  # shared weights
        "csp": {"params": csp_params, "macs_per_segment": csp_macs},
        "dao": {"params": dao_params, "macs_per_segment": dao_macs},
        "tks": {"params": tks_params, "macs_per_segment": tks_macs},
    }
    report.total_params = backbone_params + csp_params + dao_params + tks_params
    report.total_macs = big_macs
    segment_macs = m * big_macs + config.alpha * m * small_macs + csp_macs + dao_macs + tks_macs
    report.avg_macs_per_frame = segment_macs / n
    report.cost_fraction_vs_baseline = cost_fraction(config.alpha)
    report.notes = _notes(config)
    return report


def _notes(config: ModelConfig) -> list:
    notes = [
        "1 MAC counted as 1 FLOP; normalization, activations, pooling and residual adds excluded",
        "identity classifier excluded from parameter totals",
    ]
    if config.tks.enabled:
        k = config.tks.k
        notes.append(
            "tks priced from the literal formulation: per insertion stage "
            f"{k}*C*C*3 temporal-conv weights plus {k}*C*C selection weights, no channel reduction"
        )
    return notes


def format_table(report: CostReport, config: ModelConfig) -> str:
    """Fixed-width component table for the CLI's --table flag."""
    rows = [("component", "params(M)", "GMACs")]
    comp = report.components
    for name, entry in comp.items():
        params = entry.get("params", 0) / 1e6
        macs = entry.get("macs_per_frame", entry.get("macs_per_segment", entry.get("macs", 0))) / GIGA
        unit = "/frame" if "macs_per_frame" in entry else ("/segment" if "macs_per_segment" in entry else "")
        rows.append((name, f"{params:.3f}", f"{macs:.4f}{unit}"))
    rows.append(("total params", f"{report.total_params / 1e6:.3f}", ""))
    if report.avg_macs_per_frame is not None:
        rows.append(("avg per frame", "", f"{report.avg_gflops_per_frame:.4f}"))
    if report.cost_fraction_vs_baseline is not None:
        rows.append(("baseline fraction", "", f"{report.cost_fraction_vs_baseline:.4f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("-" * (sum(widths) + 4))
    return "\n".join(lines)
