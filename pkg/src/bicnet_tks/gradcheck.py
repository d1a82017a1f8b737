"""Finite-difference verification of analytic gradients.

`grad_check` is the oracle used across the test suite: it compares the
reverse-mode gradient of a scalar-valued function against central
differences, coordinate by coordinate. The registered suite wires the
oracle to every differentiable building block of the model so the CLI and
acceptance tests can run one command over all of them.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_EPSILON = 1e-5
DEFAULT_TOLERANCE = 1e-4


class GradCheckError(RuntimeError):
    """The checked function produced a non-finite value."""


def grad_check(function, point, epsilon: float = DEFAULT_EPSILON, max_coords: int = None,
               rng=None, one_sided_fallback: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    `function` maps the point tensor(s) to a scalar Tensor and is re-evaluated
    under coordinate perturbations, so it must rebuild its graph on each call.
    `point` may be a single Tensor or a sequence of them; every coordinate of
    every tensor is probed unless `max_coords` caps the per-tensor count (the
    probed subset is then drawn with `rng`). Run everything in float64.

    Central differences break down when a relu/max-pool kink falls inside the
    probe window; the window side without the kink still estimates the true
    derivative. With `one_sided_fallback` each coordinate scores the best of
    the central, forward and backward estimates: a correct gradient always
    matches the clean estimator, while a wrong one matches none of them.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        p.requires_grad = True
        p.grad = None

    out = function(*points)
    if not np.all(np.isfinite(out.data)):
        raise GradCheckError("function value is not finite at the evaluation point")
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in points]

    # plain numpy re-evaluations from here on; no need to rebuild graphs
    for p in points:
        p.requires_grad = False

    worst = 0.0
    try:
        f_base = float(function(*points).data)
        for p, grad in zip(points, analytic):
            flat_grad = grad.reshape(-1)
            if max_coords is not None and p.data.size > max_coords:
                if rng is None:
                    rng = np.random.default_rng(0)
                coords = rng.choice(p.data.size, size=max_coords, replace=False)
            else:
                coords = range(p.data.size)
            for i in coords:
                idx = np.unravel_index(i, p.data.shape)  # layout-proof in-place write
                original = p.data[idx]
                p.data[idx] = original + epsilon
                f_plus = float(function(*points).data)
                p.data[idx] = original - epsilon
                f_minus = float(function(*points).data)
                p.data[idx] = original
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise GradCheckError("function value is not finite near the evaluation point")
                analytic_value = flat_grad[i]

                def rel_to(numeric):
                    return abs(analytic_value - numeric) / max(abs(analytic_value), abs(numeric), 1e-8)

                rel = rel_to((f_plus - f_minus) / (2.0 * epsilon))
                if one_sided_fallback:
                    rel = min(rel,
                              rel_to((f_plus - f_base) / epsilon),
                              rel_to((f_base - f_minus) / epsilon))
                worst = max(worst, rel)
    finally:
        for p in points:
            p.requires_grad = True
    return worst


# ---------------------------------------------------------------------------
# registered checks over the model's building blocks
# ---------------------------------------------------------------------------


def _randn(rng, *shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def check_conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _randn(rng, 2, 3, 5, 4)
    w = _randn(rng, 4, 3, 3, 3)
    probe = Tensor(rng.standard_normal((2, 4, 5, 4)), dtype=np.float64)

    def f(xv, wv):
        return (T.conv2d(xv, wv, stride=1, padding=1) * probe).sum()

    return grad_check(f, [x, w])


def check_temporal_conv1d(seed: int, dilation: int = 1) -> float:
    rng = np.random.default_rng(seed)
    x = _randn(rng, 4, 3, 2, 2)
    w = _randn(rng, 3, 3, 3)
    probe = Tensor(rng.standard_normal((4, 3, 2, 2)), dtype=np.float64)

    def f(xv, wv):
        return (T.temporal_conv1d(xv, wv, dilation=dilation) * probe).sum()

    return grad_check(f, [x, w])


def check_softmax(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _randn(rng, 8)
    probe = Tensor(rng.standard_normal(8), dtype=np.float64)

    def f(xv):
        return (T.softmax(xv, axis=0) * probe).sum()

    return grad_check(f, x)


def check_core_ops(seed: int) -> float:
    """One composite touching pooling, upsampling, matmul and reductions."""
    rng = np.random.default_rng(seed)
    x = _randn(rng, 2, 3, 4, 4)
    w = _randn(rng, 12, 5)

    def f(xv, wv):
        pooled = T.max_pool2d(xv, kernel=2, stride=2)
        up = T.upsample_nearest2d(pooled, 2, 2)
        mixed = (xv + up * 0.5).relu()
        region = T.avg_pool2d(mixed, 2, 2)
        flat = region.reshape(2, 12)
        return (flat @ wv).softmax(axis=1).log().mean() * -1.0

    return grad_check(f, [x, w])


def check_csp_transform(seed: int) -> float:
    from .bicnet import csp_transform

    rng = np.random.default_rng(seed)
    alpha = 2
    f_d = _randn(rng, 2, 4, 4, 4)
    w_c = _randn(rng, 8, 4, 1, 1)
    f_c = Tensor(rng.standard_normal((4, 4, 2, 2)), dtype=np.float64)

    def f(fd, wc):
        fused = f_c + csp_transform(fd, wc, alpha)
        return (fused * fused).sum()

    return grad_check(f, [f_d, w_c])


def check_dao(seed: int) -> float:
    from .dao import DiverseAttention

    rng = np.random.default_rng(seed)
    block = DiverseAttention(num_frames=3, channels=4, height=4, width=2,
                             rng=rng, dtype=np.float64)
    feats = _randn(rng, 3, 4, 4, 2)
    probe = Tensor(rng.standard_normal((3, 4, 4, 2)), dtype=np.float64)
    params = block.parameters()

    def f(fv, *pv):
        updated, loss, _maps = block.forward(fv)
        return (updated * probe).sum() * 0.1 + loss

    return grad_check(f, [feats, *params])


def check_tks(seed: int) -> float:
    from .config import TksSettings
    from .tks import TemporalKernelSelection

    rng = np.random.default_rng(seed)
    settings = TksSettings(enabled=True, k=2, grid_h=2, grid_w=2, stages=(2,))
    block = TemporalKernelSelection(channels=8, settings=settings, rng=rng, dtype=np.float64)
    feats = _randn(rng, 4, 8, 4, 2)
    probe = Tensor(rng.standard_normal((4, 8, 4, 2)), dtype=np.float64)
    params = block.parameters()

    def f(fv, *pv):
        out, _weights = block.forward(fv)
        return (out * probe).sum()

    return grad_check(f, [feats, *params])


def check_mini_backbone(seed: int) -> float:
    """Two-stage slice of the mini backbone in frozen-statistics mode."""
    from .backbone import build_backbone
    from .config import mini_backbone

    rng = np.random.default_rng(seed)
    model = build_backbone(mini_backbone(), rng=rng, dtype=np.float64)
    model.eval()
    frames = _randn(rng, 2, 3, 16, 8)
    params = [p for _, p in model.named_parameters() if p.size <= 64][:4]

    def f(fv, *pv):
        feat = model.stem_forward(fv, branch="detail")
        feat = model.forward_stage(feat, 1)
        feat = model.forward_stage(feat, 2)
        return (feat.tensor * feat.tensor).mean()

    return grad_check(f, [frames, *params], max_coords=40, rng=rng)


def check_end_to_end(seed: int, max_coords: int = 6) -> float:
    """Full mini model (both branches, fusion paths, attention, selection)."""
    from .bicnet import build_model, split_segment
    from .config import mini_model

    rng = np.random.default_rng(seed)
    cfg = mini_model(alpha=1, segment_len=4)
    model = build_model(cfg, rng=rng, dtype=np.float64)
    model.eval()
    height, width = cfg.big_res
    segment = rng.standard_normal((4, 3, height, width))
    split = split_segment(segment, alpha=1, dtype=np.float64)
    params = list(model.parameters())
    pick = rng.choice(len(params), size=min(10, len(params)), replace=False)
    chosen = [params[i] for i in pick]

    def f(big, small, *pv):
        split.big_frames = big
        split.small_frames = small
        f_d, f_c, diag = model.forward(split)
        video = (f_d + f_c) * 0.5
        return (video * video).sum() * 0.1 + diag.divergence

    return grad_check(f, [split.big_frames, split.small_frames, *chosen],
                      max_coords=max_coords, rng=rng)


STANDARD_CHECKS = {
    "conv2d": check_conv2d,
    "temporal_conv1d_d1": lambda seed: check_temporal_conv1d(seed, 1),
    "temporal_conv1d_d2": lambda seed: check_temporal_conv1d(seed, 2),
    "temporal_conv1d_d3": lambda seed: check_temporal_conv1d(seed, 3),
    "softmax": check_softmax,
    "core_ops": check_core_ops,
    "csp_transform": check_csp_transform,
    "dao": check_dao,
    "tks": check_tks,
    "mini_backbone": check_mini_backbone,
    "end_to_end_mini": check_end_to_end,
}


def run_suite(seed: int = 0, names=None, tolerance: float = DEFAULT_TOLERANCE) -> dict:
    """Run the registered checks; returns {name: {max_rel_err, tolerance, ok}}."""
    names = list(STANDARD_CHECKS) if names is None else list(names)
    results = {}
    for name in names:
        if name not in STANDARD_CHECKS:
            raise T.ConfigError(f"unknown gradient check '{name}'")
        err = STANDARD_CHECKS[name](seed)
        results[name] = {
            "max_rel_err": float(err),
            "tolerance": tolerance,
            "ok": bool(err < tolerance),
        }
    return results
