"""Finite-difference oracle for the hand-written backward passes.

Everything runs in double precision. The scalar loss is 0.5 * sum(z^2),
so the upstream gradient is simply z itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DOUBLE, ConfigError, NumericError
from .dense import NlParams, nl_forward, nl_backward
from .sparse import GridSpec, Shape2D, SnlParams, snl_forward, snl_backward

DENSE_THRESHOLD = 1e-6
# looser: the coordinate path compounds interpolation curvature
SNL_THRESHOLD = 1e-5

REL_FLOOR = 1e-12
# below this magnitude both gradients are indistinguishable from
# central-difference roundoff (machine_eps * loss / eps), so relative
# comparison is meaningless; the dense key bias hits this exactly since
# softmax shift-invariance makes its true gradient zero
NOISE_FLOOR = 1e-8


@dataclass
class GradReport:
    param_group: str
    max_rel_error: float
    max_abs_error: float
    worst_index: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.param_group:12s} maxRelError={self.max_rel_error:.3e} {status}"


def central_diff(f, x: np.ndarray, eps: float) -> np.ndarray:
    """g[i] = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), per flat index."""
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=DOUBLE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite loss at perturbed index {i}")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    rel = np.abs(analytic - numeric) / denom
    return np.where(denom < NOISE_FLOOR, 0.0, rel)


def _compare(name: str, analytic: np.ndarray, numeric: np.ndarray,
             threshold: float) -> GradReport:
    if not np.isfinite(analytic).all():
        return GradReport(name, float("inf"), float("inf"), -1, False)
    rel = relative_errors(analytic, numeric)
    worst = int(np.argmax(rel))
    max_rel = float(rel.reshape(-1)[worst])
    max_abs = float(np.max(np.abs(analytic - numeric)))
    return GradReport(name, max_rel, max_abs, worst, max_rel < threshold)


def check_block(block_kind: str, seed: int = 0, dims: dict | None = None,
                eps: float = 1e-5, threshold: float | None = None) -> list[GradReport]:
    """Validate one block's analytic gradients against central differences.

    block_kind is "dense-nl" or "snl". Returns one GradReport per
    parameter group plus one for the input.
    """
    rng = np.random.default_rng(seed)
    if block_kind == "dense-nl":
        dims = dims or {}
        c = dims.get("c", 4)
        n = dims.get("n", 9)
        threshold = DENSE_THRESHOLD if threshold is None else threshold
        params = NlParams.random(rng, c, dtype=DOUBLE, scale=0.4, zero_gamma=False)
        x = rng.standard_normal((c, n)).astype(DOUBLE)

        def loss_fn(x_, p_):
            z, _ = nl_forward(x_, p_)
            return 0.5 * float((z * z).sum())

        def backward(x_, p_):
            z, acts = nl_forward(x_, p_)
            return nl_backward(acts, p_, x_, z)

        make_params = NlParams
    elif block_kind == "snl":
        dims = dims or {}
        c = dims.get("c", 4)
        h = dims.get("h", 5)
        w = dims.get("w", 5)
        g = GridSpec(dims.get("kh", 3), dims.get("kw", 3))
        threshold = SNL_THRESHOLD if threshold is None else threshold
        params = SnlParams.random(rng, c, g.k, dtype=DOUBLE, scale=0.4,
                                  zero_gamma=False, zero_offset=False)
        # keep the offset head small and bias the coordinates +0.25 off
        # integers: the bilinear read has derivative kinks exactly on
        # the integer lattice
        params.w_offset *= 0.1
        params.b_offset += 0.25 + 0.05 * rng.standard_normal(params.b_offset.shape)
        x = rng.standard_normal((c, h, w)).astype(DOUBLE)

        def loss_fn(x_, p_):
            z, _ = snl_forward(x_, p_, g)
            return 0.5 * float((z * z).sum())

        def backward(x_, p_):
            z, acts = snl_forward(x_, p_, g)
            return snl_backward(acts, p_, x_, z)

        make_params = SnlParams
    else:
        raise ConfigError(f"unknown block kind {block_kind!r}")

    try:
        grad_x, grads = backward(x, params)
    except FloatingPointError:
        return [GradReport("all", float("inf"), float("inf"), -1, False)]

    reports = []
    numeric_x = central_diff(lambda x_: loss_fn(x_, params), x, eps)
    reports.append(_compare("x", grad_x, numeric_x, threshold))

    groups = params.param_groups()
    for name in groups:
        def loss_wrt(arr, _name=name):
            kwargs = {k: (arr if k == _name else v.copy()) for k, v in groups.items()}
            return loss_fn(x, make_params(**kwargs))
        numeric = central_diff(loss_wrt, groups[name].copy(), eps)
        reports.append(_compare(name, grads[name], numeric, threshold))
    return reports
