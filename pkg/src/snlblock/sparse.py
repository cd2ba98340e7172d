"""Sparse non-local block: per-query sampling of K key/value locations.

Each query gets a K-point window centred on itself; a fourth 1x1
projection predicts per-slot 2D offsets which shift the window to
learned (fractional) coordinates. Keys and values are read there with
bilinear interpolation, so gradients flow into the offsets through the
interpolation weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConfigError,
    ConsistencyError,
    DimensionError,
    NumericError,
    conv1x1,
    softmax_rows,
    tally_multiplies,
)
from .dense import softmax_rows_backward


@dataclass(frozen=True)
class Shape2D:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"degenerate shape {self.height}x{self.width}")

    @property
    def n(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class GridSpec:
    """kh x kw sampling window; K = kh * kw points per query."""

    kh: int
    kw: int

    def __post_init__(self):
        if self.kh < 1 or self.kw < 1:
            raise ConfigError(f"window extents must be >= 1, got {self.kh}x{self.kw}")

    @property
    def k(self) -> int:
        return self.kh * self.kw


def most_square_grid(k: int) -> GridSpec:
    """Factor K into the most-square (kh, kw) pair, e.g. 99 -> 9 x 11."""
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    kh = int(np.sqrt(k))
    while k % kh != 0:
        kh -= 1
    return GridSpec(kh, k // kh)


@dataclass
class SampleField:
    """Offsets and the resulting absolute sampling coordinates."""

    offsets: np.ndarray  # 2K x N, (dx, dy) interleaved per slot
    coords: np.ndarray   # N x K x 2, (t_x, t_y) in pixel units


@dataclass
class SnlParams:
    """Dense-block projections plus the offset head."""

    w_theta: np.ndarray   # C/2 x C
    w_phi: np.ndarray     # C/2 x C
    w_g: np.ndarray       # C   x C
    w_gamma: np.ndarray   # C   x C
    w_offset: np.ndarray  # 2K  x C
    b_theta: np.ndarray | None = None
    b_phi: np.ndarray | None = None
    b_g: np.ndarray | None = None
    b_gamma: np.ndarray | None = None
    b_offset: np.ndarray | None = None

    def __post_init__(self):
        c = self.w_g.shape[0]
        if c % 2 != 0:
            raise ConfigError(f"channel count {c} must be even")
        if self.w_offset.ndim != 2 or self.w_offset.shape[0] % 2 != 0:
            raise DimensionError(f"offset head needs 2K rows, got {self.w_offset.shape}")
        if self.w_offset.shape[1] != c:
            raise DimensionError(f"offset head channel mismatch: {self.w_offset.shape}")

    @property
    def channels(self) -> int:
        return self.w_g.shape[0]

    @property
    def k(self) -> int:
        return self.w_offset.shape[0] // 2

    @classmethod
    def random(cls, rng: np.random.Generator, c: int, k: int, dtype=np.float32,
               scale: float = 0.1, zero_gamma: bool = True,
               zero_offset: bool = True, with_bias: bool = True) -> "SnlParams":
        """Random projections; gamma and the offset head default to zero so
        the block starts as identity sampling on the regular grid."""
        if c % 2 != 0:
            raise ConfigError(f"channel count {c} must be even")
        def w(rows, cols):
            return (scale * rng.standard_normal((rows, cols))).astype(dtype)
        gamma = np.zeros((c, c), dtype=dtype) if zero_gamma else w(c, c)
        woff = np.zeros((2 * k, c), dtype=dtype) if zero_offset else w(2 * k, c)
        zb = (lambda n: np.zeros(n, dtype=dtype)) if with_bias else (lambda n: None)
        return cls(w(c // 2, c), w(c // 2, c), w(c, c), gamma, woff,
                   zb(c // 2), zb(c // 2), zb(c), zb(c), zb(2 * k))

    def param_groups(self) -> dict[str, np.ndarray]:
        groups = {"w_theta": self.w_theta, "w_phi": self.w_phi, "w_g": self.w_g,
                  "w_gamma": self.w_gamma, "w_offset": self.w_offset}
        for name in ("b_theta", "b_phi", "b_g", "b_gamma", "b_offset"):
            b = getattr(self, name)
            if b is not None:
                groups[name] = b
        return groups


@dataclass
class SnlActivations:
    q: np.ndarray           # C/2 x N
    k_map: np.ndarray       # C/2 x H x W (pre-sampling key map)
    v_map: np.ndarray       # C x H x W
    sampled_k: np.ndarray   # N x C/2 x K
    sampled_v: np.ndarray   # N x C x K
    field: SampleField
    affinity: np.ndarray    # N x K, row-stochastic
    y: np.ndarray           # C x N
    x_shape: tuple = field(default=())


def base_grid(shape: Shape2D, g: GridSpec, dtype=np.float64) -> np.ndarray:
    """Regular kh x kw window centred on each query pixel.

    Returns N x K x 2 (x, y) coordinates; slot index is row-major over
    (r, c). Even windows get fractional centres so the window stays
    symmetric about the query.
    """
    h, w = shape.height, shape.width
    if g.k > shape.n:
        raise ConfigError(f"K={g.k} exceeds N={shape.n}")
    qx = np.tile(np.arange(w, dtype=dtype), h)            # N, x of query i
    qy = np.repeat(np.arange(h, dtype=dtype), w)          # N, y of query i
    ox = np.arange(g.kw, dtype=dtype) - (g.kw - 1) / 2
    oy = np.arange(g.kh, dtype=dtype) - (g.kh - 1) / 2
    grid = np.empty((shape.n, g.k, 2), dtype=dtype)
    grid[:, :, 0] = qx[:, None] + np.tile(ox, g.kh)[None, :]
    grid[:, :, 1] = qy[:, None] + np.repeat(oy, g.kw)[None, :]
    return grid


def full_coverage_grid(shape: Shape2D, dtype=np.float64) -> np.ndarray:
    """K = N grid where slot k of every query is pixel k exactly.

    With zero offsets this makes the sparse block coincide with the
    dense one (integer coordinates keep the bilinear read exact).
    """
    n = shape.n
    grid = np.empty((n, n, 2), dtype=dtype)
    grid[:, :, 0] = np.tile(np.arange(shape.width, dtype=dtype), shape.height)[None, :]
    grid[:, :, 1] = np.repeat(np.arange(shape.height, dtype=dtype), shape.width)[None, :]
    return grid


def offset_head(x: np.ndarray, w_offset: np.ndarray,
                bias: np.ndarray | None = None) -> np.ndarray:
    """1x1 convolution producing 2K offset channels.

    Slot k reads channels (2k, 2k+1) as (dx, dy), in pixel units.
    """
    if w_offset.shape[0] % 2 != 0:
        raise DimensionError(f"offset head needs an even channel count, got {w_offset.shape}")
    return conv1x1(x, w_offset, bias)


def apply_offsets(base: np.ndarray, p: np.ndarray) -> np.ndarray:
    """t = base + offset, elementwise: coords[i,k] = base[i,k] + (p[2k,i], p[2k+1,i])."""
    n, k, _ = base.shape
    if p.shape != (2 * k, n):
        raise DimensionError(f"offsets {p.shape} do not match base grid {base.shape}")
    coords = base.copy()
    coords[:, :, 0] += p[0::2, :].T
    coords[:, :, 1] += p[1::2, :].T
    return coords


def _corner_terms(f: np.ndarray, coords: np.ndarray):
    """Shared bookkeeping for bilinear sampling and its adjoint.

    Yields (cx, cy, valid, weight, dw_dtx, dw_dty) for the four corners
    of the cell containing each coordinate; out-of-image corners are
    masked (zero padding).
    """
    h, w = f.shape[1], f.shape[2]
    tx = coords[..., 0]
    ty = coords[..., 1]
    x0 = np.floor(tx)
    y0 = np.floor(ty)
    u = tx - x0
    v = ty - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    one = np.ones_like(u)
    corners = (
        (x0,     y0,     (1 - u) * (1 - v), -(1 - v), -(1 - u)),
        (x0 + 1, y0,     u * (1 - v),        (1 - v), -u),
        (x0,     y0 + 1, (1 - u) * v,       -v,        (1 - u)),
        (x0 + 1, y0 + 1, u * v,              v,        u),
    )
    for cx, cy, wgt, dwdx, dwdy in corners:
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        yield (np.clip(cx, 0, w - 1), np.clip(cy, 0, h - 1), valid,
               wgt, dwdx * one, dwdy * one)


def bilinear_sample(f: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Read f (D x H x W) at fractional coords (N x K x 2) -> N x D x K.

    Four-corner interpolation with zero padding: corners outside the
    image contribute nothing. Integer coordinates reduce to an exact
    pixel read.
    """
    if f.ndim != 3 or coords.ndim != 3 or coords.shape[2] != 2:
        raise DimensionError(f"bilinear_sample shapes: f {f.shape}, coords {coords.shape}")
    if np.isnan(coords).any():
        raise NumericError("bilinear_sample received NaN coordinates")
    d = f.shape[0]
    n, k, _ = coords.shape
    out = np.zeros((d, n, k), dtype=f.dtype)
    for cx, cy, valid, wgt, _, _ in _corner_terms(f, coords):
        out += (wgt * valid) * f[:, cy, cx]
    return out.transpose(1, 0, 2)


def bilinear_sample_backward(f: np.ndarray, coords: np.ndarray,
                             grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of bilinear_sample.

    grad_out is N x D x K; returns (grad_f: D x H x W, grad_coords:
    N x K x 2). The coordinate gradient differentiates the corner
    weights; at exact integers the floor-cell (right-continuous)
    subgradient is used.
    """
    d = f.shape[0]
    go = grad_out.transpose(1, 0, 2)  # D x N x K
    grad_f = np.zeros_like(f)
    grad_coords = np.zeros_like(coords)
    didx = np.arange(d)[:, None, None]
    for cx, cy, valid, wgt, dwdx, dwdy in _corner_terms(f, coords):
        masked = go * valid
        np.add.at(grad_f, (didx, cy[None], cx[None]), wgt * masked)
        fval = f[:, cy, cx] * valid
        grad_coords[..., 0] += dwdx * (go * fval).sum(axis=0)
        grad_coords[..., 1] += dwdy * (go * fval).sum(axis=0)
    return grad_f, grad_coords


def sparse_affinity(q: np.ndarray, sampled_k: np.ndarray) -> np.ndarray:
    """Row-stochastic N x K similarity between each query and its samples."""
    n, ck, k = sampled_k.shape
    if q.shape != (ck, n):
        raise DimensionError(f"query {q.shape} does not match samples {sampled_k.shape}")
    logits = np.einsum("ci,ick->ik", q, sampled_k)
    tally_multiplies(n * k * ck)
    return softmax_rows(logits)


def sparse_aggregate(sampled_v: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Y column i = sum_k s[i,k] * sampled value (i, :, k). Returns C x N."""
    n, c, k = sampled_v.shape
    if s.shape != (n, k):
        raise DimensionError(f"affinity {s.shape} does not match samples {sampled_v.shape}")
    tally_multiplies(n * k * c)
    return np.einsum("ik,ick->ci", s, sampled_v)


def sparse_aggregate_fuse(sampled_v: np.ndarray, s: np.ndarray,
                          w_gamma: np.ndarray, x: np.ndarray,
                          b_gamma: np.ndarray | None = None) -> np.ndarray:
    """Aggregate sampled values by the sparse affinity, fuse, add residual."""
    y = sparse_aggregate(sampled_v, s)
    if y.shape != x.shape:
        raise DimensionError(f"fuse shapes differ: {y.shape} vs {x.shape}")
    return conv1x1(y, w_gamma, b_gamma) + x


def snl_forward(x: np.ndarray, p: SnlParams, g: GridSpec | None = None,
                base: np.ndarray | None = None,
                ) -> tuple[np.ndarray, SnlActivations]:
    """Full sparse block on a C x H x W feature map.

    The sampling window comes from `g` (regular centred grid) or, for
    oracle configurations, an explicit `base` grid of shape N x K x 2.
    """
    if x.ndim != 3:
        raise DimensionError(f"expected C x H x W input, got {x.shape}")
    c, h, w = x.shape
    if c != p.channels:
        raise DimensionError(f"input channels {c} != params channels {p.channels}")
    shape = Shape2D(h, w)
    n = shape.n
    if base is None:
        if g is None:
            raise ConfigError("either a GridSpec or an explicit base grid is required")
        if g.k != p.k:
            raise ConfigError(f"grid K={g.k} but offset head K={p.k}")
        base = base_grid(shape, g, dtype=x.dtype)
    if base.shape != (n, p.k, 2):
        raise DimensionError(f"base grid {base.shape} does not match N={n}, K={p.k}")
    if p.k > n:
        raise ConfigError(f"K={p.k} exceeds N={n}")

    xf = x.reshape(c, n)
    q = conv1x1(xf, p.w_theta, p.b_theta)
    k_map = conv1x1(xf, p.w_phi, p.b_phi).reshape(c // 2, h, w)
    v_map = conv1x1(xf, p.w_g, p.b_g).reshape(c, h, w)
    offsets = offset_head(xf, p.w_offset, p.b_offset)
    coords = apply_offsets(base, offsets)
    sampled_k = bilinear_sample(k_map, coords)
    sampled_v = bilinear_sample(v_map, coords)
    s = sparse_affinity(q, sampled_k)
    y = sparse_aggregate(sampled_v, s)
    zf = conv1x1(y, p.w_gamma, p.b_gamma) + xf
    acts = SnlActivations(q=q, k_map=k_map, v_map=v_map, sampled_k=sampled_k,
                          sampled_v=sampled_v,
                          field=SampleField(offsets=offsets, coords=coords),
                          affinity=s, y=y, x_shape=x.shape)
    return zf.reshape(c, h, w), acts


def snl_backward(acts: SnlActivations, p: SnlParams, x: np.ndarray,
                 grad_z: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Exact reverse-mode gradients of the sparse block.

    Signal reaches the input through four routes: the residual, the
    query/key/value projections, and the coordinate path (bilinear
    weight derivatives -> offsets -> offset head).
    """
    if grad_z.shape != x.shape or acts.x_shape != x.shape:
        raise ConsistencyError(
            f"backward shapes inconsistent: x {x.shape}, grad {grad_z.shape}, "
            f"acts {acts.x_shape}")
    c, h, w = x.shape
    n = h * w
    xf = x.reshape(c, n)
    gzf = grad_z.reshape(c, n)
    grads: dict[str, np.ndarray] = {}
    grad_xf = gzf.copy()

    # fusion
    grad_y = p.w_gamma.T @ gzf
    grads["w_gamma"] = gzf @ acts.y.T
    if p.b_gamma is not None:
        grads["b_gamma"] = gzf.sum(axis=1)

    # aggregation: y[:, i] = sum_k s[i,k] * sampled_v[i,:,k]
    grad_s = np.einsum("ci,ick->ik", grad_y, acts.sampled_v)
    grad_sv = np.einsum("ik,ci->ick", acts.affinity, grad_y)

    # affinity
    grad_logits = softmax_rows_backward(acts.affinity, grad_s)
    grad_q = np.einsum("ik,ick->ci", grad_logits, acts.sampled_k)
    grad_sk = np.einsum("ik,ci->ick", grad_logits, acts.q)

    # bilinear reads (key and value share coordinates, so their
    # coordinate gradients add)
    coords = acts.field.coords
    grad_kmap, grad_coords_k = bilinear_sample_backward(acts.k_map, coords, grad_sk)
    grad_vmap, grad_coords_v = bilinear_sample_backward(acts.v_map, coords, grad_sv)
    grad_coords = grad_coords_k + grad_coords_v

    # offsets: coords = base + interleaved offsets
    grad_p = np.empty_like(acts.field.offsets)
    grad_p[0::2, :] = grad_coords[:, :, 0].T
    grad_p[1::2, :] = grad_coords[:, :, 1].T
    grads["w_offset"] = grad_p @ xf.T
    if p.b_offset is not None:
        grads["b_offset"] = grad_p.sum(axis=1)
    grad_xf += p.w_offset.T @ grad_p

    # projections
    grad_kf = grad_kmap.reshape(c // 2, n)
    grad_vf = grad_vmap.reshape(c, n)
    for name, g, wt, b in (("theta", grad_q, p.w_theta, p.b_theta),
                           ("phi", grad_kf, p.w_phi, p.b_phi),
                           ("g", grad_vf, p.w_g, p.b_g)):
        grads[f"w_{name}"] = g @ xf.T
        if b is not None:
            grads[f"b_{name}"] = g.sum(axis=1)
        grad_xf += wt.T @ g
    return grad_xf.reshape(c, h, w), grads
