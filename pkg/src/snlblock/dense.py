"""Dense non-local block: the reference attention every sparse result is
checked against.

Forward: q/k/v projections, dense N x N row-stochastic affinity, value
aggregation, 1x1 fusion plus residual. Backward is the hand-derived
adjoint of that chain (softmax Jacobian included).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConfigError,
    ConsistencyError,
    DimensionError,
    conv1x1,
    matmul,
    softmax_rows,
    tally_multiplies,
)


@dataclass
class NlParams:
    """Projection weights of the dense block.

    Query/key project to C/2 channels, value and fusion keep C. Biases
    are carried but zero by default.
    """

    w_theta: np.ndarray  # C/2 x C
    w_phi: np.ndarray    # C/2 x C
    w_g: np.ndarray      # C   x C
    w_gamma: np.ndarray  # C   x C
    b_theta: np.ndarray | None = None
    b_phi: np.ndarray | None = None
    b_g: np.ndarray | None = None
    b_gamma: np.ndarray | None = None

    def __post_init__(self):
        c = self.w_g.shape[0]
        if c % 2 != 0:
            raise ConfigError(f"channel count {c} must be even")
        if self.w_theta.shape != (c // 2, c) or self.w_phi.shape != (c // 2, c):
            raise DimensionError("query/key weights must be C/2 x C")
        if self.w_g.shape != (c, c) or self.w_gamma.shape != (c, c):
            raise DimensionError("value/fusion weights must be C x C")
        for w in (self.w_theta, self.w_phi, self.w_g, self.w_gamma):
            if not np.isfinite(w).all():
                raise ConfigError("non-finite weight")

    @property
    def channels(self) -> int:
        return self.w_g.shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, c: int, dtype=np.float32,
               scale: float = 0.1, zero_gamma: bool = False,
               with_bias: bool = True) -> "NlParams":
        """Random weights; gamma can be zeroed so the block starts as identity."""
        if c % 2 != 0:
            raise ConfigError(f"channel count {c} must be even")
        def w(rows, cols):
            return (scale * rng.standard_normal((rows, cols))).astype(dtype)
        gamma = np.zeros((c, c), dtype=dtype) if zero_gamma else w(c, c)
        zb = (lambda n: np.zeros(n, dtype=dtype)) if with_bias else (lambda n: None)
        return cls(w(c // 2, c), w(c // 2, c), w(c, c), gamma,
                   zb(c // 2), zb(c // 2), zb(c), zb(c))

    def param_groups(self) -> dict[str, np.ndarray]:
        groups = {"w_theta": self.w_theta, "w_phi": self.w_phi,
                  "w_g": self.w_g, "w_gamma": self.w_gamma}
        for name in ("b_theta", "b_phi", "b_g", "b_gamma"):
            b = getattr(self, name)
            if b is not None:
                groups[name] = b
        return groups


@dataclass
class NlActivations:
    """Everything the backward pass needs from the forward pass."""

    q: np.ndarray          # C/2 x N
    k: np.ndarray          # C/2 x N
    v: np.ndarray          # C x N
    affinity: np.ndarray   # N x N, row-stochastic
    y: np.ndarray          # C x N
    x_shape: tuple = field(default=())


def dense_affinity(q: np.ndarray, k: np.ndarray, scaled: bool = False) -> np.ndarray:
    """Row-stochastic N x N similarity between query and key columns.

    scaled=True divides logits by sqrt(C/2) (off by default; the block
    is defined unscaled).
    """
    if q.shape[0] != k.shape[0]:
        raise DimensionError(f"query/key channel mismatch: {q.shape} vs {k.shape}")
    logits = matmul(q.T, k)
    tally_multiplies(q.shape[1] * k.shape[1] * q.shape[0])
    if scaled:
        logits = logits / np.sqrt(q.shape[0]).astype(logits.dtype)
    return softmax_rows(logits)


def dense_aggregate(v: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Y = v @ A^T: column i is the affinity-weighted sum of value columns."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"affinity must be square, got {a.shape}")
    if v.shape[1] != a.shape[0]:
        raise DimensionError(f"value/affinity mismatch: {v.shape} vs {a.shape}")
    tally_multiplies(v.shape[0] * a.shape[0] * a.shape[1])
    return matmul(v, a.T)


def fuse_residual(y: np.ndarray, w_gamma: np.ndarray, x: np.ndarray,
                  b_gamma: np.ndarray | None = None) -> np.ndarray:
    """Z = gamma(Y) + X."""
    if y.shape != x.shape:
        raise DimensionError(f"fuse_residual shapes differ: {y.shape} vs {x.shape}")
    return conv1x1(y, w_gamma, b_gamma) + x


def nl_forward(x: np.ndarray, p: NlParams,
               scaled: bool = False) -> tuple[np.ndarray, NlActivations]:
    """Full dense block on a flattened C x N feature map."""
    if x.ndim != 2:
        raise DimensionError(f"expected C x N input, got {x.shape}")
    if x.shape[0] != p.channels:
        raise DimensionError(f"input channels {x.shape[0]} != params channels {p.channels}")
    q = conv1x1(x, p.w_theta, p.b_theta)
    k = conv1x1(x, p.w_phi, p.b_phi)
    v = conv1x1(x, p.w_g, p.b_g)
    a = dense_affinity(q, k, scaled=scaled)
    y = dense_aggregate(v, a)
    z = fuse_residual(y, p.w_gamma, x, p.b_gamma)
    return z, NlActivations(q=q, k=k, v=v, affinity=a, y=y, x_shape=x.shape)


def softmax_rows_backward(a: np.ndarray, grad_a: np.ndarray) -> np.ndarray:
    """Adjoint of softmax_rows given its output a.

    Per row: g_logit = a * (grad - sum(grad * a)), which is the softmax
    Jacobian a_j (delta_jt - a_t) applied to grad.
    """
    inner = (grad_a * a).sum(axis=1, keepdims=True)
    return a * (grad_a - inner)


def nl_backward(acts: NlActivations, p: NlParams, x: np.ndarray,
                grad_z: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Exact reverse-mode gradients of the dense block.

    Returns (grad_x, grads) where grads is keyed like param_groups().
    """
    if grad_z.shape != x.shape or acts.x_shape != x.shape:
        raise ConsistencyError(
            f"backward shapes inconsistent: x {x.shape}, grad {grad_z.shape}, "
            f"acts {acts.x_shape}")
    grads: dict[str, np.ndarray] = {}
    grad_x = grad_z.copy()

    # fusion: z = w_gamma @ y + b + x
    grad_y = p.w_gamma.T @ grad_z
    grads["w_gamma"] = grad_z @ acts.y.T
    if p.b_gamma is not None:
        grads["b_gamma"] = grad_z.sum(axis=1)

    # aggregation: y = v @ a.T
    grad_v = grad_y @ acts.affinity
    grad_a = grad_y.T @ acts.v

    # affinity: a = softmax_rows(q.T @ k)
    grad_logits = softmax_rows_backward(acts.affinity, grad_a)
    grad_q = acts.k @ grad_logits.T
    grad_k = acts.q @ grad_logits

    # projections
    for name, g, w, b in (("theta", grad_q, p.w_theta, p.b_theta),
                          ("phi", grad_k, p.w_phi, p.b_phi),
                          ("g", grad_v, p.w_g, p.b_g)):
        grads[f"w_{name}"] = g @ x.T
        if b is not None:
            grads[f"b_{name}"] = g.sum(axis=1)
        grad_x += w.T @ g
    return grad_x, grads
