"""Dense primitives with hand-derived backward passes.

Every forward function that has a backward returns ``(out, cache)``; the
matching ``*_backward`` consumes the cache. Arrays may carry leading batch
axes, the feature axis is always last.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateRowError, EmptyMaskError, NumericError, ProbeError, ShapeError

log = logging.getLogger(__name__)

GELU_C = np.sqrt(2.0 / np.pi)
GELU_K = 0.044715

# Test hook: flips the sign of the LayerNorm gamma gradient so gradcheck can
# demonstrate that it catches a broken backward pass.
_SABOTAGE = {"layer_norm": False}


def set_sabotage(op: str, on: bool) -> None:
    if op not in _SABOTAGE:
        raise KeyError(op)
    _SABOTAGE[op] = on


class Param:
    """A trainable tensor and its gradient slot."""

    def __init__(self, name: str, value: np.ndarray, decay: bool = True):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite value produced by {op}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(dc: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of C = A @ B: dA = dC Bᵀ, dB = Aᵀ dC (2-D operands)."""
    return dc @ b.T, a.T @ dc


def layer_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    d = x.shape[-1]
    if gamma.shape[-1] != d or beta.shape[-1] != d:
        raise ShapeError(f"layer_norm: feature dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = var + eps
    if np.any(denom <= 0):
        raise DegenerateRowError("layer_norm: zero-variance row with eps=0")
    rstd = 1.0 / np.sqrt(denom)
    xhat = xc * rstd
    out = xhat * gamma + beta
    return out, (xhat, rstd, gamma)


def layer_norm_backward(dout: np.ndarray, cache):
    xhat, rstd, gamma = cache
    d = xhat.shape[-1]
    flat_dout = dout.reshape(-1, d)
    dgamma = (flat_dout * xhat.reshape(-1, d)).sum(axis=0).reshape(gamma.shape)
    dbeta = flat_dout.sum(axis=0).reshape(gamma.shape)
    if _SABOTAGE["layer_norm"]:
        dgamma = -dgamma
    dxhat = dout * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Row-wise LayerNorm with biased variance. ``gamma``/``beta`` may be Params."""
    gamma = gamma.value if isinstance(gamma, Param) else gamma
    beta = beta.value if isinstance(beta, Param) else beta
    return layer_norm_forward(np.asarray(x), np.asarray(gamma), np.asarray(beta), eps)[0]


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


ACTIVATIONS = ("gelu", "relu")


def activation_forward(x: np.ndarray, kind: str = "gelu"):
    if kind == "relu":
        return np.maximum(x, 0), (x, None)
    if kind == "gelu":
        t = np.tanh(GELU_C * (x + GELU_K * x**3))
        return 0.5 * x * (1.0 + t), (x, t)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(dout: np.ndarray, cache, kind: str = "gelu") -> np.ndarray:
    x, t = cache
    if kind == "relu":
        return dout * (x > 0)
    dt = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def activation(x: np.ndarray, kind: str = "gelu") -> np.ndarray:
    return activation_forward(np.asarray(x), kind)[0]


def masked_mean_pool_forward(z: np.ndarray, mask: np.ndarray):
    """Mean over the token axis (second to last) of rows whose mask bit is set."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != z.shape[:-1]:
        raise ShapeError(f"masked_mean_pool: mask {mask.shape} does not match tokens {z.shape}")
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise EmptyMaskError("masked_mean_pool: a sample has no unmasked tokens")
    w = mask / counts.astype(z.dtype)
    out = (z * w[..., None]).sum(axis=-2)
    return out, w


def masked_mean_pool_backward(dout: np.ndarray, w: np.ndarray) -> np.ndarray:
    return dout[..., None, :] * w[..., None]


def masked_mean_pool(z: np.ndarray, mask) -> np.ndarray:
    z = np.asarray(z)
    out = masked_mean_pool_forward(z, mask)[0]
    return out[None, :] if z.ndim == 2 else out


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_param: str | None
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_rel_err:.3e} worst={self.worst_param} tol={self.tol:.0e}"


def finite_diff_gradcheck(
    loss_fn: Callable[[bool], float],
    params: Sequence[Param],
    eps: float = 1e-4,
    tol: float = 1e-4,
    full_sweep_max: int = 4096,
    samples_per_param: int = 64,
    seed: int = 0,
) -> GradcheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(backward)`` returns the scalar loss; when ``backward`` is true it
    must also accumulate gradients into the params (they are zeroed first).
    Tensors up to ``full_sweep_max`` entries are probed at every coordinate,
    larger ones at ``samples_per_param`` random coordinates.
    """
    for p in params:
        if p.value.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 params, {p.name} is {p.value.dtype}")
    zero_grads(params)
    loss_fn(True)
    analytic = {p.name: p.grad.copy() for p in params}
    rng = np.random.default_rng(seed)

    per_param: dict[str, float] = {}
    for p in params:
        flat = p.value.reshape(-1)
        if not np.shares_memory(flat, p.value):
            raise ValueError(f"{p.name} is not contiguous; cannot probe in place")
        if flat.size <= full_sweep_max:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=samples_per_param, replace=False)
        g_an = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn(False)
            flat[i] = orig - eps
            f_minus = loss_fn(False)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ProbeError(f"non-finite loss while probing {p.name}[{i}]")
            g_fd = (f_plus - f_minus) / (2 * eps)
            denom = max(abs(g_fd), abs(g_an[i]), 1e-8)
            worst = max(worst, abs(g_fd - g_an[i]) / denom)
        per_param[p.name] = worst

    worst_name = max(per_param, key=per_param.get) if per_param else None
    max_err = per_param[worst_name] if worst_name else 0.0
    return GradcheckReport(max_err, worst_name, tol, per_param)
