"""Dense numerical kernels with hand-written backward passes.

Every differentiable op returns ``(output, backward)`` where ``backward`` maps
an upstream gradient to gradients of the op's inputs (and parameters, for
``linear``). Ops are dtype preserving: float32 inputs compute in float32,
float64 inputs (the 64-bit accumulation mode used by grad checks) in float64.
Arrays carry leading batch axes; features always live on the last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np
from scipy.special import erf

from .errors import NumericalError, ShapeError

Array = np.ndarray
DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def check_finite(x: Array, what: str = "tensor") -> Array:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------- parameters


@dataclass
class LinearParams:
    """Affine map ``y = x @ weight + bias`` with weight shaped (in_dim, out_dim)."""

    weight: Array
    bias: Optional[Array] = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_dim {self.weight.shape[1]}"
            )

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int, bias: bool = True) -> "LinearParams":
        """Uniform(-1/sqrt(in_dim), 1/sqrt(in_dim)) init drawn from ``rng``."""
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(DEFAULT_DTYPE)
        b = rng.uniform(-bound, bound, size=(out_dim,)).astype(DEFAULT_DTYPE) if bias else None
        return cls(w, b)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, bias: bool = True) -> "LinearParams":
        return cls(
            np.zeros((in_dim, out_dim), DEFAULT_DTYPE),
            np.zeros((out_dim,), DEFAULT_DTYPE) if bias else None,
        )

    def arrays(self, prefix: str = "") -> Dict[str, Array]:
        out = {prefix + "weight": self.weight}
        if self.bias is not None:
            out[prefix + "bias"] = self.bias
        return out


# ------------------------------------------------------------------- linear


def linear_forward_backward(x: Array, params: LinearParams):
    """Forward ``x @ W + b``; the closure returns ``(dx, {"weight", "bias"})``."""
    x = np.asarray(x)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"linear expects last dim {params.in_dim}, got {x.shape[-1]}")
    y = x @ params.weight
    if params.bias is not None:
        y = y + params.bias

    def backward(dy: Array):
        dx = dy @ params.weight.T
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        grads = {"weight": x2.T @ dy2}
        if params.bias is not None:
            grads["bias"] = dy2.sum(axis=0)
        return dx, grads

    return y, backward


linear = linear_forward_backward


# --------------------------------------------------------------- layer norm


def layer_norm(x: Array, eps: float = LN_EPS, scale: Optional[Array] = None, shift: Optional[Array] = None):
    """Normalize the last axis to zero mean / unit variance.

    ``scale`` and ``shift`` give the optional learned affine; the closure then
    returns ``(dx, {"scale", "shift"})`` instead of bare ``dx``.
    """
    x = np.asarray(x)
    if x.size == 0 or x.shape[-1] == 0:
        raise ShapeError("layer_norm of an empty vector")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    affine = scale is not None
    y = xhat * scale + (shift if shift is not None else 0.0) if affine else xhat

    def backward(dy: Array):
        g = dy * scale if affine else dy
        dx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        if not affine:
            return dx
        red = tuple(range(dy.ndim - 1))
        return dx, {"scale": (dy * xhat).sum(axis=red), "shift": dy.sum(axis=red)}

    return y, backward


# --------------------------------------------------------------------- gelu


def gelu_value(x):
    """Exact GELU ``x * Phi(x)``; works on scalars and arrays."""
    x = np.asarray(x)
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu(x: Array):
    x = np.asarray(x)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    y = x * cdf

    def backward(dy: Array):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return dy * (cdf + x * pdf)

    return y, backward


def sigmoid(x: Array):
    x = np.asarray(x)
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype, copy=False)

    def backward(dy: Array):
        return dy * y * (1.0 - y)

    return y, backward


# ------------------------------------------------------------------ softmax


def softmax_value(x: Array, axis: int = -1) -> Array:
    x = np.asarray(x)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Array, axis: int = -1):
    x = np.asarray(x)
    if x.size == 0:
        raise ShapeError("softmax of an empty vector")
    y = softmax_value(x, axis)

    def backward(dy: Array):
        return y * (dy - (dy * y).sum(axis=axis, keepdims=True))

    return y, backward


def log_softmax_value(x: Array, axis: int = -1) -> Array:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------- attention


def attention(queries: Array, keys: Array, values: Array, heads: int):
    """Multi-head scaled dot-product attention over already projected inputs.

    Shapes are ``(..., n_q, d)`` for queries and ``(..., n_k, d)`` for keys and
    values. The feature axis is split into ``heads`` equal chunks. The closure
    returns ``(dq, dk, dv)``.
    """
    q, k, v = (np.asarray(a) for a in (queries, keys, values))
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attention feature dims differ: {q.shape[-1]}, {k.shape[-1]}, {v.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("keys and values must have the same length")
    if heads < 1 or d % heads:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    def split(a):
        # (..., n, d) -> (..., heads, n, dh)
        return np.swapaxes(a.reshape(a.shape[:-1] + (heads, dh)), -2, -3)

    def merge(a):
        a = np.swapaxes(a, -2, -3)
        return a.reshape(a.shape[:-2] + (d,))

    qh, kh, vh = split(q), split(k), split(v)
    logits = (qh @ np.swapaxes(kh, -1, -2)) * np.asarray(scale, q.dtype)
    p = softmax_value(logits)
    out = merge(p @ vh)

    def backward(dout: Array):
        do = split(dout)
        dp = do @ np.swapaxes(vh, -1, -2)
        dv = np.swapaxes(p, -1, -2) @ do
        dlog = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * np.asarray(scale, q.dtype)
        dq = dlog @ kh
        dk = np.swapaxes(dlog, -1, -2) @ qh
        return merge(dq), merge(dk), merge(dv)

    return out, backward


# ---------------------------------------------------------------- optimizer


@dataclass
class SGDConfig:
    momentum: float = 0.0
    weight_decay: float = 0.0


@dataclass
class SGD:
    """Plain SGD with optional heavy-ball momentum over a dict of named arrays."""

    lr: float
    config: SGDConfig = field(default_factory=SGDConfig)
    velocity: Dict[str, Array] = field(default_factory=dict)

    def step(self, params: Mapping[str, Array], grads: Mapping[str, Array]) -> Dict[str, Array]:
        return optimizer_step(params, grads, self.lr, self.config, self.velocity)


def optimizer_step(params, grads, lr, config: Optional[SGDConfig] = None, velocity=None):
    """Return updated copies of ``params``.

    ``params`` is either one array or a mapping of name -> array. Momentum
    state lives in ``velocity`` (a dict mutated in place) when given.
    """
    config = config or SGDConfig()
    single = isinstance(params, np.ndarray) or np.isscalar(params)
    if single:
        params, grads = {"_": np.asarray(params)}, {"_": np.asarray(grads)}
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = np.asarray(g)
        if g.shape != np.shape(p):
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name} {np.shape(p)}")
        if config.weight_decay:
            g = g + config.weight_decay * p
        if config.momentum:
            if velocity is None:
                raise ValueError("momentum requires a velocity dict")
            v = velocity.get(name)
            v = g if v is None else config.momentum * v + g
            velocity[name] = v
            g = v
        out[name] = (p - np.asarray(lr, dtype=p.dtype) * g).astype(p.dtype, copy=False)
    return out["_"] if single else out


# --------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: Dict[str, float]

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def rel_error(analytic: Array, numeric: Array) -> float:
    """``|a - n| / max(1e-8, |a| + |n|)`` with ``|.|`` the Euclidean norm."""
    a = np.asarray(analytic, np.float64).ravel()
    n = np.asarray(numeric, np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(1e-8, np.linalg.norm(a) + np.linalg.norm(n)))


def numeric_grad(fn: Callable[[Dict[str, Array]], float], params: Dict[str, Array], name: str, eps: float) -> Array:
    p = params[name]
    grad = np.zeros(p.shape, np.float64)
    flat = p.reshape(-1)
    step = p.dtype.type(eps)
    for i in range(flat.size):
        old = flat[i]
        up, down = old + step, old - step
        flat[i] = up
        fp = float(fn(params))
        flat[i] = down
        fm = float(fn(params))
        flat[i] = old
        # divide by the step actually taken; at 32-bit old +- eps is rounded
        grad.reshape(-1)[i] = (fp - fm) / (float(up) - float(down))
    return grad


def grad_check(
    closure: Callable[[Dict[str, Array]], Tuple[float, Dict[str, Array]]],
    params: Mapping[str, Array],
    eps: Optional[float] = None,
    dtype=np.float32,
    loss_fn: Optional[Callable[[Dict[str, Array]], float]] = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``closure(params)`` must return ``(loss, grads)`` with ``grads`` keyed like
    ``params``. ``loss_fn``, when given, must return the same loss without the
    backward pass and is used for the finite differences. Parameters are copied into ``dtype`` first; float64 switches
    the whole computation to 64-bit accumulation.
    """
    dtype = np.dtype(dtype)
    if eps is None:
        eps = 1e-6 if dtype == np.float64 else 1e-3
    work = {k: np.array(v, dtype=dtype) for k, v in params.items()}
    loss, grads = closure(work)
    if not np.isfinite(loss):
        raise NumericalError("grad_check closure returned a non-finite loss")
    per = {}
    for name in work:
        analytic = np.asarray(grads.get(name, np.zeros_like(work[name])))
        check_finite(analytic, f"analytic gradient of {name}")
        numeric = numeric_grad(loss_fn or (lambda ps: closure(ps)[0]), work, name, eps)
        check_finite(numeric, f"numeric gradient of {name}")
        per[name] = rel_error(analytic, numeric)
    return GradCheckReport(max(per.values()) if per else 0.0, per)
