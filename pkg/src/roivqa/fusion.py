"""Multi-level feature fusion projector with hand-written gradients.

Forward path::

    x  = concat(shallow, deep)            # 2d
    xn = layer_norm(x, gamma, beta, eps)  # 2d
    a1 = xn @ w1 + b1                     # h
    g  = gelu(a1)
    y  = g @ w2 + b2                      # o

``fuse_backward`` returns gradients of ``L = upstream . y`` and
``grad_check`` compares them with central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import erf

from roivqa.rng import SplitMix64

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    layer_tag: str = "shallow"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("feature vector must be a nonempty 1-d array")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature vector has non-finite entries")
        if self.layer_tag not in ("shallow", "deep"):
            raise ValueError(f"layer_tag must be 'shallow' or 'deep', got {self.layer_tag!r}")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass
class FusionParams:
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        for f in fields(self):
            if f.name != "epsilon":
                setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        two_d = self.ln_gamma.shape[0]
        h = self.b1.shape[0]
        o = self.b2.shape[0]
        expected = {"ln_gamma": (two_d,), "ln_beta": (two_d,), "w1": (two_d, h),
                    "b1": (h,), "w2": (h, o), "b2": (o,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(d, h, o) where the LayerNorm width is 2d."""
        return self.ln_gamma.shape[0] // 2, self.b1.shape[0], self.b2.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "epsilon"}


@dataclass
class FusionGrads:
    shallow: np.ndarray
    deep: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def layer_norm(x, gamma, beta, epsilon: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if not (x.shape == gamma.shape == beta.shape):
        raise ValueError(f"dim mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return gamma * (x - mu) / np.sqrt(var + epsilon) + beta


def _values(v) -> np.ndarray:
    return v.values if isinstance(v, FeatureVector) else np.asarray(v, dtype=np.float64)


def _concat(shallow, deep, p: FusionParams) -> np.ndarray:
    s, d = _values(shallow), _values(deep)
    if s.shape != d.shape or s.ndim != 1:
        raise ValueError(f"shallow {s.shape} and deep {d.shape} must be equal-length vectors")
    if 2 * s.size != p.ln_gamma.size:
        raise ValueError(f"params sized for 2d={p.ln_gamma.size}, got d={s.size}")
    return np.concatenate([s, d])


def fuse(shallow, deep, p: FusionParams) -> np.ndarray:
    x = _concat(shallow, deep, p)
    xn = layer_norm(x, p.ln_gamma, p.ln_beta, p.epsilon)
    return gelu(xn @ p.w1 + p.b1) @ p.w2 + p.b2


def fuse_backward(shallow, deep, p: FusionParams, upstream) -> FusionGrads:
    x = _concat(shallow, deep, p)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != p.b2.shape:
        raise ValueError(f"upstream grad has shape {upstream.shape}, expected {p.b2.shape}")
    n = x.size
    mu = x.mean()
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc ** 2).mean() + p.epsilon)
    xhat = xc * inv_std
    xn = p.ln_gamma * xhat + p.ln_beta
    a1 = xn @ p.w1 + p.b1
    g = gelu(a1)

    d_b2 = upstream.copy()
    d_w2 = np.outer(g, upstream)
    d_g = p.w2 @ upstream
    d_a1 = d_g * gelu_grad(a1)
    d_b1 = d_a1
    d_w1 = np.outer(xn, d_a1)
    d_xn = p.w1 @ d_a1
    d_gamma = d_xn * xhat
    d_beta = d_xn.copy()
    d_xhat = d_xn * p.ln_gamma
    d_x = inv_std / n * (n * d_xhat - d_xhat.sum() - xhat * (d_xhat * xhat).sum())
    d = n // 2
    return FusionGrads(d_x[:d], d_x[d:], d_gamma, d_beta, d_w1, d_b1, d_w2, d_b2)


def init_params(d: int, h: int, o: int, seed: int, epsilon: float = 1e-5) -> FusionParams:
    """Seeded params: weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    LayerNorm gain/shift are perturbed around (1, 0) so their gradients are
    exercised away from the trivial point.
    """
    rng = np.random.default_rng(SplitMix64(seed).next_u64())
    two_d = 2 * d

    def u(bound, *shape):
        return rng.uniform(-bound, bound, size=shape)

    return FusionParams(
        ln_gamma=1.0 + u(0.1, two_d),
        ln_beta=u(0.1, two_d),
        w1=u(1 / np.sqrt(two_d), two_d, h),
        b1=u(1 / np.sqrt(two_d), h),
        w2=u(1 / np.sqrt(h), h, o),
        b2=u(1 / np.sqrt(h), o),
        epsilon=epsilon,
    )


def _central_differences(shallow, deep, p: FusionParams, upstream, step: float) -> dict[str, np.ndarray]:
    def loss(s, dp, params):
        return float(upstream @ fuse(s, dp, params))

    out: dict[str, np.ndarray] = {}
    inputs = {"shallow": shallow.copy(), "deep": deep.copy()}
    for name in ("shallow", "deep"):
        arr = inputs[name]
        grad = np.zeros_like(arr)
        for i in range(arr.size):
            orig = arr[i]
            arr[i] = orig + step
            plus = loss(inputs["shallow"], inputs["deep"], p)
            arr[i] = orig - step
            minus = loss(inputs["shallow"], inputs["deep"], p)
            arr[i] = orig
            grad[i] = (plus - minus) / (2 * step)
        out[name] = grad
    arrays = {k: v.copy() for k, v in p.arrays().items()}
    for name, arr in arrays.items():
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = loss(shallow, deep, FusionParams(**arrays, epsilon=p.epsilon))
            flat[i] = orig - step
            minus = loss(shallow, deep, FusionParams(**arrays, epsilon=p.epsilon))
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * step)
        out[name] = grad
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor only guards exact zeros."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(d: int = 4, h: int = 8, o: int = 4, seed: int = 1, step: float = 1e-4,
               tolerance: float = 1e-4) -> dict:
    if step <= 0 or tolerance <= 0:
        raise ValueError("step and tolerance must be positive")
    p = init_params(d, h, o, seed)
    rng = np.random.default_rng(SplitMix64(seed ^ 0x5EED).next_u64())
    shallow = rng.normal(size=d)
    deep = rng.normal(size=d)
    upstream = rng.normal(size=o)
    analytic = fuse_backward(shallow, deep, p, upstream).arrays()
    numeric = _central_differences(shallow, deep, p, upstream, step)
    per_param = {name: float(relative_error(analytic[name], numeric[name]).max()) for name in analytic}
    worst = max(per_param, key=per_param.get)
    max_rel = per_param[worst]
    return {
        "dims": {"d": d, "h": h, "o": o},
        "seed": seed,
        "step": step,
        "tolerance": tolerance,
        "max_rel_err": max_rel,
        "worst_param": worst,
        "per_param": per_param,
        "pass": bool(max_rel <= tolerance),
    }
