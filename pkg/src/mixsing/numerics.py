"""Dense numerics for the acoustic model.

Matrices are plain ``numpy`` float32 arrays.  Every primitive here has an
explicit backward function; there is no autodiff graph.  Primitives accept
arrays with leading batch axes and operate on the last axis (or last two for
products), and they preserve the input dtype so that ``gradient_check`` can
run them in float64.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Mapping

import numpy as np

from .errors import DegenerateInputError, DimensionError, FormatError, NumericError, ParameterError

REAL = np.float32
LN_EPS = 1e-5

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` into a 2-D float32 array."""
    m = np.asarray(x, dtype=REAL)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


# --------------------------------------------------------------------------
# affine


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    """``x @ w + b`` over the last axis of ``x``.

    For 3-D ``x`` numpy issues one GEMM per leading index, so a row block's
    result does not depend on how many other blocks share the call.
    """
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine shape mismatch: {x.shape} x {w.shape}")
    y = np.matmul(x, w)
    if b is not None:
        y += b.reshape(-1)
    return y


def affine_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dw, db)`` for ``y = x @ w + b``."""
    dx = np.matmul(dy, w.T)
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0, keepdims=True)
    return dx, dw, db


# --------------------------------------------------------------------------
# GELU (exact erf form)

# Rational Chebyshev fit of erfc(z) for z >= 0 (Numerical Recipes "erfcc");
# fractional error below 1.2e-7 everywhere, i.e. at float32 resolution.
_ERFC_COEFFS = (
    -1.26551223, 1.00002368, 0.37409196, 0.09678418, -0.18628806,
    0.27886807, -1.13520398, 1.48851587, -0.82215223, 0.17087277,
)


_CDF_BLOCK = 1 << 15  # elements per pass; keeps the temporaries cache-resident


def _normal_cdf_block(x: np.ndarray, out: np.ndarray) -> None:
    t_ = x.dtype.type
    z = np.abs(x)
    z *= t_(_SQRT_HALF)
    t = z * t_(0.5)
    t += t_(1)
    np.reciprocal(t, out=t)
    c = _ERFC_COEFFS
    poly = t * t_(c[9])
    for coef in c[8:0:-1]:
        poly += t_(coef)
        poly *= t
    poly += t_(c[0])
    np.square(z, out=z)
    poly -= z
    np.exp(poly, out=poly)
    poly *= t
    poly *= t_(0.5)  # Phi(-|x|), accurate in relative terms
    # 1 - q for x >= 0, q otherwise, without a branch
    np.multiply(poly, t_(-2), out=out)
    out += t_(1)
    out *= x >= 0
    out += poly


def normal_cdf(x: np.ndarray) -> np.ndarray:
    """Phi(x) = 0.5 * erfc(-x / sqrt(2)), elementwise, in the dtype of ``x``."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(REAL)
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    xf, of = x.reshape(-1), out.reshape(-1)
    for i in range(0, xf.size, _CDF_BLOCK):
        _normal_cdf_block(xf[i : i + _CDF_BLOCK], of[i : i + _CDF_BLOCK])
    return out


def gelu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x * Phi(x), Phi(x))``; the CDF is reused by ``gelu_backward``."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(REAL)
    x = np.ascontiguousarray(x)
    cdf = np.empty_like(x)
    y = np.empty_like(x)
    xf, cf, yf = x.reshape(-1), cdf.reshape(-1), y.reshape(-1)
    for i in range(0, xf.size, _CDF_BLOCK):
        blk = slice(i, i + _CDF_BLOCK)
        _normal_cdf_block(xf[blk], cf[blk])
        np.multiply(xf[blk], cf[blk], out=yf[blk])
    return y, cdf


def gelu(x: np.ndarray) -> np.ndarray:
    return gelu_forward(x)[0]


def gelu_backward(x: np.ndarray, dy: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    t = x.dtype.type
    if cdf is None:
        cdf = normal_cdf(x)
    pdf = np.square(x)
    pdf *= t(-0.5)
    np.exp(pdf, out=pdf)
    pdf *= t(_INV_SQRT_2PI)
    pdf *= x
    pdf += cdf
    pdf *= dy
    return pdf


# --------------------------------------------------------------------------
# layer normalization over the last (channel) axis


@dataclass
class LayerNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def layernorm_forward(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS
) -> tuple[np.ndarray, LayerNormCache]:
    d = x.shape[-1]
    if gamma.size != d or beta.size != d:
        raise DimensionError(f"layernorm affine length {gamma.size}/{beta.size} != {d}")
    if eps <= 0:
        raise ParameterError("layernorm eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv_std
    y = xhat * gamma.reshape(-1) + beta.reshape(-1)
    return y, LayerNormCache(xhat, inv_std, gamma)


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    return layernorm_forward(x, gamma, beta, eps)[0]


def layernorm_backward(
    dy: np.ndarray, cache: LayerNormCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dgamma, dbeta)``; parameter grads keep a 1 x D shape."""
    xhat = cache.xhat
    d2 = dy.reshape(-1, dy.shape[-1])
    dgamma = (d2 * xhat.reshape(d2.shape)).sum(axis=0, keepdims=True)
    dbeta = d2.sum(axis=0, keepdims=True)
    g = dy * cache.gamma.reshape(-1)
    mean_g = g.mean(axis=-1, keepdims=True)
    mean_gx = (g * xhat).mean(axis=-1, keepdims=True)
    dx = (g - mean_g - xhat * mean_gx) * cache.inv_std
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# dropout with counter-based streams


def counter_rng(seed: int, *path: int) -> np.random.Generator:
    """Philox stream keyed by ``(seed, *path)``.

    The stream for a given path never depends on which other streams were
    drawn before it, so dropout masks are stable under reordering.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    key = ss.generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=REAL) -> np.ndarray:
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.random(shape, dtype=np.float32) >= p
    return keep.astype(dtype) * dtype(1.0 / (1.0 - p))


def dropout(x: np.ndarray, p: float, train: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    return x * dropout_mask(x.shape, p, rng, x.dtype.type)


# --------------------------------------------------------------------------
# L1 loss


def _check_loss_args(pred, target, mask):
    if pred.shape != target.shape:
        raise DimensionError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape[:-1]:
            raise DimensionError(f"mask shape {mask.shape} != frame shape {pred.shape[:-1]}")
        if not mask.any():
            raise DegenerateInputError("every frame is masked out")
    return mask


def l1_loss(pred: np.ndarray, target: np.ndarray, mask=None) -> float:
    """Mean absolute error over unmasked frames (rows)."""
    mask = _check_loss_args(pred, target, mask)
    diff = np.abs(pred.astype(np.float64) - target)
    if mask is None:
        return float(diff.mean())
    return float(diff[mask].sum() / (mask.sum() * pred.shape[-1]))


def l1_loss_backward(pred: np.ndarray, target: np.ndarray, mask=None) -> np.ndarray:
    mask = _check_loss_args(pred, target, mask)
    g = np.sign(pred - target).astype(pred.dtype)
    if mask is None:
        return g / pred.dtype.type(pred.size)
    count = pred.dtype.type(mask.sum() * pred.shape[-1])
    return g * mask[..., None] / count


# --------------------------------------------------------------------------
# parameters and Adam


@dataclass
class Param:
    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, param: Param) -> "AdamState":
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), 0)


def adam_step(
    param: Param,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place."""
    if state.m.shape != param.value.shape or state.v.shape != param.value.shape:
        raise DimensionError(f"{param.name}: optimizer state shape mismatch")
    t = param.value.dtype.type
    g = param.grad
    state.step += 1
    state.m *= t(beta1)
    state.m += t(1 - beta1) * g
    state.v *= t(beta2)
    state.v += t(1 - beta2) * g * g
    c1 = 1 - beta1**state.step
    c2 = 1 - beta2**state.step
    mhat = state.m / t(c1)
    vhat = state.v / t(c2)
    param.value -= t(lr) * mhat / (np.sqrt(vhat) + t(eps))


# --------------------------------------------------------------------------
# finite-difference verification


def gradient_check(
    loss_and_grad: Callable[[], float],
    params: Iterable[Param],
    h: float = 1e-3,
    samples: int = 6,
    seed: int = 0,
    dtype=np.float64,
) -> float:
    """Compare analytic gradients with central differences.

    ``loss_and_grad`` must recompute the loss from the current parameter
    values and write fresh gradients into every ``Param.grad``.  Up to
    ``samples`` coordinates per parameter are probed.  Values are promoted to
    ``dtype`` for the duration of the check (float64 by default, which keeps
    round-off out of the comparison) and restored afterwards.

    Returns the largest ``|a - n| / max(|a|, |n|)`` over probed coordinates,
    treating pairs where both magnitudes are below 1e-9 as exact.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ParameterError(f"step h={h} outside [1e-4, 1e-2]")
    params = list(params)
    saved = [(p.value, p.grad) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for p in params:
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        loss = loss_and_grad()
        if not np.isfinite(loss):
            raise NumericError("loss is not finite")
        analytic = [p.grad.copy() for p in params]
        for p, a in zip(params, analytic):
            flat = p.value.reshape(-1)
            n = flat.size
            idx = rng.choice(n, size=min(samples, n), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = loss_and_grad()
                flat[i] = orig - h
                down = loss_and_grad()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError("loss is not finite")
                num = (up - down) / (2 * h)
                ana = float(a.reshape(-1)[i])
                scale = max(abs(num), abs(ana))
                if scale < 1e-9:
                    continue
                worst = max(worst, abs(num - ana) / scale)
    finally:
        for p, (v, g) in zip(params, saved):
            p.value, p.grad = v, g
    return worst


# --------------------------------------------------------------------------
# TEN1 tensor container

TEN1_MAGIC = b"TEN1"


def write_tensors(fh: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    fh.write(TEN1_MAGIC)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        m = as_matrix(arr)
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<II", *m.shape))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    def take(n: int) -> bytes:
        b = fh.read(n)
        if len(b) != n:
            raise FormatError("truncated TEN1 data")
        return b

    if take(4) != TEN1_MAGIC:
        raise FormatError("not a TEN1 file")
    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        data = np.frombuffer(take(4 * rows * cols), dtype="<f4")
        out[name] = data.astype(REAL).reshape(rows, cols)
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_tensors(fh)
