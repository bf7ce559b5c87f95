"""Deterministic dense-tensor math shared by every other module.

All functions operate on plain numpy arrays (row-major, float32 or
float64) and are pure: inputs are never mutated, outputs are freshly
allocated, and the floating-point accumulation order is fixed so that
repeated runs -- and the local vs. split training pipelines -- produce
bit-identical results.
"""

from __future__ import annotations

import numpy as np

# tanh-approximation constants for gelu
GELU_COEF = 0.7978845608028654  # sqrt(2/pi)
GELU_CUBIC = 0.044715

F16_MAX = 65504.0  # largest finite binary16 value


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator with a platform-independent stream (PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


def _check_same_dtype(*arrays: np.ndarray) -> None:
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) > 1:
        raise ValueError(f"mixed precisions: {sorted(map(str, dtypes))}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with b strictly 2-D; a may carry batch dims.

    Accumulates over the inner index in ascending order, one product and
    one add per step, so the result is bit-identical to a naive triple
    loop. This ordering is a contract: downstream equivalence tests
    compare pipelines at zero ulps.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if b.ndim != 2:
        raise ValueError(f"rhs must be 2-D, got shape {b.shape}")
    if a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} x {b.shape}")
    _check_same_dtype(a, b)
    out = np.zeros(a.shape[:-1] + (b.shape[1],), dtype=a.dtype)
    for k in range(b.shape[0]):
        out += a[..., k : k + 1] * b[k]
    return out


def batched_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise matrix product with matching batch dims on both operands.

    Same ascending-k accumulation contract as :func:`matmul`; used for
    per-head attention products where the rhs varies across the batch.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"batched shapes incompatible: {a.shape} x {b.shape}")
    _check_same_dtype(a, b)
    out = np.zeros(a.shape[:-1] + (b.shape[-1],), dtype=a.dtype)
    for k in range(a.shape[-1]):
        out += a[..., k : k + 1] * b[..., k : k + 1, :]
    return out


def layer_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine.

    y = gamma * (x - mean) / sqrt(var + eps) + beta, statistics taken per
    row over the last axis (biased variance).
    """
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ValueError(
            f"affine shape {gamma.shape}/{beta.shape} does not match last extent {h}"
        )
    mu = x.mean(axis=-1, keepdims=True, dtype=x.dtype)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True, dtype=x.dtype)
    xhat = (x - mu) / np.sqrt(var + x.dtype.type(eps))
    return gamma * xhat + beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def gelu(x: np.ndarray) -> np.ndarray:
    """Gaussian error linear unit, tanh approximation.

    gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    """
    x = np.asarray(x)
    c = x.dtype.type(GELU_COEF)
    a = x.dtype.type(GELU_CUBIC)
    half = x.dtype.type(0.5)
    return half * x * (1 + np.tanh(c * (x + a * x * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of the tanh-approximated gelu at x."""
    x = np.asarray(x)
    c = x.dtype.type(GELU_COEF)
    a = x.dtype.type(GELU_CUBIC)
    half = x.dtype.type(0.5)
    inner = c * (x + a * x * x * x)
    t = np.tanh(inner)
    sech2 = 1 - t * t
    return half * (1 + t) + half * x * sech2 * c * (1 + 3 * a * x * x)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, max-shifted for stability."""
    x = np.asarray(x)
    if x.ndim < 1:
        raise ValueError("softmax_rows requires rank >= 1")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True, dtype=x.dtype)


def sigmoid(x):
    x = np.asarray(x)
    return 1 / (1 + np.exp(-x))


_NONLINEARITIES = {"gelu": gelu, "relu": relu, "softmax_rows": softmax_rows}
_NONLINEARITY_GRADS = {
    "gelu": gelu_grad,
    "relu": lambda x: (np.asarray(x) > 0).astype(np.asarray(x).dtype),
}


def nonlinearity(x: np.ndarray, kind: str) -> np.ndarray:
    """Apply one of {gelu, relu, softmax_rows} elementwise / row-wise."""
    try:
        fn = _NONLINEARITIES[kind]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {kind!r}") from None
    return fn(x)


def nonlinearity_grad(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise derivative for the differentiable kinds (gelu, relu)."""
    try:
        fn = _NONLINEARITY_GRADS[kind]
    except KeyError:
        raise ValueError(f"no elementwise gradient for {kind!r}") from None
    return fn(x)


def mean_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the sequence axis of a [B, S, H] tensor.

    Accumulates positions in ascending order (bit-identical to a naive
    loop), then divides by S.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"mean_pool expects rank 3, got shape {x.shape}")
    b, s, h = x.shape
    if s == 0:
        raise ValueError("mean_pool over an empty sequence")
    acc = np.zeros((b, h), dtype=x.dtype)
    for j in range(s):
        acc += x[:, j, :]
    return acc / x.dtype.type(s)


def f16_roundtrip(x: np.ndarray) -> np.ndarray:
    """Convert each scalar to IEEE binary16 (round-to-nearest-even) and back.

    Magnitudes beyond the binary16 range saturate to +/-65504 instead of
    becoming infinite; dtype of the input is preserved. Models the storage
    and wire effects of half precision without computing in it.
    """
    x = np.asarray(x)
    with np.errstate(over="ignore"):
        y = x.astype(np.float16)
    y = np.where(np.isinf(y), np.sign(y).astype(np.float16) * np.float16(F16_MAX), y)
    return y.astype(x.dtype)


def finite_diff_grad(f, theta: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at theta, one coordinate at a time.

    Only supports float64 inputs; the truncation/rounding trade-off is not
    meaningful in single precision.
    """
    theta = np.asarray(theta)
    if theta.dtype != np.float64:
        raise TypeError(f"finite differences require float64, got {theta.dtype}")
    theta = theta.copy(order="C")  # private copy; perturbed in place below
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(theta)
        flat[i] = orig - h
        fm = f(theta)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
