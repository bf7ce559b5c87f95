"""Finite-difference verification of the analytic side-network backward.

Runs double-precision forward/backward on tiny randomized configurations
and compares every parameter coordinate against central differences of
the scalar loss. Used by both the `gradcheck` CLI subcommand and the
acceptance suite.
"""

from __future__ import annotations

import numpy as np

from .kernels import finite_diff_grad, make_rng
from .sidenet import SideConfig, SideNetworkParams, init_side, side_backward, side_forward
from .training import loss_and_grad

TINY = SideConfig(hidden=8, bottleneck=4, adapters=2, classes=2)
TINY_BATCH = 2
TINY_SEQ = 4


def _flatten(params: SideNetworkParams) -> np.ndarray:
    return np.concatenate([t.reshape(-1) for _, t in params.named_tensors()])


def _unflatten_into(vec: np.ndarray, params: SideNetworkParams) -> SideNetworkParams:
    out = params.copy()
    off = 0
    for _, t in out.named_tensors():
        n = t.size
        t[...] = vec[off:off + n].reshape(t.shape)
        off += n
    return out


def random_problem(seed: int, config: SideConfig = TINY,
                   batch: int = TINY_BATCH, seq: int = TINY_SEQ,
                   with_embedding_tap: bool = True):
    """A double-precision (taps, params, labels) triple with generic
    gradients: every parameter is perturbed away from its init."""
    rng = make_rng(seed)
    n_taps = config.adapters + (1 if with_embedding_tap else 0)
    taps = [
        rng.normal(size=(batch, seq, config.hidden)).astype(np.float64)
        for _ in range(n_taps)
    ]
    params = init_side(config, seed).astype(np.float64)
    for _, t in params.named_tensors():
        t += rng.normal(scale=0.3, size=t.shape)
    labels = rng.integers(0, config.classes, size=batch)
    return taps, params, labels


# Relative error uses max(|a|, |n|, GRAD_FLOOR) as the denominator: the
# plain ratio is ill-conditioned where the true gradient itself is ~0
# (differencing noise ~1e-10 divided by ~1e-6 says nothing about the
# backward pass). Coordinates under the floor are in effect held to a
# 1e-9 absolute bound, far below any real defect.
GRAD_FLOOR = 1e-4


def check_gradients(seed: int, step: float = 1e-6,
                    config: SideConfig = TINY) -> float:
    """Max relative error over every parameter coordinate for one seed."""
    taps, params, labels = random_problem(seed, config)

    logits, cache = side_forward(taps, params, config, training=True)
    loss, d_logits = loss_and_grad(logits, labels)
    grads = side_backward(cache, d_logits, params)
    analytic = _flatten(grads)

    def scalar_loss(theta: np.ndarray) -> float:
        p = _unflatten_into(theta, params)
        out, _ = side_forward(taps, p, config, training=False)
        value, _ = loss_and_grad(out, labels)
        return value

    numeric = finite_diff_grad(scalar_loss, _flatten(params), step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRAD_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def run_gradcheck(seeds: int = 5, step: float = 1e-6) -> float:
    """Worst relative error across `seeds` independent configurations."""
    return max(check_gradients(s, step) for s in range(seeds))
