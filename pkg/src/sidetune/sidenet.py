"""The trainable bypass: stacked bottleneck adapters over backbone taps.

Each adapter refines the running side activation ``s`` with the matching
(dequantized) backbone tap ``a``:

    u      = s + a
    s_next = LN( sigma(u W_down) W_up + u )

The final side state is blended with the last backbone tap through a
learnable sigmoid gate, mean-pooled over positions, and classified by a
linear head. Forward caches enough intermediates for an exact analytic
reverse pass; backbone taps are constants, so no gradient ever points at
the device.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .backbone import BackboneWeights, forward_collect
from .binio import (
    FormatError,
    expect_magic,
    open_binary,
    read_exact,
    read_f32,
    write_f32,
    write_magic,
)
from .quantize import dequantize, quantize

CHECKPOINT_MAGIC = b"MBSN"
CHECKPOINT_VERSION = 1

LN_EPS = 1e-5

_SIGMA_CODES = {"gelu": 0, "relu": 1}
_SIGMA_NAMES = {v: k for k, v in _SIGMA_CODES.items()}


@dataclass(frozen=True)
class SideConfig:
    hidden: int
    bottleneck: int
    adapters: int
    classes: int
    nonlinearity: str = "gelu"
    init_std: float = 0.02

    def __post_init__(self):
        if self.bottleneck >= self.hidden:
            raise ValueError(
                f"bottleneck {self.bottleneck} must be below hidden {self.hidden}"
            )
        if self.nonlinearity not in _SIGMA_CODES:
            raise ValueError(f"unsupported adapter nonlinearity {self.nonlinearity!r}")
        if self.classes < 1:
            raise ValueError("head needs at least one output")


@dataclass
class AdapterParams:
    w_down: np.ndarray  # [H, m]
    w_up: np.ndarray    # [m, H]
    ln_gamma: np.ndarray
    ln_beta: np.ndarray

    FIELDS = ("w_down", "w_up", "ln_gamma", "ln_beta")


@dataclass
class SideNetworkParams:
    """All trainable state. Also reused, field for field, as the gradient
    container returned by :func:`side_backward`."""

    adapters: list[AdapterParams]
    head_weight: np.ndarray   # [H, C]
    head_bias: np.ndarray     # [C]
    combine_gate: np.ndarray  # scalar logit, shape ()

    def named_tensors(self):
        for i, ad in enumerate(self.adapters):
            for name in AdapterParams.FIELDS:
                yield f"adapter{i}.{name}", getattr(ad, name)
        yield "head_weight", self.head_weight
        yield "head_bias", self.head_bias
        yield "combine_gate", self.combine_gate

    def copy(self) -> "SideNetworkParams":
        return SideNetworkParams(
            adapters=[
                AdapterParams(**{f: getattr(a, f).copy() for f in AdapterParams.FIELDS})
                for a in self.adapters
            ],
            head_weight=self.head_weight.copy(),
            head_bias=self.head_bias.copy(),
            combine_gate=self.combine_gate.copy(),
        )

    def astype(self, dtype) -> "SideNetworkParams":
        out = self.copy()
        out.adapters = [
            AdapterParams(**{f: getattr(a, f).astype(dtype) for f in AdapterParams.FIELDS})
            for a in self.adapters
        ]
        out.head_weight = out.head_weight.astype(dtype)
        out.head_bias = out.head_bias.astype(dtype)
        out.combine_gate = out.combine_gate.astype(dtype)
        return out


@dataclass
class BackwardCache:
    """Intermediates saved by a training-mode forward pass."""

    config: SideConfig
    taps: list[np.ndarray]
    s_states: list[np.ndarray]        # s_0 .. s_M
    adapter_inputs: list[np.ndarray]  # u_l = s_{l-1} + tap_l
    pre_acts: list[np.ndarray]        # u_l @ w_down
    acts: list[np.ndarray]            # sigma(pre)
    ln_inputs: list[np.ndarray]       # core + u, fed to each layer norm
    gate_blend: float                 # sigmoid(combine_gate)
    pooled: np.ndarray
    logits: np.ndarray


def init_side(config: SideConfig, seed: int) -> SideNetworkParams:
    """Zero-mean Gaussian projections, identity layer norms, zero head."""
    rng = kernels.make_rng(seed)
    h, m = config.hidden, config.bottleneck
    std = config.init_std

    adapters = []
    for _ in range(config.adapters):
        adapters.append(AdapterParams(
            w_down=rng.normal(0.0, std, size=(h, m)).astype(np.float32),
            w_up=rng.normal(0.0, std, size=(m, h)).astype(np.float32),
            ln_gamma=np.ones(h, dtype=np.float32),
            ln_beta=np.zeros(h, dtype=np.float32),
        ))
    return SideNetworkParams(
        adapters=adapters,
        head_weight=np.zeros((h, config.classes), dtype=np.float32),
        head_bias=np.zeros(config.classes, dtype=np.float32),
        combine_gate=np.zeros((), dtype=np.float32),
    )


def zero_grads_like(params: SideNetworkParams) -> SideNetworkParams:
    out = params.copy()
    for _, t in out.named_tensors():
        t[...] = 0
    return out


def adapter_core(h_in: np.ndarray, p: AdapterParams, nonlinearity: str = "gelu") -> np.ndarray:
    """sigma(h W_down) W_up -- the non-residual part of one adapter."""
    return kernels.matmul(
        kernels.nonlinearity(kernels.matmul(h_in, p.w_down), nonlinearity), p.w_up
    )


def side_forward(
    taps: list[np.ndarray],
    params: SideNetworkParams,
    config: SideConfig,
    training: bool = False,
):
    """Run the side stack over dequantized taps.

    `taps` holds either M arrays (one per adapter) or M+1 when the first
    entry is the embedding tap seeding the side state; extra or missing
    taps are a configuration error. Returns logits [B, C], plus a
    :class:`BackwardCache` when `training` is set.
    """
    m = config.adapters
    if len(taps) == m + 1:
        s = taps[0].copy()
        block_taps = taps[1:]
    elif len(taps) == m:
        s = np.zeros_like(taps[0])
        block_taps = taps
    else:
        raise ValueError(
            f"got {len(taps)} taps for {m} adapters (expected {m} or {m + 1})"
        )

    s_states = [s]
    adapter_inputs, pre_acts, acts, ln_inputs = [], [], [], []
    for tap, ad in zip(block_taps, params.adapters):
        u = s + tap
        pre = kernels.matmul(u, ad.w_down)
        act = kernels.nonlinearity(pre, config.nonlinearity)
        core = kernels.matmul(act, ad.w_up)
        y = core + u
        s = kernels.layer_norm(y, ad.ln_gamma, ad.ln_beta, LN_EPS)
        adapter_inputs.append(u)
        pre_acts.append(pre)
        acts.append(act)
        ln_inputs.append(y)
        s_states.append(s)

    blend = kernels.sigmoid(params.combine_gate)
    final_tap = block_taps[-1]
    z = blend * final_tap + (1 - blend) * s
    pooled = kernels.mean_pool(z)
    logits = kernels.matmul(pooled, params.head_weight) + params.head_bias

    if not training:
        return logits, None
    cache = BackwardCache(
        config=config, taps=list(block_taps), s_states=s_states,
        adapter_inputs=adapter_inputs, pre_acts=pre_acts, acts=acts,
        ln_inputs=ln_inputs, gate_blend=float(blend), pooled=pooled,
        logits=logits,
    )
    return logits, cache


def _layer_norm_backward(d_out, x, gamma, eps):
    """Gradients of layer_norm wrt its input and affine parameters."""
    mu = x.mean(axis=-1, keepdims=True, dtype=x.dtype)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True, dtype=x.dtype)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x - mu) * inv_std

    axes = tuple(range(x.ndim - 1))
    d_gamma = (d_out * xhat).sum(axis=axes, dtype=x.dtype)
    d_beta = d_out.sum(axis=axes, dtype=x.dtype)

    d_xhat = d_out * gamma
    mean1 = d_xhat.mean(axis=-1, keepdims=True, dtype=x.dtype)
    mean2 = (d_xhat * xhat).mean(axis=-1, keepdims=True, dtype=x.dtype)
    d_x = (d_xhat - mean1 - xhat * mean2) * inv_std
    return d_x, d_gamma, d_beta


def side_backward(
    cache: BackwardCache,
    d_logits: np.ndarray,
    params: SideNetworkParams,
) -> SideNetworkParams:
    """Exact reverse pass; returns gradients shaped like `params`.

    Backbone taps are treated as constants -- the gradient set contains
    only side-network tensors.
    """
    if cache is None:
        raise ValueError("backward needs the cache from a training-mode forward")
    cfg = cache.config
    if len(cache.acts) != len(params.adapters) or d_logits.shape != cache.logits.shape:
        raise ValueError("cache does not match the given parameters and output grad")

    grads = zero_grads_like(params)
    pooled = cache.pooled
    b, s_len, _ = cache.taps[-1].shape

    # head
    grads.head_weight[...] = kernels.matmul(pooled.T, d_logits)
    grads.head_bias[...] = d_logits.sum(axis=0, dtype=d_logits.dtype)
    d_pooled = kernels.matmul(d_logits, params.head_weight.T)

    # mean pooling spreads the gradient uniformly over positions
    d_z = np.broadcast_to(
        d_pooled[:, None, :] / d_logits.dtype.type(s_len),
        cache.taps[-1].shape,
    ).copy()

    # gate blend z = a * tap_M + (1 - a) * s_M
    a = d_logits.dtype.type(cache.gate_blend)
    s_final = cache.s_states[-1]
    d_s = (1 - a) * d_z
    d_blend = (d_z * (cache.taps[-1] - s_final)).sum(dtype=d_logits.dtype)
    grads.combine_gate[...] = d_blend * a * (1 - a)

    for l in reversed(range(len(params.adapters))):
        ad = params.adapters[l]
        d_y, d_gamma, d_beta = _layer_norm_backward(
            d_s, cache.ln_inputs[l], ad.ln_gamma, LN_EPS
        )
        g = grads.adapters[l]
        g.ln_gamma[...] = d_gamma
        g.ln_beta[...] = d_beta

        # y = act @ w_up + u
        u = cache.adapter_inputs[l]
        act = cache.acts[l]
        flat = lambda t: t.reshape(-1, t.shape[-1])
        g.w_up[...] = kernels.matmul(flat(act).T, flat(d_y))
        d_act = kernels.matmul(d_y, ad.w_up.T)
        d_pre = d_act * kernels.nonlinearity_grad(cache.pre_acts[l], cfg.nonlinearity)
        g.w_down[...] = kernels.matmul(flat(u).T, flat(d_pre))
        d_u = d_y + kernels.matmul(d_pre, ad.w_down.T)

        d_s = d_u  # taps are constants; only s_{l-1} carries gradient
    return grads


def combined_infer(
    backbone_weights: BackboneWeights,
    side_params: SideNetworkParams,
    side_config: SideConfig,
    tokens: np.ndarray,
    scheme: str = "none_fp16",
) -> np.ndarray:
    """Device-style prediction: frozen forward, quantize/dequantize each
    tap with the session scheme, then the side stack in inference mode.

    Bit-identical to the logits the server computes for the same batch
    and scheme, because it is the same code path.
    """
    tap_set = forward_collect(backbone_weights, tokens)
    taps = [dequantize(quantize(t, scheme)) for _, t in tap_set.taps]
    logits, _ = side_forward(taps, side_params, side_config, training=False)
    return logits


def save_side(path, params: SideNetworkParams, config: SideConfig) -> None:
    with open_binary(path, "wb") as fh:
        write_magic(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        fh.write(struct.pack(
            "<4IBf",
            config.hidden, config.bottleneck, config.adapters, config.classes,
            _SIGMA_CODES[config.nonlinearity], float(params.combine_gate),
        ))
        for ad in params.adapters:
            for name in AdapterParams.FIELDS:
                write_f32(fh, getattr(ad, name))
        write_f32(fh, params.head_weight)
        write_f32(fh, params.head_bias)


def load_side(path, config: SideConfig | None = None):
    """Load a checkpoint; returns (config, params). A provided `config`
    must agree with the stored dimensions."""
    with open_binary(path, "rb") as fh:
        expect_magic(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        h, m, n_ad, c, sigma, gate = struct.unpack("<4IBf", read_exact(fh, 21))
        if sigma not in _SIGMA_NAMES:
            raise FormatError(f"unknown nonlinearity code {sigma}")
        stored = SideConfig(
            hidden=h, bottleneck=m, adapters=n_ad, classes=c,
            nonlinearity=_SIGMA_NAMES[sigma],
        )
        if config is not None and (
            (config.hidden, config.bottleneck, config.adapters, config.classes)
            != (h, m, n_ad, c)
        ):
            raise FormatError(f"checkpoint config {stored} does not match {config}")
        adapters = []
        for _ in range(n_ad):
            adapters.append(AdapterParams(
                w_down=read_f32(fh, (h, m)),
                w_up=read_f32(fh, (m, h)),
                ln_gamma=read_f32(fh, (h,)),
                ln_beta=read_f32(fh, (h,)),
            ))
        params = SideNetworkParams(
            adapters=adapters,
            head_weight=read_f32(fh, (h, c)),
            head_bias=read_f32(fh, (c,)),
            combine_gate=np.array(gate, dtype=np.float32),
        )
        if fh.read(1):
            raise FormatError("trailing bytes after final tensor")
    return stored, params
