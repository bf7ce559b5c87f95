"""A frozen GPT-style decoder that exposes intermediate activations.

The backbone is never trained. Each forward pass embeds a token batch,
runs the decoder layers, and records ("taps") the running activation at
configured block boundaries; those taps feed the trainable side-network
downstream. Layers follow the post-norm composition

    u        = LN1(MSA(b) + b)
    b_next   = LN2(FFN(u) + u)

with causal scaled dot-product attention and learned positional
embeddings.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .binio import (
    FormatError,
    expect_magic,
    open_binary,
    read_exact,
    read_f32,
    write_f32,
    write_magic,
)

WEIGHTS_MAGIC = b"MBWT"
WEIGHTS_VERSION = 1

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    hidden: int
    layers: int
    heads: int
    max_seq: int
    ffn_dim: int = 0  # 0 means the conventional 4 * hidden
    # ascending layer indices after which a tap is emitted; last must be
    # the final layer
    block_cuts: tuple[int, ...] = ()
    tap_embedding: bool = True

    def __post_init__(self):
        ffn = self.ffn_dim or 4 * self.hidden
        object.__setattr__(self, "ffn_dim", ffn)
        cuts = tuple(int(c) for c in self.block_cuts) or (self.layers,)
        object.__setattr__(self, "block_cuts", cuts)
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not (1 <= len(cuts) <= self.layers):
            raise ValueError(f"need between 1 and {self.layers} block cuts")
        if list(cuts) != sorted(set(cuts)) or cuts[0] < 1 or cuts[-1] != self.layers:
            raise ValueError(f"block cuts {cuts} must ascend and end at layer {self.layers}")

    @property
    def num_blocks(self) -> int:
        return len(self.block_cuts)

    @property
    def gamma(self) -> int:
        """Taps per forward pass: one per block, plus the embedding tap."""
        return self.num_blocks + (1 if self.tap_embedding else 0)

    def config_block(self) -> bytes:
        """Canonical binary form; also the digest input for handshakes."""
        out = struct.pack(
            "<7I", self.vocab_size, self.hidden, self.layers, self.heads,
            self.ffn_dim, self.max_seq, self.num_blocks,
        )
        out += struct.pack(f"<{self.num_blocks}I", *self.block_cuts)
        out += struct.pack("<B", 1 if self.tap_embedding else 0)
        return out

    def digest(self) -> bytes:
        return hashlib.sha256(self.config_block()).digest()

    @classmethod
    def from_config_block(cls, fh) -> "BackboneConfig":
        vocab, hidden, layers, heads, ffn, max_seq, m = struct.unpack(
            "<7I", read_exact(fh, 28)
        )
        cuts = struct.unpack(f"<{m}I", read_exact(fh, 4 * m))
        (flags,) = struct.unpack("<B", read_exact(fh, 1))
        return cls(
            vocab_size=vocab, hidden=hidden, layers=layers, heads=heads,
            max_seq=max_seq, ffn_dim=ffn, block_cuts=cuts,
            tap_embedding=bool(flags & 1),
        )


@dataclass
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_up: np.ndarray
    b_up: np.ndarray
    w_down: np.ndarray
    b_down: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray

    # serialization order for the weight file
    FIELDS = (
        "w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o",
        "ln1_gamma", "ln1_beta", "w_up", "b_up", "w_down", "b_down",
        "ln2_gamma", "ln2_beta",
    )


@dataclass
class BackboneWeights:
    config: BackboneConfig
    token_embedding: np.ndarray  # [vocab, H]
    pos_embedding: np.ndarray    # [max_seq, H]
    layers: list[LayerWeights]
    final_ln_gamma: np.ndarray
    final_ln_beta: np.ndarray

    def all_tensors(self):
        yield self.token_embedding
        yield self.pos_embedding
        for layer in self.layers:
            for name in LayerWeights.FIELDS:
                yield getattr(layer, name)
        yield self.final_ln_gamma
        yield self.final_ln_beta

    def checksum(self) -> str:
        h = hashlib.sha256()
        for t in self.all_tensors():
            h.update(np.ascontiguousarray(t, dtype="<f4").tobytes())
        return h.hexdigest()


@dataclass
class TapSet:
    """Activations exported from one forward pass.

    ``taps`` pairs each block index with the [B, S, H] activation after
    that block (index 0 is the embedding output when enabled); the final
    output additionally passes the closing layer norm.
    """

    taps: list[tuple[int, np.ndarray]] = field(default_factory=list)
    final_output: np.ndarray | None = None


def init_backbone(config: BackboneConfig, seed: int) -> BackboneWeights:
    """Gaussian(0, 0.02) projection weights, zero biases, unit LN gains."""
    rng = kernels.make_rng(seed)
    h, f = config.hidden, config.ffn_dim

    def w(*shape):
        return rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    def ones(*shape):
        return np.ones(shape, dtype=np.float32)

    layers = []
    for _ in range(config.layers):
        layers.append(LayerWeights(
            w_q=w(h, h), w_k=w(h, h), w_v=w(h, h), w_o=w(h, h),
            b_q=zeros(h), b_k=zeros(h), b_v=zeros(h), b_o=zeros(h),
            ln1_gamma=ones(h), ln1_beta=zeros(h),
            w_up=w(h, f), b_up=zeros(f), w_down=w(f, h), b_down=zeros(h),
            ln2_gamma=ones(h), ln2_beta=zeros(h),
        ))
    return BackboneWeights(
        config=config,
        token_embedding=w(config.vocab_size, h),
        pos_embedding=w(config.max_seq, h),
        layers=layers,
        final_ln_gamma=ones(h),
        final_ln_beta=zeros(h),
    )


def _self_attention(x: np.ndarray, lw: LayerWeights, heads: int) -> np.ndarray:
    """Causal multi-head attention with per-head scale 1/sqrt(H/heads)."""
    b, s, h = x.shape
    hd = h // heads
    q = kernels.matmul(x, lw.w_q) + lw.b_q
    k = kernels.matmul(x, lw.w_k) + lw.b_k
    v = kernels.matmul(x, lw.w_v) + lw.b_v

    def split(t):  # [B, S, H] -> [B, heads, S, hd]
        return t.reshape(b, s, heads, hd).transpose(0, 2, 1, 3)

    q, k, v = split(q), split(k), split(v)
    scale = x.dtype.type(1.0 / np.sqrt(hd))
    scores = kernels.batched_matmul(q, k.swapaxes(-1, -2)) * scale
    mask = np.triu(np.ones((s, s), dtype=bool), k=1)
    scores = np.where(mask, x.dtype.type(-np.inf), scores)
    attn = kernels.softmax_rows(scores)
    ctx = kernels.batched_matmul(attn, v)  # [B, heads, S, hd]
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, s, h)
    return kernels.matmul(ctx, lw.w_o) + lw.b_o


def layer_forward(x: np.ndarray, lw: LayerWeights, heads: int) -> np.ndarray:
    """One decoder layer: post-norm attention then post-norm FFN."""
    u = kernels.layer_norm(_self_attention(x, lw, heads) + x,
                           lw.ln1_gamma, lw.ln1_beta, LN_EPS)
    ffn = kernels.matmul(
        kernels.gelu(kernels.matmul(u, lw.w_up) + lw.b_up), lw.w_down
    ) + lw.b_down
    return kernels.layer_norm(ffn + u, lw.ln2_gamma, lw.ln2_beta, LN_EPS)


def forward_collect(weights: BackboneWeights, tokens: np.ndarray) -> TapSet:
    """Run the frozen decoder and record taps at the configured cuts.

    Weights are read-only here; the returned activations are fresh
    arrays. Block index 0 is the embedding tap (when enabled) and block
    index c is the activation after decoder layer c.
    """
    cfg = weights.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B, S], got shape {tokens.shape}")
    b, s = tokens.shape
    if s > cfg.max_seq:
        raise ValueError(f"sequence length {s} exceeds configured max {cfg.max_seq}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")

    x = weights.token_embedding[tokens] + weights.pos_embedding[:s]
    out = TapSet()
    if cfg.tap_embedding:
        out.taps.append((0, x.copy()))

    cuts = set(cfg.block_cuts)
    for i, lw in enumerate(weights.layers, start=1):
        x = layer_forward(x, lw, cfg.heads)
        if i in cuts:
            out.taps.append((i, x))
    out.final_output = kernels.layer_norm(
        x, weights.final_ln_gamma, weights.final_ln_beta, LN_EPS
    )
    return out


def save_backbone(path, weights: BackboneWeights) -> None:
    with open_binary(path, "wb") as fh:
        write_magic(fh, WEIGHTS_MAGIC, WEIGHTS_VERSION)
        fh.write(weights.config.config_block())
        for t in weights.all_tensors():
            write_f32(fh, t)


def load_backbone(path, config: BackboneConfig | None = None) -> BackboneWeights:
    """Load a weight file; `config`, when given, must match the stored one."""
    with open_binary(path, "rb") as fh:
        expect_magic(fh, WEIGHTS_MAGIC, WEIGHTS_VERSION)
        stored = BackboneConfig.from_config_block(fh)
        if config is not None and config != stored:
            raise FormatError(
                f"weight file config {stored} does not match requested {config}"
            )
        cfg = stored
        h, f = cfg.hidden, cfg.ffn_dim
        shapes = {
            "w_q": (h, h), "w_k": (h, h), "w_v": (h, h), "w_o": (h, h),
            "b_q": (h,), "b_k": (h,), "b_v": (h,), "b_o": (h,),
            "ln1_gamma": (h,), "ln1_beta": (h,),
            "w_up": (h, f), "b_up": (f,), "w_down": (f, h), "b_down": (h,),
            "ln2_gamma": (h,), "ln2_beta": (h,),
        }
        token_emb = read_f32(fh, (cfg.vocab_size, h))
        pos_emb = read_f32(fh, (cfg.max_seq, h))
        layers = []
        for _ in range(cfg.layers):
            layers.append(LayerWeights(
                **{name: read_f32(fh, shapes[name]) for name in LayerWeights.FIELDS}
            ))
        final_gamma = read_f32(fh, (h,))
        final_beta = read_f32(fh, (h,))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after final tensor")
    return BackboneWeights(cfg, token_emb, pos_emb, layers, final_gamma, final_beta)
