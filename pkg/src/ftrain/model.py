"""Pre-LayerNorm transformer encoder/decoder built from the fused kernels.

The graph is fixed and the backward pass is hand-wired in exact reverse
of the forward: every layer stashes what its backward needs, backward
pops in LIFO order and releases each buffer at its last use. Cross
attention keys/values for all decoder layers come from one packed
projection of the encoder output, and the encoder-output gradient is
assembled only after decoder layer 0 has finished its backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradients as G
from . import kernels as K
from .errors import ConfigError, IncompleteGradientSet, ShapeMismatch
from .kernels import AttentionMask, DropoutMask, EmbeddingConfig, LNCache, SoftmaxCache
from .memplan import NullArena
from .numerics import derive_seed, rand_uniform_array


# ---------------------------------------------------------------------------
# Configuration and parameters
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    n_enc: int = 2
    n_dec: int = 2
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 128
    vocab: int = 32
    max_len: int = 16
    pre_ln: bool = True
    tie_embeddings: bool = True
    learned_positional: bool = True
    eps: float = 1e-5
    embed_scale: float | None = None  # None -> sqrt(d_model)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab < 2:
            raise ConfigError("vocab must be >= 2")
        if not self.pre_ln:
            raise ConfigError("only the pre-LayerNorm layout is implemented")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def scale(self) -> float:
        return self.embed_scale if self.embed_scale is not None else math.sqrt(self.d_model)


def _layer_param_spec(prefix: str, d: int, dff: int, decoder: bool):
    spec = [
        (prefix + "ln1.w", (d,)), (prefix + "ln1.b", (d,)),
        (prefix + "attn.wqkv", (3 * d, d)), (prefix + "attn.bqkv", (3 * d,)),
        (prefix + "attn.wo", (d, d)), (prefix + "attn.bo", (d,)),
        (prefix + "ln2.w", (d,)), (prefix + "ln2.b", (d,)),
    ]
    if decoder:
        spec += [
            (prefix + "cross.wq", (d, d)), (prefix + "cross.bq", (d,)),
            (prefix + "cross.wo", (d, d)), (prefix + "cross.bo", (d,)),
            (prefix + "ln3.w", (d,)), (prefix + "ln3.b", (d,)),
        ]
    spec += [
        (prefix + "ffn.w1", (dff, d)), (prefix + "ffn.b1", (dff,)),
        (prefix + "ffn.w2", (d, dff)), (prefix + "ffn.b2", (d,)),
    ]
    return spec


def param_spec(cfg: ModelConfig):
    """Parameter (name, shape) list; the order defines the workspace layout."""
    d, dff = cfg.d_model, cfg.d_ff
    spec = [("tok_emb", (cfg.vocab, d))]
    if cfg.learned_positional:
        spec.append(("pos_emb", (cfg.max_len, d)))
    for i in range(cfg.n_enc):
        spec += _layer_param_spec(f"enc{i}.", d, dff, decoder=False)
    spec += [("enc_ln.w", (d,)), ("enc_ln.b", (d,))]
    spec += [("cross_kv.w", (2 * cfg.n_dec * d, d)), ("cross_kv.b", (2 * cfg.n_dec * d,))]
    for i in range(cfg.n_dec):
        spec += _layer_param_spec(f"dec{i}.", d, dff, decoder=True)
    spec += [("dec_ln.w", (d,)), ("dec_ln.b", (d,))]
    if not cfg.tie_embeddings:
        spec.append(("out_proj.w", (cfg.vocab, d)))
    return spec


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic float32 init from the counter RNG (seed-reproducible)."""
    params = {}
    for idx, (name, shape) in enumerate(param_spec(cfg)):
        n = int(np.prod(shape))
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "w" and ("ln" in name):
            params[name] = np.ones(shape, dtype=np.float32)
        elif leaf in ("b", "bqkv", "bo", "bq", "b1", "b2"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            u = rand_uniform_array(derive_seed(seed, idx), 0, n)
            if "emb" in name or name == "out_proj.w":
                limit = 0.02 * math.sqrt(3.0)
            else:
                fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
                limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = ((2.0 * u - 1.0) * limit).astype(np.float32).reshape(shape)
    return params


def sinusoidal_table(max_len: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed positional table: sin on even columns, cos on odd ones."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    j = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(j / 2.0) / d)
    table = np.where(j % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


# ---------------------------------------------------------------------------
# Layer weight views
# ---------------------------------------------------------------------------

@dataclass
class EncoderLayerWeights:
    ln1_w: np.ndarray; ln1_b: np.ndarray
    wqkv: np.ndarray; bqkv: np.ndarray
    wo: np.ndarray; bo: np.ndarray
    ln2_w: np.ndarray; ln2_b: np.ndarray
    w1: np.ndarray; b1: np.ndarray
    w2: np.ndarray; b2: np.ndarray

    @classmethod
    def from_params(cls, params, prefix: str):
        return cls(
            ln1_w=params[prefix + "ln1.w"], ln1_b=params[prefix + "ln1.b"],
            wqkv=params[prefix + "attn.wqkv"], bqkv=params[prefix + "attn.bqkv"],
            wo=params[prefix + "attn.wo"], bo=params[prefix + "attn.bo"],
            ln2_w=params[prefix + "ln2.w"], ln2_b=params[prefix + "ln2.b"],
            w1=params[prefix + "ffn.w1"], b1=params[prefix + "ffn.b1"],
            w2=params[prefix + "ffn.w2"], b2=params[prefix + "ffn.b2"],
        )


@dataclass
class DecoderLayerWeights(EncoderLayerWeights):
    cross_wq: np.ndarray = None
    cross_bq: np.ndarray = None
    cross_wo: np.ndarray = None
    cross_bo: np.ndarray = None
    ln3_w: np.ndarray = None
    ln3_b: np.ndarray = None

    @classmethod
    def from_params(cls, params, prefix: str):
        base = EncoderLayerWeights.from_params(params, prefix)
        return cls(
            **base.__dict__,
            cross_wq=params[prefix + "cross.wq"], cross_bq=params[prefix + "cross.bq"],
            cross_wo=params[prefix + "cross.wo"], cross_bo=params[prefix + "cross.bo"],
            ln3_w=params[prefix + "ln3.w"], ln3_b=params[prefix + "ln3.b"],
        )


# ---------------------------------------------------------------------------
# Layer-batched cross-attention weight packing
# ---------------------------------------------------------------------------

@dataclass
class PackedCrossWeights:
    """Vertical concatenation [Wkey_0; ..; Wkey_{n-1}; Wval_0; ..; Wval_{n-1}]."""

    w: np.ndarray   # [2*n*d, d]
    b: np.ndarray   # [2*n*d]
    n_layers: int
    d: int

    def key_slice(self, i: int):
        return self.w[i * self.d:(i + 1) * self.d]

    def value_slice(self, i: int):
        return self.w[(self.n_layers + i) * self.d:(self.n_layers + i + 1) * self.d]


def pack_cross_weights(keys, values, key_biases, value_biases) -> PackedCrossWeights:
    """Concatenate per-layer key/value projections into one GEMM operand."""
    n = len(keys)
    if n < 1 or len(values) != n or len(key_biases) != n or len(value_biases) != n:
        raise ShapeMismatch("need matching, non-empty key/value weight lists")
    d = np.asarray(keys[0]).shape[1]
    for m in list(keys) + list(values):
        if np.asarray(m).shape != (d, d):
            raise ShapeMismatch(f"cross projection must be [{d}x{d}], got {np.asarray(m).shape}")
    w = np.concatenate([np.asarray(m) for m in list(keys) + list(values)], axis=0)
    b = np.concatenate([np.asarray(v).reshape(-1) for v in list(key_biases) + list(value_biases)])
    if w.shape[0] != 2 * n * d:
        raise ShapeMismatch("packed row count must be exactly 2*n*d")
    return PackedCrossWeights(w=w, b=b, n_layers=n, d=d)


def unpack_cross_weights(pw: PackedCrossWeights):
    keys = [pw.key_slice(i).copy() for i in range(pw.n_layers)]
    values = [pw.value_slice(i).copy() for i in range(pw.n_layers)]
    kb = [pw.b[i * pw.d:(i + 1) * pw.d].copy() for i in range(pw.n_layers)]
    vb = [pw.b[(pw.n_layers + i) * pw.d:(pw.n_layers + i + 1) * pw.d].copy()
          for i in range(pw.n_layers)]
    return keys, values, kb, vb


def packed_kv_forward(enc_out: np.ndarray, pw: PackedCrossWeights, arena=None):
    """One GEMM of the encoder output against the packed weights, then a
    2n-way split. Returns (list of (K_i, V_i) views, backing buffer)."""
    arena = arena or NullArena()
    if enc_out.shape[-1] != pw.d:
        raise ShapeMismatch(f"enc_out feature dim {enc_out.shape[-1]} != {pw.d}")
    b, ls, d = enc_out.shape
    n = pw.n_layers
    dtype = K._compute_dtype(enc_out, pw.w)
    buf = arena.alloc((b, ls, 2 * n * d), dtype)
    K.gemm(enc_out.reshape(b * ls, d), pw.w, trans_b=True, out=buf.reshape(b * ls, 2 * n * d))
    buf += K._as_compute(pw.b, dtype)
    per_layer = [(buf[..., i * d:(i + 1) * d], buf[..., (n + i) * d:(n + i + 1) * d])
                 for i in range(n)]
    return per_layer, buf


def packed_kv_backward(dks, dvs, enc_out: np.ndarray, pw: PackedCrossWeights, arena=None):
    """dx = sum_i Wkey_i^T dK_i + Wval_i^T dV_i, via one packed GEMM.

    Raises IncompleteGradientSet unless every decoder layer has
    contributed both gradients (the ordering contract: this runs only
    after layer 0's backward).
    """
    arena = arena or NullArena()
    n = pw.n_layers
    if len(dks) != n or len(dvs) != n or any(g is None for g in dks) or any(g is None for g in dvs):
        raise IncompleteGradientSet("missing dK/dV contribution for some decoder layer")
    b, ls, d = enc_out.shape
    dtype = K._compute_dtype(enc_out, dks[0])
    dy = arena.alloc((b, ls, 2 * n * d), dtype)
    for i in range(n):
        np.copyto(dy[..., i * d:(i + 1) * d], dks[i], casting="unsafe")
        np.copyto(dy[..., (n + i) * d:(n + i + 1) * d], dvs[i], casting="unsafe")
    dy2 = dy.reshape(b * ls, 2 * n * d)
    dx = arena.alloc((b, ls, d), dtype)
    K.gemm(dy2, pw.w, out=dx.reshape(b * ls, d))
    dw = K.gemm(dy2, enc_out.reshape(b * ls, d), trans_a=True)
    db = dy2.astype(np.float64).sum(axis=0).astype(dtype)
    arena.free(dy)
    return dx, dw, db


# ---------------------------------------------------------------------------
# Activation stash and gradient sink
# ---------------------------------------------------------------------------

class ActivationStash:
    """LIFO store of saved activations; every entry is consumed exactly once."""

    def __init__(self):
        self._items: list[tuple[str, object]] = []

    def push(self, tag: str, value):
        self._items.append((tag, value))

    def pop(self, tag: str):
        if not self._items:
            raise ShapeMismatch(f"stash empty, wanted {tag!r}")
        got, value = self._items.pop()
        if got != tag:
            raise ShapeMismatch(f"stash order broken: wanted {tag!r}, top is {got!r}")
        return value

    def drain(self, arena):
        while self._items:
            _, value = self._items.pop()
            if isinstance(value, np.ndarray):
                arena.free(value)

    def __len__(self):
        return len(self._items)


class GradSink:
    """Accumulates named parameter gradients (dict-backed by default)."""

    def __init__(self, store: dict | None = None):
        self.store = store if store is not None else {}

    def add(self, name: str, value: np.ndarray):
        if name in self.store:
            self.store[name] += value
        else:
            self.store[name] = np.array(value, copy=True)


class _ViewSink(GradSink):
    """Accumulates into preallocated float32 views (the flat grad buffer)."""

    def add(self, name: str, value: np.ndarray):
        self.store[name] += value


# ---------------------------------------------------------------------------
# Attention helpers
# ---------------------------------------------------------------------------

def _heads(x: np.ndarray, n_heads: int):
    """[B, L, d] -> [B, N, L, d/N] view."""
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(xh: np.ndarray, out: np.ndarray):
    """[B, N, L, hd] -> [B, L, d] copy into out."""
    b, n, l, hd = xh.shape
    np.copyto(out, xh.transpose(0, 2, 1, 3).reshape(b, l, n * hd))
    return out


# ---------------------------------------------------------------------------
# Encoder layer
# ---------------------------------------------------------------------------

def encoder_layer_forward(x, w: EncoderLayerWeights, mask, p_drop, seed, *,
                          n_heads, eps=1e-5, arena=None, stash=None,
                          prefix="", site=0, strategy=None):
    """One pre-LN encoder layer; returns (y, stash).

    x: [B, L, d] (ownership moves to the stash; the matching backward
    frees it). mask: AttentionMask or keep array for the attention scores.
    """
    arena = arena or NullArena()
    stash = stash if stash is not None else ActivationStash()
    b, l, d = x.shape
    hd = d // n_heads
    r = b * l
    dtype = K._compute_dtype(x, w.wqkv)
    dff = w.w1.shape[0]
    p = prefix

    stash.push(p + "x_in", x)
    mu1, sg1 = arena.alloc((r,), dtype), arena.alloc((r,), dtype)
    u1 = arena.alloc((b, l, d), dtype)
    K.layernorm_forward(x, w.ln1_w, w.ln1_b, eps, out=u1, mu_out=mu1, sigma_out=sg1)
    stash.push(p + "mu1", mu1); stash.push(p + "sg1", sg1); stash.push(p + "u1", u1)

    qkv = arena.alloc((b, l, 3 * d), dtype)
    K.gemm(u1.reshape(r, d), w.wqkv, trans_b=True, out=qkv.reshape(r, 3 * d))
    qkv += K._as_compute(w.bqkv, dtype)
    stash.push(p + "qkv", qkv)
    qh = _heads(qkv[..., 0:d], n_heads)
    kh = _heads(qkv[..., d:2 * d], n_heads)
    vh = _heads(qkv[..., 2 * d:3 * d], n_heads)

    scores = arena.alloc((b, n_heads, l, l), dtype)
    K.gemm(qh, kh, trans_b=True, out=scores)
    scores *= dtype.type(1.0 / math.sqrt(hd))  # scaled dot product epilogue
    probs, _ = K.softmax_forward(scores, mask=mask, out=scores, strategy=strategy)
    stash.push(p + "probs", probs)

    ctx = arena.alloc((b, n_heads, l, hd), dtype)
    K.gemm(probs, vh, out=ctx)
    ctxm = arena.alloc((b, l, d), dtype)
    _merge_heads(ctx, ctxm)
    arena.free(ctx)
    stash.push(p + "ctxm", ctxm)

    proj = arena.alloc((b, l, d), dtype)
    K.gemm(ctxm.reshape(r, d), w.wo, trans_b=True, out=proj.reshape(r, d))
    y1 = arena.alloc((b, l, d), dtype)
    keep1 = arena.alloc((b, l, d), dtype)
    K.bias_dropout_residual(proj, w.bo, x, p_drop, derive_seed(seed, site, 0),
                            out=y1, keep_out=keep1)
    arena.free(proj)
    stash.push(p + "keep1", keep1); stash.push(p + "y1", y1)

    mu2, sg2 = arena.alloc((r,), dtype), arena.alloc((r,), dtype)
    u2 = arena.alloc((b, l, d), dtype)
    K.layernorm_forward(y1, w.ln2_w, w.ln2_b, eps, out=u2, mu_out=mu2, sigma_out=sg2)
    stash.push(p + "mu2", mu2); stash.push(p + "sg2", sg2); stash.push(p + "u2", u2)

    a1 = arena.alloc((b, l, dff), dtype)
    K.gemm(u2.reshape(r, d), w.w1, trans_b=True, out=a1.reshape(r, dff))
    z = arena.alloc((b, l, dff), dtype)
    keep2 = arena.alloc((b, l, dff), dtype)
    relum = arena.alloc((b, l, dff), dtype)
    K.bias_relu_dropout(a1, w.b1, p_drop, derive_seed(seed, site, 1),
                        out=z, keep_out=keep2, relu_out=relum)
    arena.free(a1)
    stash.push(p + "keep2", keep2); stash.push(p + "relum", relum); stash.push(p + "z", z)

    f = arena.alloc((b, l, d), dtype)
    K.gemm(z.reshape(r, dff), w.w2, trans_b=True, out=f.reshape(r, d))
    y2 = arena.alloc((b, l, d), dtype)
    keep3 = arena.alloc((b, l, d), dtype)
    K.bias_dropout_residual(f, w.b2, y1, p_drop, derive_seed(seed, site, 2),
                            out=y2, keep_out=keep3)
    arena.free(f)
    stash.push(p + "keep3", keep3)
    return y2, stash


def encoder_layer_backward(dy, w: EncoderLayerWeights, stash: ActivationStash,
                           sink: GradSink, *, n_heads, p_drop, arena=None,
                           prefix="", param_prefix=""):
    """Backward of one encoder layer. Takes ownership of dy, returns dx."""
    arena = arena or NullArena()
    b, l, d = dy.shape
    hd = d // n_heads
    r = b * l
    dtype = dy.dtype
    p, pp = prefix, param_prefix
    dff = w.w1.shape[0]

    keep3 = stash.pop(p + "keep3")
    z = stash.pop(p + "z")
    relum = stash.pop(p + "relum")
    keep2 = stash.pop(p + "keep2")
    u2 = stash.pop(p + "u2")
    sg2 = stash.pop(p + "sg2")
    mu2 = stash.pop(p + "mu2")
    y1 = stash.pop(p + "y1")
    keep1 = stash.pop(p + "keep1")
    ctxm = stash.pop(p + "ctxm")
    probs = stash.pop(p + "probs")
    qkv = stash.pop(p + "qkv")
    u1 = stash.pop(p + "u1")
    sg1 = stash.pop(p + "sg1")
    mu1 = stash.pop(p + "mu1")
    x_in = stash.pop(p + "x_in")

    # FFN tail: y2 = drop(f + b2) + y1
    df = arena.alloc((b, l, d), dtype)
    _, db2, _ = G.bias_dropout_residual_backward(dy, DropoutMask(keep3, p_drop), out=df)
    sink.add(pp + "ffn.b2", db2)
    arena.free(keep3)

    dz = arena.alloc((b, l, dff), dtype)
    K.gemm(df.reshape(r, d), w.w2, out=dz.reshape(r, dff))
    sink.add(pp + "ffn.w2", K.gemm(df.reshape(r, d), z.reshape(r, dff), trans_a=True))
    arena.free(z); arena.free(df)

    da1 = arena.alloc((b, l, dff), dtype)
    _, db1 = G.bias_relu_dropout_backward(dz, DropoutMask(keep2, p_drop), relum, out=da1)
    sink.add(pp + "ffn.b1", db1)
    arena.free(dz); arena.free(relum); arena.free(keep2)

    du2 = arena.alloc((b, l, d), dtype)
    K.gemm(da1.reshape(r, dff), w.w1, out=du2.reshape(r, d))
    sink.add(pp + "ffn.w1", K.gemm(da1.reshape(r, dff), u2.reshape(r, d), trans_a=True))
    arena.free(da1); arena.free(u2)

    dy1 = arena.alloc((b, l, d), dtype)
    _, dlw, dlb = G.layernorm_backward(du2, y1, w.ln2_w, LNCache(mu2, sg2), out=dy1)
    sink.add(pp + "ln2.w", dlw); sink.add(pp + "ln2.b", dlb)
    arena.free(du2); arena.free(mu2); arena.free(sg2); arena.free(y1)
    dy1 += dy   # residual branch of the FFN tail
    arena.free(dy)

    # Attention tail: y1 = drop(proj + bo) + x
    dproj = arena.alloc((b, l, d), dtype)
    _, dbo, _ = G.bias_dropout_residual_backward(dy1, DropoutMask(keep1, p_drop), out=dproj)
    sink.add(pp + "attn.bo", dbo)
    arena.free(keep1)

    dctxm = arena.alloc((b, l, d), dtype)
    K.gemm(dproj.reshape(r, d), w.wo, out=dctxm.reshape(r, d))
    sink.add(pp + "attn.wo", K.gemm(dproj.reshape(r, d), ctxm.reshape(r, d), trans_a=True))
    arena.free(dproj); arena.free(ctxm)

    dctx = dctxm.reshape(b, l, n_heads, hd).transpose(0, 2, 1, 3)
    qh = _heads(qkv[..., 0:d], n_heads)
    kh = _heads(qkv[..., d:2 * d], n_heads)
    vh = _heads(qkv[..., 2 * d:3 * d], n_heads)

    dscores = arena.alloc((b, n_heads, l, l), dtype)
    K.gemm(dctx, vh, trans_b=True, out=dscores)
    G.softmax_backward(dscores, SoftmaxCache(probs), out=dscores)
    dscores *= dtype.type(1.0 / math.sqrt(hd))

    dqkv = arena.alloc((b, l, 3 * d), dtype)
    K.gemm(dscores, kh, out=_heads(dqkv[..., 0:d], n_heads))
    K.gemm(dscores, qh, trans_a=True, out=_heads(dqkv[..., d:2 * d], n_heads))
    K.gemm(probs, dctx, trans_a=True, out=_heads(dqkv[..., 2 * d:3 * d], n_heads))
    arena.free(dscores); arena.free(probs); arena.free(dctxm); arena.free(qkv)

    du1 = arena.alloc((b, l, d), dtype)
    K.gemm(dqkv.reshape(r, 3 * d), w.wqkv, out=du1.reshape(r, d))
    sink.add(pp + "attn.wqkv", K.gemm(dqkv.reshape(r, 3 * d), u1.reshape(r, d), trans_a=True))
    sink.add(pp + "attn.bqkv", dqkv.reshape(r, 3 * d).astype(np.float64).sum(axis=0).astype(dtype))
    arena.free(dqkv); arena.free(u1)

    dx = arena.alloc((b, l, d), dtype)
    _, dlw, dlb = G.layernorm_backward(du1, x_in, w.ln1_w, LNCache(mu1, sg1), out=dx)
    sink.add(pp + "ln1.w", dlw); sink.add(pp + "ln1.b", dlb)
    arena.free(du1); arena.free(mu1); arena.free(sg1); arena.free(x_in)
    dx += dy1   # residual branch of the attention tail
    arena.free(dy1)
    return dx


# ---------------------------------------------------------------------------
# Decoder layer (self-attention, packed cross-attention, FFN)
# ---------------------------------------------------------------------------

def decoder_layer_forward(x, w: DecoderLayerWeights, kv, self_mask, cross_mask,
                          p_drop, seed, *, n_heads, eps=1e-5, arena=None,
                          stash=None, prefix="", site=0, strategy=None):
    """One pre-LN decoder layer consuming precomputed (K_i, V_i)."""
    arena = arena or NullArena()
    stash = stash if stash is not None else ActivationStash()
    k_i, v_i = kv
    b, l, d = x.shape
    ls = k_i.shape[1]
    hd = d // n_heads
    r = b * l
    dtype = K._compute_dtype(x, w.wqkv)
    dff = w.w1.shape[0]
    p = prefix

    stash.push(p + "x_in", x)
    mu1, sg1 = arena.alloc((r,), dtype), arena.alloc((r,), dtype)
    u1 = arena.alloc((b, l, d), dtype)
    K.layernorm_forward(x, w.ln1_w, w.ln1_b, eps, out=u1, mu_out=mu1, sigma_out=sg1)
    stash.push(p + "mu1", mu1); stash.push(p + "sg1", sg1); stash.push(p + "u1", u1)

    qkv = arena.alloc((b, l, 3 * d), dtype)
    K.gemm(u1.reshape(r, d), w.wqkv, trans_b=True, out=qkv.reshape(r, 3 * d))
    qkv += K._as_compute(w.bqkv, dtype)
    stash.push(p + "qkv", qkv)
    qh = _heads(qkv[..., 0:d], n_heads)
    kh = _heads(qkv[..., d:2 * d], n_heads)
    vh = _heads(qkv[..., 2 * d:3 * d], n_heads)

    scores = arena.alloc((b, n_heads, l, l), dtype)
    K.gemm(qh, kh, trans_b=True, out=scores)
    scores *= dtype.type(1.0 / math.sqrt(hd))
    probs, _ = K.softmax_forward(scores, mask=self_mask, out=scores, strategy=strategy)
    stash.push(p + "probs", probs)

    ctx = arena.alloc((b, n_heads, l, hd), dtype)
    K.gemm(probs, vh, out=ctx)
    ctxm = arena.alloc((b, l, d), dtype)
    _merge_heads(ctx, ctxm)
    arena.free(ctx)
    stash.push(p + "ctxm", ctxm)

    proj = arena.alloc((b, l, d), dtype)
    K.gemm(ctxm.reshape(r, d), w.wo, trans_b=True, out=proj.reshape(r, d))
    y1 = arena.alloc((b, l, d), dtype)
    keep1 = arena.alloc((b, l, d), dtype)
    K.bias_dropout_residual(proj, w.bo, x, p_drop, derive_seed(seed, site, 0),
                            out=y1, keep_out=keep1)
    arena.free(proj)
    stash.push(p + "keep1", keep1); stash.push(p + "y1", y1)

    # Cross attention against the packed encoder context.
    mu2, sg2 = arena.alloc((r,), dtype), arena.alloc((r,), dtype)
    u2 = arena.alloc((b, l, d), dtype)
    K.layernorm_forward(y1, w.ln2_w, w.ln2_b, eps, out=u2, mu_out=mu2, sigma_out=sg2)
    stash.push(p + "mu2", mu2); stash.push(p + "sg2", sg2); stash.push(p + "u2", u2)

    qc = arena.alloc((b, l, d), dtype)
    K.gemm(u2.reshape(r, d), w.cross_wq, trans_b=True, out=qc.reshape(r, d))
    qc += K._as_compute(w.cross_bq, dtype)
    stash.push(p + "qc", qc)

    scores_x = arena.alloc((b, n_heads, l, ls), dtype)
    K.gemm(_heads(qc, n_heads), _heads(k_i, n_heads), trans_b=True, out=scores_x)
    scores_x *= dtype.type(1.0 / math.sqrt(hd))
    probs_x, _ = K.softmax_forward(scores_x, mask=cross_mask, out=scores_x, strategy=strategy)
    stash.push(p + "probs_x", probs_x)

    ctx_x = arena.alloc((b, n_heads, l, hd), dtype)
    K.gemm(probs_x, _heads(v_i, n_heads), out=ctx_x)
    ctxm_x = arena.alloc((b, l, d), dtype)
    _merge_heads(ctx_x, ctxm_x)
    arena.free(ctx_x)
    stash.push(p + "ctxm_x", ctxm_x)

    proj_x = arena.alloc((b, l, d), dtype)
    K.gemm(ctxm_x.reshape(r, d), w.cross_wo, trans_b=True, out=proj_x.reshape(r, d))
    y2 = arena.alloc((b, l, d), dtype)
    keep2 = arena.alloc((b, l, d), dtype)
    K.bias_dropout_residual(proj_x, w.cross_bo, y1, p_drop, derive_seed(seed, site, 1),
                            out=y2, keep_out=keep2)
    arena.free(proj_x)
    stash.push(p + "keep2", keep2); stash.push(p + "y2", y2)

    mu3, sg3 = arena.alloc((r,), dtype), arena.alloc((r,), dtype)
    u3 = arena.alloc((b, l, d), dtype)
    K.layernorm_forward(y2, w.ln3_w, w.ln3_b, eps, out=u3, mu_out=mu3, sigma_out=sg3)
    stash.push(p + "mu3", mu3); stash.push(p + "sg3", sg3); stash.push(p + "u3", u3)

    a1 = arena.alloc((b, l, dff), dtype)
    K.gemm(u3.reshape(r, d), w.w1, trans_b=True, out=a1.reshape(r, dff))
    z = arena.alloc((b, l, dff), dtype)
    keepf = arena.alloc((b, l, dff), dtype)
    relum = arena.alloc((b, l, dff), dtype)
    K.bias_relu_dropout(a1, w.b1, p_drop, derive_seed(seed, site, 2),
                        out=z, keep_out=keepf, relu_out=relum)
    arena.free(a1)
    stash.push(p + "keepf", keepf); stash.push(p + "relum", relum); stash.push(p + "z", z)

    f = arena.alloc((b, l, d), dtype)
    K.gemm(z.reshape(r, dff), w.w2, trans_b=True, out=f.reshape(r, d))
    y3 = arena.alloc((b, l, d), dtype)
    keep3 = arena.alloc((b, l, d), dtype)
    K.bias_dropout_residual(f, w.b2, y2, p_drop, derive_seed(seed, site, 3),
                            out=y3, keep_out=keep3)
    arena.free(f)
    stash.push(p + "keep3", keep3)
    return y3, stash


def decoder_layer_backward(dy, w: DecoderLayerWeights, kv, stash: ActivationStash,
                           sink: GradSink, *, n_heads, p_drop, arena=None,
                           prefix="", param_prefix=""):
    """Backward of one decoder layer.

    Returns (dx, dK_i, dV_i); the K/V gradients are held by the caller
    until every layer has run, then folded by packed_kv_backward.
    """
    arena = arena or NullArena()
    k_i, v_i = kv
    b, l, d = dy.shape
    ls = k_i.shape[1]
    hd = d // n_heads
    r = b * l
    dtype = dy.dtype
    p, pp = prefix, param_prefix
    dff = w.w1.shape[0]

    keep3 = stash.pop(p + "keep3")
    z = stash.pop(p + "z")
    relum = stash.pop(p + "relum")
    keepf = stash.pop(p + "keepf")
    u3 = stash.pop(p + "u3")
    sg3 = stash.pop(p + "sg3")
    mu3 = stash.pop(p + "mu3")
    y2 = stash.pop(p + "y2")
    keep2 = stash.pop(p + "keep2")
    ctxm_x = stash.pop(p + "ctxm_x")
    probs_x = stash.pop(p + "probs_x")
    qc = stash.pop(p + "qc")
    u2 = stash.pop(p + "u2")
    sg2 = stash.pop(p + "sg2")
    mu2 = stash.pop(p + "mu2")
    y1 = stash.pop(p + "y1")
    keep1 = stash.pop(p + "keep1")
    ctxm = stash.pop(p + "ctxm")
    probs = stash.pop(p + "probs")
    qkv = stash.pop(p + "qkv")
    u1 = stash.pop(p + "u1")
    sg1 = stash.pop(p + "sg1")
    mu1 = stash.pop(p + "mu1")
    x_in = stash.pop(p + "x_in")

    # FFN tail
    df = arena.alloc((b, l, d), dtype)
    _, db2, _ = G.bias_dropout_residual_backward(dy, DropoutMask(keep3, p_drop), out=df)
    sink.add(pp + "ffn.b2", db2)
    arena.free(keep3)

    dz = arena.alloc((b, l, dff), dtype)
    K.gemm(df.reshape(r, d), w.w2, out=dz.reshape(r, dff))
    sink.add(pp + "ffn.w2", K.gemm(df.reshape(r, d), z.reshape(r, dff), trans_a=True))
    arena.free(z); arena.free(df)

    da1 = arena.alloc((b, l, dff), dtype)
    _, db1 = G.bias_relu_dropout_backward(dz, DropoutMask(keepf, p_drop), relum, out=da1)
    sink.add(pp + "ffn.b1", db1)
    arena.free(dz); arena.free(relum); arena.free(keepf)

    du3 = arena.alloc((b, l, d), dtype)
    K.gemm(da1.reshape(r, dff), w.w1, out=du3.reshape(r, d))
    sink.add(pp + "ffn.w1", K.gemm(da1.reshape(r, dff), u3.reshape(r, d), trans_a=True))
    arena.free(da1); arena.free(u3)

    dy2 = arena.alloc((b, l, d), dtype)
    _, dlw, dlb = G.layernorm_backward(du3, y2, w.ln3_w, LNCache(mu3, sg3), out=dy2)
    sink.add(pp + "ln3.w", dlw); sink.add(pp + "ln3.b", dlb)
    arena.free(du3); arena.free(mu3); arena.free(sg3); arena.free(y2)
    dy2 += dy
    arena.free(dy)

    # Cross-attention tail
    dproj_x = arena.alloc((b, l, d), dtype)
    _, dbo_x, _ = G.bias_dropout_residual_backward(dy2, DropoutMask(keep2, p_drop), out=dproj_x)
    sink.add(pp + "cross.bo", dbo_x)
    arena.free(keep2)

    dctxm_x = arena.alloc((b, l, d), dtype)
    K.gemm(dproj_x.reshape(r, d), w.cross_wo, out=dctxm_x.reshape(r, d))
    sink.add(pp + "cross.wo", K.gemm(dproj_x.reshape(r, d), ctxm_x.reshape(r, d), trans_a=True))
    arena.free(dproj_x); arena.free(ctxm_x)

    dctx_x = dctxm_x.reshape(b, l, n_heads, hd).transpose(0, 2, 1, 3)
    dscores_x = arena.alloc((b, n_heads, l, ls), dtype)
    K.gemm(dctx_x, _heads(v_i, n_heads), trans_b=True, out=dscores_x)
    G.softmax_backward(dscores_x, SoftmaxCache(probs_x), out=dscores_x)
    dscores_x *= dtype.type(1.0 / math.sqrt(hd))

    dqc = arena.alloc((b, l, d), dtype)
    K.gemm(dscores_x, _heads(k_i, n_heads), out=_heads(dqc, n_heads))
    dk_i = arena.alloc((b, ls, d), dtype)
    K.gemm(dscores_x, _heads(qc, n_heads), trans_a=True, out=_heads(dk_i, n_heads))
    dv_i = arena.alloc((b, ls, d), dtype)
    K.gemm(probs_x, dctx_x, trans_a=True, out=_heads(dv_i, n_heads))
    arena.free(dscores_x); arena.free(probs_x); arena.free(dctxm_x); arena.free(qc)

    du2 = arena.alloc((b, l, d), dtype)
    K.gemm(dqc.reshape(r, d), w.cross_wq, out=du2.reshape(r, d))
    sink.add(pp + "cross.wq", K.gemm(dqc.reshape(r, d), u2.reshape(r, d), trans_a=True))
    sink.add(pp + "cross.bq", dqc.reshape(r, d).astype(np.float64).sum(axis=0).astype(dtype))
    arena.free(dqc); arena.free(u2)

    dy1 = arena.alloc((b, l, d), dtype)
    _, dlw, dlb = G.layernorm_backward(du2, y1, w.ln2_w, LNCache(mu2, sg2), out=dy1)
    sink.add(pp + "ln2.w", dlw); sink.add(pp + "ln2.b", dlb)
    arena.free(du2); arena.free(mu2); arena.free(sg2); arena.free(y1)
    dy1 += dy2
    arena.free(dy2)

    # Self-attention tail
    dproj = arena.alloc((b, l, d), dtype)
    _, dbo, _ = G.bias_dropout_residual_backward(dy1, DropoutMask(keep1, p_drop), out=dproj)
    sink.add(pp + "attn.bo", dbo)
    arena.free(keep1)

    dctxm = arena.alloc((b, l, d), dtype)
    K.gemm(dproj.reshape(r, d), w.wo, out=dctxm.reshape(r, d))
    sink.add(pp + "attn.wo", K.gemm(dproj.reshape(r, d), ctxm.reshape(r, d), trans_a=True))
    arena.free(dproj); arena.free(ctxm)

    dctx = dctxm.reshape(b, l, n_heads, hd).transpose(0, 2, 1, 3)
    qh = _heads(qkv[..., 0:d], n_heads)
    kh = _heads(qkv[..., d:2 * d], n_heads)
    vh = _heads(qkv[..., 2 * d:3 * d], n_heads)

    dscores = arena.alloc((b, n_heads, l, l), dtype)
    K.gemm(dctx, vh, trans_b=True, out=dscores)
    G.softmax_backward(dscores, SoftmaxCache(probs), out=dscores)
    dscores *= dtype.type(1.0 / math.sqrt(hd))

    dqkv = arena.alloc((b, l, 3 * d), dtype)
    K.gemm(dscores, kh, out=_heads(dqkv[..., 0:d], n_heads))
    K.gemm(dscores, qh, trans_a=True, out=_heads(dqkv[..., d:2 * d], n_heads))
    K.gemm(probs, dctx, trans_a=True, out=_heads(dqkv[..., 2 * d:3 * d], n_heads))
    arena.free(dscores); arena.free(probs); arena.free(dctxm); arena.free(qkv)

    du1 = arena.alloc((b, l, d), dtype)
    K.gemm(dqkv.reshape(r, 3 * d), w.wqkv, out=du1.reshape(r, d))
    sink.add(pp + "attn.wqkv", K.gemm(dqkv.reshape(r, 3 * d), u1.reshape(r, d), trans_a=True))
    sink.add(pp + "attn.bqkv", dqkv.reshape(r, 3 * d).astype(np.float64).sum(axis=0).astype(dtype))
    arena.free(dqkv); arena.free(u1)

    dx = arena.alloc((b, l, d), dtype)
    _, dlw, dlb = G.layernorm_backward(du1, x_in, w.ln1_w, LNCache(mu1, sg1), out=dx)
    sink.add(pp + "ln1.w", dlw); sink.add(pp + "ln1.b", dlb)
    arena.free(du1); arena.free(mu1); arena.free(sg1); arena.free(x_in)
    dx += dy1
    arena.free(dy1)
    return dx, dk_i, dv_i


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray        # [B, Ls] int token ids
    tgt_in: np.ndarray     # [B, Lt] decoder input (shifted target)
    tgt_out: np.ndarray    # [B, Lt] prediction targets
    src_len: np.ndarray    # [B] valid source lengths
    pad_id: int = 0


@dataclass
class ModelOutput:
    loss_sum: float
    token_count: int
    correct: int

    @property
    def loss_per_token(self) -> float:
        return self.loss_sum / max(self.token_count, 1)

    @property
    def accuracy(self) -> float:
        return self.correct / max(self.token_count, 1)


class Transformer:
    """Fused-graph encoder-decoder with hand-wired forward/backward."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.param_names = [name for name, _ in param_spec(cfg)]
        self._sin_table = None

    def param_spec(self):
        return param_spec(self.cfg)

    def init_params(self, seed: int):
        return init_params(self.cfg, seed)

    def _positional(self, params, dtype):
        if self.cfg.learned_positional:
            return params["pos_emb"]
        if self._sin_table is None or self._sin_table.dtype != dtype:
            self._sin_table = sinusoidal_table(self.cfg.max_len, self.cfg.d_model, dtype)
        return self._sin_table

    def packed_weights(self, params) -> PackedCrossWeights:
        return PackedCrossWeights(w=params["cross_kv.w"], b=params["cross_kv.b"],
                                  n_layers=self.cfg.n_dec, d=self.cfg.d_model)

    def forward_backward(self, params, batch: Batch, *, p_drop=0.0, alpha=0.0,
                         seed=0, step=0, arena=None, sink: GradSink | None = None,
                         compute_grads=True, grad_scale=1.0, trace=None,
                         strategy=None, capture: dict | None = None) -> ModelOutput:
        """Run one batch end to end; gradients accumulate into sink.

        grad_scale multiplies the criterion gradient (callers fold in
        1/token_count and any loss scaling). With compute_grads=False this
        is a pure forward pass (used for evaluation). capture, when given,
        receives copies of named intermediates (debug/test hook).
        """
        cfg = self.cfg
        arena = arena or NullArena()
        stash = ActivationStash()
        if sink is None:
            sink = GradSink()
        emit = trace.append if trace is not None else (lambda ev: None)

        src = np.asarray(batch.src)
        tgt_in = np.asarray(batch.tgt_in)
        tgt_out = np.asarray(batch.tgt_out).reshape(-1)
        b, ls = src.shape
        lt = tgt_in.shape[1]
        d, n, v = cfg.d_model, cfg.n_heads, cfg.vocab
        dtype = K._compute_dtype(params["tok_emb"])
        emb_cfg = EmbeddingConfig(scale=cfg.scale, vocab=v, max_len=cfg.max_len,
                                  learned_positional=cfg.learned_positional)
        pos = self._positional(params, dtype)
        enc_mask = AttentionMask("padding", np.asarray(batch.src_len))
        dec_mask = AttentionMask("causal")
        enc_keep = enc_mask.keep_array(ls, ls)
        dec_keep = dec_mask.keep_array(lt, lt)

        # --- forward: encoder ---
        h = arena.alloc((b, ls, d), dtype)
        keep_src = arena.alloc((b, ls, d), dtype)
        _, src_mask = K.embedding_forward(params["tok_emb"], pos, src, emb_cfg, p_drop,
                                          derive_seed(seed, step, 0), out=h, keep_out=keep_src)
        stash.push("src_keep", keep_src)
        enc_w = [EncoderLayerWeights.from_params(params, f"enc{i}.") for i in range(cfg.n_enc)]
        for i in range(cfg.n_enc):
            h, _ = encoder_layer_forward(
                h, enc_w[i], enc_keep, p_drop, derive_seed(seed, step, 1),
                n_heads=n, eps=cfg.eps, arena=arena, stash=stash,
                prefix=f"enc{i}.", site=i, strategy=strategy)
        stash.push("enc_ln_in", h)
        mu_e, sg_e = arena.alloc((b * ls,), dtype), arena.alloc((b * ls,), dtype)
        enc_out = arena.alloc((b, ls, d), dtype)
        K.layernorm_forward(h, params["enc_ln.w"], params["enc_ln.b"], cfg.eps,
                            out=enc_out, mu_out=mu_e, sigma_out=sg_e)
        stash.push("enc_ln_mu", mu_e); stash.push("enc_ln_sg", sg_e)
        stash.push("enc_out", enc_out)

        pw = self.packed_weights(params)
        kv_pairs, kv_buf = packed_kv_forward(enc_out, pw, arena=arena)
        cross_keep = AttentionMask("padding", np.asarray(batch.src_len)).keep_array(lt, ls)

        # --- forward: decoder ---
        g = arena.alloc((b, lt, d), dtype)
        keep_tgt = arena.alloc((b, lt, d), dtype)
        _, tgt_mask = K.embedding_forward(params["tok_emb"], pos, tgt_in, emb_cfg, p_drop,
                                          derive_seed(seed, step, 2), out=g, keep_out=keep_tgt)
        stash.push("tgt_keep", keep_tgt)
        dec_w = [DecoderLayerWeights.from_params(params, f"dec{i}.") for i in range(cfg.n_dec)]
        for i in range(cfg.n_dec):
            g, _ = decoder_layer_forward(
                g, dec_w[i], kv_pairs[i], dec_keep, cross_keep, p_drop,
                derive_seed(seed, step, 3), n_heads=n, eps=cfg.eps, arena=arena,
                stash=stash, prefix=f"dec{i}.", site=i, strategy=strategy)
        stash.push("dec_ln_in", g)
        mu_d, sg_d = arena.alloc((b * lt,), dtype), arena.alloc((b * lt,), dtype)
        dec_out = arena.alloc((b, lt, d), dtype)
        K.layernorm_forward(g, params["dec_ln.w"], params["dec_ln.b"], cfg.eps,
                            out=dec_out, mu_out=mu_d, sigma_out=sg_d)
        stash.push("dec_ln_mu", mu_d); stash.push("dec_ln_sg", sg_d)
        stash.push("dec_out", dec_out)

        # --- criterion ---
        proj_w = params["tok_emb"] if cfg.tie_embeddings else params["out_proj.w"]
        rt = b * lt
        logits = arena.alloc((rt, v), dtype)
        K.gemm(dec_out.reshape(rt, d), proj_w, trans_b=True, out=logits)
        logq = K.log_softmax_forward(logits, out=logits, strategy=strategy)
        stash.push("logq", logq)
        loss_sum, token_count = K.ls_cross_entropy_forward(logq, tgt_out, alpha, batch.pad_id)
        valid = tgt_out != batch.pad_id
        correct = int((np.argmax(logq, axis=-1)[valid] == tgt_out[valid]).sum())
        out = ModelOutput(loss_sum=loss_sum, token_count=token_count, correct=correct)
        if capture is not None:
            capture["logq"] = np.array(logq.reshape(b, lt, v), copy=True)

        if not compute_grads:
            stash.drain(arena)
            arena.free(kv_buf)
            return out

        # --- backward: criterion and output projection ---
        logq = stash.pop("logq")
        probs = arena.alloc((rt, v), dtype)
        np.exp(logq, out=probs)
        dlogits = G.ls_cross_entropy_backward(probs, tgt_out, alpha, batch.pad_id,
                                              grad_scale=grad_scale, out=probs)
        arena.free(logq)
        dec_out = stash.pop("dec_out")
        ddec = arena.alloc((b, lt, d), dtype)
        K.gemm(dlogits, proj_w, out=ddec.reshape(rt, d))
        dproj_w = K.gemm(dlogits, dec_out.reshape(rt, d), trans_a=True)
        sink.add("tok_emb" if cfg.tie_embeddings else "out_proj.w", dproj_w)
        arena.free(dlogits); arena.free(dec_out)

        sg_d = stash.pop("dec_ln_sg"); mu_d = stash.pop("dec_ln_mu")
        g_in = stash.pop("dec_ln_in")
        dg = arena.alloc((b, lt, d), dtype)
        _, dlw, dlb = G.layernorm_backward(ddec, g_in, params["dec_ln.w"],
                                           LNCache(mu_d, sg_d), out=dg)
        sink.add("dec_ln.w", dlw); sink.add("dec_ln.b", dlb)
        arena.free(ddec); arena.free(mu_d); arena.free(sg_d); arena.free(g_in)

        # --- backward: decoder stack (collect per-layer dK/dV) ---
        dks: list = [None] * cfg.n_dec
        dvs: list = [None] * cfg.n_dec
        for i in reversed(range(cfg.n_dec)):
            dg, dk_i, dv_i = decoder_layer_backward(
                dg, dec_w[i], kv_pairs[i], stash, sink, n_heads=n, p_drop=p_drop,
                arena=arena, prefix=f"dec{i}.", param_prefix=f"dec{i}.")
            dks[i], dvs[i] = dk_i, dv_i
            emit(("dec_layer_backward_done", i))
        keep_tgt = stash.pop("tgt_keep")
        de, dp = G.embedding_backward(dg, tgt_in, DropoutMask(keep_tgt, p_drop), emb_cfg)
        sink.add("tok_emb", de)
        if dp is not None:
            sink.add("pos_emb", dp)
        arena.free(dg); arena.free(keep_tgt)
        arena.free(kv_buf)

        # --- backward: packed cross KV (only now is the enc grad legal) ---
        enc_out = stash.pop("enc_out")
        denc_out, dw_kv, db_kv = packed_kv_backward(dks, dvs, enc_out, pw, arena=arena)
        emit(("enc_out_grad_emitted",))
        sink.add("cross_kv.w", dw_kv); sink.add("cross_kv.b", db_kv)
        for buf in dks + dvs:
            arena.free(buf)
        arena.free(enc_out)

        sg_e = stash.pop("enc_ln_sg"); mu_e = stash.pop("enc_ln_mu")
        h_in = stash.pop("enc_ln_in")
        dh = arena.alloc((b, ls, d), dtype)
        _, dlw, dlb = G.layernorm_backward(denc_out, h_in, params["enc_ln.w"],
                                           LNCache(mu_e, sg_e), out=dh)
        sink.add("enc_ln.w", dlw); sink.add("enc_ln.b", dlb)
        arena.free(denc_out); arena.free(mu_e); arena.free(sg_e); arena.free(h_in)

        for i in reversed(range(cfg.n_enc)):
            dh = encoder_layer_backward(
                dh, enc_w[i], stash, sink, n_heads=n, p_drop=p_drop, arena=arena,
                prefix=f"enc{i}.", param_prefix=f"enc{i}.")
        keep_src = stash.pop("src_keep")
        de, dp = G.embedding_backward(dh, src, DropoutMask(keep_src, p_drop), emb_cfg)
        sink.add("tok_emb", de)
        if dp is not None:
            sink.add("pos_emb", dp)
        arena.free(dh); arena.free(keep_src)

        if len(stash):
            raise ShapeMismatch(f"activation stash leaked {len(stash)} entries")
        return out


def transformer_forward_backward(cfg: ModelConfig, params, batch: Batch, **kwargs):
    """Functional wrapper: run one batch and return (output, grads dict)."""
    sink = kwargs.pop("sink", None) or GradSink()
    out = Transformer(cfg).forward_backward(params, batch, sink=sink, **kwargs)
    return out, sink.store
