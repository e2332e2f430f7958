"""Fused-vs-unfused CPU timing with in-bench correctness checks.

The unfused comparators materialize every intermediate the fused ops
avoid (separate bias add, mask multiply, rescale, residual add; two-pass
mean/variance; softmax-then-log). Ratios are reported, never gated:
they are platform measurements, correctness is the asserted part.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from . import model as M
from .kernels import EmbeddingConfig
from .numerics import get_num_threads, set_num_threads

WARMUP = 3
RUNS = 10
PARITY_TOL = 1e-5


def _rel_err(a, b):
    denom = max(float(np.max(np.abs(b))), 1e-6)
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)))) / denom


def _time(fn) -> tuple[float, float]:
    for _ in range(WARMUP):
        fn()
    samples = []
    for _ in range(RUNS):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    arr = np.array(samples)
    return float(arr.mean()), float(arr.std())


# -- unfused compositions ----------------------------------------------------
#
# Dropout masks are regenerated inside the composition (their own pass,
# same counter RNG) so both sides pay for mask generation and parity is
# preserved; injected masks are used only where a keep array is handed in.

def _unfused_mask(shape, p, seed):
    from .numerics import rand_uniform_array
    u = rand_uniform_array(seed, 0, int(np.prod(shape)))
    return (u >= p).reshape(shape).astype(np.float32)


def _unfused_bias_dropout_residual(x, bias, residual, keep, p):
    t1 = x + bias
    t2 = t1 * keep
    t3 = t2 * (1.0 / (1.0 - p)) if p > 0 else t2
    return t3 + residual


def _unfused_bias_relu_dropout(x, bias, keep, p):
    t1 = x + bias
    t2 = np.maximum(t1, 0.0)
    t3 = t2 * keep
    return t3 * (1.0 / (1.0 - p)) if p > 0 else t3


def _unfused_layernorm(x, w, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mu).mean(axis=-1, keepdims=True)
    return w * (x - mu) / np.sqrt(var + eps) + b


def _unfused_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _unfused_log_softmax(x):
    return np.log(_unfused_softmax(x))


def _unfused_embedding(emb, pos, tokens, scale, p, seed):
    g = emb[tokens]
    t1 = scale * g
    t2 = t1 + pos[None, :tokens.shape[1], :]
    keep = _unfused_mask(t2.shape, p, seed)
    t3 = t2 * keep
    return t3 * (1.0 / (1.0 - p)) if p > 0 else t3


def _unfused_encoder_layer(x, w: M.EncoderLayerWeights, keeps, p, n_heads, eps):
    import math
    b, l, d = x.shape
    hd = d // n_heads
    u1 = _unfused_layernorm(x, w.ln1_w, w.ln1_b, eps)
    qkv = u1.reshape(b * l, d) @ w.wqkv.T + w.bqkv
    qkv = qkv.reshape(b, l, 3 * d)
    q = qkv[..., :d].reshape(b, l, n_heads, hd).transpose(0, 2, 1, 3)
    k = qkv[..., d:2 * d].reshape(b, l, n_heads, hd).transpose(0, 2, 1, 3)
    v = qkv[..., 2 * d:].reshape(b, l, n_heads, hd).transpose(0, 2, 1, 3)
    scores = q @ k.swapaxes(-1, -2) / math.sqrt(hd)
    probs = _unfused_softmax(scores)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, l, d)
    proj = ctx.reshape(b * l, d) @ w.wo.T
    y1 = _unfused_bias_dropout_residual(proj.reshape(b, l, d), w.bo, x, keeps[0], p)
    u2 = _unfused_layernorm(y1, w.ln2_w, w.ln2_b, eps)
    a1 = u2.reshape(b * l, d) @ w.w1.T
    z = _unfused_bias_relu_dropout(a1.reshape(b, l, -1), w.b1, keeps[1], p)
    f = z.reshape(b * l, -1) @ w.w2.T
    return _unfused_bias_dropout_residual(f.reshape(b, l, d), w.b2, y1, keeps[2], p)


# -- bench cases ---------------------------------------------------------------

def _bench_cases(rows: int, cols: int, seed: int):
    rng = np.random.default_rng(seed)
    p = 0.1
    x = rng.normal(size=(rows, cols)).astype(np.float32)
    bias = rng.normal(size=cols).astype(np.float32)
    res = rng.normal(size=(rows, cols)).astype(np.float32)
    w = rng.normal(size=cols).astype(np.float32)
    b = rng.normal(size=cols).astype(np.float32)

    cases = []

    cases.append(("bias_dropout_residual",
                  lambda: K.bias_dropout_residual(x, bias, res, p, seed=11)[0],
                  lambda: _unfused_bias_dropout_residual(
                      x, bias, res, _unfused_mask(x.shape, p, 11), p)))

    cases.append(("bias_relu_dropout",
                  lambda: K.bias_relu_dropout(x, bias, p, seed=13)[0],
                  lambda: _unfused_bias_relu_dropout(
                      x, bias, _unfused_mask(x.shape, p, 13), p)))

    cases.append(("layernorm_forward",
                  lambda: K.layernorm_forward(x, w, b, 1e-5)[0],
                  lambda: _unfused_layernorm(x, w, b, 1e-5)))

    cases.append(("softmax_forward",
                  lambda: K.softmax_forward(x)[0],
                  lambda: _unfused_softmax(x)))

    cases.append(("log_softmax_forward",
                  lambda: K.log_softmax_forward(x),
                  lambda: _unfused_log_softmax(x)))

    v, d, maxl = 512, cols, 64
    emb = rng.normal(size=(v, d)).astype(np.float32)
    pos = rng.normal(size=(maxl, d)).astype(np.float32)
    tokens = rng.integers(0, v, (max(1, rows // 32), 32))
    ecfg = EmbeddingConfig(scale=2.0, vocab=v, max_len=maxl)
    cases.append(("embedding_forward",
                  lambda: K.embedding_forward(emb, pos, tokens, ecfg, p, seed=17)[0],
                  lambda: _unfused_embedding(emb, pos, tokens, 2.0, p, 17)))
    return cases


def _layer_case(seed: int):
    rng = np.random.default_rng(seed)
    b, l, d, n, dff = 8, 32, 64, 4, 256
    cfg = M.ModelConfig(n_enc=1, n_dec=1, d_model=d, n_heads=n, d_ff=dff,
                        vocab=32, max_len=l)
    params = M.init_params(cfg, seed=3)
    w = M.EncoderLayerWeights.from_params(params, "enc0.")
    x = rng.normal(size=(b, l, d)).astype(np.float32)
    p = 0.1

    def fused():
        y, _ = M.encoder_layer_forward(x, w, None, p, seed=7, n_heads=n)
        return y

    y0, stash = M.encoder_layer_forward(x, w, None, p, seed=7, n_heads=n)
    keeps = [stash.pop(t) for t in reversed([
        "x_in", "mu1", "sg1", "u1", "qkv", "probs", "ctxm", "keep1", "y1",
        "mu2", "sg2", "u2", "keep2", "relum", "z", "keep3"])]
    tags = ["keep3", "z", "relum", "keep2", "u2", "sg2", "mu2", "y1", "keep1",
            "ctxm", "probs", "qkv", "u1", "sg1", "mu1", "x_in"]
    saved = dict(zip(tags, keeps))
    injected = [saved["keep1"], saved["keep2"], saved["keep3"]]

    def unfused():
        return _unfused_encoder_layer(x, w, injected, p, n, cfg.eps)

    return "encoder_layer_forward", fused, unfused


def run_benchmarks(rows: int = 4096, cols: int = 256, seed: int = 0, threads: int = 1):
    """Yield one report dict per benchmark entry."""
    results = []
    cases = _bench_cases(rows, cols, seed) + [_layer_case(seed)]
    for name, fused, unfused in cases:
        got = fused()
        want = unfused()
        err = _rel_err(got, want)
        if err > PARITY_TOL:
            raise AssertionError(f"bench parity failure for {name}: {err}")
        entry = {"op": name, "parity_rel_err": err, "rows": rows, "cols": cols}
        for nthreads in sorted({1, threads}):
            prev = get_num_threads()
            set_num_threads(nthreads)
            try:
                fmean, fstd = _time(fused)
                umean, ustd = _time(unfused)
            finally:
                set_num_threads(prev)
            entry[f"fused_mean_s_t{nthreads}"] = fmean
            entry[f"fused_std_s_t{nthreads}"] = fstd
            entry[f"unfused_mean_s_t{nthreads}"] = umean
            entry[f"unfused_std_s_t{nthreads}"] = ustd
            entry[f"speedup_t{nthreads}"] = umean / fmean if fmean > 0 else float("inf")
        results.append(entry)
    return results
