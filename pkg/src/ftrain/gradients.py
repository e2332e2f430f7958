"""Analytic backward operators matching each forward kernel.

LayerNorm backward uses the rearranged two-reduction form (per-element
alpha/beta coefficients against two shared row sums) rather than the
textbook projection; the oracle module carries the textbook form so the
two derivations check each other. Embedding backward replaces the GPU's
atomic scatter with a fixed-order accumulation so results are identical
under any thread count.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch, TargetOutOfRange
from .kernels import DropoutMask, EmbeddingConfig, LNCache, SoftmaxCache, _compute_dtype
from .numerics import run_row_chunks


def embedding_backward(dy, tokens, mask: DropoutMask, cfg: EmbeddingConfig):
    """Scatter-add of masked, scaled output grads into embedding rows.

    dE[w] = s * sum over positions with token w of keep * dy / (1 - p);
    rows of tokens that never occur stay exactly zero. dP is the matching
    per-position reduction, or None for fixed positional tables.
    """
    dy = np.asarray(dy)
    tokens = np.asarray(tokens)
    if dy.shape[:2] != tokens.shape:
        raise ShapeMismatch(f"dy {dy.shape} does not cover tokens {tokens.shape}")
    dtype = _compute_dtype(dy)
    b, l, d = dy.shape
    scaled = mask.keep * dy if mask.p > 0.0 else np.array(dy, copy=True)
    if mask.p > 0.0:
        scaled *= dtype.type(1.0 / (1.0 - mask.p))
    de = np.zeros((cfg.vocab, d), dtype=dtype)
    # Fixed index-order accumulation (deterministic stand-in for atomicAdd).
    np.add.at(de, tokens.reshape(-1), scaled.reshape(b * l, d))
    de *= dtype.type(cfg.scale)
    if not cfg.learned_positional:
        return de, None
    dp = np.zeros((cfg.max_len, d), dtype=dtype)
    dp[:l] = scaled.sum(axis=0)
    return de, dp


def ls_cross_entropy_backward(probs, targets, alpha: float, pad_id: int | None = None,
                              grad_scale: float = 1.0, out=None):
    """dh_i = q_i - a/V - (1 - a)[i == truth]; pad rows emit zero.

    probs are the softmax outputs q (rows sum to 1); the gradient is
    element-wise in q with no further reduction. grad_scale folds the
    upstream loss scaling into the same pass.
    """
    probs = np.asarray(probs)
    targets = np.asarray(targets).reshape(-1)
    v = probs.shape[-1]
    rows = probs.reshape(-1, v)
    r = rows.shape[0]
    if targets.shape[0] != r:
        raise ShapeMismatch(f"{targets.shape[0]} targets for {r} rows")
    valid = np.ones(r, dtype=bool) if pad_id is None else targets != pad_id
    tv = targets[valid]
    if tv.size and (tv.min() < 0 or tv.max() >= v):
        raise TargetOutOfRange(f"target outside [0, {v})")
    dtype = _compute_dtype(probs)
    dh = out if out is not None else np.empty(probs.shape, dtype=dtype)
    d2 = dh.reshape(r, v)
    np.subtract(rows, dtype.type(alpha / v), out=d2)
    d2[np.arange(r)[valid], tv] -= dtype.type(1.0 - alpha)
    d2[~valid] = 0
    if grad_scale != 1.0:
        d2[valid] *= dtype.type(grad_scale)
    return dh


def softmax_backward(dy, cache: SoftmaxCache, out=None):
    """dx_i = q_i * (dy_i - sum_j dy_j q_j); one reduction per row.

    Masked positions carry q = 0 and therefore emit 0.
    """
    dy = np.asarray(dy)
    q = cache.probs
    if dy.shape != q.shape:
        raise ShapeMismatch(f"dy {dy.shape} != probs {q.shape}")
    dtype = _compute_dtype(dy, q)
    c = dy.shape[-1]
    dyr = dy.reshape(-1, c)
    qr = q.reshape(-1, c)
    dx = out if out is not None else np.empty(dy.shape, dtype=dtype)
    dxr = dx.reshape(-1, c)

    def chunk(lo, hi):
        dy64 = dyr[lo:hi].astype(np.float64)
        q64 = qr[lo:hi].astype(np.float64)
        s = np.einsum("rc,rc->r", dy64, q64)
        np.copyto(dxr[lo:hi], q64 * (dy64 - s[:, None]), casting="unsafe")

    run_row_chunks(chunk, dyr.shape[0])
    return dx


def layernorm_backward(dy, x, w, cache: LNCache, out=None):
    """Rearranged LayerNorm input gradient plus affine parameter grads.

    dx_i = w_i dy_i / sigma + alpha_i * red1 + beta_i * red2 with exactly
    two row reductions red1 = sum_j w_j dy_j and red2 = sum_j w_j dy_j x_j,
    alpha_i = ((x_i - mu) mu - sigma^2) / (m sigma^3), beta_i =
    (mu - x_i) / (m sigma^3). dw_i = sum_rows dy_i xhat_i, db_i =
    sum_rows dy_i. All internal math at least float64 here (float32
    minimum contract).
    """
    dy = np.asarray(dy)
    x = np.asarray(x)
    if dy.shape != x.shape:
        raise ShapeMismatch(f"dy {dy.shape} != x {x.shape}")
    dtype = _compute_dtype(dy, x, w)
    m = x.shape[-1]
    dy64 = dy.reshape(-1, m).astype(np.float64)
    x64 = x.reshape(-1, m).astype(np.float64)
    mu64 = np.asarray(cache.mu, dtype=np.float64).reshape(-1, 1)
    sig64 = np.asarray(cache.sigma, dtype=np.float64).reshape(-1, 1)
    w64 = np.asarray(w, dtype=np.float64)
    dx = out if out is not None else np.empty(x.shape, dtype=dtype)
    dxr = dx.reshape(-1, m)

    def chunk(lo, hi):
        g = w64 * dy64[lo:hi]
        red1 = g.sum(axis=1)[:, None]
        red2 = (g * x64[lo:hi]).sum(axis=1)[:, None]
        mu = mu64[lo:hi]
        sig = sig64[lo:hi]
        msig3 = m * sig ** 3
        alpha = ((x64[lo:hi] - mu) * mu - sig * sig) / msig3
        beta = (mu - x64[lo:hi]) / msig3
        np.copyto(dxr[lo:hi], g / sig + alpha * red1 + beta * red2, casting="unsafe")

    run_row_chunks(chunk, dy64.shape[0])
    # Column reductions run once over the full arrays so the summation
    # tree never depends on the worker partition.
    xhat = (x64 - mu64) / sig64
    dw64 = np.einsum("rm,rm->m", dy64, xhat)
    db64 = dy64.sum(axis=0)
    return dx, dw64.astype(dtype), db64.astype(dtype)


def bias_dropout_residual_backward(dy, mask: DropoutMask, out=None):
    """dx = keep * dy / (1 - p); dbias sums dx over all but the last axis;
    dresidual IS dy (returned as the same array, no copy)."""
    dy = np.asarray(dy)
    dtype = _compute_dtype(dy)
    dx = out if out is not None else np.empty(dy.shape, dtype=dtype)
    if mask.p > 0.0:
        np.multiply(dy, mask.keep, out=dx)
        dx *= dtype.type(1.0 / (1.0 - mask.p))
    else:
        np.copyto(dx, dy, casting="unsafe")
    dbias = dx.reshape(-1, dy.shape[-1]).astype(np.float64).sum(axis=0).astype(dtype)
    return dx, dbias, dy


def bias_relu_dropout_backward(dy, dropmask: DropoutMask, relu_mask, out=None):
    """dx = relu_mask * keep * dy / (1 - p); dbias reduces dx like above."""
    dy = np.asarray(dy)
    dtype = _compute_dtype(dy)
    dx = out if out is not None else np.empty(dy.shape, dtype=dtype)
    np.multiply(dy, relu_mask, out=dx)
    if dropmask.p > 0.0:
        dx *= dropmask.keep
        dx *= dtype.type(1.0 / (1.0 - dropmask.p))
    dbias = dx.reshape(-1, dy.shape[-1]).astype(np.float64).sum(axis=0).astype(dtype)
    return dx, dbias
