"""Slow, trusted float64 reference implementations.

Nothing here imports the fused modules (kernels / gradients / model):
disagreement between the two paths is evidence, not tautology. The
reference transformer composes unfused primitive ops, uses two-pass
mean/variance, the direct textbook LayerNorm backward, log-of-softmax
for the criterion, and separate per-layer cross-attention projections.
The reference trainer is the per-tensor fp32-master baseline that the
workspace trainer must bit-match.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import narrow_f32, widen_f16


@dataclass
class FdConfig:
    h_rel: float = 1e-6
    tolerance_rel: float = 1e-5
    kink_exclusion_radius: float = 1e-3


def fd_grad(f, x, cfg: FdConfig = FdConfig()) -> np.ndarray:
    """Central finite differences of a scalar function, element by element.

    h is scaled per element: h_i = h_rel * max(1, |x_i|). Everything in
    float64.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        h = cfg.h_rel * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(got, want, floor: float = 1e-8) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.abs(want), floor)
    return float(np.max(np.abs(got - want) / denom)) if got.size else 0.0


# ---------------------------------------------------------------------------
# Unfused primitive ops (float64)
# ---------------------------------------------------------------------------

def ref_layernorm(x, w, b, eps):
    """Two-pass mean/variance LayerNorm. Returns (y, mu, sigma)."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mu).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    y = np.asarray(w, dtype=np.float64) * (x - mu) / sigma + np.asarray(b, dtype=np.float64)
    return y, mu[..., 0], sigma[..., 0]


def ref_layernorm_backward(dy, x, w, mu, sigma):
    """Direct textbook input gradient: (g - mean(g) - xhat*mean(g*xhat))/sigma."""
    dy = np.asarray(dy, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)[..., None]
    sigma = np.asarray(sigma, dtype=np.float64)[..., None]
    xhat = (x - mu) / sigma
    g = np.asarray(w, dtype=np.float64) * dy
    dx = (g - g.mean(axis=-1, keepdims=True)
          - xhat * (g * xhat).mean(axis=-1, keepdims=True)) / sigma
    dw = (dy * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, x.shape[-1]).sum(axis=0)
    return dx, dw, db


def ref_softmax(x, keep=None):
    """Stabilized softmax with masked positions excluded and emitting 0."""
    x = np.asarray(x, dtype=np.float64)
    if keep is not None:
        x = np.where(np.broadcast_to(keep, x.shape), x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def ref_log_softmax(h):
    """Literally log(softmax(h)): the composition the fused path avoids."""
    return np.log(ref_softmax(h))


def ref_smoothed_targets(targets, v, alpha):
    """p = (1 - alpha) * onehot + alpha/V."""
    targets = np.asarray(targets).reshape(-1)
    p = np.full((targets.size, v), alpha / v, dtype=np.float64)
    p[np.arange(targets.size), targets] += 1.0 - alpha
    return p


def ref_ls_cross_entropy(h, targets, alpha, pad_id=None):
    """loss = -sum_i p_i log q_i per non-pad token, summed."""
    h = np.asarray(h, dtype=np.float64)
    v = h.shape[-1]
    rows = h.reshape(-1, v)
    targets = np.asarray(targets).reshape(-1)
    valid = np.ones(targets.size, dtype=bool) if pad_id is None else targets != pad_id
    if not valid.any():
        return 0.0, 0
    logq = ref_log_softmax(rows[valid])
    p = ref_smoothed_targets(targets[valid], v, alpha)
    return float(-(p * logq).sum()), int(valid.sum())


def ref_ls_cross_entropy_backward(h, targets, alpha, pad_id=None, grad_scale=1.0):
    """dh = q - p, the unexpanded form of the piecewise gradient."""
    h = np.asarray(h, dtype=np.float64)
    v = h.shape[-1]
    rows = h.reshape(-1, v)
    targets = np.asarray(targets).reshape(-1)
    valid = np.ones(targets.size, dtype=bool) if pad_id is None else targets != pad_id
    dh = np.zeros_like(rows)
    if valid.any():
        q = ref_softmax(rows[valid])
        p = ref_smoothed_targets(targets[valid], v, alpha)
        dh[valid] = (q - p) * grad_scale
    return dh.reshape(h.shape)


def ref_dropout(x, keep, p):
    x = np.asarray(x, dtype=np.float64)
    if p == 0.0:
        return x.copy()
    return x * np.asarray(keep, dtype=np.float64) / (1.0 - p)


def ref_embedding(emb, pos, tokens, scale, keep=None, p=0.0):
    emb = np.asarray(emb, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    tokens = np.asarray(tokens)
    y = scale * emb[tokens] + pos[None, :tokens.shape[1], :]
    return ref_dropout(y, keep, p) if keep is not None else y


def ref_embedding_backward(dy, tokens, vocab, scale, keep=None, p=0.0):
    """Explicit per-position scatter loop (independent of the fused path)."""
    dy = np.asarray(dy, dtype=np.float64)
    if keep is not None and p > 0.0:
        dy = dy * np.asarray(keep, dtype=np.float64) / (1.0 - p)
    b, l, d = dy.shape
    de = np.zeros((vocab, d), dtype=np.float64)
    tokens = np.asarray(tokens)
    for bi in range(b):
        for li in range(l):
            de[tokens[bi, li]] += scale * dy[bi, li]
    dp = dy.sum(axis=0)
    return de, dp


# ---------------------------------------------------------------------------
# Reference transformer (unfused composition, float64, dropout off)
# ---------------------------------------------------------------------------

def _split_heads(x, n):
    b, l, d = x.shape
    return x.reshape(b, l, n, d // n).transpose(0, 2, 1, 3)


def _join_heads(xh):
    b, n, l, hd = xh.shape
    return xh.transpose(0, 2, 1, 3).reshape(b, l, n * hd)


def _pad_keep(src_len, lk):
    return (np.arange(lk) < np.asarray(src_len)[:, None])[:, None, None, :]


def _causal_keep(l):
    return np.tril(np.ones((l, l), dtype=bool))


class ReferenceTransformer:
    """Unfused float64 mirror of the fused encoder-decoder (dropout off).

    cfg is duck-typed: n_enc, n_dec, d_model, n_heads, d_ff, vocab,
    max_len, eps, tie_embeddings, learned_positional, scale.
    """

    def __init__(self, cfg):
        self.cfg = cfg

    # -- sublayer helpers ---------------------------------------------------

    def _attention_fwd(self, q, k, v, keep, cache, tag):
        hd = q.shape[-1]
        scores = np.einsum("bnqh,bnkh->bnqk", q, k) / math.sqrt(hd)
        probs = ref_softmax(scores, keep=keep)
        ctx = np.einsum("bnqk,bnkh->bnqh", probs, v)
        cache[tag + ".probs"] = probs
        cache[tag + ".q"], cache[tag + ".k"], cache[tag + ".v"] = q, k, v
        return ctx

    def _attention_bwd(self, dctx, cache, tag):
        probs = cache[tag + ".probs"]
        q, k, v = cache[tag + ".q"], cache[tag + ".k"], cache[tag + ".v"]
        hd = q.shape[-1]
        dprobs = np.einsum("bnqh,bnkh->bnqk", dctx, v)
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dscores /= math.sqrt(hd)
        dq = np.einsum("bnqk,bnkh->bnqh", dscores, k)
        dk = np.einsum("bnqk,bnqh->bnkh", dscores, q)
        dv = np.einsum("bnqk,bnqh->bnkh", probs, dctx)
        return dq, dk, dv

    def _ffn_fwd(self, x, p, prefix, cache, tag):
        u, mu, sg = ref_layernorm(x, p[prefix + "ln.w"], p[prefix + "ln.b"], self.cfg.eps)
        a = u @ np.asarray(p[prefix + "w1"], dtype=np.float64).T + np.asarray(p[prefix + "b1"], dtype=np.float64)
        z = np.maximum(a, 0.0)
        f = z @ np.asarray(p[prefix + "w2"], dtype=np.float64).T + np.asarray(p[prefix + "b2"], dtype=np.float64)
        cache.update({tag + ".x": x, tag + ".mu": mu, tag + ".sg": sg,
                      tag + ".u": u, tag + ".a": a, tag + ".z": z})
        return x + f

    def _ffn_bwd(self, dy, p, prefix, cache, tag, grads, gprefix):
        x, mu, sg = cache[tag + ".x"], cache[tag + ".mu"], cache[tag + ".sg"]
        u, a, z = cache[tag + ".u"], cache[tag + ".a"], cache[tag + ".z"]
        w1 = np.asarray(p[prefix + "w1"], dtype=np.float64)
        w2 = np.asarray(p[prefix + "w2"], dtype=np.float64)
        df = dy
        grads[gprefix + "w2"] += df.reshape(-1, df.shape[-1]).T @ z.reshape(-1, z.shape[-1])
        grads[gprefix + "b2"] += df.reshape(-1, df.shape[-1]).sum(axis=0)
        dz = df @ w2
        da = dz * (a > 0.0)
        grads[gprefix + "w1"] += da.reshape(-1, da.shape[-1]).T @ u.reshape(-1, u.shape[-1])
        grads[gprefix + "b1"] += da.reshape(-1, da.shape[-1]).sum(axis=0)
        du = da @ w1
        dx, dlw, dlb = ref_layernorm_backward(du, x, p[prefix + "ln.w"], mu, sg)
        grads[gprefix + "ln.w"] += dlw
        grads[gprefix + "ln.b"] += dlb
        return dx + dy

    # -- layers ---------------------------------------------------------------

    def encoder_layer_forward(self, x, p, prefix, keep, cache):
        cfg = self.cfg
        u, mu, sg = ref_layernorm(x, p[prefix + "ln1.w"], p[prefix + "ln1.b"], cfg.eps)
        wqkv = np.asarray(p[prefix + "attn.wqkv"], dtype=np.float64)
        qkv = u @ wqkv.T + np.asarray(p[prefix + "attn.bqkv"], dtype=np.float64)
        d = cfg.d_model
        q, k, v = (_split_heads(qkv[..., i * d:(i + 1) * d], cfg.n_heads) for i in range(3))
        ctx = self._attention_fwd(q, k, v, keep, cache, prefix + "attn")
        ctxm = _join_heads(ctx)
        proj = ctxm @ np.asarray(p[prefix + "attn.wo"], dtype=np.float64).T
        y1 = x + proj + np.asarray(p[prefix + "attn.bo"], dtype=np.float64)
        cache.update({prefix + "x": x, prefix + "mu1": mu, prefix + "sg1": sg,
                      prefix + "u1": u, prefix + "ctxm": ctxm})
        # FFN sublayer reuses the generic helper with its own ln naming.
        pmap = {prefix + "f.ln.w": p[prefix + "ln2.w"], prefix + "f.ln.b": p[prefix + "ln2.b"],
                prefix + "f.w1": p[prefix + "ffn.w1"], prefix + "f.b1": p[prefix + "ffn.b1"],
                prefix + "f.w2": p[prefix + "ffn.w2"], prefix + "f.b2": p[prefix + "ffn.b2"]}
        return self._ffn_fwd(y1, pmap, prefix + "f.", cache, prefix + "ffn")

    def encoder_layer_backward(self, dy, p, prefix, cache, grads):
        cfg = self.cfg
        pmap = {prefix + "f.ln.w": p[prefix + "ln2.w"], prefix + "f.ln.b": p[prefix + "ln2.b"],
                prefix + "f.w1": p[prefix + "ffn.w1"], prefix + "f.b1": p[prefix + "ffn.b1"],
                prefix + "f.w2": p[prefix + "ffn.w2"], prefix + "f.b2": p[prefix + "ffn.b2"]}
        # Route the generic FFN helper at this layer's gradient names.
        tmp = {k: np.zeros_like(np.asarray(v, dtype=np.float64))
               for k, v in (("w1", p[prefix + "ffn.w1"]), ("b1", p[prefix + "ffn.b1"]),
                            ("w2", p[prefix + "ffn.w2"]), ("b2", p[prefix + "ffn.b2"]),
                            ("ln.w", p[prefix + "ln2.w"]), ("ln.b", p[prefix + "ln2.b"]))}
        dy1 = self._ffn_bwd(dy, pmap, prefix + "f.", cache, prefix + "ffn", tmp, "")
        grads[prefix + "ffn.w1"] += tmp["w1"]; grads[prefix + "ffn.b1"] += tmp["b1"]
        grads[prefix + "ffn.w2"] += tmp["w2"]; grads[prefix + "ffn.b2"] += tmp["b2"]
        grads[prefix + "ln2.w"] += tmp["ln.w"]; grads[prefix + "ln2.b"] += tmp["ln.b"]

        x, mu, sg = cache[prefix + "x"], cache[prefix + "mu1"], cache[prefix + "sg1"]
        u, ctxm = cache[prefix + "u1"], cache[prefix + "ctxm"]
        d = self.cfg.d_model
        wo = np.asarray(p[prefix + "attn.wo"], dtype=np.float64)
        r = dy1.reshape(-1, d)
        grads[prefix + "attn.bo"] += r.sum(axis=0)
        grads[prefix + "attn.wo"] += r.T @ ctxm.reshape(-1, d)
        dctxm = dy1 @ wo
        dctx = _split_heads(dctxm, cfg.n_heads)
        dq, dk, dv = self._attention_bwd(dctx, cache, prefix + "attn")
        dqkv = np.concatenate([_join_heads(dq), _join_heads(dk), _join_heads(dv)], axis=-1)
        wqkv = np.asarray(p[prefix + "attn.wqkv"], dtype=np.float64)
        grads[prefix + "attn.wqkv"] += dqkv.reshape(-1, 3 * d).T @ u.reshape(-1, d)
        grads[prefix + "attn.bqkv"] += dqkv.reshape(-1, 3 * d).sum(axis=0)
        du = dqkv @ wqkv
        dx, dlw, dlb = ref_layernorm_backward(du, x, p[prefix + "ln1.w"], mu, sg)
        grads[prefix + "ln1.w"] += dlw
        grads[prefix + "ln1.b"] += dlb
        return dx + dy1

    def decoder_layer_forward(self, x, p, prefix, i, enc_out, self_keep, cross_keep, cache):
        cfg = self.cfg
        d, n = cfg.d_model, cfg.n_heads
        u, mu, sg = ref_layernorm(x, p[prefix + "ln1.w"], p[prefix + "ln1.b"], cfg.eps)
        wqkv = np.asarray(p[prefix + "attn.wqkv"], dtype=np.float64)
        qkv = u @ wqkv.T + np.asarray(p[prefix + "attn.bqkv"], dtype=np.float64)
        q, k, v = (_split_heads(qkv[..., j * d:(j + 1) * d], n) for j in range(3))
        ctxm = _join_heads(self._attention_fwd(q, k, v, self_keep, cache, prefix + "self"))
        y1 = x + ctxm @ np.asarray(p[prefix + "attn.wo"], dtype=np.float64).T \
            + np.asarray(p[prefix + "attn.bo"], dtype=np.float64)

        # Per-layer (unfused) cross projections of the encoder output.
        nd = cfg.n_dec
        wk = np.asarray(p["cross_kv.w"], dtype=np.float64)[i * d:(i + 1) * d]
        wv = np.asarray(p["cross_kv.w"], dtype=np.float64)[(nd + i) * d:(nd + i + 1) * d]
        bk = np.asarray(p["cross_kv.b"], dtype=np.float64)[i * d:(i + 1) * d]
        bv = np.asarray(p["cross_kv.b"], dtype=np.float64)[(nd + i) * d:(nd + i + 1) * d]
        k_i = enc_out @ wk.T + bk
        v_i = enc_out @ wv.T + bv
        u2, mu2, sg2 = ref_layernorm(y1, p[prefix + "ln2.w"], p[prefix + "ln2.b"], cfg.eps)
        qc = u2 @ np.asarray(p[prefix + "cross.wq"], dtype=np.float64).T \
            + np.asarray(p[prefix + "cross.bq"], dtype=np.float64)
        ctx_x = self._attention_fwd(_split_heads(qc, n), _split_heads(k_i, n),
                                    _split_heads(v_i, n), cross_keep, cache, prefix + "cross")
        ctxm_x = _join_heads(ctx_x)
        y2 = y1 + ctxm_x @ np.asarray(p[prefix + "cross.wo"], dtype=np.float64).T \
            + np.asarray(p[prefix + "cross.bo"], dtype=np.float64)
        cache.update({prefix + "x": x, prefix + "mu1": mu, prefix + "sg1": sg, prefix + "u1": u,
                      prefix + "ctxm": ctxm, prefix + "y1": y1, prefix + "mu2": mu2,
                      prefix + "sg2": sg2, prefix + "u2": u2, prefix + "ctxm_x": ctxm_x})
        pmap = {prefix + "f.ln.w": p[prefix + "ln3.w"], prefix + "f.ln.b": p[prefix + "ln3.b"],
                prefix + "f.w1": p[prefix + "ffn.w1"], prefix + "f.b1": p[prefix + "ffn.b1"],
                prefix + "f.w2": p[prefix + "ffn.w2"], prefix + "f.b2": p[prefix + "ffn.b2"]}
        return self._ffn_fwd(y2, pmap, prefix + "f.", cache, prefix + "ffn")

    def decoder_layer_backward(self, dy, p, prefix, i, enc_out, cache, grads):
        cfg = self.cfg
        d, n, nd = cfg.d_model, cfg.n_heads, cfg.n_dec
        pmap = {prefix + "f.ln.w": p[prefix + "ln3.w"], prefix + "f.ln.b": p[prefix + "ln3.b"],
                prefix + "f.w1": p[prefix + "ffn.w1"], prefix + "f.b1": p[prefix + "ffn.b1"],
                prefix + "f.w2": p[prefix + "ffn.w2"], prefix + "f.b2": p[prefix + "ffn.b2"]}
        tmp = {k: np.zeros_like(np.asarray(v, dtype=np.float64))
               for k, v in (("w1", p[prefix + "ffn.w1"]), ("b1", p[prefix + "ffn.b1"]),
                            ("w2", p[prefix + "ffn.w2"]), ("b2", p[prefix + "ffn.b2"]),
                            ("ln.w", p[prefix + "ln3.w"]), ("ln.b", p[prefix + "ln3.b"]))}
        dy2 = self._ffn_bwd(dy, pmap, prefix + "f.", cache, prefix + "ffn", tmp, "")
        grads[prefix + "ffn.w1"] += tmp["w1"]; grads[prefix + "ffn.b1"] += tmp["b1"]
        grads[prefix + "ffn.w2"] += tmp["w2"]; grads[prefix + "ffn.b2"] += tmp["b2"]
        grads[prefix + "ln3.w"] += tmp["ln.w"]; grads[prefix + "ln3.b"] += tmp["ln.b"]

        y1, u2 = cache[prefix + "y1"], cache[prefix + "u2"]
        ctxm_x = cache[prefix + "ctxm_x"]
        r = dy2.reshape(-1, d)
        grads[prefix + "cross.bo"] += r.sum(axis=0)
        grads[prefix + "cross.wo"] += r.T @ ctxm_x.reshape(-1, d)
        dctx_x = _split_heads(dy2 @ np.asarray(p[prefix + "cross.wo"], dtype=np.float64), n)
        dqc_h, dk_h, dv_h = self._attention_bwd(dctx_x, cache, prefix + "cross")
        dqc, dk_i, dv_i = _join_heads(dqc_h), _join_heads(dk_h), _join_heads(dv_h)
        grads[prefix + "cross.wq"] += dqc.reshape(-1, d).T @ u2.reshape(-1, d)
        grads[prefix + "cross.bq"] += dqc.reshape(-1, d).sum(axis=0)
        # Unfused baseline: each layer folds its encoder-output gradient
        # immediately through its own projections.
        wk = np.asarray(p["cross_kv.w"], dtype=np.float64)[i * d:(i + 1) * d]
        wv = np.asarray(p["cross_kv.w"], dtype=np.float64)[(nd + i) * d:(nd + i + 1) * d]
        grads["cross_kv.w"][i * d:(i + 1) * d] += dk_i.reshape(-1, d).T @ enc_out.reshape(-1, d)
        grads["cross_kv.w"][(nd + i) * d:(nd + i + 1) * d] += dv_i.reshape(-1, d).T @ enc_out.reshape(-1, d)
        grads["cross_kv.b"][i * d:(i + 1) * d] += dk_i.reshape(-1, d).sum(axis=0)
        grads["cross_kv.b"][(nd + i) * d:(nd + i + 1) * d] += dv_i.reshape(-1, d).sum(axis=0)
        denc = dk_i @ wk + dv_i @ wv

        du2 = dqc @ np.asarray(p[prefix + "cross.wq"], dtype=np.float64)
        dy1, dlw, dlb = ref_layernorm_backward(du2, y1, p[prefix + "ln2.w"],
                                               cache[prefix + "mu2"], cache[prefix + "sg2"])
        grads[prefix + "ln2.w"] += dlw
        grads[prefix + "ln2.b"] += dlb
        dy1 = dy1 + dy2

        x, u, ctxm = cache[prefix + "x"], cache[prefix + "u1"], cache[prefix + "ctxm"]
        r = dy1.reshape(-1, d)
        grads[prefix + "attn.bo"] += r.sum(axis=0)
        grads[prefix + "attn.wo"] += r.T @ ctxm.reshape(-1, d)
        dctx = _split_heads(dy1 @ np.asarray(p[prefix + "attn.wo"], dtype=np.float64), n)
        dq, dk, dv = self._attention_bwd(dctx, cache, prefix + "self")
        dqkv = np.concatenate([_join_heads(dq), _join_heads(dk), _join_heads(dv)], axis=-1)
        grads[prefix + "attn.wqkv"] += dqkv.reshape(-1, 3 * d).T @ u.reshape(-1, d)
        grads[prefix + "attn.bqkv"] += dqkv.reshape(-1, 3 * d).sum(axis=0)
        du = dqkv @ np.asarray(p[prefix + "attn.wqkv"], dtype=np.float64)
        dx, dlw, dlb = ref_layernorm_backward(du, x, p[prefix + "ln1.w"],
                                              cache[prefix + "mu1"], cache[prefix + "sg1"])
        grads[prefix + "ln1.w"] += dlw
        grads[prefix + "ln1.b"] += dlb
        return dx + dy1, denc

    # -- whole model ----------------------------------------------------------

    def _positional(self, params):
        cfg = self.cfg
        if cfg.learned_positional:
            return np.asarray(params["pos_emb"], dtype=np.float64)
        pos = np.arange(cfg.max_len, dtype=np.float64)[:, None]
        j = np.arange(cfg.d_model, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * np.floor(j / 2.0) / cfg.d_model)
        return np.where(j % 2 == 0, np.sin(angle), np.cos(angle))

    def forward_backward(self, params, src, tgt_in, tgt_out, src_len, *,
                         pad_id=0, alpha=0.0, grad_scale=1.0, compute_grads=True):
        cfg = self.cfg
        p = params
        src = np.asarray(src)
        tgt_in = np.asarray(tgt_in)
        tgt_out = np.asarray(tgt_out).reshape(-1)
        b, ls = src.shape
        lt = tgt_in.shape[1]
        emb = np.asarray(p["tok_emb"], dtype=np.float64)
        pos = self._positional(p)
        cache: dict = {}
        enc_keep = _pad_keep(src_len, ls)
        dec_keep = _causal_keep(lt)
        cross_keep = _pad_keep(src_len, ls)

        h = cfg.scale * emb[src] + pos[None, :ls, :]
        for i in range(cfg.n_enc):
            h = self.encoder_layer_forward(h, p, f"enc{i}.", enc_keep, cache)
        cache["enc_ln_in"] = h
        enc_out, mu_e, sg_e = ref_layernorm(h, p["enc_ln.w"], p["enc_ln.b"], cfg.eps)
        cache["enc_out"] = enc_out

        g = cfg.scale * emb[tgt_in] + pos[None, :lt, :]
        for i in range(cfg.n_dec):
            g = self.decoder_layer_forward(g, p, f"dec{i}.", i, enc_out,
                                           dec_keep, cross_keep, cache)
        cache["dec_ln_in"] = g
        dec_out, mu_d, sg_d = ref_layernorm(g, p["dec_ln.w"], p["dec_ln.b"], cfg.eps)

        proj = emb if cfg.tie_embeddings else np.asarray(p["out_proj.w"], dtype=np.float64)
        logits = dec_out.reshape(b * lt, cfg.d_model) @ proj.T
        loss, count = ref_ls_cross_entropy(logits, tgt_out, alpha, pad_id)
        logq = ref_log_softmax(logits)
        valid = tgt_out != pad_id
        correct = int((np.argmax(logq, axis=-1)[valid] == tgt_out[valid]).sum())
        if not compute_grads:
            return loss, count, correct, None

        grads = {name: np.zeros_like(np.asarray(val, dtype=np.float64))
                 for name, val in p.items()}
        dlogits = ref_ls_cross_entropy_backward(logits, tgt_out, alpha, pad_id, grad_scale)
        grads["tok_emb" if cfg.tie_embeddings else "out_proj.w"] += \
            dlogits.T @ dec_out.reshape(b * lt, cfg.d_model)
        ddec = (dlogits @ proj).reshape(b, lt, cfg.d_model)
        dg, dlw, dlb = ref_layernorm_backward(ddec, cache["dec_ln_in"], p["dec_ln.w"], mu_d, sg_d)
        grads["dec_ln.w"] += dlw
        grads["dec_ln.b"] += dlb

        denc_total = np.zeros_like(enc_out)
        for i in reversed(range(cfg.n_dec)):
            dg, denc = self.decoder_layer_backward(dg, p, f"dec{i}.", i, enc_out, cache, grads)
            denc_total += denc
        de, dp = ref_embedding_backward(dg, tgt_in, cfg.vocab, cfg.scale)
        grads["tok_emb"] += de
        if cfg.learned_positional:
            grads["pos_emb"][:lt] += dp

        dh, dlw, dlb = ref_layernorm_backward(denc_total, cache["enc_ln_in"],
                                              p["enc_ln.w"], mu_e, sg_e)
        grads["enc_ln.w"] += dlw
        grads["enc_ln.b"] += dlb
        for i in reversed(range(cfg.n_enc)):
            dh = self.encoder_layer_backward(dh, p, f"enc{i}.", cache, grads)
        de, dp = ref_embedding_backward(dh, src, cfg.vocab, cfg.scale)
        grads["tok_emb"] += de
        if cfg.learned_positional:
            grads["pos_emb"][:ls] += dp
        return loss, count, correct, grads


def reference_layer(cfg, params, prefix: str, x, dy, keep=None):
    """One unfused encoder layer, forward and backward, in one call.

    Returns (y, dx, grads dict for this layer's parameters).
    """
    ref = ReferenceTransformer(cfg)
    cache: dict = {}
    y = ref.encoder_layer_forward(np.asarray(x, dtype=np.float64), params, prefix,
                                  keep, cache)
    grads = {k: np.zeros_like(np.asarray(v, dtype=np.float64))
             for k, v in params.items() if k.startswith(prefix)}
    dx = ref.encoder_layer_backward(np.asarray(dy, dtype=np.float64), params, prefix,
                                    cache, grads)
    return y, dx, grads


# ---------------------------------------------------------------------------
# Reference per-tensor mixed-precision trainer (the fp32-master baseline)
# ---------------------------------------------------------------------------

def reference_adam_update(p32, g32, m, v, *, lr, beta1, beta2, eps, weight_decay, t):
    """Textbook bias-corrected Adam on one fp32 tensor, in place."""
    m[:] = beta1 * m + (1.0 - beta1) * g32
    v[:] = beta2 * v + (1.0 - beta2) * (g32 * g32)
    m_hat = m / np.float32(1.0 - beta1 ** t)
    v_hat = v / np.float32(1.0 - beta2 ** t)
    p32 -= np.float32(lr) * (m_hat / (np.sqrt(v_hat) + np.float32(eps))
                             + np.float32(weight_decay) * p32)
    return p32


def reference_sgd_update(p32, g32, vel, *, lr, momentum, weight_decay):
    """Momentum SGD on one fp32 tensor, in place."""
    if weight_decay:
        g32 = g32 + np.float32(weight_decay) * p32
    vel[:] = np.float32(momentum) * vel + g32
    p32 -= np.float32(lr) * vel
    return p32


def reference_trainer_step(params32: dict, grads32: dict, m: dict, v: dict, cfg, t: int):
    """Per-tensor baseline step over a dict of fp32 masters."""
    for name in params32:
        if cfg.algorithm == "adam":
            reference_adam_update(params32[name], grads32[name], m[name], v[name],
                                  lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                  eps=cfg.eps_opt, weight_decay=cfg.weight_decay, t=t)
        else:
            reference_sgd_update(params32[name], grads32[name], m[name],
                                 lr=cfg.lr, momentum=cfg.momentum,
                                 weight_decay=cfg.weight_decay)
    return params32


class BaselineTrainer:
    """Fig.-style straightforward system: per-tensor fp16<->fp32 copies.

    Persistent state per the accounting model: fp32 masters and grads,
    fp32 moments, fp16 shadow params and grads. Each step copies the
    fp16 pieces to their fp32 partners, updates, and copies back.
    """

    def __init__(self, named_params, cfg):
        self.cfg = cfg
        self.names = [n for n, _ in named_params]
        self.shapes = {n: np.asarray(t).shape for n, t in named_params}
        self.shadow16 = {n: narrow_f32(np.asarray(t, dtype=np.float32)) for n, t in named_params}
        self.m = {n: np.zeros(self.shapes[n], dtype=np.float32) for n in self.names}
        self.v = ({n: np.zeros(self.shapes[n], dtype=np.float32) for n in self.names}
                  if cfg.algorithm == "adam" else {})
        self.t = 0

    def step(self, grads16: dict) -> bool:
        """One baseline step from fp16 gradients; returns False if skipped."""
        cfg = self.cfg
        g32 = {}
        for n in self.names:
            g = widen_f16(grads16[n])
            if cfg.loss_scale != 1.0:
                g = g / np.float32(cfg.loss_scale)
            if not np.isfinite(g).all():
                return False
            g32[n] = g
        self.t += 1
        for n in self.names:
            master = widen_f16(self.shadow16[n])
            if cfg.algorithm == "adam":
                reference_adam_update(master, g32[n], self.m[n], self.v[n],
                                      lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                      eps=cfg.eps_opt, weight_decay=cfg.weight_decay,
                                      t=self.t)
            else:
                reference_sgd_update(master, g32[n], self.m[n], lr=cfg.lr,
                                     momentum=cfg.momentum, weight_decay=cfg.weight_decay)
            self.shadow16[n] = narrow_f32(master)
        return True

    def param16(self, name):
        return self.shadow16[name]

    def memory_bytes(self) -> int:
        """Accounting model: fp32 masters + fp32 grads + moments + fp16 shadows."""
        p = sum(int(np.prod(s)) for s in self.shapes.values())
        moments = (2 if self.cfg.algorithm == "adam" else 1) * p * 4
        return p * 4 + p * 4 + moments + 2 * p * 2
