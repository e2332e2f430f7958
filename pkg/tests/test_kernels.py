import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import rel_err
from ftrain import kernels as K
from ftrain.errors import (AllMaskedRow, DegenerateRow, SequenceTooLong, ShapeMismatch,
                           TokenOutOfRange)
from ftrain.kernels import AttentionMask, EmbeddingConfig
from ftrain.numerics import rand_uniform_array, set_num_threads


# --- layernorm ----------------------------------------------------------------

def test_layernorm_symmetric_two_point_row():
    y, cache = K.layernorm_forward(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=0.0)
    assert np.allclose(y, [[1.0, -1.0]])
    assert cache.mu[0] == 0.0 and cache.sigma[0] == 1.0


def test_layernorm_constant_row_gives_bias():
    x = np.full((3, 4), 2.5)
    w = np.arange(1.0, 5.0)
    b = np.array([0.5, -1.0, 2.0, 0.0])
    y, _ = K.layernorm_forward(x, w, b, eps=1e-5)
    assert np.allclose(y, np.broadcast_to(b, (3, 4)))


def test_layernorm_derived_row():
    # binary64 direct two-pass oracle, computed right here.
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    mu = x.mean()
    sigma = math.sqrt(np.square(x - mu).mean())
    want = (x - mu) / sigma
    y, cache = K.layernorm_forward(x, np.ones(4), np.zeros(4), eps=0.0)
    assert np.allclose(y, want, atol=1e-12)
    assert cache.sigma[0] == pytest.approx(math.sqrt(1.25), abs=1e-12)


def test_layernorm_degenerate_row_without_eps():
    with pytest.raises(DegenerateRow):
        K.layernorm_forward(np.full((1, 4), 3.0), np.ones(4), np.zeros(4), eps=0.0)


@given(arrays(np.float64, (3, 8), elements=st.floats(-100, 100)))
@settings(max_examples=100, deadline=None)
def test_layernorm_unit_statistics(x):
    x = x + np.arange(8) * 1e-3  # avoid exactly-constant rows
    y, _ = K.layernorm_forward(x, np.ones(8), np.zeros(8), eps=0.0)
    assert np.abs(y.mean(axis=-1)).max() < 1e-6
    assert np.abs(np.square(y).mean(axis=-1) - 1.0).max() < 1e-5


def test_single_pass_variance_matches_two_pass_under_shift():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (64, 16)) + 1000.0  # |x| up to ~1e3, cancellation-prone
    _, cache = K.layernorm_forward(x, np.ones(16), np.zeros(16), eps=0.0)
    mu = x.mean(axis=1)
    sig2 = np.sqrt(np.square(x - mu[:, None]).mean(axis=1))
    assert rel_err(cache.sigma, sig2) < 1e-5


# --- softmax family -------------------------------------------------------------

def test_softmax_uniform_row():
    y, cache = K.softmax_forward(np.array([[3.0, 3.0, 3.0]]))
    assert np.allclose(y, 1.0 / 3.0)
    assert cache.probs is y


def test_softmax_single_survivor_mask():
    keep = np.array([[True, False]])
    y, _ = K.softmax_forward(np.array([[1.0, 1.0]]), mask=keep)
    assert np.array_equal(y, [[1.0, 0.0]])


def test_softmax_derived_row():
    x = np.array([1.0, 2.0, 3.0])
    e = np.exp(x - x.max())
    want = e / e.sum()
    y, _ = K.softmax_forward(x[None, :])
    assert np.allclose(y[0], want, atol=1e-12)
    assert np.allclose(y[0], [0.0900306, 0.2447285, 0.6652410], atol=1e-6)


def test_softmax_all_masked_row_raises():
    with pytest.raises(AllMaskedRow):
        K.softmax_forward(np.ones((1, 3)), mask=np.zeros((1, 3), dtype=bool))


def test_softmax_rows_sum_to_one_f32():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 5, (50, 17)).astype(np.float32)
    y, _ = K.softmax_forward(x)
    assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-6


# Shifts and inputs are dyadic (multiples of 1/16) so x + c is exact in
# float32; the check then isolates the stabilized algorithm itself rather
# than input rounding, which no algorithm could undo.
@given(arrays(np.int64, (4, 9), elements=st.integers(-800, 800)),
       st.integers(-480, 480))
@settings(max_examples=100, deadline=None)
def test_softmax_shift_invariance_one_ulp(xi, ci):
    x = (xi / 16.0).astype(np.float32)
    c = np.float32(ci / 16.0)
    a, _ = K.softmax_forward(x)
    b, _ = K.softmax_forward(x + c)
    ulp = np.spacing(np.maximum(np.abs(a), np.abs(b)).astype(np.float32))
    assert np.all(np.abs(a - b) <= ulp)


def test_log_softmax_uniform_and_extreme():
    y = K.log_softmax_forward(np.array([[0.0, 0.0]]))
    assert np.allclose(y, -math.log(2.0))
    y = K.log_softmax_forward(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(y))
    assert np.allclose(y, [[0.0, -1000.0]], atol=1e-9)


def test_log_softmax_derived_row():
    h = np.array([[1.0, 2.0, 3.0]])
    z = np.log(np.exp(h - 3.0).sum())
    want = (h - 3.0) - z
    y = K.log_softmax_forward(h)
    assert np.allclose(y, want, atol=1e-12)
    assert np.allclose(y, [[-2.40761, -1.40761, -0.40761]], atol=1e-5)


def test_log_softmax_finite_up_to_1e4():
    rng = np.random.default_rng(2)
    h = rng.uniform(-1e4, 1e4, (20, 33))
    y = K.log_softmax_forward(h)
    assert np.all(np.isfinite(y))


# --- reduction strategies --------------------------------------------------------

def test_strategy_selection_rule():
    assert K.select_softmax_strategy(10**6, 8) == K.ROW_SERIAL
    assert K.select_softmax_strategy(4, 10**5) == K.ROW_PARALLEL_TREE
    assert K.select_softmax_strategy(7, 4096) == K.ROW_SERIAL
    assert K.select_softmax_strategy(7, 4097) == K.ROW_PARALLEL_TREE


def test_strategy_autotune_caches_winner():
    K._autotune_cache.clear()
    s1 = K.select_softmax_strategy(64, 333, autotune=True)
    assert (64, 333) in K._autotune_cache
    assert K.select_softmax_strategy(64, 333, autotune=True) == s1
    # later lookups honor the cached winner even without the flag
    assert K.select_softmax_strategy(64, 333) == s1
    K._autotune_cache.clear()


@pytest.mark.parametrize("shape", [(5, 3), (7, 64), (3, 100), (2, 1000)])
def test_strategies_agree_within_one_ulp(shape):
    rng = np.random.default_rng(42)
    x = rng.normal(0, 10, shape).astype(np.float32)
    a, _ = K.softmax_forward(x, strategy=K.ROW_SERIAL)
    b, _ = K.softmax_forward(x, strategy=K.ROW_PARALLEL_TREE)
    ulp = np.spacing(np.abs(a).astype(np.float32))
    assert np.all(np.abs(a - b) <= ulp)
    la = K.log_softmax_forward(x, strategy=K.ROW_SERIAL)
    lb = K.log_softmax_forward(x, strategy=K.ROW_PARALLEL_TREE)
    ulp = np.spacing(np.maximum(np.abs(la), 1.0).astype(np.float32))
    assert np.all(np.abs(la - lb) <= ulp)


# --- criterion ---------------------------------------------------------------------

def test_cross_entropy_plain_uniform():
    logq = np.log(np.full((1, 2), 0.5))
    loss, count = K.ls_cross_entropy_forward(logq, [0], alpha=0.0)
    assert loss == pytest.approx(math.log(2.0), rel=1e-12)
    assert count == 1


def test_cross_entropy_alpha_one_uniform_q():
    for v in (2, 5, 32):
        logq = np.full((1, v), -math.log(v))
        loss, _ = K.ls_cross_entropy_forward(logq, [1], alpha=1.0)
        assert loss == pytest.approx(math.log(v), rel=1e-12)


def test_cross_entropy_uniform_q_is_alpha_independent():
    logq = K.log_softmax_forward(np.zeros((1, 4)))
    for alpha in (0.0, 0.1, 0.5, 1.0):
        loss, _ = K.ls_cross_entropy_forward(logq, [0], alpha=alpha)
        assert loss == pytest.approx(math.log(4.0), rel=1e-12)


def test_cross_entropy_pad_exclusion_and_errors():
    logq = K.log_softmax_forward(np.zeros((3, 4)))
    loss, count = K.ls_cross_entropy_forward(logq, [0, 1, 0], alpha=0.0, pad_id=0)
    assert count == 1 and loss == pytest.approx(math.log(4.0), rel=1e-12)
    with pytest.raises(TokenOutOfRange):
        K.ls_cross_entropy_forward(logq, [0, 9, 0], alpha=0.0)


# --- embedding -----------------------------------------------------------------------

def _emb_fixture():
    e = np.array([[1.0, 2.0], [3.0, 4.0]])
    p = np.array([[0.1, 0.2], [0.3, 0.4]])
    return e, p


def test_embedding_direct_formula():
    e, p = _emb_fixture()
    cfg = EmbeddingConfig(scale=1.0, vocab=2, max_len=2)
    y, mask = K.embedding_forward(e, p, [[1, 0]], cfg, 0.0, seed=0)
    assert np.allclose(y[0], [[3.1, 4.2], [1.3, 2.4]])
    assert np.all(mask.keep == 1)


def test_embedding_scale_linearity():
    e, p = _emb_fixture()
    cfg = EmbeddingConfig(scale=2.0, vocab=2, max_len=2)
    y, _ = K.embedding_forward(e, p, [[1, 0]], cfg, 0.0, seed=0)
    assert np.allclose(y[0], [[6.1, 8.2], [2.3, 4.4]])


def test_embedding_dropout_mask_reproduced_from_rng_contract():
    e, p = _emb_fixture()
    cfg = EmbeddingConfig(scale=1.0, vocab=2, max_len=2)
    y, mask = K.embedding_forward(e, p, [[1, 0]], cfg, 0.5, seed=77)
    keep = (rand_uniform_array(77, 0, 4) >= 0.5).reshape(1, 2, 2)
    assert np.array_equal(mask.keep, keep.astype(mask.keep.dtype))
    base = np.array([[[3.1, 4.2], [1.3, 2.4]]])
    assert np.allclose(y, keep * base * 2.0)


def test_embedding_errors():
    e, p = _emb_fixture()
    cfg = EmbeddingConfig(scale=1.0, vocab=2, max_len=2)
    with pytest.raises(TokenOutOfRange):
        K.embedding_forward(e, p, [[2, 0]], cfg, 0.0, seed=0)
    with pytest.raises(SequenceTooLong):
        K.embedding_forward(e, p, [[0, 1, 0]], cfg, 0.0, seed=0)


# --- fused tails ------------------------------------------------------------------------

def test_bias_dropout_residual_p_zero():
    rng = np.random.default_rng(3)
    x, res = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    bias = rng.normal(size=4)
    y, mask = K.bias_dropout_residual(x, bias, res, 0.0, seed=0)
    assert np.allclose(y, x + bias + res)
    assert np.all(mask.keep == 1)


def test_bias_dropout_residual_zero_branch():
    res = np.random.default_rng(4).normal(size=(2, 5))
    for p, seed in [(0.0, 0), (0.5, 9), (0.9, 17)]:
        y, _ = K.bias_dropout_residual(np.zeros((2, 5)), np.zeros(5), res, p, seed)
        assert np.allclose(y, res)


def test_bias_dropout_residual_matches_unfused_with_injected_mask():
    rng = np.random.default_rng(5)
    x, res = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    bias = rng.normal(size=4)
    y, mask = K.bias_dropout_residual(x, bias, res, 0.5, seed=21)
    unfused = (x + bias) * mask.keep / 0.5 + res
    assert rel_err(y, unfused) < 1e-12


def test_bias_relu_dropout_basics():
    y, mask, relum = K.bias_relu_dropout(np.array([[-1.0, 2.0]]), np.zeros(2), 0.0, seed=0)
    assert np.allclose(y, [[0.0, 2.0]])
    assert np.array_equal(relum, [[0.0, 1.0]])
    y, _, _ = K.bias_relu_dropout(np.full((2, 3), -4.0), np.ones(3), 0.3, seed=5)
    assert np.all(y == 0.0)


def test_bias_relu_dropout_matches_unfused():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 6))
    bias = rng.normal(size=6)
    y, mask, _ = K.bias_relu_dropout(x, bias, 0.5, seed=33)
    unfused = np.maximum(x + bias, 0.0) * mask.keep / 0.5
    assert rel_err(y, unfused) < 1e-12


# --- gemm ---------------------------------------------------------------------------------

def test_gemm_identity_and_known_product():
    a = np.random.default_rng(7).normal(size=(3, 3))
    assert np.allclose(K.gemm(a, np.eye(3)), a)
    c = K.gemm(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(c, [[19.0, 22.0], [43.0, 50.0]])


def test_gemm_transpose_flags():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
    assert np.allclose(K.gemm(a, b, trans_a=True), a.T @ b)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    assert np.allclose(K.gemm(x, y, trans_b=True), x @ y.T)


def test_gemm_shape_errors_and_accumulate():
    with pytest.raises(ShapeMismatch):
        K.gemm(np.zeros((2, 3)), np.zeros((4, 2)))
    acc = np.ones((2, 2))
    K.gemm(np.eye(2), np.eye(2), accumulate_into=acc)
    assert np.array_equal(acc, np.eye(2) + 1.0)


def test_gemm_blocked_reduction_matches_direct():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(3, 2 * K.GEMM_BLOCK_K + 17))
    b = rng.normal(size=(2 * K.GEMM_BLOCK_K + 17, 4))
    assert rel_err(K.gemm(a, b), a @ b) < 1e-12


# --- masks, dtype, threads ---------------------------------------------------------------

def test_attention_mask_kinds():
    assert AttentionMask("none").keep_array(3, 3) is None
    causal = AttentionMask("causal").keep_array(3, 3)
    assert np.array_equal(causal, np.tril(np.ones((3, 3), bool)))
    padk = AttentionMask("padding", np.array([2, 3])).keep_array(4, 3)
    assert padk.shape == (2, 1, 1, 3)
    assert np.array_equal(padk[0, 0, 0], [True, True, False])
    with pytest.raises(ShapeMismatch):
        AttentionMask("padding", np.array([0])).keep_array(2, 2)


def test_fused_ops_identical_across_thread_counts():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(4096, 32)).astype(np.float32)
    w, b = np.ones(32, np.float32), np.zeros(32, np.float32)
    set_num_threads(1)
    y1, _ = K.softmax_forward(x)
    l1, c1 = K.layernorm_forward(x, w, b, 1e-5)
    set_num_threads(3)
    y3, _ = K.softmax_forward(x)
    l3, c3 = K.layernorm_forward(x, w, b, 1e-5)
    assert np.array_equal(y1, y3)
    assert np.array_equal(l1, l3)
    assert np.array_equal(c1.sigma, c3.sigma)


def test_float16_inputs_compute_in_float32():
    x = np.random.default_rng(11).normal(size=(3, 8)).astype(np.float16)
    y, cache = K.layernorm_forward(x, np.ones(8, np.float16), np.zeros(8, np.float16), 1e-5)
    assert y.dtype == np.float32
    s, _ = K.softmax_forward(x)
    assert s.dtype == np.float32


def test_binary32_fused_ops_match_float64_oracle_within_1e6():
    """Fused f32 results sit within 1e-6 relative of the f64 unfused oracle."""
    from ftrain import oracle as O
    rng = np.random.default_rng(12)
    x = rng.normal(size=(6, 16)).astype(np.float32)
    w = rng.normal(size=16).astype(np.float32)
    b = rng.normal(size=16).astype(np.float32)
    y, _ = K.layernorm_forward(x, w, b, 1e-5)
    y_ref, _, _ = O.ref_layernorm(x, w, b, 1e-5)
    assert rel_err(y, y_ref, floor=1.0) < 1e-6
    s, _ = K.softmax_forward(x)
    assert rel_err(s, O.ref_softmax(x), floor=1.0) < 1e-6
    res = rng.normal(size=(6, 16)).astype(np.float32)
    yf, mask = K.bias_dropout_residual(x, b, res, 0.5, seed=6)
    y_ref = O.ref_dropout((x + b).astype(np.float64), mask.keep, 0.5) + res
    assert rel_err(yf, y_ref, floor=1.0) < 1e-6
