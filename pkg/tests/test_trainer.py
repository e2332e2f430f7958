import numpy as np
import pytest

from ftrain.errors import ConfigError, DuplicateName
from ftrain.numerics import narrow_f32, widen_f16
from ftrain.oracle import BaselineTrainer, reference_adam_update, reference_sgd_update
from ftrain.trainer import (OptimConfig, adam_step, sgd_step,
                            workspace_pack, zero_grads)


def _pack_random(seed=0, sizes=((3, 2), (4,)), algorithm="adam"):
    rng = np.random.default_rng(seed)
    named = [(f"p{i}", rng.normal(size=s).astype(np.float32)) for i, s in enumerate(sizes)]
    return named, workspace_pack(named, algorithm)


# --- workspace layout ----------------------------------------------------------

def test_pack_concatenation_and_links():
    a = np.arange(6.0, dtype=np.float32).reshape(2, 3)
    b = np.arange(4.0, dtype=np.float32)
    ws = workspace_pack([("A", a), ("B", b)])
    assert ws.params16.size == 10
    assert [(l.name, l.offset, l.length) for l in ws.links] == [("A", 0, 6), ("B", 6, 4)]
    assert ws.resolve("B") == (6, 4)
    assert np.array_equal(ws.param_view("A"), narrow_f32(a))
    assert ws.param_view("B").base is ws.params16


def test_pack_readback_is_rne_of_original():
    rng = np.random.default_rng(1)
    x = rng.normal(size=17).astype(np.float32) * 3.3
    ws = workspace_pack([("x", x)])
    assert np.array_equal(ws.param_view("x"), x.astype(np.float16))


def test_pack_links_are_gapless_and_disjoint():
    named, ws = _pack_random(sizes=((3, 2), (4,), (2, 2, 2)))
    offsets = sorted((l.offset, l.length) for l in ws.links)
    pos = 0
    for off, length in offsets:
        assert off == pos
        pos += length
    assert pos == ws.params16.size


def test_pack_duplicate_name():
    with pytest.raises(DuplicateName):
        workspace_pack([("x", np.zeros(2)), ("x", np.zeros(3))])


def test_zero_grads_bit_pattern_and_idempotence():
    _, ws = _pack_random()
    ws.grads16[:] = np.float16(1.5)
    before = ws.params16.copy()
    zero_grads(ws)
    assert np.all(widen_f16(ws.grads16) == 0.0)
    assert np.all(ws.grads16.view(np.uint16) == 0)  # +0.0 pattern exactly
    zero_grads(ws)
    assert np.all(ws.grads16.view(np.uint16) == 0)
    assert np.array_equal(ws.params16.view(np.uint16), before.view(np.uint16))


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(lr=0.0)
    with pytest.raises(ConfigError):
        OptimConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        OptimConfig(loss_scale=3.0)
    with pytest.raises(ConfigError):
        OptimConfig(loss_scale=0.5)
    OptimConfig(loss_scale=65536.0)


# --- adam ------------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    _, ws = _pack_random()
    cfg = OptimConfig(lr=0.01)
    before = ws.params16.copy()
    report = adam_step(ws, cfg, t=1)
    assert report.applied
    assert np.array_equal(ws.params16.view(np.uint16), before.view(np.uint16))
    assert np.all(ws.m32 == 0.0) and np.all(ws.v32 == 0.0)


def test_adam_scalar_reference_value():
    ws = workspace_pack([("p", np.array([1.0], dtype=np.float32))])
    ws.grads16[:] = np.float16(0.1)
    cfg = OptimConfig(lr=0.01, beta1=0.9, beta2=0.999, eps_opt=1e-8)
    adam_step(ws, cfg, t=1)
    # binary64 reference: m_hat = g, v_hat = g^2, p' = 1 - lr*g/(|g| + eps)
    g = float(np.float16(0.1))
    want = 1.0 - 0.01 * (g / (abs(g) + 1e-8))
    assert abs(want - 0.99) < 1e-4
    assert abs(float(widen_f16(ws.params16)[0]) - want) < 5e-4  # fp16 quantum at 0.99


def test_adam_bitwise_matches_reference_trainer():
    rng = np.random.default_rng(2)
    for trial in range(50):
        n = int(rng.integers(1, 33))
        p0 = (rng.normal(size=n) * rng.choice([0.01, 1.0, 30.0])).astype(np.float32)
        g0 = (rng.normal(size=n) * rng.choice([1e-4, 0.1, 5.0])).astype(np.float32)
        m0 = rng.normal(size=n).astype(np.float32) * 0.1
        v0 = (rng.uniform(0.0, 0.2, size=n)).astype(np.float32)
        lr = float(rng.choice([1e-4, 1e-3, 0.01]))
        wd = float(rng.choice([0.0, 0.01]))
        t = int(rng.integers(1, 50))
        scale = float(rng.choice([1.0, 8.0]))
        cfg = OptimConfig(lr=lr, weight_decay=wd, loss_scale=scale)

        ws = workspace_pack([("p", p0)])
        ws.grads16[:] = narrow_f32(g0)
        ws.m32[:] = m0
        ws.v32[:] = v0
        adam_step(ws, cfg, t=t)

        master = widen_f16(narrow_f32(p0))
        g32 = widen_f16(narrow_f32(g0))
        if scale != 1.0:
            g32 = g32 / np.float32(scale)
        m, v = m0.copy(), v0.copy()
        reference_adam_update(master, g32, m, v, lr=lr, beta1=cfg.beta1,
                              beta2=cfg.beta2, eps=cfg.eps_opt, weight_decay=wd, t=t)
        assert np.array_equal(ws.params16.view(np.uint16),
                              narrow_f32(master).view(np.uint16)), trial
        assert np.array_equal(ws.m32, m) and np.array_equal(ws.v32, v)


def test_adam_nonfinite_gradient_skips_step():
    named, ws = _pack_random(seed=3)
    ws.grads16[:] = np.float16(0.5)
    ws.grads16[2] = np.float16(np.inf)
    ws.m32[:] = 0.25
    p_before = ws.params16.copy()
    m_before = ws.m32.copy()
    report = adam_step(ws, OptimConfig(), t=1)
    assert not report.applied and report.nonfinite == 1
    assert np.array_equal(ws.params16.view(np.uint16), p_before.view(np.uint16))
    assert np.array_equal(ws.m32, m_before)


# --- sgd -------------------------------------------------------------------------

def test_sgd_plain_step():
    ws = workspace_pack([("p", np.array([1.0], dtype=np.float32))], algorithm="sgd")
    ws.grads16[:] = np.float16(0.5)
    sgd_step(ws, OptimConfig(algorithm="sgd", lr=0.1, momentum=0.0))
    assert float(widen_f16(ws.params16)[0]) == pytest.approx(0.95, abs=1e-3)


def test_sgd_zero_grad_identity():
    _, ws = _pack_random(algorithm="sgd")
    before = ws.params16.copy()
    sgd_step(ws, OptimConfig(algorithm="sgd", lr=0.1, momentum=0.9))
    assert np.array_equal(ws.params16.view(np.uint16), before.view(np.uint16))


def test_sgd_quadratic_bowl_tracks_float64_reference():
    # minimize 0.5*x^2: gradient = x
    ws = workspace_pack([("x", np.array([2.0], dtype=np.float32))], algorithm="sgd")
    cfg = OptimConfig(algorithm="sgd", lr=0.1, momentum=0.9)
    ref_x, ref_v = 2.0, 0.0
    for _ in range(10):
        x = float(widen_f16(ws.params16)[0])
        ws.grads16[:] = narrow_f32(np.array([x], dtype=np.float32))
        sgd_step(ws, cfg)
        gr = float(np.float16(ref_x))  # the reference sees the same fp16 gradient
        ref_v = 0.9 * ref_v + gr
        ref_x = ref_x - 0.1 * ref_v
        # within per-step fp16 narrowing error
        assert abs(float(widen_f16(ws.params16)[0]) - ref_x) < 2e-3
        ref_x = float(np.float16(ref_x))


def test_sgd_bitwise_matches_reference():
    rng = np.random.default_rng(4)
    for trial in range(30):
        n = int(rng.integers(1, 20))
        p0 = rng.normal(size=n).astype(np.float32)
        g0 = rng.normal(size=n).astype(np.float32)
        vel0 = rng.normal(size=n).astype(np.float32) * 0.1
        cfg = OptimConfig(algorithm="sgd", lr=0.05, momentum=0.9, weight_decay=0.01)
        ws = workspace_pack([("p", p0)], algorithm="sgd")
        ws.grads16[:] = narrow_f32(g0)
        ws.m32[:] = vel0
        sgd_step(ws, cfg)
        master = widen_f16(narrow_f32(p0))
        vel = vel0.copy()
        reference_sgd_update(master, widen_f16(narrow_f32(g0)), vel, lr=0.05,
                             momentum=0.9, weight_decay=0.01)
        assert np.array_equal(ws.params16.view(np.uint16),
                              narrow_f32(master).view(np.uint16))
        assert np.array_equal(ws.m32, vel)


# --- memory accounting -------------------------------------------------------------

def test_workspace_saves_exactly_2p_fp32_elements_vs_baseline():
    named, ws = _pack_random(seed=5, sizes=((10, 3), (7,), (4, 4)))
    p = ws.n_elements
    baseline = BaselineTrainer(named, OptimConfig())
    assert ws.state_bytes() == 2 * p * 2 + 2 * p * 4
    assert baseline.memory_bytes() == 2 * p * 2 + 4 * p * 4
    assert baseline.memory_bytes() - ws.state_bytes() == 2 * p * 4


def test_baseline_trainer_multi_step_bit_parity():
    rng = np.random.default_rng(6)
    named = [("a", rng.normal(size=(4, 3)).astype(np.float32)),
             ("b", rng.normal(size=6).astype(np.float32))]
    cfg = OptimConfig(lr=0.01)
    ws = workspace_pack(named, "adam")
    base = BaselineTrainer(named, cfg)
    for t in range(1, 21):
        g = {name: (rng.normal(size=arr.shape) * 0.3).astype(np.float32)
             for name, arr in named}
        for name, arr in named:
            ws.grad_view(name)[:] = narrow_f32(g[name])
        adam_step(ws, cfg, t=t)
        base.step({name: narrow_f32(g[name]) for name, _ in named})
        for name, _ in named:
            assert np.array_equal(ws.param_view(name).view(np.uint16),
                                  base.param16(name).view(np.uint16)), (t, name)
