import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rldx import tensor as T
from rldx.envs import ContactProbe, rollout_expert
from rldx.flow import (Bounds, FlowBatch, TauSchedule, compute_norm_stats,
                       conditional_field, euler_sample, fm_loss, load_norm_stats,
                       make_noisy, nearest_rank_percentile, sample_tau,
                       save_norm_stats)
from rldx.tensor import ParamStore, Tensor, finite_diff_check


def test_percentile_oracle_0_to_100():
    vals = np.arange(101.0)[:, None]
    assert nearest_rank_percentile(vals, 1.0)[0] == 1.0
    assert nearest_rank_percentile(vals, 99.0)[0] == 99.0


def test_norm_stats_degenerate_and_single():
    class Ep:
        states = np.array([[3.0], [3.0], [3.0]], np.float32)
        actions = np.array([[1.0], [2.0], [3.0]], np.float32)
        physics = np.zeros((3, 0), np.float32)
        embodiment = "x"

    stats = compute_norm_stats([Ep()])
    assert stats.state.q01[0] == stats.state.q99[0] == 3.0
    assert stats.state.normalize([[3.0]])[0, 0] == 0.0  # constant dim -> 0

    class One:
        states = np.array([[7.0]], np.float32)
        actions = np.array([[7.0]], np.float32)
        physics = np.zeros((1, 0), np.float32)
        embodiment = "x"

    s1 = compute_norm_stats([One()])
    assert s1.state.q01[0] == s1.state.q99[0] == 7.0
    with pytest.raises(Exception):
        compute_norm_stats([])


def test_normalize_endpoints_roundtrip_identity():
    b = Bounds(np.array([2.0]), np.array([6.0]))
    assert b.normalize([2.0])[0] == -1.0
    assert b.normalize([6.0])[0] == 1.0
    x = np.linspace(-5, 15, 31)
    assert np.allclose(b.denormalize(b.normalize(x)), x, atol=1e-12)
    ident = Bounds(np.array([-1.0]), np.array([1.0]))
    assert np.allclose(ident.normalize([0.3]), [0.3])


def test_norm_stats_json_roundtrip(tmp_path):
    eps = [rollout_expert(ContactProbe(), s) for s in range(5)]
    stats = {"probe": compute_norm_stats(eps)}
    path = str(tmp_path / "norm.json")
    save_norm_stats(path, stats)
    back = load_norm_stats(path)
    assert np.allclose(back["probe"].physics.q99, stats["probe"].physics.q99)


def test_sample_tau_beta_mean_and_range():
    rng = np.random.default_rng(0)
    draws = sample_tau(TauSchedule("beta", 4), rng, size=100_000)
    assert abs(draws.mean() - 0.6) <= 0.01  # alpha/(alpha+beta) = 1.5/2.5
    assert np.all((draws >= 0.0) & (draws < 1.0))
    uni = sample_tau(TauSchedule("uniform", 4), np.random.default_rng(1), size=1000)
    assert np.all((uni >= 0.0) & (uni < 1.0))
    a = sample_tau(TauSchedule("beta", 4), np.random.default_rng(7), size=10)
    b = sample_tau(TauSchedule("beta", 4), np.random.default_rng(7), size=10)
    assert np.array_equal(a, b)
    with pytest.raises(Exception):
        TauSchedule("gamma", 4)


@given(st.floats(0, 1), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=40, deadline=None)
def test_make_noisy_interpolates(tau, x, e):
    out = make_noisy(np.array([x]), np.array([e]), tau)
    assert out[0] == pytest.approx(tau * x + (1 - tau) * e, abs=1e-12)


def test_make_noisy_endpoints():
    x, e = np.array([2.0]), np.array([0.0])
    assert make_noisy(x, e, 1.0)[0] == 2.0
    assert make_noisy(x, e, 0.0)[0] == 0.0
    assert make_noisy(x, e, 0.5)[0] == 1.0
    with pytest.raises(Exception):
        make_noisy(np.zeros(2), np.zeros(3), 0.5)


def test_fm_loss_zero_for_perfect_model():
    # a model that reconstructs (clean - noise) from the interpolation
    a_clean = np.random.default_rng(0).normal(size=(4, 3, 2))
    p_fut = np.random.default_rng(1).normal(size=(4, 3, 1))

    def perfect(a_noisy, tau, p_noisy):
        t = np.asarray(tau)[:, None, None]
        va = (a_clean - a_noisy.data) / (1.0 - t)
        vp = (p_fut - p_noisy.data) / (1.0 - t)
        return Tensor(va), Tensor(vp)

    batch = FlowBatch(a_clean=a_clean, p_future=p_fut, p_present=np.ones(4))
    loss = fm_loss(perfect, batch, 1.0, np.random.default_rng(2))
    assert loss.item() <= 1e-18


def test_fm_loss_physics_absent_reduces_to_action_term():
    a_clean = np.random.default_rng(0).normal(size=(4, 3, 2))

    def zero(a_noisy, tau, p_noisy):
        return Tensor(np.zeros_like(a_noisy.data)), None

    batch = FlowBatch(a_clean=a_clean)
    loss = fm_loss(zero, batch, 7.0, np.random.default_rng(3))
    # same rng -> identical draws; hand-compute the action term
    rng = np.random.default_rng(3)
    tau = sample_tau(TauSchedule(), rng, size=4)
    eps = rng.standard_normal(a_clean.shape)
    want = np.mean(np.sum((a_clean - eps) ** 2, axis=(1, 2)))
    assert loss.item() == pytest.approx(want, rel=1e-12)


def test_fm_loss_hand_value_single_element():
    a_clean = np.array([[[2.0]]])

    def model(a_noisy, tau, p_noisy):
        return Tensor(np.full_like(a_noisy.data, 0.5)), None

    rng = np.random.default_rng(5)
    loss = fm_loss(model, FlowBatch(a_clean=a_clean), 1.0, rng)
    rng = np.random.default_rng(5)
    sample_tau(TauSchedule(), rng, size=1)
    eps = rng.standard_normal((1, 1, 1))
    assert loss.item() == pytest.approx((0.5 - (2.0 - eps[0, 0, 0])) ** 2, rel=1e-12)


def test_fm_loss_gradient_check():
    ps = ParamStore()
    w = ps.add("w", np.random.default_rng(0).uniform(-0.5, 0.5, (2, 2)))
    a_clean = np.random.default_rng(1).normal(size=(3, 4, 2))

    def model(a_noisy, tau, p_noisy):
        return T.matmul(a_noisy, w), None

    def f():
        return T.scale(fm_loss(model, FlowBatch(a_clean=a_clean), 1.0,
                               np.random.default_rng(42)), 1e-2)

    assert finite_diff_check(f, ps) <= 1e-4


def test_euler_constant_field_telescopes():
    c = np.array([[1.5, -2.0]])

    def const(a_noisy, tau, p_noisy):
        return Tensor(np.tile(c, (a_noisy.shape[0], 1))), None

    for steps in (1, 4, 10):
        rng = np.random.default_rng(0)
        a0 = rng.standard_normal((1, 2))
        chunk, _ = euler_sample(const, (1, 2), steps, np.random.default_rng(0))
        assert np.allclose(chunk, a0 + c, atol=1e-12)


def test_euler_recovers_target_with_conditional_field():
    target = np.random.default_rng(3).normal(size=(4, 2))
    for steps in (1, 4, 10):
        chunk, _ = euler_sample(conditional_field(target), (4, 2), steps,
                                np.random.default_rng(9))
        assert np.max(np.abs(chunk - target)) <= 1e-10


def test_euler_temperature_monotone_variance():
    def contract(a_noisy, tau, p_noisy):
        return T.scale(a_noisy, -0.5), None

    spreads = []
    for temp in (1.0, 1.5, 2.0):
        rng = np.random.default_rng(11)
        outs = [euler_sample(contract, (1, 3), 4, rng, temperature=temp)[0]
                for _ in range(256)]
        spreads.append(np.var(np.stack(outs)))
    assert spreads[0] < spreads[1] < spreads[2]


def test_euler_denormalizes():
    b = Bounds(np.array([0.0]), np.array([10.0]))

    def zero(a_noisy, tau, p_noisy):
        return Tensor(np.zeros_like(a_noisy.data)), None

    rng = np.random.default_rng(0)
    a0 = rng.standard_normal((1, 1))
    chunk, _ = euler_sample(zero, (1, 1), 1, np.random.default_rng(0),
                            denorm_action=b.denormalize)
    assert chunk[0, 0] == pytest.approx(b.denormalize(a0)[0, 0])
