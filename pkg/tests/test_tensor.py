import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rldx import tensor as T
from rldx.tensor import (NumericsError, ParamStore, Tensor, attention, backward,
                         ew_binary, finite_diff_check, layernorm, matmul, mha,
                         rmsnorm, rope, sinusoidal_embed, softmax, swiglu)


def rng():
    return np.random.default_rng(0)


def test_ew_binary_add():
    out = ew_binary("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.allclose(out.data, [4.0, 6.0])


def test_mul_identity_and_sub_symmetry():
    x = Tensor(rng().normal(size=(3, 4)))
    assert np.array_equal(ew_binary("mul", x, Tensor(np.ones(4))).data, x.data)
    assert np.all(ew_binary("sub", x, x).data == 0.0)


def test_broadcast_trailing_only():
    a = Tensor(np.ones((2, 3, 4)))
    assert ew_binary("add", a, Tensor(np.ones(4))).shape == (2, 3, 4)
    assert ew_binary("add", a, Tensor(np.ones((3, 4)))).shape == (2, 3, 4)
    with pytest.raises(NumericsError):
        ew_binary("add", a, Tensor(np.ones((2, 3))))
    with pytest.raises(NumericsError):
        ew_binary("add", Tensor(np.ones(4)), a)


def test_matmul_hand_expansion():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    # row expansion oracle: [1*5+2*6, 3*5+4*6]
    assert np.allclose(out.data, [[17.0], [39.0]])


def test_matmul_identity_and_1x1():
    a = Tensor(rng().normal(size=(3, 3)))
    assert np.allclose(matmul(a, Tensor(np.eye(3))).data, a.data)
    assert matmul(Tensor([[2.0]]), Tensor([[3.0]])).data[0, 0] == 6.0
    with pytest.raises(NumericsError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_against_sigmoid_oracle():
    out = softmax(Tensor([1.0, 2.0]))
    # two-way softmax equals the scalar sigmoid of the logit gap
    sig = 1.0 / (1.0 + math.exp(-1.0))
    assert np.allclose(out.data, [1.0 - sig, sig], atol=1e-12)


def test_softmax_masked_limit_and_error():
    out = softmax(Tensor([-np.inf, 0.0]))
    assert np.allclose(out.data, [0.0, 1.0])
    with pytest.raises(NumericsError):
        softmax(Tensor([-np.inf, -np.inf]))


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one_and_shift_invariant(vals):
    x = np.array(vals)
    a = softmax(Tensor(x)).data
    b = softmax(Tensor(x + 7.5)).data
    assert abs(a.sum() - 1.0) <= 1e-12
    assert np.allclose(a, b, atol=1e-12)


def test_rmsnorm_values():
    out = rmsnorm(Tensor([2.0, 2.0]), Tensor([1.0, 1.0]), eps=0.0)
    assert np.allclose(out.data, [1.0, 1.0])
    out = rmsnorm(Tensor([3.0, 4.0]), Tensor([1.0, 1.0]), eps=0.0)
    # rms = sqrt(12.5)
    assert np.allclose(out.data, [3.0 / math.sqrt(12.5), 4.0 / math.sqrt(12.5)],
                       atol=1e-5)
    assert np.all(rmsnorm(Tensor([3.0, 4.0]), Tensor([0.0, 0.0])).data == 0.0)


def test_layernorm_values():
    g, b = Tensor([1.0, 1.0]), Tensor([0.0, 0.0])
    assert np.allclose(layernorm(Tensor([5.0, 5.0]), g, b).data, [0.0, 0.0],
                       atol=1e-2)
    assert np.allclose(layernorm(Tensor([-1.0, 1.0]), g, b, eps=0.0).data,
                       [-1.0, 1.0])
    out = layernorm(Tensor([[3.0, 9.0]]), Tensor([0.0, 0.0]), Tensor([2.0, -1.0]))
    assert np.allclose(out.data, [[2.0, -1.0]])


def test_swiglu_values():
    # gate 0 -> 0; gate 1, value 1 -> sigmoid(1); value 0 -> 0
    z = Tensor([[0.0, 1.0, 5.0, 1.0], [1.0, 3.0, 1.0, 0.0]])
    out = swiglu(z)
    sig1 = 1.0 / (1.0 + math.exp(-1.0))
    assert np.allclose(out.data[0], [0.0, sig1], atol=1e-12)
    assert out.data[1, 1] == 0.0
    with pytest.raises(NumericsError):
        swiglu(Tensor([1.0, 2.0, 3.0]))


def test_rope_rotation_properties():
    x = Tensor(rng().normal(size=(3, 8)))
    out = rope(x, [0, 1, 5])
    assert np.allclose(out.data[0], x.data[0])  # position 0 unchanged
    assert np.allclose(np.linalg.norm(out.data, axis=-1),
                       np.linalg.norm(x.data, axis=-1), rtol=1e-12)
    quarter = rope(Tensor([[1.0, 0.0]]), [1], base=1.0)  # angle exactly 1 rad
    assert np.allclose(quarter.data, [[math.cos(1.0), math.sin(1.0)]])
    with pytest.raises(NumericsError):
        rope(Tensor(np.ones((2, 3))), [0, 1])


def test_attention_degenerate_cases():
    one = np.ones((1, 1, 1), dtype=bool)
    q = Tensor(rng().normal(size=(2, 1, 4)))
    k = Tensor(rng().normal(size=(2, 1, 4)))
    v = Tensor(rng().normal(size=(2, 1, 4)))
    out = attention(q, k, v, np.ones((1, 1), dtype=bool), 0.5)
    assert np.allclose(out.data, v.data)  # single key -> output is v

    # identical keys -> uniform weights -> mean of values
    k5 = Tensor(np.tile(rng().normal(size=(1, 1, 4)), (1, 5, 1)))
    q5 = Tensor(rng().normal(size=(1, 5, 4)))
    v5 = Tensor(rng().normal(size=(1, 5, 4)))
    out = attention(q5, k5, v5, np.ones((5, 5), dtype=bool), 1.0)
    assert np.allclose(out.data, np.tile(v5.data.mean(axis=1, keepdims=True), (1, 5, 1)))

    # mask selecting exactly key j -> output v[j]
    mask = np.zeros((5, 5), dtype=bool)
    mask[:, 3] = True
    out = attention(q5, k5, v5, mask, 1.0)
    assert np.allclose(out.data, np.tile(v5.data[:, 3:4], (1, 5, 1)))

    with pytest.raises(NumericsError):
        attention(q5, k5, v5, np.zeros((5, 5), dtype=bool), 1.0)
    del one


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_attention_convex_combination(seed):
    r = np.random.default_rng(seed)
    q = Tensor(r.normal(size=(1, 6, 2)))
    k = Tensor(r.normal(size=(1, 6, 2)))
    v = Tensor(r.normal(size=(1, 6, 1)))
    mask = r.random((6, 6)) < 0.7
    mask[:, 0] = True
    out = attention(q, k, v, mask, 1.3).data[0, :, 0]
    lo, hi = v.data.min(), v.data.max()
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_sinusoidal_embed_basics():
    e0 = sinusoidal_embed(0.0, 8)
    assert np.allclose(e0.data[0::2], 0.0)
    assert np.allclose(e0.data[1::2], 1.0)
    grid = [sinusoidal_embed(t, 8).data for t in np.linspace(0, 1, 17)]
    assert all(np.max(np.abs(g)) <= 1.0 for g in grid)
    # injectivity on the grid
    for i in range(len(grid)):
        for j in range(i + 1, len(grid)):
            assert not np.allclose(grid[i], grid[j])
    with pytest.raises(NumericsError):
        sinusoidal_embed(0.5, 7)


def test_backward_basics():
    ps = ParamStore()
    x = ps.add("x", np.array([1.0, 2.0, 3.0]))
    unused = ps.add("u", np.array([5.0]))
    loss = T.rsum(x)
    grads = backward(loss, ps)
    assert np.allclose(grads["x"], 1.0)
    assert np.allclose(grads["u"], 0.0)

    ps2 = ParamStore()
    y = ps2.add("y", np.array([3.0]))
    loss = T.sum_squares(y)
    grads = backward(loss, ps2)
    assert np.allclose(grads["y"], 6.0)
    # repeated calls accumulate
    backward(T.sum_squares(y), ps2)
    assert np.allclose(y.grad, 12.0)
    del unused


def test_backward_requires_scalar():
    ps = ParamStore()
    x = ps.add("x", np.ones(3))
    with pytest.raises(NumericsError):
        backward(x + x, ps)


def test_finite_diff_check_linear_quadratic_and_sentinel():
    ps = ParamStore()
    x = ps.add("x", np.array([0.3, -0.7, 1.1]))
    assert finite_diff_check(lambda: T.rsum(x), ps) <= 1e-9
    assert finite_diff_check(lambda: T.sum_squares(x), ps) <= 1e-6

    # a deliberately wrong gradient shows error ~1
    class Broken(Tensor):
        pass

    bad = ps.add("bad", np.array([0.5]))

    def f():
        out = Tensor(bad.data * 2.0)
        out.requires_grad = True
        out._parents = (bad,)
        out._vjp = lambda g: (np.array([-2.0]) * g,)
        return T.rsum(out)

    err = finite_diff_check(f, ps, param_names=["bad"])
    assert err > 0.9


def test_finite_diff_on_composites():
    r = np.random.default_rng(7)
    ps = ParamStore()
    w = ps.add("w", r.uniform(-1, 1, size=(6, 6)))
    gain = ps.add("g", r.uniform(0.5, 1.5, size=6))
    bias = ps.add("b", r.uniform(-0.5, 0.5, size=6))
    z = ps.add("z", r.uniform(-1, 1, size=(4, 6)))
    gate = ps.add("gate", r.uniform(-1, 1, size=(6, 8)))
    x = Tensor(r.uniform(-1, 1, size=(4, 6)))
    mask = T.log_mask(np.tril(np.ones((4, 4), dtype=bool)))

    def f():
        h = rmsnorm(matmul(x, w), gain)
        h = layernorm(h, gain, bias)
        h = mha(h, h, matmul(z, w), mask, n_heads=2)
        h = swiglu(matmul(h, gate))
        h = rope(h, [0, 1, 2, 3], base=100.0)
        h = softmax(h, axis=-1)
        return T.sum_squares(h)

    assert finite_diff_check(f, ps) <= 1e-4


def test_check_finite():
    with pytest.raises(NumericsError):
        T.check_finite(Tensor([1.0, np.nan]))
    T.check_finite(Tensor([1.0, 2.0]))


def test_param_store_contract():
    ps = ParamStore()
    ps.add("a", np.ones(2))
    ps.add("b", np.ones(3))
    with pytest.raises(NumericsError):
        ps.add("a", np.ones(2))
    assert ps.names() == ["a", "b"]
    assert ps.n_values() == 5
