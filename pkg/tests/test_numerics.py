import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from alit import numerics as nx
from alit.gradsuite import OP_CASES, run_suite
from alit.numerics import NEG_INF, AdamState, Rng, ShapeError, Tape, Tensor, adam_step, grad_check


def test_rng_is_deterministic_and_seed_sensitive():
    a, b, c = Rng(7), Rng(7), Rng(8)
    xs = [a.next_u64() for _ in range(5)]
    assert xs == [b.next_u64() for _ in range(5)]
    assert xs != [c.next_u64() for _ in range(5)]
    assert all(0 <= x < 2**64 for x in xs)


def test_rng_normal_is_float32_with_requested_std():
    x = Rng(0).normal((200, 200))
    assert x.dtype == np.float32
    assert abs(x.std() - 0.02) < 1e-3


def test_splitmix_first_outputs_match_reference():
    # reference values of the splitmix64 generator seeded with 0
    r = Rng(0)
    assert r.next_u64() == 0xE220A8397B1DCDAF
    assert r.next_u64() == 0x6E789E6AA1B965F4


def test_matmul_identity_and_zero():
    b = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), b).data, b.data)
    out = nx.matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.zeros((2, 1))))
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_random_5x7x3_gradcheck():
    g = np.random.default_rng(0)
    b = Tensor(g.standard_normal((7, 3)))
    w = Tensor(g.standard_normal((5, 3)))
    rep = grad_check(lambda a: nx.sum_(nx.mul(nx.matmul(a, b), w)), g.standard_normal((5, 7)), tol=1e-4)
    assert rep.passed, rep


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(nx.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=1e-7)
    out = nx.softmax(Tensor(np.array([1000.0, 0.0], dtype=np.float32))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-6)


def test_softmax_matches_float64_oracle():
    x = np.random.default_rng(1).standard_normal(17).astype(np.float32)
    e = np.exp(x.astype(np.float64))
    np.testing.assert_allclose(nx.softmax(Tensor(x)).data, e / e.sum(), rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e4, 1e4, width=32)))
def test_softmax_sums_to_one(x):
    y = nx.softmax(Tensor(x), axis=-1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-5)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        nx.softmax(Tensor(np.zeros((2, 3))), axis=2)


def test_layer_norm_constant_row_and_unit_row():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(nx.layer_norm(Tensor(np.full((1, 2), 3.0)), one, zero).data, [[0.0, 0.0]])
    out = nx.layer_norm(Tensor(np.array([[1.0, -1.0]])), one, zero, eps=1e-12).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], rtol=1e-9)


def test_layer_norm_feature_mismatch():
    with pytest.raises(ShapeError):
        nx.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_attention_single_token_returns_value():
    g = np.random.default_rng(2)
    q, k, v = (Tensor(g.standard_normal((1, 4))) for _ in range(3))
    np.testing.assert_allclose(nx.attention(q, k, v).data, v.data, rtol=1e-12)


def test_attention_masked_column_gets_zero_weight():
    g = np.random.default_rng(3)
    q, k, v = (Tensor(g.standard_normal((4, 3)).astype(np.float32)) for _ in range(3))
    mask = np.zeros((4, 4), dtype=np.float32)
    mask[:, 2] = NEG_INF
    weights: list = []
    nx.attention(q, k, v, mask, weights)
    assert np.all(weights[0][:, 2] == 0.0)


def test_attention_matches_float64_oracle():
    g = np.random.default_rng(4)
    q, k, v = (g.standard_normal((3, 5)).astype(np.float32) for _ in range(3))
    s = q.astype(np.float64) @ k.T.astype(np.float64) / math.sqrt(5)
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    ref = p @ v.astype(np.float64)
    np.testing.assert_allclose(nx.attention(Tensor(q), Tensor(k), Tensor(v)).data, ref, rtol=1e-5, atol=1e-6)


def test_attention_mask_shape_error():
    x = Tensor(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        nx.attention(x, x, x, np.zeros((2, 2)))


def test_cross_entropy_confident_and_uniform():
    logits = np.full((3, 5), -1e3)
    targets = np.array([0, 4, 2])
    logits[np.arange(3), targets] = 1e3
    assert float(nx.cross_entropy_smoothed(Tensor(logits), targets, 0.0).data) < 1e-9
    uni = nx.cross_entropy_smoothed(Tensor(np.zeros((4, 7))), np.array([1, 2, 3, 6]), 0.0)
    assert abs(float(uni.data) - math.log(7)) < 1e-12


def test_cross_entropy_smoothed_matches_float64_oracle():
    g = np.random.default_rng(5)
    logits = g.standard_normal((6, 4)).astype(np.float32)
    targets = g.integers(0, 4, size=6)
    z = logits.astype(np.float64)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    dist = np.full((6, 4), 0.1 / 3)
    dist[np.arange(6), targets] = 0.9
    ref = -(dist * logp).sum(axis=1).mean()
    got = float(nx.cross_entropy_smoothed(Tensor(logits), targets, 0.1).data)
    assert abs(got - ref) / ref < 1e-6


def test_cross_entropy_rejects_bad_targets_and_epsilon():
    with pytest.raises(IndexError):
        nx.cross_entropy_smoothed(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ValueError):
        nx.cross_entropy_smoothed(Tensor(np.zeros((2, 3))), np.array([0, 1]), 1.0)


def test_backward_sum_gives_ones_and_unused_param_zero():
    x = nx.parameter(np.arange(6.0).reshape(2, 3))
    unused = nx.parameter(np.ones(4))
    with Tape() as tape:
        loss = nx.sum_(x)
    tape.backward(loss, [x, unused])
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(unused.grad, np.zeros(4))


def test_backward_zero_times_f_gives_zero_grad():
    x = nx.parameter(np.random.default_rng(0).standard_normal(5))
    with Tape() as tape:
        loss = nx.scale(nx.sum_(nx.square(x)), 0.0)
    tape.backward(loss, [x])
    np.testing.assert_array_equal(x.grad, np.zeros(5))


def test_backward_rejects_non_scalar_loss():
    x = nx.parameter(np.ones(3))
    with Tape() as tape:
        y = nx.scale(x, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(y, [x])


def test_nothing_recorded_outside_tape():
    x = nx.parameter(np.ones(3))
    y = nx.sum_(nx.square(x))
    with Tape() as tape:
        z = nx.scale(x, 1.0)
    assert len(tape) == 1
    assert y.data == 3.0 and z.shape == (3,)


def test_three_layer_mlp_gradcheck():
    g = np.random.default_rng(6)
    ws = [Tensor(g.standard_normal(s)) for s in [(4, 6), (6, 5), (5, 1)]]

    def mlp(x):
        h = nx.sigmoid(nx.matmul(x, ws[0]))
        h = nx.gelu(nx.matmul(h, ws[1]))
        return nx.sum_(nx.matmul(h, ws[2]))

    assert grad_check(mlp, g.standard_normal((3, 4))).passed


def test_backward_is_deterministic():
    w0 = np.random.default_rng(7).standard_normal((4, 4))
    grads = []
    for _ in range(2):
        w = nx.parameter(w0.copy())
        with Tape() as tape:
            loss = nx.sum_(nx.square(nx.softmax(nx.matmul(w, w), -1)))
        tape.backward(loss, [w])
        grads.append(w.grad)
    np.testing.assert_array_equal(grads[0], grads[1])


def test_grad_check_sum_is_exact():
    rep = grad_check(nx.sum_, np.random.default_rng(0).standard_normal((3, 3)))
    assert rep.passed and rep.max_rel_error < 1e-9


def test_grad_check_detects_wrong_backward_rule():
    def bad_square(a):
        return nx._record(a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    rep = grad_check(lambda x: nx.sum_(bad_square(x)), np.random.default_rng(0).standard_normal(5) + 3)
    assert not rep.passed


def test_adam_zero_grad_on_fresh_state_leaves_params():
    p = nx.parameter(np.ones(3))
    state = AdamState.zeros_like([p])
    adam_step([p], [np.zeros(3)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, np.ones(3))
    np.testing.assert_array_equal(state.m[0], np.zeros(3))


def test_adam_zero_grad_decays_moments():
    p = nx.parameter(np.ones(3))
    state = AdamState.zeros_like([p])
    state.m[0][:] = 1.0
    state.v[0][:] = 1.0
    adam_step([p], [np.zeros(3)], state, lr=0.1)
    np.testing.assert_allclose(state.m[0], 0.9)
    np.testing.assert_allclose(state.v[0], 0.95)


def test_adam_first_step_is_sign_scaled():
    p = nx.parameter(np.zeros(3))
    g = np.array([0.5, -2.0, 1e-3])
    adam_step([p], [g], AdamState.zeros_like([p]), lr=0.01)
    np.testing.assert_allclose(p.data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-6)


def test_adam_descends_on_square():
    x = nx.parameter(np.array([3.0]))
    state = AdamState.zeros_like([x])
    prev = abs(x.data[0])
    for _ in range(10):
        adam_step([x], [2 * x.data], state, lr=0.1)
        assert abs(x.data[0]) < prev
        prev = abs(x.data[0])


def test_adam_shape_mismatch():
    p = nx.parameter(np.zeros(3))
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(4)], AdamState.zeros_like([p]))


def test_broadcast_only_over_trailing_suffix():
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))
    out = nx.add(Tensor(np.zeros((2, 3))), Tensor(np.arange(3.0)))
    np.testing.assert_array_equal(out.data, [[0, 1, 2], [0, 1, 2]])


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("k", [0, 1, 2])
def test_every_op_passes_grad_check(name, k):
    fn, x = OP_CASES[name](np.random.default_rng(k), k)
    rep = grad_check(fn, x, tol=1e-3, h=1e-3)
    assert rep.passed, f"{name}[{k}]: {rep}"


def test_full_suite_includes_stack():
    results = run_suite()
    stack = [r for n, _, r in results if n == "enc_dec_stack"]
    assert len(stack) == 3 and all(r.passed for r in stack)
