import numpy as np
import pytest

from alit import numerics as nx
from alit.numerics import Rng, ShapeError, Tape, Tensor
from alit.quantizer import (Codebook, codebook_usage, nearest_code, nearest_indices, perplexity,
                            quantize_batch, revive_dead_codes, straight_through)


def scan_oracle(v: np.ndarray, codes: np.ndarray, normalized: bool = False) -> int:
    v = np.asarray(v, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if normalized:
        v = v / np.linalg.norm(v)
        codes = codes / np.linalg.norm(codes, axis=1, keepdims=True)
    best, best_d = 0, np.inf
    for i, c in enumerate(codes):
        d = float(((v - c) ** 2).sum())
        if d < best_d:
            best, best_d = i, d
    return best


def book(codes, normalized=False) -> Codebook:
    return Codebook(nx.parameter(np.asarray(codes, dtype=np.float32)), normalized)


def test_nearest_by_inspection():
    assert nearest_code([0.9, 0.8], book([[0, 0], [1, 1]])) == 1


def test_tie_goes_to_lowest_index():
    assert nearest_code([1.0, 0.0], book([[0, 0], [2, 0]])) == 0
    assert nearest_code([0.3, 0.3], book([[1, 1], [1, 1], [0, 5]])) == 0


def test_matches_exhaustive_scan_k64():
    g = np.random.default_rng(0)
    cb = book(g.standard_normal((64, 6)))
    q = g.standard_normal((100, 6)).astype(np.float32)
    got = nearest_indices(q, cb)
    assert [scan_oracle(v, cb.codes.data) for v in q] == list(got)


def test_normalized_ranking_equals_cosine_ranking():
    g = np.random.default_rng(1)
    cb = book(g.standard_normal((32, 5)), normalized=True)
    q = g.standard_normal((200, 5))
    cos = (q / np.linalg.norm(q, axis=1, keepdims=True)) @ cb.codes.data.astype(np.float64).T
    np.testing.assert_array_equal(nearest_indices(q, cb), cos.argmax(axis=1))


def test_normalized_codebook_rows_are_unit():
    cb = Codebook.random(16, 4, Rng(0), normalized=True)
    np.testing.assert_allclose(np.linalg.norm(cb.codes.data, axis=1), 1.0, atol=1e-5)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        nearest_code([1.0, 2.0, 3.0], book([[0, 0]]))
    with pytest.raises(ShapeError):
        quantize_batch(Tensor(np.zeros((2, 3))), book([[0, 0]]))
    with pytest.raises(ShapeError):
        Codebook(Tensor(np.zeros((0, 3))))


def test_losses_vanish_on_code_rows():
    cb = book(np.random.default_rng(2).standard_normal((8, 3)))
    q = quantize_batch(Tensor(cb.codes.data[[3, 1, 7]].copy()), cb)
    np.testing.assert_array_equal(q.indices, [3, 1, 7])
    assert float(q.commit_loss.data) == 0.0 and float(q.codebook_loss.data) == 0.0


def test_single_code_book():
    cb = book([[0.5, -1.0]])
    q = quantize_batch(Tensor(np.random.default_rng(3).standard_normal((5, 2)).astype(np.float32)), cb)
    np.testing.assert_array_equal(q.indices, 0)
    np.testing.assert_array_equal(q.quantized.data, np.repeat(cb.codes.data, 5, axis=0))


def test_losses_match_float64_oracle():
    g = np.random.default_rng(4)
    cb = book(g.standard_normal((16, 4)))
    V = g.standard_normal((10, 4)).astype(np.float32)
    q = quantize_batch(Tensor(V), cb, beta=0.25)
    Q = cb.codes.data[q.indices].astype(np.float64)
    mse = ((V.astype(np.float64) - Q) ** 2).mean()
    assert abs(float(q.commit_loss.data) - 0.25 * mse) / (0.25 * mse) < 1e-5
    assert abs(float(q.codebook_loss.data) - mse) / mse < 1e-5


def test_usage_histogram_updates():
    cb = book([[0, 0], [10, 10]])
    quantize_batch(Tensor(np.array([[0.1, 0], [9, 9], [11, 10]], dtype=np.float32)), cb)
    np.testing.assert_array_equal(cb.usage, [1, 2])
    quantize_batch(Tensor(np.zeros((2, 2), dtype=np.float32)), cb, track_usage=False)
    np.testing.assert_array_equal(cb.usage, [1, 2])


def test_quantization_is_idempotent():
    g = np.random.default_rng(5)
    for normalized in (False, True):
        cb = book(g.standard_normal((32, 6)), normalized)
        first = quantize_batch(Tensor(g.standard_normal((50, 6)).astype(np.float32)), cb)
        second = quantize_batch(Tensor(first.quantized.data.copy()), cb)
        np.testing.assert_array_equal(first.indices, second.indices)
        assert float(second.commit_loss.data) == 0.0


def test_straight_through_forward_and_gradient():
    g = np.random.default_rng(6)
    v = nx.parameter(g.standard_normal((3, 4)))
    q = Tensor(g.standard_normal((3, 4)))
    with Tape() as tape:
        out = straight_through(v, q)
        loss = nx.sum_(out)
    np.testing.assert_array_equal(out.data, q.data)
    tape.backward(loss, [v])
    np.testing.assert_array_equal(v.grad, np.ones((3, 4)))


def test_straight_through_shape_mismatch():
    with pytest.raises(ShapeError):
        straight_through(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_straight_through_in_one_layer_net_matches_frozen_assignment():
    # with the code assignment frozen, the identity path is the exact local derivative
    g = np.random.default_rng(7)
    cb = book(g.standard_normal((8, 3)))
    x0 = g.standard_normal((4, 5))
    w = g.standard_normal((5, 3))
    target = g.standard_normal((4, 3))
    idx = nearest_indices(x0 @ w, cb)
    code_rows = cb.codes.data[idx].astype(np.float64)

    def quantized_net(x):
        v = nx.matmul(x, Tensor(w))
        q = Tensor(code_rows + (v.data - (x0 @ w)))  # frozen assignment, moves with v
        return nx.sum_(nx.square(nx.sub(nx.straight_through(v, q), Tensor(target))))

    assert nx.grad_check(quantized_net, x0).passed


def test_perplexity_extremes_and_oracle():
    assert codebook_usage(np.full(10, 3), 8)[1] == pytest.approx(1.0)
    assert codebook_usage(np.arange(16) % 8, 8)[1] == pytest.approx(8.0)
    idx = np.random.default_rng(8).integers(0, 8, size=500)
    hist = np.bincount(idx, minlength=8).astype(np.float64)
    p = hist / hist.sum()
    ref = np.exp(-(p[p > 0] * np.log(p[p > 0])).sum())
    assert abs(codebook_usage(idx, 8)[1] - ref) < 1e-12
    assert perplexity(np.zeros(4, dtype=np.int64)) == 1.0


def test_usage_rejects_out_of_range():
    with pytest.raises(IndexError):
        codebook_usage([0, 8], 8)


def test_revive_leaves_healthy_codebook_alone():
    cb = book(np.random.default_rng(9).standard_normal((4, 2)))
    before = cb.codes.data.copy()
    batch = np.random.default_rng(10).standard_normal((6, 2))
    assert revive_dead_codes(cb, np.array([5, 5, 5, 5]), batch, 1, Rng(0)).size == 0
    assert revive_dead_codes(cb, np.zeros(4), batch, 0, Rng(0)).size == 0
    np.testing.assert_array_equal(cb.codes.data, before)


def test_revive_reseeds_dead_code_from_batch():
    cb = book(np.random.default_rng(11).standard_normal((4, 2)))
    cb.usage[:] = [3, 0, 2, 2]
    batch = np.random.default_rng(12).standard_normal((6, 2)).astype(np.float32)
    dead = revive_dead_codes(cb, cb.usage.copy(), batch, 1, Rng(1))
    np.testing.assert_array_equal(dead, [1])
    assert any(np.array_equal(cb.codes.data[1], row) for row in batch)
    assert cb.usage[1] == 0 and cb.usage[0] == 3
