import numpy as np
import pytest

from alit.base_tokenizer import BaseTokenizer, patchify, train_base, unpatchify
from alit.config import TrainConfig
from alit.data import gen_shapes
from alit.numerics import Rng, ShapeError, Tensor
from alit.quantizer import Codebook, perplexity
from alit import numerics as nx

SMALL = TrainConfig(base_dim=32, base_codes=32, base_heads=2, base_depth=1, mlp_ratio=2)


def test_patchify_single_patch_is_flat_image():
    img = np.random.default_rng(0).random((1, 4, 4, 3))
    np.testing.assert_array_equal(patchify(img, 4)[0, 0], img.reshape(-1))


def test_patchify_constant_image():
    p = patchify(np.full((2, 8, 8, 3), 0.3), 4)
    assert p.shape == (2, 4, 48)
    assert np.all(p == 0.3)


def test_patchify_matches_index_arithmetic():
    img = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    got = patchify(img, 2)[0]
    expected = np.array([[img[0, 2 * pr + r, 2 * pc + c, 0] for r in range(2) for c in range(2)]
                         for pr in range(2) for pc in range(2)])
    np.testing.assert_array_equal(got, expected)
    assert sorted(got.reshape(-1)) == list(range(16))


def test_patchify_rejects_indivisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 6, 6, 3)), 4)


def test_unpatchify_inverts_patchify():
    img = np.random.default_rng(1).random((2, 8, 8, 3))
    back = unpatchify(Tensor(patchify(img, 4)), 8, 8, 4, 3).data
    np.testing.assert_array_equal(back, img)


def test_encode_default_shape_and_determinism():
    model = BaseTokenizer(TrainConfig(), Rng(0))
    img = gen_shapes(1, 0).images
    grid = model.encode_image(np.concatenate([img, img]))
    assert grid.indices.shape == (2, 8, 8)
    assert grid.embeddings.shape == (2, 64, 128)
    np.testing.assert_array_equal(grid.indices[0], grid.indices[1])
    assert grid.indices.min() >= 0 and grid.indices.max() < 512


def test_single_code_codebook_gives_zero_indices():
    model = BaseTokenizer(SMALL, Rng(0))
    model.codebook = Codebook(nx.parameter(np.ones((1, 32), dtype=np.float32)))
    grid = model.encode_image(gen_shapes(3, 1).images)
    assert np.all(grid.indices == 0)


def test_decode_shape_range_and_purity():
    model = BaseTokenizer(SMALL, Rng(2))
    idx = np.random.default_rng(3).integers(0, 32, size=(2, 8, 8))
    a = model.decode_tokens(idx)
    b = model.decode_tokens(idx.copy())
    assert a.shape == (2, 32, 32, 3)
    assert np.all((a > 0) & (a < 1))
    np.testing.assert_array_equal(a, b)


def test_decode_rejects_bad_index():
    model = BaseTokenizer(SMALL, Rng(2))
    with pytest.raises(IndexError):
        model.decode_tokens(np.full((1, 8, 8), 32))


def test_train_base_reduces_loss_and_keeps_codes_alive():
    cfg = SMALL.replace(base_steps=201, base_batch_size=8, log_every=200, base_lr=1e-3, revive_every=50)
    model = BaseTokenizer(cfg, Rng(0))
    rows: list[dict] = []
    train_base(model, gen_shapes(64, 0).images, cfg, Rng(1), rows)
    assert rows[0]["step"] == 0 and rows[1]["step"] == 200
    assert rows[1]["loss"] < rows[0]["loss"]
    assert perplexity(model.codebook.usage) > 1.0


def test_train_base_is_deterministic():
    cfg = SMALL.replace(base_steps=5, base_batch_size=4)
    images = gen_shapes(16, 0).images
    outs = []
    for _ in range(2):
        model = BaseTokenizer(cfg, Rng(0))
        train_base(model, images, cfg, Rng(1))
        outs.append({k: t.data.copy() for k, t in model.named_tensors().items()})
    for k in outs[0]:
        np.testing.assert_array_equal(outs[0][k], outs[1][k])


def test_train_base_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train_base(BaseTokenizer(SMALL, Rng(0)), np.zeros((0, 32, 32, 3), np.float32), SMALL, Rng(0))
