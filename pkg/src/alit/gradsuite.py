"""Finite-difference gradient suite for every differentiable op and the full rollout stack."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .numerics import GradCheckReport, Rng, Tensor, grad_check

Case = Callable[[np.random.Generator, int], tuple[Callable[[Tensor], Tensor], np.ndarray]]

SHAPES = [(3, 4), (2, 3, 5), (2, 2, 3, 4)]


def _away_from_zero(g: np.random.Generator, shape) -> np.ndarray:
    x = g.standard_normal(shape)
    return np.sign(x) * (0.1 + np.abs(x))


def _probe(fn_out: Tensor, g: np.random.Generator) -> Tensor:
    # contract with a fixed random tensor so every output entry matters
    w = Tensor(g.standard_normal(fn_out.shape))
    return nx.sum_(nx.mul(fn_out, w))


def _unary(op) -> Case:
    def case(g, k):
        shape = SHAPES[k]
        w = g.standard_normal(shape)
        return (lambda x: nx.sum_(nx.mul(op(x), Tensor(w)))), _away_from_zero(g, shape)
    return case


def _binary(op, second_suffix: bool) -> Case:
    def case(g, k):
        shape = SHAPES[k]
        other = g.standard_normal(shape[1:] if second_suffix else shape) + 2.0
        w = g.standard_normal(shape)
        return (lambda x: nx.sum_(nx.mul(op(x, Tensor(other)), Tensor(w)))), g.standard_normal(shape)
    return case


def _binary_rhs(op) -> Case:
    def case(g, k):
        shape = SHAPES[k]
        first = g.standard_normal(shape)
        w = g.standard_normal(shape)
        return (lambda x: nx.sum_(nx.mul(op(Tensor(first), x), Tensor(w)))), g.standard_normal(shape[1:])
    return case


def _reduce(op) -> Case:
    def case(g, k):
        return (lambda x: nx.square(op(x))), g.standard_normal(SHAPES[k])
    return case


def _reshape(g, k):
    shape = SHAPES[k]
    w = g.standard_normal((int(np.prod(shape)),))
    return (lambda x: nx.sum_(nx.mul(nx.reshape(x, (-1,)), Tensor(w)))), g.standard_normal(shape)


def _transpose(g, k):
    shape = SHAPES[k]
    axes = tuple(reversed(range(len(shape))))
    w = g.standard_normal(tuple(shape[a] for a in axes))
    return (lambda x: nx.sum_(nx.mul(nx.transpose(x, axes), Tensor(w)))), g.standard_normal(shape)


def _concat(g, k):
    shape = SHAPES[k]
    other = Tensor(g.standard_normal(shape))
    w = g.standard_normal(shape[:-1] + (2 * shape[-1],))
    fn = lambda x: nx.sum_(nx.mul(nx.concat([other, x], axis=-1), Tensor(w)))  # noqa: E731
    return fn, g.standard_normal(shape)


def _slice(g, k):
    shape = SHAPES[k]
    stop = shape[-1] - 1
    w = g.standard_normal(shape[:-1] + (stop - 1,))
    fn = lambda x: nx.sum_(nx.mul(nx.slice_(x, 1, stop, x.ndim - 1), Tensor(w)))  # noqa: E731
    return fn, g.standard_normal(shape)


def _embedding(g, k):
    V, d = [(5, 3), (7, 4), (6, 2)][k]
    idx = g.integers(0, V, size=(2, 4))
    w = g.standard_normal((2, 4, d))
    return (lambda x: nx.sum_(nx.mul(nx.embedding(x, idx), Tensor(w)))), g.standard_normal((V, d))


def _batch_take(g, k):
    B, n, d = [(2, 5, 3), (3, 4, 2), (1, 6, 4)][k]
    idx = np.stack([g.permutation(n)[:3] for _ in range(B)])
    w = g.standard_normal((B, 3, d))
    return (lambda x: nx.sum_(nx.mul(nx.batch_take(x, idx), Tensor(w)))), g.standard_normal((B, n, d))


def _batch_put(g, k):
    B, n, d = [(2, 5, 3), (3, 4, 2), (1, 6, 4)][k]
    idx = np.stack([g.permutation(n)[:3] for _ in range(B)])
    valid = np.ones((B, 3), bool)
    valid[0, -1] = False
    base = g.standard_normal((B, n, d))
    w = g.standard_normal((B, n, d))

    def fn(x):
        upd = nx.mul(x, x)  # exercise both inputs through one leaf
        return nx.sum_(nx.mul(nx.batch_put(nx.add(Tensor(base), nx.scale(nx.sum_(x), 0.1)), idx, valid, upd),
                              Tensor(w)))
    return fn, g.standard_normal((B, 3, d))


def _matmul(g, k):
    a_shape, b_shape = [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 3))][k]
    b = Tensor(g.standard_normal(b_shape))
    return (lambda x: _probe_fixed(nx.matmul(x, b), g_seed=k)), g.standard_normal(a_shape)


def _matmul_rhs(g, k):
    a_shape, b_shape = [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 3))][k]
    a = Tensor(g.standard_normal(a_shape))
    return (lambda x: _probe_fixed(nx.matmul(a, x), g_seed=k)), g.standard_normal(b_shape)


def _probe_fixed(out: Tensor, g_seed: int) -> Tensor:
    return _probe(out, np.random.default_rng(1000 + g_seed))


def _linear(g, k):
    shape = SHAPES[k]
    w = Tensor(g.standard_normal((shape[-1], 3)))
    b = Tensor(g.standard_normal(3))
    return (lambda x: _probe_fixed(nx.linear(x, w, b), k)), g.standard_normal(shape)


def _linear_w(g, k):
    shape = SHAPES[k]
    x0 = Tensor(g.standard_normal(shape))
    b = Tensor(g.standard_normal(3))
    return (lambda w: _probe_fixed(nx.linear(x0, w, b), k)), g.standard_normal((shape[-1], 3))


def _softmax(g, k):
    shape = SHAPES[k]
    return (lambda x: _probe_fixed(nx.softmax(x, -1), k)), g.standard_normal(shape)


def _layer_norm(g, k):
    shape = SHAPES[k]
    gain = Tensor(g.standard_normal(shape[-1]))
    bias = Tensor(g.standard_normal(shape[-1]))
    return (lambda x: _probe_fixed(nx.layer_norm(x, gain, bias), k)), g.standard_normal(shape)


def _layer_norm_gain(g, k):
    shape = SHAPES[k]
    x0 = Tensor(g.standard_normal(shape))
    bias = Tensor(g.standard_normal(shape[-1]))
    return (lambda w: _probe_fixed(nx.layer_norm(x0, w, bias), k)), g.standard_normal(shape[-1])


def _l2(g, k):
    shape = SHAPES[k]
    return (lambda x: _probe_fixed(nx.l2_normalize(x), k)), g.standard_normal(shape)


def _attention(which: int, masked: bool) -> Case:
    def case(g, k):
        B, h, n, d = [(1, 1, 3, 4), (2, 2, 4, 3), (2, 1, 5, 2)][k]
        qkv = [g.standard_normal((B, h, n, d)) for _ in range(3)]
        mask = None
        if masked:
            keep = np.ones((B, n), bool)
            keep[:, -1] = False
            mask = np.where(keep, 0.0, nx.NEG_INF)[:, None, None, :]

        def fn(x):
            args = [Tensor(a) for a in qkv]
            args[which] = x
            return _probe_fixed(nx.attention(*args, mask=mask), k)
        return fn, qkv[which].copy()
    return case


def _cross_entropy(g, k):
    n, K = [(4, 3), (6, 5), (3, 8)][k]
    targets = g.integers(0, K, size=n)
    weights = g.random(n) + 0.5 if k == 2 else None
    return (lambda x: nx.cross_entropy_smoothed(x, targets, 0.1, weights)), g.standard_normal((n, K))


def _straight_through(g, k):
    shape = SHAPES[k]
    offset = g.standard_normal(shape)

    def fn(x):
        # q follows v by a constant shift, so the identity backward is the true derivative
        q = Tensor(x.data + offset)
        return _probe_fixed(nx.mul(nx.straight_through(x, q), x), k)
    return fn, g.standard_normal(shape)


OP_CASES: dict[str, Case] = {
    "add": _binary(nx.add, True),
    "add_rhs": _binary_rhs(nx.add),
    "sub": _binary(nx.sub, False),
    "sub_rhs": _binary_rhs(nx.sub),
    "mul": _binary(nx.mul, True),
    "mul_rhs": _binary_rhs(nx.mul),
    "scale": _unary(lambda x: nx.scale(x, -1.7)),
    "square": _unary(nx.square),
    "abs": _unary(nx.abs_),
    "sigmoid": _unary(nx.sigmoid),
    "relu": _unary(nx.relu),
    "gelu": _unary(nx.gelu),
    "sum": _reduce(nx.sum_),
    "mean": _reduce(nx.mean),
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "slice": _slice,
    "embedding": _embedding,
    "batch_take": _batch_take,
    "batch_put": _batch_put,
    "matmul": _matmul,
    "matmul_rhs": _matmul_rhs,
    "linear": _linear,
    "linear_weight": _linear_w,
    "softmax": _softmax,
    "layer_norm": _layer_norm,
    "layer_norm_gain": _layer_norm_gain,
    "l2_normalize": _l2,
    "attention_q": _attention(0, False),
    "attention_k": _attention(1, False),
    "attention_v": _attention(2, False),
    "attention_masked": _attention(1, True),
    "cross_entropy": _cross_entropy,
    "straight_through": _straight_through,
}

STACK_SHAPES = [
    dict(batch=1, iterations=2, heads=1),
    dict(batch=2, iterations=3, heads=2),
    dict(batch=2, iterations=2, heads=2),
]


def tiny_config(heads: int = 2, iterations: int = 3) -> TrainConfig:
    return TrainConfig(image_size=8, patch=4, base_dim=8, base_codes=16, base_depth=1, base_heads=2,
                       d_model=8, heads=heads, enc_depth=2, dec_depth=2, mlp_ratio=2, factor_dim=4,
                       latent_codes=8, atomic=2, iterations=iterations)


def stack_case(k: int, halting: bool = True):
    """Loss over a full rollout (encoder, factorisation, decoder, pixel head) as a function
    of the input image-token embeddings. The latent bottleneck is left continuous so the
    loss is smooth; the straight-through estimator is covered by its own case."""
    from .base_tokenizer import TokenGrid
    from .rollout import AlitModel, run_rollout

    spec = STACK_SHAPES[k]
    cfg = tiny_config(spec["heads"], spec["iterations"])
    model = AlitModel(cfg, Rng(100 + k))
    for t in model.named_tensors().values():
        t.data = t.data.astype(np.float64)
    g = np.random.default_rng(200 + k)
    B = spec["batch"]
    idx = g.integers(0, cfg.base_codes, size=(B, cfg.grid, cfg.grid))
    targets = idx.reshape(-1)
    images = g.random((B, cfg.image_size, cfg.image_size, 3))
    emb0 = model.base.codebook.codes.data[idx.reshape(B, -1)]

    def fn(x: Tensor) -> Tensor:
        grid = TokenGrid(idx, x)
        trace = run_rollout(model, grid, cfg.iterations, halting=halting, images=images, continuous=True)
        total = None
        for rec in trace.records:
            ce = nx.cross_entropy_smoothed(nx.reshape(rec.logits, (-1, cfg.base_codes)), targets, 0.1)
            l1 = nx.mean(nx.abs_(nx.sub(rec.pixels, Tensor(images))))
            term = nx.add(ce, l1)
            total = term if total is None else nx.add(total, term)
        return total

    return fn, emb0


def iter_cases(n_shapes: int = 3) -> Iterator[tuple[str, int, Callable[[Tensor], Tensor], np.ndarray]]:
    for name, case in OP_CASES.items():
        for k in range(n_shapes):
            g = np.random.default_rng(k)
            fn, x = case(g, k)
            yield name, k, fn, x
    for k in range(min(n_shapes, len(STACK_SHAPES))):
        fn, x = stack_case(k)
        yield "enc_dec_stack", k, fn, x


def run_suite(tol: float = 1e-3, h: float = 1e-3, n_shapes: int = 3) -> list[tuple[str, int, GradCheckReport]]:
    return [(name, k, grad_check(fn, x, tol=tol, h=h)) for name, k, fn, x in iter_cases(n_shapes)]
