"""Small reverse-mode autodiff over numpy arrays.

Operations run eagerly. While a :class:`Tape` is active, every operation whose
inputs need gradients is appended to it together with a closure computing the
vector-Jacobian product; :meth:`Tape.backward` replays the records in reverse.
Outside a tape nothing is recorded, which makes inference free of bookkeeping.

Storage is float32. Ops preserve the dtype of their inputs, so the same code
runs in float64 when :func:`grad_check` needs a high-precision path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = -1e9  # additive attention mask sentinel
DTYPE = np.float32

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    pass


class Rng:
    """SplitMix64 stream; bulk draws seed a numpy generator from one 64-bit word."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.next_u64())

    def normal(self, shape, std: float = 0.02) -> np.ndarray:
        return (self.generator().standard_normal(shape) * std).astype(DTYPE)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator().integers(low, high, size=size)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=DTYPE), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_active: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Records are appended as operations execute, so the list is topologically
    ordered by construction.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

        Leaves listed in ``params`` that the loss does not reach get a zero grad.
        Returns the mapping ``id(leaf) -> grad``.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.out) for r in self.records}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for x, gx in zip(rec.inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                key = id(x)
                if key not in produced:
                    leaves[key] = x
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        out: dict[int, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.data.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[key] = leaf.grad
        if params is not None:
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                out.setdefault(id(p), p.grad)
        return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    return tape.backward(loss, params)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    needs = bool(_active) and any(x.requires_grad for x in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _active[-1].records.append(_Record(out, inputs, vjp))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if b.shape != a.shape[a.ndim - b.ndim:] or b.ndim > a.ndim:
        raise ShapeError(f"{op}: shape {b.shape} is not a trailing sub-shape of {a.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b where b's shape equals a trailing part of a's shape."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "add")
    bshape = b.shape
    return _record(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, bshape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "sub")
    bshape = b.shape
    return _record(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, bshape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "mul")
    ad, bd, bshape = a.data, b.data, b.shape
    return _record(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, bshape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2 * g * ad,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _record(y, (a,), lambda g: (g * y * (1 - y),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    inner = c * (x + x.dtype.type(0.044715) * x * x * x)
    th = np.tanh(inner)
    y = 0.5 * x * (1 + th)

    def vjp(g):
        dinner = c * (1 + x.dtype.type(3 * 0.044715) * x * x)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * dinner),)

    return _record(y, (a,), vjp)


def sum_(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.data.dtype
    return _record(np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.broadcast_to(g, shape).astype(dt),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape, dt = a.shape, a.data.dtype
    return _record(np.asarray(a.data.mean(), dtype=dt), (a,),
                   lambda g: (np.full(shape, g / n, dtype=dt),))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([x.data for x in xs], axis=axis), xs, vjp)


def slice_(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dt = a.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dt)
        full[idx] = g
        return (full,)

    return _record(a.data[idx], (a,), vjp)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]`` for an integer array of any shape."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    shape, dt = table.shape, table.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _record(table.data[idx], (table,), vjp)


def batch_take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows per batch item: ``x[b, idx[b, j]]`` for x [B, n, d], idx [B, a]."""
    idx = np.asarray(idx)
    rows = np.arange(x.shape[0])[:, None]
    shape, dt = x.shape, x.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, (np.broadcast_to(rows, idx.shape), idx), g)
        return (full,)

    return _record(x.data[rows, idx], (x,), vjp)


def batch_put(base: Tensor, idx: np.ndarray, valid: np.ndarray, upd: Tensor) -> Tensor:
    """Copy of ``base`` [B, n, d] with rows ``idx[b, j]`` replaced by ``upd[b, j]`` where valid."""
    idx = np.asarray(idx)
    valid = np.asarray(valid, dtype=bool)
    bi, ji = np.nonzero(valid)
    ti = idx[bi, ji]
    out = base.data.copy()
    out[bi, ti] = upd.data[bi, ji]

    def vjp(g):
        gb = g.copy()
        gb[bi, ti] = 0
        gu = np.zeros(upd.shape, dtype=g.dtype)
        gu[bi, ji] = g[bi, ti]
        return gb, gu

    return _record(out, (base, upd), vjp)


# ---------------------------------------------------------------------------
# Linear algebra and normalisation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a [..., m, k] @ b [..., k, n]; a 2-D ``b`` is shared across a's leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(ad @ bd, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [..., k] @ w [k, n] (+ b [n])."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    # flatten leading dims so numpy issues one GEMM instead of a batched loop
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd).reshape(xd.shape[:-1] + (wd.shape[1],))
    if b is not None:
        out += b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: feature size {d} does not match gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        g2 = g.reshape(-1, d)
        ggain = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        gbias = g2.sum(axis=0)
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), vjp)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm along the last axis."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    inv = 1.0 / np.maximum(norm, xd.dtype.type(eps))
    y = xd * inv

    def vjp(g):
        return (inv * (g - y * (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), vjp)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | Tensor | None = None,
              weights_out: list | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v over the last two axes.

    ``mask`` is additive and constant; it must broadcast to the score shape
    [..., n_q, n_k]. Masked entries should hold ``NEG_INF``. If ``weights_out``
    is a list, the attention weights are appended to it.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    sc = qd.dtype.type(1.0 / math.sqrt(qd.shape[-1]))
    s = (qd @ np.swapaxes(kd, -1, -2)) * sc
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        try:
            np.broadcast_shapes(m.shape, s.shape)
        except ValueError:
            raise ShapeError(f"attention: mask shape {m.shape} does not fit scores {s.shape}") from None
        s = s + m.astype(s.dtype)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    if weights_out is not None:
        weights_out.append(p)

    def vjp(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * sc
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

    return _record(p @ vd, (q, k, v), vjp)


# ---------------------------------------------------------------------------
# Losses and estimators
# ---------------------------------------------------------------------------


def cross_entropy_smoothed(logits: Tensor, targets: np.ndarray, epsilon: float = 0.0,
                           weights: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy against targets smoothed to 1-eps / eps/(K-1).

    ``weights`` optionally gives a per-row weight; the result is then the
    weighted sum divided by the weight total.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    x = logits.data
    n, K = x.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} != ({n},)")
    if n and (targets.min() < 0 or targets.max() >= K):
        raise IndexError(f"cross_entropy: target index out of range [0, {K})")
    dt = x.dtype
    off = epsilon / (K - 1) if K > 1 else 0.0
    dist = np.full((n, K), off, dtype=dt)
    dist[np.arange(n), targets] = 1.0 - epsilon if K > 1 else 1.0
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    per_row = -(dist * logp).sum(axis=1)
    w = np.ones(n, dtype=dt) if weights is None else np.asarray(weights, dtype=dt)
    total = w.sum()
    loss = (per_row * w).sum() / total

    def vjp(g):
        p = np.exp(logp)
        return ((p - dist) * (w / total)[:, None] * g,)

    return _record(np.asarray(loss, dtype=dt), (logits,), vjp)


def straight_through(v: Tensor, q: Tensor) -> Tensor:
    """Forward value ``q``; gradient passes to ``v`` unchanged and is blocked for ``q``."""
    if v.shape != q.shape:
        raise ShapeError(f"straight_through: shapes {v.shape} and {q.shape} differ")
    return _record(q.data.copy(), (v,), lambda g: (g,))


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update. ``None`` grads count as zero."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("adam_step: params, grads and state lengths differ")
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} != param shape {p.shape}")
        m *= beta1
        v *= beta2
        if g is not None:
            if g.shape != p.shape:
                raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
            m += (1 - beta1) * g
            v += (1 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    n_checked: int

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_rel_error:.3e} tol={self.tol:g} n={self.n_checked}"


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, tol: float = 1e-3,
               h: float = 1e-3, max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare the tape gradient of scalar ``fn`` at ``x`` with central differences.

    Everything runs in float64: ``x`` is promoted and ``fn`` is expected to
    build any internal tensors with the dtype of its argument. ``max_entries``
    limits the number of coordinates probed (chosen with a seeded generator).
    """
    x64 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x64.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(leaf)
    tape.backward(out, [leaf])
    analytic = leaf.grad.reshape(-1)
    coords = np.arange(x64.size)
    if max_entries is not None and x64.size > max_entries:
        coords = np.sort(np.random.default_rng(seed).choice(x64.size, max_entries, replace=False))
    numeric = np.empty(len(coords))
    flat = x64.reshape(-1)
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(Tensor(x64.copy())).data)
        flat[i] = orig - h
        fm = float(fn(Tensor(x64.copy())).data)
        flat[i] = orig
        numeric[j] = (fp - fm) / (2 * h)
    err = rel_error(analytic[coords], numeric)
    return GradCheckReport(err, bool(err < tol), tol, len(coords))
