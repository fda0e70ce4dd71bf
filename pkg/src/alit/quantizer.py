"""Nearest-code vector quantisation shared by the 2D and 1D codebooks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Rng, ShapeError, Tensor


class Codebook:
    """Learnable code matrix plus a running usage histogram.

    In normalised mode the rows are kept at unit L2 norm: callers re-project
    with :meth:`renormalize` after each optimiser step, and queries are
    normalised before matching.
    """

    def __init__(self, codes: Tensor, normalized: bool = False):
        if codes.ndim != 2 or codes.shape[0] < 1 or codes.shape[1] < 1:
            raise ShapeError(f"codebook needs shape [K>=1, d>=1], got {codes.shape}")
        self.codes = codes
        self.normalized = normalized
        self.usage = np.zeros(codes.shape[0], dtype=np.int64)
        if normalized:
            self.renormalize()

    @classmethod
    def random(cls, K: int, d: int, rng: Rng, normalized: bool = False, std: float = 0.02,
               name: str = "codebook") -> "Codebook":
        return cls(nx.parameter(rng.normal((K, d), std), name), normalized)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def renormalize(self) -> None:
        c = self.codes.data
        c /= np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12).astype(c.dtype)

    def reset_usage(self) -> None:
        self.usage[:] = 0


def _prepare(v: np.ndarray, normalized: bool) -> np.ndarray:
    if not normalized:
        return v
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)


def nearest_indices(v: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Row-wise argmin of squared distance; ties resolve to the lowest index."""
    v = np.asarray(v)
    if v.shape[-1] != codebook.dim:
        raise ShapeError(f"query dim {v.shape[-1]} != codebook dim {codebook.dim}")
    flat = _prepare(v.reshape(-1, codebook.dim).astype(np.float64), codebook.normalized)
    codes = _prepare(codebook.codes.data.astype(np.float64), codebook.normalized)
    # |v|^2 is constant per row, so it does not affect the ranking.
    d = (codes * codes).sum(axis=1)[None, :] - 2.0 * (flat @ codes.T)
    return d.argmin(axis=1).reshape(v.shape[:-1])


def nearest_code(v, codebook: Codebook) -> int:
    """Index of the closest code to a single vector."""
    v = np.asarray(v.data if isinstance(v, Tensor) else v)
    if v.ndim != 1:
        raise ShapeError(f"nearest_code expects one vector, got shape {v.shape}")
    return int(nearest_indices(v[None, :], codebook)[0])


@dataclass
class Quantized:
    indices: np.ndarray
    quantized: Tensor  # straight-through output
    commit_loss: Tensor
    codebook_loss: Tensor


def quantize_batch(V: Tensor, codebook: Codebook, beta: float = 0.25, track_usage: bool = True) -> Quantized:
    """Quantise rows of ``V`` [..., d].

    Returns straight-through quantised rows, ``beta * mean(|V - sg(Q)|^2)`` and
    ``mean(|sg(V) - Q|^2)``; the means run over all elements.
    """
    if V.shape[-1] != codebook.dim:
        raise ShapeError(f"quantize_batch: input dim {V.shape[-1]} != codebook dim {codebook.dim}")
    idx = nearest_indices(V.data, codebook)
    Q = nx.embedding(codebook.codes, idx)
    commit = nx.scale(nx.mean(nx.square(nx.sub(V, nx.stop_gradient(Q)))), beta)
    cb = nx.mean(nx.square(nx.sub(nx.stop_gradient(V), Q)))
    if track_usage:
        codebook.usage += np.bincount(idx.reshape(-1), minlength=codebook.size)
    return Quantized(idx, nx.straight_through(V, Q), commit, cb)


def straight_through(v: Tensor, q: Tensor) -> Tensor:
    return nx.straight_through(v, q)


def codebook_usage(indices, K: int) -> tuple[np.ndarray, float]:
    """Histogram and perplexity exp(H) of the empirical code distribution."""
    idx = np.asarray(indices).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise IndexError(f"code index out of range [0, {K})")
    hist = np.bincount(idx, minlength=K)
    return hist, perplexity(hist)


def perplexity(hist: np.ndarray) -> float:
    total = hist.sum()
    if total == 0:
        return 1.0
    p = hist[hist > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def revive_dead_codes(codebook: Codebook, usage: np.ndarray, batch: np.ndarray, threshold: float,
                      rng: Rng) -> np.ndarray:
    """Re-seed codes whose usage is below ``threshold`` from random rows of ``batch``.

    Returns the indices of the revived codes. Their usage counters are reset.
    """
    batch = np.asarray(batch).reshape(-1, codebook.dim)
    if batch.shape[0] < 1:
        raise ValueError("revive_dead_codes needs at least one batch row")
    dead = np.flatnonzero(np.asarray(usage) < threshold)
    if dead.size == 0:
        return dead
    rows = rng.integers(0, batch.shape[0], size=dead.size)
    codebook.codes.data[dead] = batch[rows].astype(codebook.codes.data.dtype)
    if codebook.normalized:
        codebook.renormalize()
    codebook.usage[dead] = 0
    return dead
