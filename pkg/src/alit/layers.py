"""Pre-norm transformer blocks over named parameter dictionaries."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor

ACT = nx.relu
Params = "OrderedDict[str, Tensor]"


def init_linear(params, name: str, n_in: int, n_out: int, rng: Rng, bias: bool = True) -> None:
    # fan-in scaling keeps attention logits O(1) at init; a fixed tiny std stalls training
    params[f"{name}.w"] = nx.parameter(rng.normal((n_in, n_out), n_in ** -0.5), f"{name}.w")
    if bias:
        params[f"{name}.b"] = nx.parameter(np.zeros(n_out), f"{name}.b")


def init_norm(params, name: str, d: int) -> None:
    params[f"{name}.g"] = nx.parameter(np.ones(d), f"{name}.g")
    params[f"{name}.b"] = nx.parameter(np.zeros(d), f"{name}.b")


def init_block(params, name: str, d: int, mlp_ratio: int, rng: Rng) -> None:
    init_norm(params, f"{name}.ln1", d)
    init_linear(params, f"{name}.qkv", d, 3 * d, rng)
    init_linear(params, f"{name}.proj", d, d, rng)
    init_norm(params, f"{name}.ln2", d)
    init_linear(params, f"{name}.fc1", d, mlp_ratio * d, rng)
    init_linear(params, f"{name}.fc2", mlp_ratio * d, d, rng)


def dense(params, name: str, x: Tensor) -> Tensor:
    return nx.linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def norm(params, name: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def block(params, name: str, x: Tensor, heads: int, mask: np.ndarray | None = None,
          attn_out: list | None = None) -> Tensor:
    """x [B, n, d] -> [B, n, d]. ``mask`` is additive, broadcastable to [B, heads, n, n]."""
    B, n, d = x.shape
    dh = d // heads
    h = norm(params, f"{name}.ln1", x)
    qkv = dense(params, f"{name}.qkv", h)

    def split_heads(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (B, n, heads, dh)), (0, 2, 1, 3))

    q = split_heads(nx.slice_(qkv, 0, d, -1))
    k = split_heads(nx.slice_(qkv, d, 2 * d, -1))
    v = split_heads(nx.slice_(qkv, 2 * d, 3 * d, -1))
    a = nx.attention(q, k, v, mask, attn_out)
    a = nx.reshape(nx.transpose(a, (0, 2, 1, 3)), (B, n, d))
    x = nx.add(x, dense(params, f"{name}.proj", a))
    h = norm(params, f"{name}.ln2", x)
    h = dense(params, f"{name}.fc2", ACT(dense(params, f"{name}.fc1", h)))
    return nx.add(x, h)


def stack(params, prefix: str, depth: int, x: Tensor, heads: int, mask=None,
          attn_out: list | None = None) -> Tensor:
    for i in range(depth):
        x = block(params, f"{prefix}.{i}", x, heads, mask, attn_out)
    return x
