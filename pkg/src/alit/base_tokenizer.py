"""Small trainable VQ tokenizer mapping 32x32 images to an 8x8 grid of codes.

It stands in for a pretrained VQGAN: patch embedding, a couple of transformer
blocks, nearest-code quantisation, and a mirrored decoder with a sigmoid
pixel head.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import numerics as nx
from .config import TrainConfig
from .numerics import Rng, ShapeError, Tape, Tensor
from .quantizer import Codebook, perplexity, quantize_batch, revive_dead_codes

log = logging.getLogger(__name__)


def patchify(images: np.ndarray, P: int) -> np.ndarray:
    """[b, H, W, C] -> [b, (H/P)*(W/P), P*P*C], raster order, row-major within a patch."""
    b, H, W, C = images.shape
    if H % P or W % P:
        raise ShapeError(f"patch size {P} does not divide image {H}x{W}")
    x = images.reshape(b, H // P, P, W // P, P, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (H // P) * (W // P), P * P * C)


def unpatchify(patches: Tensor, H: int, W: int, P: int, C: int = 3) -> Tensor:
    b = patches.shape[0]
    x = nx.reshape(patches, (b, H // P, W // P, P, P, C))
    x = nx.transpose(x, (0, 1, 3, 2, 4, 5))
    return nx.reshape(x, (b, H, W, C))


@dataclass
class TokenGrid:
    indices: np.ndarray  # [b, g, g]
    embeddings: Tensor  # [b, g*g, base_dim], straight-through
    commit_loss: Tensor | None = None
    codebook_loss: Tensor | None = None

    @property
    def flat_indices(self) -> np.ndarray:
        return self.indices.reshape(self.indices.shape[0], -1)


class BaseTokenizer:
    prefix = "base"

    def __init__(self, cfg: TrainConfig, rng: Rng):
        self.cfg = cfg
        d, n = cfg.base_dim, cfg.n_image_tokens
        pd = cfg.patch * cfg.patch * 3
        p: OrderedDict[str, Tensor] = OrderedDict()
        L.init_linear(p, "base.embed", pd, d, rng)
        p["base.enc_pos"] = nx.parameter(rng.normal((n, d)), "base.enc_pos")
        for i in range(cfg.base_depth):
            L.init_block(p, f"base.enc.{i}", d, cfg.mlp_ratio, rng)
        L.init_norm(p, "base.enc_ln", d)
        L.init_linear(p, "base.pre_quant", d, d, rng)
        p["base.dec_pos"] = nx.parameter(rng.normal((n, d)), "base.dec_pos")
        for i in range(cfg.base_depth):
            L.init_block(p, f"base.dec.{i}", d, cfg.mlp_ratio, rng)
        L.init_norm(p, "base.dec_ln", d)
        L.init_linear(p, "base.out", d, pd, rng)
        self.params = p
        self.codebook = Codebook.random(cfg.base_codes, d, rng, normalized=False, std=1.0,
                                        name="base.codebook")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values()) + [self.codebook.codes]

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict(self.params)
        out["base.codebook"] = self.codebook.codes
        return out

    def pre_quant(self, images: np.ndarray) -> Tensor:
        cfg, p = self.cfg, self.params
        x = Tensor(patchify(np.asarray(images, dtype=np.float32), cfg.patch))
        h = nx.add(L.dense(p, "base.embed", x), p["base.enc_pos"])
        h = L.stack(p, "base.enc", cfg.base_depth, h, cfg.base_heads)
        return L.dense(p, "base.pre_quant", L.norm(p, "base.enc_ln", h))

    def encode_image(self, images: np.ndarray, beta: float = 0.25, track_usage: bool = False) -> TokenGrid:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        z = self.pre_quant(images)
        q = quantize_batch(z, self.codebook, beta, track_usage)
        g = self.cfg.grid
        return TokenGrid(q.indices.reshape(-1, g, g), q.quantized, q.commit_loss, q.codebook_loss)

    def embed_indices(self, indices: np.ndarray) -> Tensor:
        idx = np.asarray(indices).reshape(len(indices), -1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.codebook.size):
            raise IndexError(f"base token index out of range [0, {self.codebook.size})")
        return nx.embedding(self.codebook.codes, idx)

    def decode_embeddings(self, emb: Tensor) -> Tensor:
        """[b, g*g, base_dim] -> images [b, H, W, 3] in (0, 1)."""
        cfg, p = self.cfg, self.params
        h = nx.add(emb, p["base.dec_pos"])
        h = L.stack(p, "base.dec", cfg.base_depth, h, cfg.base_heads)
        h = nx.sigmoid(L.dense(p, "base.out", L.norm(p, "base.dec_ln", h)))
        return unpatchify(h, cfg.image_size, cfg.image_size, cfg.patch)

    def decode_tokens(self, indices: np.ndarray) -> np.ndarray:
        return self.decode_embeddings(self.embed_indices(indices)).data


def train_base(model: BaseTokenizer, images: np.ndarray, cfg: TrainConfig, rng: Rng,
               metrics: list[dict] | None = None) -> BaseTokenizer:
    """Minimise pixel MSE plus quantiser losses with Adam.

    Codes unused for ``revive_every`` steps are re-seeded from encoder outputs.
    ``metrics`` receives one row per ``log_every`` steps (and step 0).
    """
    if len(images) == 0:
        raise ValueError("train_base needs a nonempty dataset")
    params = model.parameters()
    state = nx.AdamState.zeros_like(params)
    cb = model.codebook
    cb.reset_usage()
    for step in range(cfg.base_steps):
        batch = images[rng.integers(0, len(images), size=cfg.base_batch_size)]
        for t in params:
            t.zero_grad()
        with Tape() as tape:
            grid = model.encode_image(batch, cfg.commit_beta, track_usage=True)
            recon = model.decode_embeddings(grid.embeddings)
            mse = nx.mean(nx.square(nx.sub(recon, Tensor(batch))))
            loss = nx.add(nx.add(mse, grid.commit_loss), nx.scale(grid.codebook_loss, cfg.codebook_weight))
        tape.backward(loss, params)
        if metrics is not None and (step % cfg.log_every == 0 or step == cfg.base_steps - 1):
            metrics.append({"step": step, "loss": float(loss.data), "perplexity": perplexity(cb.usage)})
            log.info("base step %d loss %.5f ppl %.1f", step, float(loss.data), perplexity(cb.usage))
        nx.adam_step(params, [t.grad for t in params], state, cfg.base_lr, cfg.beta1, cfg.beta2)
        if (step + 1) % cfg.revive_every == 0 and step + 1 < cfg.base_steps:
            z = model.pre_quant(batch).data
            revive_dead_codes(cb, cb.usage, z, 1, rng)
            cb.reset_usage()
    return model
