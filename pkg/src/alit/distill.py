"""One 2D -> 1D -> 2D distillation step: encoder, factorised quantisation, decoder.

The same parameters are reused at every rollout iteration. Image tokens and
latent tokens are always concatenated in the order [image/mask ; latent].
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import numerics as nx
from .config import TrainConfig
from .numerics import NEG_INF, Rng, ShapeError, Tensor
from .quantizer import Codebook, Quantized, quantize_batch


@dataclass
class LatentSequence:
    tokens: Tensor  # [B, m, d_model], continuous encoder state
    slot_ids: np.ndarray  # [m], strictly increasing
    factored: Tensor | None = None  # [B, m, factor_dim], unit rows
    indices: np.ndarray | None = None  # [B, m]

    @property
    def count(self) -> int:
        return len(self.slot_ids)

    def extend(self, fresh: "LatentSequence") -> "LatentSequence":
        """Append fresh latents; their slots must all come after the existing ones."""
        if self.count and fresh.count and fresh.slot_ids.min() <= self.slot_ids.max():
            raise ValueError(f"latent slots {fresh.slot_ids.tolist()} overlap or precede existing slots "
                             f"up to {int(self.slot_ids.max())}")
        return LatentSequence(nx.concat([self.tokens, fresh.tokens], axis=1),
                              np.concatenate([self.slot_ids, fresh.slot_ids]))


EMBED_STD = 1.0


class DistillModel:
    def __init__(self, cfg: TrainConfig, rng: Rng):
        self.cfg = cfg
        d, n = cfg.d_model, cfg.n_image_tokens
        p: OrderedDict[str, Tensor] = OrderedDict()
        L.init_linear(p, "alit.in_proj", cfg.base_dim, d, rng)
        # unit-scale tables: slot and position identity must survive the first residual update,
        # otherwise all latents (and all mask queries) collapse to the same vector
        p["alit.image_pos"] = nx.parameter(rng.normal((n, d), EMBED_STD), "alit.image_pos")
        p["alit.latent_init"] = nx.parameter(rng.normal((cfg.max_tokens, d), EMBED_STD), "alit.latent_init")
        p["alit.latent_pos"] = nx.parameter(rng.normal((cfg.max_tokens, d), EMBED_STD), "alit.latent_pos")
        p["alit.mask_token"] = nx.parameter(rng.normal((d,), EMBED_STD), "alit.mask_token")
        p["alit.mask_pos"] = nx.parameter(rng.normal((n, d), EMBED_STD), "alit.mask_pos")
        for i in range(cfg.enc_depth):
            L.init_block(p, f"alit.enc.{i}", d, cfg.mlp_ratio, rng)
        L.init_norm(p, "alit.enc_ln", d)
        L.init_linear(p, "alit.factor", d, cfg.factor_dim, rng)
        L.init_linear(p, "alit.defactor", cfg.factor_dim, d, rng)
        for i in range(cfg.dec_depth):
            L.init_block(p, f"alit.dec.{i}", d, cfg.mlp_ratio, rng)
        L.init_norm(p, "alit.dec_ln", d)
        L.init_linear(p, "alit.head", d, cfg.base_codes, rng)
        self.params = p
        self.codebook = Codebook.random(cfg.latent_codes, cfg.factor_dim, rng, normalized=True,
                                        name="alit.codebook")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values()) + [self.codebook.codes]

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict(self.params)
        out["alit.codebook"] = self.codebook.codes
        return out

    # -- inputs -------------------------------------------------------------

    def embed_image_tokens(self, emb: Tensor) -> Tensor:
        """Base-token embeddings [B, n, base_dim] -> encoder tokens with 2D positions."""
        if emb.shape[-1] != self.cfg.base_dim:
            raise ShapeError(f"image token dim {emb.shape[-1]} != base_dim {self.cfg.base_dim}")
        return nx.add(L.dense(self.params, "alit.in_proj", emb), self.params["alit.image_pos"])

    def init_latents(self, start: int, stop: int, batch: int) -> LatentSequence:
        """Fresh learned latents for slots [start, stop), broadcast over the batch."""
        if not 0 <= start < stop <= self.cfg.max_tokens:
            raise ValueError(f"slot range [{start}, {stop}) outside [0, {self.cfg.max_tokens})")
        slots = np.arange(start, stop)
        p = self.params
        per_slot = nx.add(nx.embedding(p["alit.latent_init"], slots), nx.embedding(p["alit.latent_pos"], slots))
        zeros = Tensor(np.zeros((batch, len(slots), self.cfg.d_model), dtype=per_slot.data.dtype))
        return LatentSequence(nx.add(zeros, per_slot), slots)

    # -- encoder ------------------------------------------------------------

    def distill_encode(self, image_tokens: Tensor, latents: LatentSequence,
                       valid: np.ndarray | None = None) -> tuple[Tensor, LatentSequence]:
        """Joint self-attention over [image ; latent]; returns both updated halves.

        ``valid`` [B, a] marks real image tokens when rows are padded to a
        common length; padded keys are masked out.
        """
        B, a, d = image_tokens.shape
        if d != self.cfg.d_model or latents.tokens.shape[-1] != d:
            raise ShapeError(f"distill_encode: token width {d} / {latents.tokens.shape[-1]} != d_model")
        if latents.count < 1:
            raise ValueError("distill_encode needs at least one latent token")
        m = latents.count
        x = nx.concat([image_tokens, latents.tokens], axis=1) if a else latents.tokens
        mask = None
        if valid is not None and a and not np.all(valid):
            keep = np.concatenate([np.asarray(valid, bool), np.ones((B, m), bool)], axis=1)
            mask = np.where(keep, 0.0, NEG_INF).astype(np.float32)[:, None, None, :]
        x = L.stack(self.params, "alit.enc", self.cfg.enc_depth, x, self.cfg.heads, mask)
        img = nx.slice_(x, 0, a, 1) if a else image_tokens
        lat = nx.slice_(x, a, a + m, 1) if a else x
        return img, LatentSequence(lat, latents.slot_ids)

    # -- bottleneck ---------------------------------------------------------

    def factorize(self, latents: LatentSequence) -> Tensor:
        h = L.norm(self.params, "alit.enc_ln", latents.tokens)
        return nx.l2_normalize(L.dense(self.params, "alit.factor", h))

    def defactorize(self, quantized: Tensor) -> Tensor:
        return L.dense(self.params, "alit.defactor", quantized)

    def quantize(self, latents: LatentSequence, beta: float = 0.25, track_usage: bool = False,
                 continuous: bool = False) -> Quantized:
        f = self.factorize(latents)
        latents.factored = f
        if continuous:
            zero = Tensor(np.zeros((), dtype=f.data.dtype))
            latents.indices = None
            return Quantized(np.zeros(f.shape[:-1], dtype=np.int64), f, zero, zero)
        q = quantize_batch(f, self.codebook, beta, track_usage)
        latents.indices = q.indices
        return q

    def lookup_codes(self, indices: np.ndarray) -> Tensor:
        return nx.embedding(self.codebook.codes, np.asarray(indices))

    # -- decoder ------------------------------------------------------------

    def distill_decode(self, quantized: Tensor, slot_ids: np.ndarray, attn_out: list | None = None,
                       return_hidden: bool = False):
        """Quantised factored latents [B, m, factor_dim] -> logits [B, n_image_tokens, base_codes].

        ``attn_out`` collects per-layer decoder attention weights [B, heads, n+m, n+m].
        """
        if quantized.shape[1] < 1:
            raise ValueError("distill_decode needs a nonempty latent sequence")
        cfg, p = self.cfg, self.params
        B = quantized.shape[0]
        n = cfg.n_image_tokens
        lat = nx.add(self.defactorize(quantized), nx.embedding(p["alit.latent_pos"], np.asarray(slot_ids)))
        masks = nx.add(p["alit.mask_pos"], p["alit.mask_token"])
        zeros = Tensor(np.zeros((B, n, cfg.d_model), dtype=masks.data.dtype))
        x = nx.concat([nx.add(zeros, masks), lat], axis=1)
        x = L.stack(p, "alit.dec", cfg.dec_depth, x, cfg.heads, None, attn_out)
        h = L.norm(p, "alit.dec_ln", nx.slice_(x, 0, n, 1))
        logits = L.dense(p, "alit.head", h)
        return (logits, h) if return_hidden else logits

    def soft_embeddings(self, logits: Tensor, base_codebook: Codebook) -> Tensor:
        """Expected base-code embedding under softmax(logits): the pixel-path bridge."""
        return nx.matmul(nx.softmax(logits, -1), base_codebook.codes)
