"""Recurrent rollout: grow latent memory, halt reconstructed image tokens, record a trace."""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .base_tokenizer import BaseTokenizer, TokenGrid
from .config import TrainConfig
from .distill import DistillModel, LatentSequence
from .numerics import Rng, ShapeError, Tensor
from .quantizer import Codebook, Quantized

TRACE_HEADER = ["image_id", "iteration", "token_count", "token_ce", "pixel_l1", "halted_count"]


class AlitModel:
    """Base tokenizer plus distillation encoder/decoder, built from one seeded stream."""

    def __init__(self, cfg: TrainConfig, rng: Rng | None = None):
        rng = rng or Rng(cfg.seed)
        self.cfg = cfg
        self.base = BaseTokenizer(cfg, rng)
        self.distill = DistillModel(cfg, rng)

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        out = self.base.named_tensors()
        out.update(self.distill.named_tensors())
        return out

    @property
    def latent_codebook(self) -> Codebook:
        return self.distill.codebook

    def logits_to_pixels(self, logits: Tensor) -> Tensor:
        return self.base.decode_embeddings(self.distill.soft_embeddings(logits, self.base.codebook))

    def decode_indices(self, indices: np.ndarray) -> np.ndarray:
        """Latent code indices [B, m] (slots 0..m-1) -> images [B, H, W, 3]."""
        idx = np.atleast_2d(np.asarray(indices))
        if idx.size and (idx.min() < 0 or idx.max() >= self.latent_codebook.size):
            raise IndexError(f"latent index out of range [0, {self.latent_codebook.size})")
        q = self.distill.lookup_codes(idx)
        logits = self.distill.distill_decode(q, np.arange(idx.shape[1]))
        return self.logits_to_pixels(logits).data


@dataclass(frozen=True)
class TokenSchedule:
    atomic: int
    iterations: int

    def tokens(self, t: int) -> int:
        if not 1 <= t <= self.iterations:
            raise ValueError(f"iteration {t} outside [1, {self.iterations}]")
        return self.atomic * t

    @property
    def max_tokens(self) -> int:
        return self.atomic * self.iterations


def token_schedule(t: int, cfg: TrainConfig) -> int:
    return TokenSchedule(cfg.atomic, cfg.iterations).tokens(t)


def halting_mask(logits, original_indices: np.ndarray, policy: str | None = "argmax") -> np.ndarray:
    """Active (not halted) image tokens: those whose argmax reconstruction misses the original code."""
    lg = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    orig = np.asarray(original_indices)
    if lg.shape[:-1] != orig.shape:
        raise ShapeError(f"halting_mask: logits {lg.shape} do not match indices {orig.shape}")
    if policy in (None, "off", "none"):
        return np.ones(orig.shape, dtype=bool)
    if policy != "argmax":
        raise ValueError(f"unknown halting policy {policy!r}")
    return lg.argmax(axis=-1) != orig


@dataclass
class IterationRecord:
    iteration: int
    latents: LatentSequence
    active: np.ndarray  # [B, n] image tokens fed to the encoder this iteration
    quantized: Quantized | None = None
    logits: Tensor | None = None
    pixels: Tensor | None = None
    token_ce: np.ndarray | None = None  # per image, unsmoothed
    pixel_l1: np.ndarray | None = None  # per image
    attn: list | None = None  # decoder attention weights per layer

    @property
    def token_count(self) -> int:
        return self.latents.count

    @property
    def halted_count(self) -> np.ndarray:
        return (~self.active).sum(axis=1)


@dataclass
class RolloutTrace:
    records: list[IterationRecord]
    codebook: Codebook
    image_tokens: list[Tensor] = field(default_factory=list)  # encoder image-token state per iteration

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> IterationRecord:
        return self.records[i]

    def to_csv(self, image_ids=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        B = self.records[0].active.shape[0]
        ids = range(B) if image_ids is None else image_ids
        for b, image_id in enumerate(ids):
            for r in self.records:
                ce = "" if r.token_ce is None else f"{r.token_ce[b]:.6f}"
                l1 = "" if r.pixel_l1 is None else f"{r.pixel_l1[b]:.6f}"
                w.writerow([image_id, r.iteration, r.token_count, ce, l1, int(r.halted_count[b])])
        return buf.getvalue()


def per_image_ce(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Unsmoothed cross-entropy averaged over token positions, per image."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return -picked.mean(axis=-1)


def _active_index(active: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    counts = active.sum(axis=1)
    width = int(counts.max()) if counts.size else 0
    idx = np.zeros((active.shape[0], width), dtype=np.int64)
    valid = np.zeros((active.shape[0], width), dtype=bool)
    for b in range(active.shape[0]):
        pos = np.flatnonzero(active[b])
        idx[b, : len(pos)] = pos
        valid[b, : len(pos)] = True
    return idx, valid


def run_rollout(model: AlitModel, grid: TokenGrid, T: int, *, halting: bool = False,
                decode: str = "all", images: np.ndarray | None = None, beta: float = 0.25,
                track_usage: bool = False, record_attn: bool = False,
                continuous: bool = False) -> RolloutTrace:
    """Unroll the shared encoder/decoder for ``T`` iterations.

    Each iteration appends ``atomic`` fresh latents, optionally halts image
    tokens already reconstructed at the previous iteration, runs the encoder
    over the active image tokens plus all latents, and (when ``decode`` is
    ``"all"``, or on the last iteration for ``"last"``) quantises the latents
    and decodes logits for every image-token position. With ``images`` given,
    decoded iterations also produce pixels and per-image L1.
    """
    cfg = model.cfg
    sched = TokenSchedule(cfg.atomic, cfg.iterations)
    if not 1 <= T <= cfg.iterations:
        raise ValueError(f"T={T} outside [1, {cfg.iterations}]")
    if decode not in ("all", "last"):
        raise ValueError(f"decode must be 'all' or 'last', got {decode!r}")
    dm = model.distill
    orig = grid.flat_indices
    B, n = orig.shape
    img = dm.embed_image_tokens(grid.embeddings)
    active = np.ones((B, n), dtype=bool)
    latents: LatentSequence | None = None
    prev_logits = None
    trace = RolloutTrace([], dm.codebook)
    for t in range(1, T + 1):
        lo = sched.tokens(t - 1) if t > 1 else 0
        fresh = dm.init_latents(lo, sched.tokens(t), B)
        latents = fresh if latents is None else latents.extend(fresh)
        if halting and prev_logits is not None:
            active = halting_mask(prev_logits, orig)
        else:
            active = np.ones((B, n), dtype=bool)
        if active.all():
            img, latents = dm.distill_encode(img, latents)
        else:
            idx, valid = _active_index(active)
            sub = nx.batch_take(img, idx)
            sub, latents = dm.distill_encode(sub, latents, valid)
            if idx.shape[1]:
                img = nx.batch_put(img, idx, valid, sub)
        trace.image_tokens.append(img)
        rec = IterationRecord(t, latents, active)
        if decode == "all" or t == T:
            q = dm.quantize(latents, beta, track_usage, continuous)
            attn = [] if record_attn else None
            logits = dm.distill_decode(q.quantized, latents.slot_ids, attn)
            rec.quantized, rec.logits, rec.attn = q, logits, attn
            rec.token_ce = per_image_ce(logits.data, orig)
            prev_logits = logits.data
            if images is not None:
                pix = model.logits_to_pixels(logits)
                rec.pixels = pix
                rec.pixel_l1 = np.abs(pix.data - images).mean(axis=(1, 2, 3))
        trace.records.append(rec)
    return trace


def encode_adaptive(model: AlitModel, images: np.ndarray, tsc_threshold: float,
                    T_max: int | None = None) -> list[tuple[np.ndarray, int]]:
    """Per image: latent indices at the first iteration whose pixel L1 < threshold.

    Falls back to the last iteration. Returns ``(indices, iterations_used)`` per image.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    T_max = T_max or model.cfg.iterations
    grid = model.base.encode_image(images)
    trace = run_rollout(model, grid, T_max, images=images)
    out = []
    for b in range(len(images)):
        used = T_max
        for r in trace.records:
            if r.pixel_l1[b] < tsc_threshold:
                used = r.iteration
                break
        out.append((trace.records[used - 1].latents.indices[b].copy(), used))
    return out
