"""Checkpoints and the training stages (base tokenizer, latent-distillation pre-training, fine-tuning).

Checkpoint layout, little-endian::

    b"ALIT" | u32 version | u32 entry count
    per entry: u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | f32 payload
    u32 text length | UTF-8 text (config lines, then a "[meta]" section)
"""

from __future__ import annotations

import csv
import io
import logging
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .base_tokenizer import TokenGrid, train_base
from .config import TrainConfig, parse_config_text
from .numerics import Rng, Tape, Tensor
from .quantizer import perplexity, revive_dead_codes
from .rollout import AlitModel, run_rollout

log = logging.getLogger(__name__)

MAGIC = b"ALIT"
VERSION = 1
METRICS_HEADER = ["step", "stage", "iteration", "token_ce", "pixel_l1", "commit", "codebook", "perplexity"]
BASE_HEADER = ["step", "loss", "perplexity"]


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    config: TrainConfig
    rng_state: int = 0
    meta: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: AlitModel, rng: Rng, **meta) -> "Checkpoint":
        tensors = OrderedDict((k, t.data.astype("<f4", copy=True)) for k, t in model.named_tensors().items())
        tensors["base.codebook.usage"] = model.base.codebook.usage.astype("<f4")
        tensors["alit.codebook.usage"] = model.distill.codebook.usage.astype("<f4")
        return cls(tensors, model.cfg, rng.state, {k: str(v) for k, v in meta.items()})

    def load_into(self, model: AlitModel) -> AlitModel:
        named = model.named_tensors()
        usage = {"base.codebook.usage": model.base.codebook, "alit.codebook.usage": model.distill.codebook}
        for key, arr in self.tensors.items():
            if key in usage:
                cb = usage[key]
                if arr.shape != cb.usage.shape:
                    raise CheckpointError(f"shape mismatch for {key}: checkpoint {arr.shape}, model {cb.usage.shape}")
                cb.usage[:] = arr.astype(np.int64)
                continue
            if key not in named:
                raise CheckpointError(f"unknown parameter key {key!r}")
            if arr.shape != named[key].shape:
                raise CheckpointError(f"shape mismatch for {key}: checkpoint {arr.shape}, model {named[key].shape}")
            named[key].data = arr.astype(np.float32, copy=True)
        missing = set(named) - set(self.tensors)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        return model

    def to_model(self, cfg: TrainConfig | None = None) -> tuple[AlitModel, Rng]:
        model = AlitModel(cfg or self.config, Rng(0))
        self.load_into(model)
        return model, Rng(self.rng_state)

    def text(self) -> str:
        lines = [self.config.to_text(), "[meta]\n", f"rng_state = {self.rng_state}\n"]
        lines += [f"{k} = {v}\n" for k, v in self.meta.items()]
        return "".join(lines)

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<II", VERSION, len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw)) + raw)
            out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        text = self.text().encode("utf-8")
        out.append(struct.pack("<I", len(text)) + text)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        pos = 0

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("truncated checkpoint")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4)) != MAGIC:
            raise CheckpointError("not an ALIT checkpoint (bad magic bytes)")
        version, count = struct.unpack("<II", take(8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = bytes(take(nlen)).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            tensors[name] = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(dims).copy()
        (tlen,) = struct.unpack("<I", take(4))
        text = bytes(take(tlen)).decode("utf-8")
        if pos != len(view):
            raise CheckpointError(f"{len(view) - pos} trailing bytes after checkpoint")
        cfg_text, _, meta_text = text.partition("[meta]\n")
        meta = {}
        for line in meta_text.splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                meta[k] = v
        rng_state = int(meta.pop("rng_state", "0"))
        return cls(tensors, parse_config_text(cfg_text), rng_state, meta)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def write_csv(rows: list[dict], header: list[str], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r[k]) for k in header})
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def base_token_grid(model: AlitModel, images: np.ndarray, chunk: int = 64) -> TokenGrid:
    """Encode images with the (frozen) base tokenizer; embeddings are plain constants."""
    idx = np.concatenate([model.base.encode_image(images[i:i + chunk]).indices
                          for i in range(0, len(images), chunk)])
    return grid_from_indices(model, idx)


def grid_from_indices(model: AlitModel, indices: np.ndarray) -> TokenGrid:
    emb = model.base.codebook.codes.data[indices.reshape(len(indices), -1)]
    return TokenGrid(indices, Tensor(emb))


@dataclass
class StepLosses:
    total: Tensor
    terms: dict[str, float]


def stage1_loss(model: AlitModel, grid: TokenGrid, cfg: TrainConfig, track_usage: bool = True,
                continuous: bool = False):
    """Mean over all rollout iterations of smoothed token CE plus latent quantiser losses.

    With ``continuous`` the factored latents bypass the codebook (quantiser terms are zero).
    """
    trace = run_rollout(model, grid, cfg.iterations, halting=cfg.halting, decode="all",
                        beta=cfg.commit_beta, track_usage=track_usage, continuous=continuous)
    targets = grid.flat_indices.reshape(-1)
    K = cfg.base_codes
    per_iter = []
    total = None
    for rec in trace.records:
        ce = nx.cross_entropy_smoothed(nx.reshape(rec.logits, (-1, K)), targets, cfg.label_smoothing)
        term = nx.add(nx.add(nx.scale(ce, cfg.ce_weight), rec.quantized.commit_loss),
                      nx.scale(rec.quantized.codebook_loss, cfg.codebook_weight))
        total = term if total is None else nx.add(total, term)
        per_iter.append({"iteration": rec.iteration, "smoothed_ce": float(ce.data),
                         "token_ce": float(rec.token_ce.mean()),
                         "commit": float(rec.quantized.commit_loss.data),
                         "codebook": float(rec.quantized.codebook_loss.data),
                         "term": float(term.data), "halted": float(rec.halted_count.mean())})
    total = nx.scale(total, 1.0 / len(trace.records))
    return total, per_iter, trace


def _revive_latents(model: AlitModel, trace, rng: Rng) -> None:
    cb = model.distill.codebook
    rows = np.concatenate([r.latents.factored.data.reshape(-1, cb.dim) for r in trace.records
                           if r.latents.factored is not None])
    revive_dead_codes(cb, cb.usage, rows, 1, rng)
    cb.reset_usage()


def init_codebook_from_latents(model: AlitModel, grid_all: TokenGrid, cfg: TrainConfig, rng: Rng,
                               n_images: int = 64, iters: int = 10) -> None:
    """Spherical k-means over factored latents of ``n_images`` training images; seeds the latent codebook."""
    cb = model.distill.codebook
    sel = rng.integers(0, grid_all.indices.shape[0], size=n_images)
    rows = []
    for lo in range(0, n_images, cfg.batch_size):
        grid = grid_from_indices(model, grid_all.indices[sel[lo:lo + cfg.batch_size]])
        trace = run_rollout(model, grid, cfg.iterations, halting=cfg.halting, decode="all", continuous=True)
        rows.append(trace.records[-1].latents.factored.data.reshape(-1, cb.dim))
    X = np.concatenate(rows).astype(np.float64)
    C = X[rng.integers(0, X.shape[0], size=cb.size)]
    for _ in range(iters):
        assign = (X @ C.T).argmax(axis=1)
        for k in range(cb.size):
            members = X[assign == k]
            if len(members):
                c = members.sum(axis=0)
                C[k] = c / max(np.linalg.norm(c), 1e-12)
            else:
                C[k] = X[rng.integers(0, X.shape[0])]
    cb.codes.data[:] = C.astype(cb.codes.data.dtype)
    cb.renormalize()
    cb.reset_usage()


def stage1_pretrain(model: AlitModel, images: np.ndarray, cfg: TrainConfig, rng: Rng,
                    metrics: list[dict] | None = None, steps: int | None = None) -> AlitModel:
    """Train only the distillation encoder/decoder and latent codebook; the base tokenizer is frozen."""
    steps = cfg.stage1_steps if steps is None else steps
    grid_all = base_token_grid(model, images)
    params = model.distill.parameters()
    state = nx.AdamState.zeros_like(params)
    cb = model.distill.codebook
    cb.reset_usage()
    t0 = time.time()
    for step in range(steps):
        sel = rng.integers(0, len(images), size=cfg.batch_size)
        grid = grid_from_indices(model, grid_all.indices[sel])
        for p in params:
            p.zero_grad()
        if step == cfg.quant_warmup and step > 0:
            init_codebook_from_latents(model, grid_all, cfg, rng)
        with Tape() as tape:
            loss, per_iter, trace = stage1_loss(model, grid, cfg, continuous=step < cfg.quant_warmup)
        tape.backward(loss, params)
        if metrics is not None and (step % cfg.log_every == 0 or step == steps - 1):
            ppl = perplexity(cb.usage)
            for row in per_iter:
                metrics.append({"step": step, "stage": "stage1", "iteration": row["iteration"],
                                "token_ce": f"{row['token_ce']:.6f}", "pixel_l1": None,
                                "commit": f"{row['commit']:.6f}", "codebook": f"{row['codebook']:.6f}",
                                "perplexity": f"{ppl:.3f}"})
            log.info("stage1 step %d loss %.4f ce@1 %.3f ce@T %.3f halted@T %.1f ppl %.1f (%.0fs)", step,
                     float(loss.data), per_iter[0]["token_ce"], per_iter[-1]["token_ce"],
                     per_iter[-1]["halted"], ppl, time.time() - t0)
        nx.adam_step(params, [p.grad for p in params], state, cfg.lr, cfg.beta1, cfg.beta2)
        cb.renormalize()
        if (step + 1) % cfg.latent_revive_every == 0 and cfg.quant_warmup <= step and step + 1 < steps:
            _revive_latents(model, trace, rng)
    return model


def sample_iterations(rng: Rng, n: int, iterations: int) -> np.ndarray:
    """Uniform draws from {1, ..., iterations}."""
    return rng.integers(1, iterations + 1, size=n)


def stage2_loss(model: AlitModel, images: np.ndarray, T: int, cfg: TrainConfig, track_usage: bool = True):
    """Pixel L1 at a single iteration ``T`` plus latent and base quantiser losses."""
    grid = model.base.encode_image(images, cfg.commit_beta, track_usage)
    trace = run_rollout(model, grid, T, halting=False, decode="last", images=images,
                        beta=cfg.commit_beta, track_usage=track_usage)
    rec = trace.records[-1]
    l1 = nx.mean(nx.abs_(nx.sub(rec.pixels, Tensor(images))))
    commit = nx.add(rec.quantized.commit_loss, grid.commit_loss)
    cbl = nx.add(rec.quantized.codebook_loss, grid.codebook_loss)
    total = nx.add(nx.add(nx.scale(l1, cfg.pixel_weight), commit), nx.scale(cbl, cfg.codebook_weight))
    # adversarial term slot: cfg.adversarial_weight is carried for format stability, no GAN stage here
    terms = {"pixel_l1": float(l1.data), "commit": float(commit.data), "codebook": float(cbl.data),
             "adversarial": 0.0, "total": float(total.data)}
    return total, terms, trace


def stage2_finetune(model: AlitModel, images: np.ndarray, cfg: TrainConfig, rng: Rng,
                    metrics: list[dict] | None = None, steps: int | None = None) -> AlitModel:
    """Jointly fine-tune base tokenizer and distillation model on pixel L1, no halting."""
    steps = cfg.stage2_steps if steps is None else steps
    base_params, distill_params = model.base.parameters(), model.distill.parameters()
    params = base_params + distill_params
    # the base moves slower: at the full rate its code assignments drift faster than the decoder can follow
    base_state, distill_state = nx.AdamState.zeros_like(base_params), nx.AdamState.zeros_like(distill_params)
    lcb, bcb = model.distill.codebook, model.base.codebook
    lcb.reset_usage()
    bcb.reset_usage()
    t0 = time.time()
    for step in range(steps):
        T = int(sample_iterations(rng, 1, cfg.iterations)[0])
        batch = images[rng.integers(0, len(images), size=cfg.batch_size)]
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            loss, terms, trace = stage2_loss(model, batch, T, cfg)
        tape.backward(loss, params)
        if metrics is not None and (step % cfg.log_every == 0 or step == steps - 1):
            metrics.append({"step": step, "stage": "stage2", "iteration": T,
                            "token_ce": f"{float(trace.records[-1].token_ce.mean()):.6f}",
                            "pixel_l1": f"{terms['pixel_l1']:.6f}", "commit": f"{terms['commit']:.6f}",
                            "codebook": f"{terms['codebook']:.6f}", "perplexity": f"{perplexity(lcb.usage):.3f}"})
            log.info("stage2 step %d T=%d l1 %.4f (%.0fs)", step, T, terms["pixel_l1"], time.time() - t0)
        nx.adam_step(base_params, [p.grad for p in base_params], base_state, cfg.lr * cfg.stage2_base_lr_scale,
                     cfg.beta1, cfg.beta2)
        nx.adam_step(distill_params, [p.grad for p in distill_params], distill_state, cfg.lr, cfg.beta1, cfg.beta2)
        lcb.renormalize()
    return model


def run_base_stage(model: AlitModel, images: np.ndarray, cfg: TrainConfig, rng: Rng,
                   metrics: list[dict] | None = None) -> AlitModel:
    train_base(model.base, images, cfg, rng, metrics)
    return model
