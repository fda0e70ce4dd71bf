"""Token-selection curves, decoder attention maps, segment alignment and linear probes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import layers as L
from . import numerics as nx
from .data import ShapeDataset
from .numerics import Tape, Tensor
from .rollout import AlitModel, RolloutTrace, run_rollout

CURVE_HEADER = ["tsc", "threshold", "fraction_tokens", "toi", "toi_value"]
Oracle = Callable[[np.ndarray], np.ndarray]  # images [B,H,W,3] -> class scores [B, C]


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


# ---------------------------------------------------------------------------
# Token selection
# ---------------------------------------------------------------------------


@dataclass
class RolloutSummary:
    """Per-image, per-iteration reconstructions and losses for a whole dataset."""

    pixel_l1: np.ndarray  # [N, T]
    token_ce: np.ndarray  # [N, T]
    recon: np.ndarray  # [N, T, H, W, 3]
    atomic: int

    @property
    def iterations(self) -> int:
        return self.pixel_l1.shape[1]

    def token_counts(self) -> np.ndarray:
        return self.atomic * np.arange(1, self.iterations + 1)


def summarize(model: AlitModel, images: np.ndarray, T: int | None = None, chunk: int = 32) -> RolloutSummary:
    T = T or model.cfg.iterations
    l1, ce, rec = [], [], []
    for s in _chunks(len(images), chunk):
        batch = np.asarray(images[s], dtype=np.float32)
        trace = run_rollout(model, model.base.encode_image(batch), T, images=batch)
        l1.append(np.stack([r.pixel_l1 for r in trace.records], axis=1))
        ce.append(np.stack([r.token_ce for r in trace.records], axis=1))
        rec.append(np.stack([r.pixels.data for r in trace.records], axis=1))
    return RolloutSummary(np.concatenate(l1), np.concatenate(ce), np.concatenate(rec), model.cfg.atomic)


def _criterion_met(source, criterion: str, threshold: float, oracle: Oracle | None,
                   labels: np.ndarray | None) -> np.ndarray:
    """Boolean [N, T]: whether each iteration satisfies the criterion."""
    if isinstance(source, RolloutTrace):
        l1 = np.stack([r.pixel_l1 for r in source.records], axis=1)
        recon = None if criterion != "classification" else np.stack([r.pixels.data for r in source.records], axis=1)
    else:
        l1, recon = source.pixel_l1, source.recon
    if criterion == "recon_l1":
        return l1 < threshold
    if criterion == "classification":
        if oracle is None or labels is None:
            raise ValueError("classification criterion needs an oracle and labels")
        N, T = recon.shape[:2]
        scores = oracle(recon.reshape((N * T,) + recon.shape[2:])).reshape(N, T, -1)
        k = int(threshold)
        rank = (scores > np.take_along_axis(scores, np.asarray(labels)[:, None, None], axis=2)).sum(axis=2)
        return rank < k
    raise ValueError(f"unknown token selection criterion {criterion!r}")


def tsc_select(source, criterion: str, threshold: float, oracle: Oracle | None = None,
               labels: np.ndarray | None = None, atomic: int | None = None) -> np.ndarray:
    """Smallest scheduled token count per image meeting the criterion; falls back to the maximum.

    ``recon_l1``: pixel L1 strictly below ``threshold``. ``classification``:
    the true label is among the oracle's top-``threshold`` classes.
    """
    met = _criterion_met(source, criterion, threshold, oracle, labels)
    if atomic is None:
        atomic = source.atomic if isinstance(source, RolloutSummary) else source.records[0].token_count
    T = met.shape[1]
    first = np.where(met.any(axis=1), met.argmax(axis=1), T - 1)
    return atomic * (first + 1)


@dataclass
class TscCurvePoint:
    tsc: str
    threshold: float
    fraction_tokens: float
    toi: str
    toi_value: float


def dataset_representation_curve(summary: RolloutSummary, thresholds: Sequence[float], toi: str = "pixel_l1",
                                 criterion: str = "recon_l1", oracle: Oracle | None = None,
                                 labels: np.ndarray | None = None, images: np.ndarray | None = None
                                 ) -> list[TscCurvePoint]:
    """Per threshold: dataset token fraction and the task metric on token-budgeted reconstructions."""
    N, T = summary.pixel_l1.shape
    if N == 0:
        raise ValueError("empty dataset")
    max_tokens = summary.atomic * T
    points = []
    for tau in thresholds:
        counts = tsc_select(summary, criterion, tau, oracle, labels)
        it = counts // summary.atomic - 1
        frac = float(counts.sum() / (max_tokens * N))
        if toi == "pixel_l1":
            value = float(summary.pixel_l1[np.arange(N), it].mean())
        elif toi == "classification":
            if oracle is None or labels is None:
                raise ValueError("classification TOI needs an oracle and labels")
            chosen = summary.recon[np.arange(N), it]
            value = float((oracle(chosen).argmax(axis=1) == labels).mean())
        else:
            raise ValueError(f"unknown task of interest {toi!r}")
        points.append(TscCurvePoint(criterion, float(tau), frac, toi, value))
    return points


def curve_csv(points: Sequence[TscCurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for p in points:
        w.writerow([p.tsc, repr(p.threshold), f"{p.fraction_tokens:.6f}", p.toi, f"{p.toi_value:.6f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Attention maps and segments
# ---------------------------------------------------------------------------


@dataclass
class AttnMap:
    maps: np.ndarray  # [m, g, g], each map sums to 1
    layer: int
    iteration: int


def attention_maps(model: AlitModel, images: np.ndarray, iteration: int, layer: int) -> list[AttnMap]:
    """Decoder attention from mask-token queries to each latent key, mean over heads.

    Each latent's column over the grid of mask positions is renormalised to sum to 1.
    """
    cfg = model.cfg
    if not 0 <= layer < cfg.dec_depth:
        raise ValueError(f"layer {layer} outside [0, {cfg.dec_depth})")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    trace = run_rollout(model, model.base.encode_image(images), iteration, decode="last", record_attn=True)
    return _maps_from_record(trace.records[-1], layer, cfg.n_image_tokens, cfg.grid)


def _maps_from_record(rec, layer: int, n: int, g: int) -> list[AttnMap]:
    w = rec.attn[layer]  # [B, H, n+m, n+m]
    cols = w[:, :, :n, n:].astype(np.float64).mean(axis=1)  # [B, n, m]
    cols = cols / cols.sum(axis=1, keepdims=True)
    B, _, m = cols.shape
    return [AttnMap(cols[b].T.reshape(m, g, g), layer, rec.iteration) for b in range(B)]


def attention_maps_all_iterations(model: AlitModel, images: np.ndarray, layer: int,
                                  T: int | None = None) -> list[list[AttnMap]]:
    """``out[t][b]``: maps of image ``b`` at iteration ``t + 1``."""
    cfg = model.cfg
    T = T or cfg.iterations
    trace = run_rollout(model, model.base.encode_image(np.asarray(images, dtype=np.float32)), T,
                        record_attn=True)
    return [_maps_from_record(r, layer, cfg.n_image_tokens, cfg.grid) for r in trace.records]


def attn_to_segment(attn: np.ndarray, X: float, mode: str = "mass") -> np.ndarray:
    """Binary mask of the top-X% of an attention map.

    ``mass``: fewest cells, taken by descending weight (ties in raster order),
    whose cumulative weight reaches X% of the total. ``count``: the
    ceil(X% * cells) highest cells.
    """
    if not 0 < X <= 100:
        raise ValueError(f"X must lie in (0, 100], got {X}")
    a = np.asarray(attn, dtype=np.float64)
    flat = a.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    out = np.zeros(flat.size, dtype=bool)
    if mode == "count":
        k = int(np.ceil(X / 100.0 * flat.size - 1e-9))
    elif mode == "mass":
        if X == 100:
            out[flat > 0] = True
            return out.reshape(a.shape)
        total = flat.sum()
        csum = np.cumsum(flat[order])
        k = int(np.searchsorted(csum, X / 100.0 * total - 1e-12 * total, side="left")) + 1
        k = min(k, flat.size)
    else:
        raise ValueError(f"unknown threshold mode {mode!r}")
    out[order[:k]] = True
    return out.reshape(a.shape)


def iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    p = pred.reshape(len(pred), -1).astype(np.float64)
    q = gt.reshape(len(gt), -1).astype(np.float64)
    inter = q @ p.T
    union = q.sum(1)[:, None] + p.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def miou(pred_masks, gt_masks) -> float:
    """Mean over ground-truth segments of the best IoU with any predicted mask."""
    pred = np.asarray(pred_masks, dtype=bool)
    gt = np.asarray(gt_masks, dtype=bool)
    if pred.ndim == 2:
        pred = pred[None]
    if gt.ndim == 2:
        gt = gt[None]
    if pred.shape[1:] != gt.shape[1:]:
        raise ValueError(f"mask size mismatch: {pred.shape[1:]} vs {gt.shape[1:]}")
    if len(gt) == 0:
        raise ValueError("no ground-truth segments")
    if len(pred) == 0:
        return 0.0
    return float(iou_matrix(pred, gt).max(axis=1).mean())


def upsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    return np.kron(mask.astype(np.uint8), np.ones((factor, factor), dtype=np.uint8)).astype(bool)


def scene_miou(amap: AttnMap, gt_masks: Sequence[np.ndarray], X: float = 40.0, mode: str = "mass") -> float:
    factor = gt_masks[0].shape[0] // amap.maps.shape[1]
    preds = np.stack([upsample_mask(attn_to_segment(m, X, mode), factor) for m in amap.maps])
    return miou(preds, np.stack(gt_masks))


def miou_by_iteration(model: AlitModel, dataset: ShapeDataset, layer: int, X: float = 40.0,
                      mode: str = "mass", chunk: int = 16) -> np.ndarray:
    """Mean scene mIoU at every rollout iteration, shape [T]."""
    T = model.cfg.iterations
    totals = np.zeros(T)
    for s in _chunks(len(dataset), chunk):
        per_iter = attention_maps_all_iterations(model, dataset.images[s], layer, T)
        idx = range(s.start, s.stop)
        for t in range(T):
            totals[t] += sum(scene_miou(am, dataset.masks[i], X, mode) for am, i in zip(per_iter[t], idx))
    return totals / len(dataset)


# ---------------------------------------------------------------------------
# Linear probing
# ---------------------------------------------------------------------------


def encoder_features(model: AlitModel, images: np.ndarray, iteration: int, pool: str = "both",
                     chunk: int = 32) -> np.ndarray:
    """Mean-pooled distillation-encoder outputs after ``iteration`` rollout steps.

    ``pool``: ``image``, ``latent``, ``both`` (the two means concatenated) or
    ``latent:k`` for the mean over the first k latents.
    """
    feats = []
    p = model.distill.params
    for s in _chunks(len(images), chunk):
        batch = np.asarray(images[s], dtype=np.float32)
        trace = run_rollout(model, model.base.encode_image(batch), iteration, decode="last")
        img = L.norm(p, "alit.enc_ln", trace.image_tokens[-1]).data
        lat = L.norm(p, "alit.enc_ln", trace.records[-1].latents.tokens).data
        feats.append(_pool(img, lat, pool))
    return np.concatenate(feats)


def _pool(img: np.ndarray, lat: np.ndarray, pool: str) -> np.ndarray:
    if pool == "image":
        return img.mean(axis=1)
    if pool == "latent":
        return lat.mean(axis=1)
    if pool == "both":
        return np.concatenate([img.mean(axis=1), lat.mean(axis=1)], axis=1)
    if pool.startswith("latent:"):
        k = int(pool.split(":", 1)[1])
        if not 1 <= k <= lat.shape[1]:
            raise ValueError(f"first-k pooling needs 1 <= k <= {lat.shape[1]}, got {k}")
        return lat[:, :k].mean(axis=1)
    raise ValueError(f"unknown pool spec {pool!r}")


class LinearProbe:
    """Softmax regression on standardised features, trained full-batch with Adam."""

    def __init__(self, steps: int = 500, lr: float = 0.05, weight_decay: float = 1e-3):
        self.steps, self.lr, self.weight_decay = steps, lr, weight_decay

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LinearProbe":
        y = np.asarray(y)
        classes = np.unique(y)
        if len(classes) < 2:
            raise ValueError("linear probe needs at least 2 classes")
        self.n_classes = int(y.max()) + 1
        self.mu = x.mean(axis=0)
        self.sd = x.std(axis=0) + 1e-6
        xs = Tensor(((x - self.mu) / self.sd).astype(np.float32))
        self.w = nx.parameter(np.zeros((x.shape[1], self.n_classes)))
        self.b = nx.parameter(np.zeros(self.n_classes))
        params = [self.w, self.b]
        state = nx.AdamState.zeros_like(params)
        for _ in range(self.steps):
            for q in params:
                q.zero_grad()
            with Tape() as tape:
                loss = nx.cross_entropy_smoothed(nx.linear(xs, self.w, self.b), y, 0.0)
                loss = nx.add(loss, nx.scale(nx.mean(nx.square(self.w)), self.weight_decay))
            tape.backward(loss, params)
            nx.adam_step(params, [q.grad for q in params], state, self.lr, 0.9, 0.999)
        return self

    def scores(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mu) / self.sd) @ self.w.data + self.b.data

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float((self.scores(x).argmax(axis=1) == np.asarray(y)).mean())


def linear_probe(model: AlitModel, train: ShapeDataset, test: ShapeDataset, iteration: int,
                 pool: str = "both") -> tuple[float, LinearProbe]:
    """Held-out accuracy of a softmax-regression probe on mean-pooled encoder features."""
    if len(np.unique(train.labels)) < 2:
        raise ValueError("linear probe needs at least 2 classes")
    probe = LinearProbe().fit(encoder_features(model, train.images, iteration, pool), train.labels)
    return probe.accuracy(encoder_features(model, test.images, iteration, pool), test.labels), probe


def probe_oracle(model: AlitModel, probe: LinearProbe, iteration: int, pool: str = "both") -> Oracle:
    """Classification oracle for token selection: images -> probe class scores."""

    def oracle(images: np.ndarray) -> np.ndarray:
        return probe.scores(encoder_features(model, images, iteration, pool))

    return oracle
