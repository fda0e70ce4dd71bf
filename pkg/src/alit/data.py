"""Synthetic shape scenes with exact instance masks, and PPM/PGM image files."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

SHAPE_CLASSES = ("rectangle", "circle", "triangle", "diamond")
IMAGE_SIZE = 32


class ImageFormatError(ValueError):
    pass


@dataclass
class ShapeScene:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    masks: list[np.ndarray]  # boolean [H, W], disjoint
    label: int
    shape_types: list[int] = field(default_factory=list)

    @property
    def complexity(self) -> int:
        return len(self.masks)


@dataclass
class ShapeDataset:
    images: np.ndarray  # [n, H, W, 3]
    masks: list[list[np.ndarray]]
    labels: np.ndarray
    complexity: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def scene(self, i: int) -> ShapeScene:
        return ShapeScene(self.images[i], self.masks[i], int(self.labels[i]))

    def subset(self, idx) -> "ShapeDataset":
        idx = np.asarray(idx)
        return ShapeDataset(self.images[idx], [self.masks[i] for i in idx], self.labels[idx],
                            self.complexity[idx])

    def save(self, path: str | Path) -> None:
        """Write to .npz; masks are stored as a per-pixel instance id map (0 = background)."""
        n, H, W, _ = self.images.shape
        ids = np.zeros((n, H, W), dtype=np.uint8)
        for i, ms in enumerate(self.masks):
            for j, m in enumerate(ms):
                ids[i][m] = j + 1
        np.savez_compressed(path, images=self.images, instance_ids=ids, labels=self.labels,
                            complexity=self.complexity)

    @classmethod
    def load(cls, path: str | Path) -> "ShapeDataset":
        with np.load(path) as z:
            images, ids = z["images"], z["instance_ids"]
            labels, complexity = z["labels"], z["complexity"]
        masks = [[ids[i] == j + 1 for j in range(int(complexity[i]))] for i in range(len(labels))]
        return cls(images.astype(np.float32), masks, labels.astype(np.int64), complexity.astype(np.int64))


def _shape_mask(kind: int, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    name = SHAPE_CLASSES[kind]
    if name == "rectangle":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r)
    if name == "circle":
        return dy * dy + dx * dx <= r * r
    if name == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.15
    # upward triangle with apex at the top
    top, bottom = cy - r, cy + r
    half = (yy - top) / (2 * r) * r
    return (yy >= top) & (yy <= bottom) & (np.abs(dx) <= half)


# Colours are drawn at random from small palettes so that flat regions map to
# a handful of base codes; textures repeat with a 2-pixel period, aligned to patches.
SHAPE_PALETTE = np.array([
    [0.95, 0.25, 0.2], [0.2, 0.8, 0.3], [0.25, 0.45, 0.95], [0.95, 0.85, 0.2],
    [0.85, 0.3, 0.85], [0.2, 0.85, 0.85], [0.95, 0.6, 0.2], [0.9, 0.9, 0.9],
])
BACKGROUND_PALETTE = np.array([
    [0.1, 0.1, 0.12], [0.3, 0.15, 0.1], [0.1, 0.25, 0.15], [0.12, 0.15, 0.35],
    [0.35, 0.35, 0.3], [0.25, 0.1, 0.3],
])
TEXTURES = ("flat", "hstripes", "vstripes", "checker")


def _background(gen: np.random.Generator, size: int) -> np.ndarray:
    base = BACKGROUND_PALETTE[gen.integers(len(BACKGROUND_PALETTE))]
    yy, xx = np.mgrid[0:size, 0:size]
    texture = TEXTURES[gen.integers(len(TEXTURES))]
    if texture == "hstripes":
        pattern = yy % 2
    elif texture == "vstripes":
        pattern = xx % 2
    elif texture == "checker":
        pattern = (yy + xx) % 2
    else:
        pattern = np.zeros((size, size))
    img = base + 0.08 * pattern[..., None]
    return np.clip(img, 0.0, 1.0)


def make_scene(gen: np.random.Generator, n_shapes: int, size: int = IMAGE_SIZE,
               max_tries: int = 200) -> ShapeScene:
    """One scene: the first (largest) shape decides the class, later shapes may differ."""
    label = int(gen.integers(len(SHAPE_CLASSES)))
    img = _background(gen, size)
    occupied = np.zeros((size, size), dtype=bool)
    masks: list[np.ndarray] = []
    kinds: list[int] = []
    for j in range(n_shapes):
        kind = label if j == 0 or gen.random() < 0.5 else int(gen.integers(len(SHAPE_CLASSES)))
        r_lo, r_hi = (5.5, 8.5) if j == 0 else (2.5, 4.5)
        for _ in range(max_tries):
            r = gen.uniform(r_lo, r_hi)
            cy, cx = gen.uniform(r, size - r, size=2)
            m = _shape_mask(kind, cy, cx, r, size)
            if m.sum() >= 6 and not (m & occupied).any():
                break
        else:
            raise RuntimeError(f"could not place {n_shapes} shapes without overlap")
        color = SHAPE_PALETTE[gen.integers(len(SHAPE_PALETTE))]
        img[m] = color
        occupied |= m
        masks.append(m)
        kinds.append(kind)
    areas = np.zeros(len(SHAPE_CLASSES))
    for m, k in zip(masks, kinds):
        areas[k] += m.sum()
    return ShapeScene(img.astype(np.float32), masks, int(areas.argmax()), kinds)


def gen_shapes(n: int, seed: int, complexity_range: tuple[int, int] = (1, 6),
               size: int = IMAGE_SIZE) -> ShapeDataset:
    """Deterministic dataset of ``n`` scenes with shape counts drawn from ``complexity_range``."""
    lo, hi = complexity_range
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= lo <= hi <= 6:
        raise ValueError(f"complexity range must satisfy 1 <= lo <= hi <= 6, got {complexity_range}")
    rng = Rng(seed)
    scenes = []
    for _ in range(n):
        gen = rng.generator()
        scenes.append(make_scene(gen, int(gen.integers(lo, hi + 1)), size))
    return ShapeDataset(
        np.stack([s.image for s in scenes]),
        [s.masks for s in scenes],
        np.array([s.label for s in scenes], dtype=np.int64),
        np.array([s.complexity for s in scenes], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Netpbm
# ---------------------------------------------------------------------------

_HEADER = re.compile(rb"(P[1-7])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def _to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(image: np.ndarray) -> bytes:
    """8-bit binary P6 encoding of an [H, W, 3] image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"PPM needs an [H, W, 3] image, got {image.shape}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode() + _to_bytes(image).tobytes()


def write_pgm(image: np.ndarray) -> bytes:
    """8-bit binary P5 encoding of an [H, W] image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ImageFormatError(f"PGM needs an [H, W] image, got {image.shape}")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode() + _to_bytes(image).tobytes()


def _read_netpbm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    m = _HEADER.match(data)
    if m is None:
        raise ImageFormatError("malformed netpbm header")
    if m.group(1) != magic:
        raise ImageFormatError(f"unsupported netpbm format {m.group(1).decode()}, expected {magic.decode()}")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images are supported (maxval {maxval})")
    payload = data[m.end():]
    need = w * h * channels
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: {len(payload)} bytes for {w}x{h}x{channels}")
    arr = np.frombuffer(payload[:need], dtype=np.uint8).astype(np.float32) / 255.0
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm(data: bytes) -> np.ndarray:
    return _read_netpbm(data, b"P6", 3)


def read_pgm(data: bytes) -> np.ndarray:
    return _read_netpbm(data, b"P5", 1)
