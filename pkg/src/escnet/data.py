"""Synthetic shapes dataset.

Each sample is 1-4 non-overlapping colored shapes on a textured background.
The class vocabulary is the 8 shape x color combinations (disk, square,
triangle, diamond) x (warm, cool). Ground truth is the exact rasterization
over pixel centers; background pixels carry the ignore index. Samples are
pure functions of (seed, index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

IGNORE_INDEX = 255

SHAPE_NAMES = ("disk", "square", "triangle", "diamond")
COLOR_NAMES = ("warm", "cool")
COLORS = np.array([[0.85, 0.25, 0.20], [0.20, 0.35, 0.85]])
CLASS_NAMES = tuple(
    f"{color} {shape}" for shape in SHAPE_NAMES for color in COLOR_NAMES
)
NUM_CLASSES = len(CLASS_NAMES)


@dataclass
class SyntheticSample:
    image: np.ndarray            # (3, S, S) float32 in [0, 1]
    gt: np.ndarray               # (S, S) int64, ignore index on background
    class_ids: tuple             # class ids present in gt
    instance_masks: list = field(default_factory=list)
    instance_classes: list = field(default_factory=list)
    instance_params: list = field(default_factory=list)


def shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    """Rasterize one primitive over pixel centers; r is the circumradius."""
    ys = np.arange(size, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(ys, ys, indexing="ij")
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        h = r / np.sqrt(2.0)
        return (np.abs(dy) <= h) & (np.abs(dx) <= h)
    if kind == "triangle":
        return (dy <= r / 2.0) & (np.abs(dx) * np.sqrt(3.0) <= dy + r)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(f"unknown shape kind {kind!r}")


def _background(rng, size: int) -> np.ndarray:
    base = rng.uniform(0.30, 0.55, size=3)
    low = rng.normal(size=(3, max(size // 8, 2), max(size // 8, 2)))
    tex = F.interpolate(
        torch.from_numpy(low).unsqueeze(0), size=(size, size),
        mode="bilinear", align_corners=False,
    ).squeeze(0).numpy()
    img = base[:, None, None] + 0.06 * tex
    img += 0.015 * rng.normal(size=(3, size, size))
    return np.clip(img, 0.0, 1.0)


def make_sample(seed: int, index: int, image_size: int) -> SyntheticSample:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    S = image_size
    image = _background(rng, S)
    gt = np.full((S, S), IGNORE_INDEX, dtype=np.int64)

    n_shapes = int(rng.integers(1, 5))
    placed = []
    sample = SyntheticSample(image=None, gt=None, class_ids=())
    for _ in range(80):
        if len(placed) == n_shapes:
            break
        shape_idx = int(rng.integers(len(SHAPE_NAMES)))
        color_idx = int(rng.integers(len(COLOR_NAMES)))
        r = float(rng.uniform(0.10, 0.16) * S)
        cy = float(rng.uniform(r + 2, S - r - 2))
        cx = float(rng.uniform(r + 2, S - r - 2))
        if any((cy - py) ** 2 + (cx - px) ** 2 <= (r + pr + 3) ** 2
               for py, px, pr in placed):
            continue
        placed.append((cy, cx, r))
        kind = SHAPE_NAMES[shape_idx]
        class_id = shape_idx * len(COLOR_NAMES) + color_idx
        mask = shape_mask(kind, cy, cx, r, S)
        brightness = float(rng.uniform(0.9, 1.1))
        fill = np.clip(COLORS[color_idx] * brightness, 0.0, 1.0)
        image[:, mask] = fill[:, None] + 0.02 * rng.normal(size=(3, int(mask.sum())))
        gt[mask] = class_id
        sample.instance_masks.append(mask)
        sample.instance_classes.append(class_id)
        sample.instance_params.append(
            {"kind": kind, "cy": cy, "cx": cx, "r": r}
        )

    sample.image = np.clip(image, 0.0, 1.0).astype(np.float32)
    sample.gt = gt
    sample.class_ids = tuple(sorted(set(sample.instance_classes)))
    return sample


class SyntheticShapes:
    """Lazy deterministic dataset view: sample(i) depends only on (seed, i)."""

    def __init__(self, seed: int, image_size: int):
        self.seed = seed
        self.image_size = image_size

    def sample(self, index: int) -> SyntheticSample:
        return make_sample(self.seed, index, self.image_size)


def gen_synthetic(seed: int, count: int, cfg) -> list:
    """Materialize `count` samples at the configured image size."""
    if count < 1:
        raise ValueError("count must be at least 1")
    ds = SyntheticShapes(seed, cfg.image_size)
    return [ds.sample(i) for i in range(count)]


def grid_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Downsample a pixel mask to the feature grid by mean >= 0.5."""
    t = torch.from_numpy(mask.astype(np.float32)).unsqueeze(0).unsqueeze(0)
    pooled = F.adaptive_avg_pool2d(t, (grid_h, grid_w)).squeeze()
    return (pooled >= 0.5).numpy()
