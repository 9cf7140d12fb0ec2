"""Pseudo prompt generation.

Turns one class's correlation row into up to N_o point/mask (and optional
box) prompts: spatial softmax, max-normalized binarization, location
k-means over the foreground, then per-region argmax points, region masks,
and tight bounding boxes. A separate encoder maps the prompts to SAM-style
sparse token and dense grid embeddings.

Everything before the encoder is deliberately gradient-free; prompts are
constants of the forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig

KMEANS_RESTARTS = 8
KMEANS_MAX_ITER = 50


@dataclass
class PseudoPrompts:
    """Per-class prompt slots; invalid slots are padding.

    points: (N_c, N_o, 2) int64 grid coordinates as (row, col)
    point_valid: (N_c, N_o) bool
    masks: (N_c, N_o, H, W) bool, pairwise disjoint within a class
    boxes: (N_c, N_o, 4) int64 inclusive (r0, c0, r1, c1)
    box_valid: (N_c, N_o) bool
    """
    points: np.ndarray
    point_valid: np.ndarray
    masks: np.ndarray
    boxes: np.ndarray
    box_valid: np.ndarray

    @property
    def class_count(self) -> int:
        return self.points.shape[0]


@dataclass
class PromptEmbeddings:
    """sparse: (N_c, S, C) token embeddings; dense: (N_c, C, H, W) grid."""
    sparse: torch.Tensor
    dense: torch.Tensor


def spatial_softmax(values: np.ndarray, tau: float) -> np.ndarray:
    """Softmax of values/tau over the flattened spatial axes (last two dims)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("spatial_softmax input must be finite")
    flat = v.reshape(*v.shape[:-2], -1) / tau
    flat = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(v.shape)


def binarize(prob: np.ndarray, alpha: float) -> np.ndarray:
    """Threshold the max-normalized probability map at alpha.

    Normalizing by the per-map maximum keeps the behavior independent of
    grid resolution (raw softmax values shrink as H*W grows).
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    p = np.asarray(prob, dtype=np.float64)
    peak = p.max(axis=(-2, -1), keepdims=True)
    return p >= alpha * peak


def cluster_regions(binary: np.ndarray, n_o: int, seed: int) -> np.ndarray:
    """Partition foreground pixels into k = min(n_o, #fg) location clusters.

    Lloyd's iteration over (row, col) coordinates with k-means++ seeding,
    8 restarts keeping the lowest SSE, at most 50 iterations per restart.
    An emptied cluster is re-seeded at the point farthest from its current
    centroid. Returns an int label grid with background = -1; cluster ids
    are relabeled canonically by centroid (row, col) order.
    """
    binary = np.asarray(binary, dtype=bool)
    coords = np.argwhere(binary).astype(np.float64)
    n = len(coords)
    if n == 0:
        raise ValueError("cluster_regions requires at least one foreground pixel")
    k = min(n_o, n)

    labels = np.full(binary.shape, -1, dtype=np.int64)
    if k == 1:
        labels[binary] = 0
        return labels

    rng = np.random.default_rng(seed)
    best_assign, best_sse = None, math.inf
    for _ in range(KMEANS_RESTARTS):
        assign, sse = _lloyd(coords, k, rng)
        if sse < best_sse - 1e-12:
            best_sse, best_assign = sse, assign

    # Canonical cluster ids: sort centroids lexicographically by (row, col).
    centroids = np.stack([coords[best_assign == j].mean(axis=0) for j in range(k)])
    order = np.lexsort((centroids[:, 1], centroids[:, 0]))
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    labels[binary] = remap[best_assign]
    return labels


def _lloyd(coords: np.ndarray, k: int, rng) -> tuple:
    centers = _kmeanspp_init(coords, k, rng)
    assign = np.zeros(len(coords), dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        for j in range(k):
            members = coords[new_assign == j]
            if len(members) == 0:
                # Re-seed at the point farthest from its assigned centroid.
                far = d2[np.arange(len(coords)), new_assign].argmax()
                centers[j] = coords[far]
                new_assign[far] = j
            else:
                centers[j] = members.mean(axis=0)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    d2 = ((coords - centers[assign]) ** 2).sum(axis=1)
    return assign, float(d2.sum())


def _kmeanspp_init(coords: np.ndarray, k: int, rng) -> np.ndarray:
    n = len(coords)
    centers = np.empty((k, 2), dtype=np.float64)
    centers[0] = coords[rng.integers(n)]
    d2 = ((coords - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = coords[rng.integers(n)]
            continue
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
        idx = min(idx, n - 1)
        centers[j] = coords[idx]
        d2 = np.minimum(d2, ((coords - centers[j]) ** 2).sum(axis=1))
    return centers


def extract_prompts(prob: np.ndarray, regions: np.ndarray, n_o: int):
    """Per-region argmax points, masks, and tight boxes for one class.

    Ties in the probability argmax break to the smallest row, then column
    (C-order scan). Returns (points, valid, masks, boxes) with n_o slots.
    """
    prob = np.asarray(prob, dtype=np.float64).reshape(regions.shape)
    H, W = regions.shape
    points = np.zeros((n_o, 2), dtype=np.int64)
    valid = np.zeros(n_o, dtype=bool)
    masks = np.zeros((n_o, H, W), dtype=bool)
    boxes = np.zeros((n_o, 4), dtype=np.int64)

    k = int(regions.max()) + 1 if regions.max() >= 0 else 0
    for r in range(min(k, n_o)):
        mask = regions == r
        if not mask.any():
            continue
        masked = np.where(mask, prob, -np.inf)
        flat_idx = int(masked.argmax())
        points[r] = divmod(flat_idx, W)
        masks[r] = mask
        rows, cols = np.nonzero(mask)
        boxes[r] = (rows.min(), cols.min(), rows.max(), cols.max())
        valid[r] = True
    return points, valid, masks, boxes


def generate_prompts(corr_values: np.ndarray, cfg: ModelConfig, seed: int) -> PseudoPrompts:
    """Run the full per-class prompt pipeline over an (N_c, H, W) map.

    Classes are independent; the k-means substream is re-created per class
    from the same seed, so the output for a class depends only on that
    class's correlation row (class order never leaks in).
    """
    corr = np.asarray(corr_values, dtype=np.float64)
    n_c, H, W = corr.shape
    n_o = cfg.N_o
    prompts = PseudoPrompts(
        points=np.zeros((n_c, n_o, 2), dtype=np.int64),
        point_valid=np.zeros((n_c, n_o), dtype=bool),
        masks=np.zeros((n_c, n_o, H, W), dtype=bool),
        boxes=np.zeros((n_c, n_o, 4), dtype=np.int64),
        box_valid=np.zeros((n_c, n_o), dtype=bool),
    )
    for n in range(n_c):
        prob = spatial_softmax(corr[n], cfg.tau)
        fg = binarize(prob, cfg.alpha)
        if not fg.any():
            # Fallback: one point at the global argmax with a 1-pixel mask.
            r, c = divmod(int(prob.argmax()), W)
            prompts.points[n, 0] = (r, c)
            prompts.point_valid[n, 0] = True
            prompts.masks[n, 0, r, c] = True
            prompts.boxes[n, 0] = (r, c, r, c)
            prompts.box_valid[n, 0] = True
            continue
        regions = cluster_regions(fg, n_o, seed)
        pts, valid, masks, boxes = extract_prompts(prob, regions, n_o)
        prompts.points[n], prompts.point_valid[n] = pts, valid
        prompts.masks[n], prompts.boxes[n] = masks, boxes
        prompts.box_valid[n] = valid
    return prompts


class FourierPositionEncoding(nn.Module):
    """Random-Fourier encoding of normalized 2D coordinates (fixed matrix)."""

    def __init__(self, channels: int, generator: torch.Generator = None):
        super().__init__()
        if channels % 2:
            raise ValueError("channels must be even for sin/cos pairs")
        matrix = torch.randn((2, channels // 2), generator=generator)
        self.register_buffer("matrix", matrix)

    def encode(self, coords: torch.Tensor) -> torch.Tensor:
        """coords: (..., 2) in [0, 1] as (y, x); returns (..., channels)."""
        scaled = (2.0 * coords - 1.0) @ self.matrix.to(coords.dtype)
        scaled = 2.0 * math.pi * scaled
        return torch.cat([torch.sin(scaled), torch.cos(scaled)], dim=-1)

    def grid(self, h: int, w: int, dtype=None) -> torch.Tensor:
        """Dense encoding for every cell center, shape (channels, h, w)."""
        dtype = dtype or self.matrix.dtype
        ys = (torch.arange(h, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=dtype) + 0.5) / w
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        pe = self.encode(torch.stack([yy, xx], dim=-1))
        return pe.permute(2, 0, 1)


class PromptEncoder(nn.Module):
    """Encode pseudo prompts as sparse tokens and a dense grid embedding.

    A valid point token is the Fourier encoding of its cell center plus a
    learned foreground-point type embedding; invalid slots carry a learned
    not-a-point embedding. Boxes contribute two corner tokens with their
    own type embeddings. The dense path is a small convolution stack over
    the union of the class's masks; with masks disabled it broadcasts a
    learned no-mask embedding.
    """

    def __init__(self, cfg: ModelConfig, generator: torch.Generator = None):
        super().__init__()
        self.cfg = cfg
        C = cfg.C
        self.pe = FourierPositionEncoding(C, generator)
        self.point_type = nn.Parameter(torch.zeros(C))
        self.not_a_point = nn.Parameter(torch.zeros(C))
        self.box_tl_type = nn.Parameter(torch.zeros(C))
        self.box_br_type = nn.Parameter(torch.zeros(C))
        self.no_mask = nn.Parameter(torch.zeros(C))
        for p in (self.point_type, self.not_a_point, self.box_tl_type,
                  self.box_br_type, self.no_mask):
            nn.init.normal_(p, std=0.02, generator=generator)
        m = cfg.prompt_mask_channels
        self.dense = nn.ModuleList([
            nn.Conv2d(1, m, 3, padding=1),
            nn.Conv2d(m, m, 3, padding=1),
            nn.Conv2d(m, C, 1),
        ])

    def _encode_cell(self, rows, cols, h, w) -> torch.Tensor:
        dtype = self.pe.matrix.dtype
        y = (rows.to(dtype) + 0.5) / h
        x = (cols.to(dtype) + 0.5) / w
        return self.pe.encode(torch.stack([y, x], dim=-1))

    def forward(self, prompts: PseudoPrompts) -> PromptEmbeddings:
        cfg = self.cfg
        n_c, n_o = prompts.points.shape[:2]
        H, W = prompts.masks.shape[2:]
        if prompts.point_valid.any():
            pts = prompts.points[prompts.point_valid]
            if pts.min() < 0 or pts[:, 0].max() >= H or pts[:, 1].max() >= W:
                raise ValueError("prompt point coordinates outside the grid")

        device = self.point_type.device
        dtype = self.point_type.dtype
        tokens = []

        if cfg.use_points:
            coords = torch.from_numpy(prompts.points).to(device)
            valid = torch.from_numpy(prompts.point_valid).to(device)
            pe = self._encode_cell(coords[..., 0], coords[..., 1], H, W)
            point_tok = pe.to(dtype) + self.point_type
            pad = self.not_a_point.expand(n_c, n_o, -1)
            tokens.append(torch.where(valid.unsqueeze(-1), point_tok, pad))
        else:
            tokens.append(self.not_a_point.expand(n_c, n_o, -1))

        if cfg.use_boxes:
            boxes = torch.from_numpy(prompts.boxes).to(device)
            valid = torch.from_numpy(prompts.box_valid).to(device)
            tl = self._encode_cell(boxes[..., 0], boxes[..., 1], H, W).to(dtype)
            br = self._encode_cell(boxes[..., 2], boxes[..., 3], H, W).to(dtype)
            pad = self.not_a_point.expand(n_c, n_o, -1)
            keep = valid.unsqueeze(-1)
            tokens.append(torch.where(keep, tl + self.box_tl_type, pad))
            tokens.append(torch.where(keep, br + self.box_br_type, pad))

        sparse = torch.cat(tokens, dim=1)

        if cfg.use_masks:
            union = torch.from_numpy(prompts.masks.any(axis=1)).to(device, dtype)
            x = union.unsqueeze(1)
            x = F.gelu(self.dense[0](x))
            x = F.gelu(self.dense[1](x))
            dense = self.dense[2](x)
        else:
            dense = self.no_mask.reshape(1, -1, 1, 1).expand(n_c, -1, H, W)
        return PromptEmbeddings(sparse=sparse, dense=dense)
