"""Toy stand-ins for the vision and language backbones.

The vision encoder is a four-stage convolutional stack (full res, /2, /4,
/4) with a final 1x1 projection; the pre-projection features at full and
half resolution are kept as decoder skips. The text encoder is a learned
embedding table. Both are trainable end to end at the backbone learning
rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import archive
from .config import ModelConfig


@dataclass
class VisionFeature:
    """Embedding grid (C,H,W) plus skip features at 2x and 4x resolution."""
    grid: torch.Tensor
    skips: list  # [ (w1, 2H, 2W), (w0, 4H, 4W) ]


@dataclass
class TextFeature:
    """One embedding column per candidate class, shape (C, N_c)."""
    table: torch.Tensor


class ToyVisionEncoder(nn.Module):
    """96 -> 48 -> 24 convolutional stack projecting to C channels.

    `flip_equivariant` is a diagnostic mode: kernels are symmetrized and
    strided downsampling is replaced by average pooling, making the whole
    stack equivariant to horizontal flips.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w0, w1, w2, w3 = cfg.enc_widths
        self.cfg = cfg
        self.stage0 = nn.Conv2d(3, w0, 3, padding=1)
        self.stage1 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.stage2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.stage3 = nn.Conv2d(w2, w3, 3, padding=1)
        self.proj = nn.Conv2d(w3, cfg.C, 1)
        self.flip_equivariant = False

    def forward(self, image: torch.Tensor) -> VisionFeature:
        cfg = self.cfg
        if image.shape != (3, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected image of shape (3, {cfg.image_size}, {cfg.image_size}), "
                f"got {tuple(image.shape)}"
            )
        x = image.unsqueeze(0)
        if self.flip_equivariant:
            s0 = F.gelu(self._sym_conv(self.stage0, x))
            s1 = F.gelu(self._sym_conv(self.stage1, F.avg_pool2d(s0, 2), stride=1))
            s2 = F.gelu(self._sym_conv(self.stage2, F.avg_pool2d(s1, 2), stride=1))
            s3 = F.gelu(self._sym_conv(self.stage3, s2))
        else:
            s0 = F.gelu(self.stage0(x))
            s1 = F.gelu(self.stage1(s0))
            s2 = F.gelu(self.stage2(s1))
            s3 = F.gelu(self.stage3(s2))
        grid = self.proj(s3).squeeze(0)
        return VisionFeature(grid=grid, skips=[s1.squeeze(0), s0.squeeze(0)])

    @staticmethod
    def _sym_conv(conv, x, stride=None):
        weight = 0.5 * (conv.weight + torch.flip(conv.weight, dims=[3]))
        return F.conv2d(x, weight, conv.bias, stride=stride or 1, padding=1)


class ToyTextEncoder(nn.Module):
    """Learned per-class embedding table; no tokenizer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.table = nn.Embedding(cfg.text_table_size, cfg.C)

    def forward(self, class_ids) -> TextFeature:
        if len(class_ids) == 0:
            raise ValueError("class_ids must be nonempty")
        for cid in class_ids:
            if not (0 <= int(cid) < self.table.num_embeddings):
                raise ValueError(
                    f"unknown class id {int(cid)} (table holds "
                    f"{self.table.num_embeddings} entries)"
                )
        ids = torch.as_tensor([int(c) for c in class_ids], dtype=torch.long)
        return TextFeature(table=self.table(ids).t())


def save_fixture(path, vision: VisionFeature, text: TextFeature) -> None:
    archive.write_archive(path, {
        "F_v": vision.grid,
        "skip0": vision.skips[0],
        "skip1": vision.skips[1],
        "F_l": text.table,
    })


def load_fixture(path, cfg: ModelConfig):
    """Load precomputed embeddings, validating shapes against `cfg`."""
    tensors = archive.read_archive(path)
    w0, w1 = cfg.enc_widths[0], cfg.enc_widths[1]
    grid = archive.require(tensors, "F_v", (cfg.C, cfg.H, cfg.W), path)
    skip0 = archive.require(tensors, "skip0", (w1, 2 * cfg.H, 2 * cfg.W), path)
    skip1 = archive.require(tensors, "skip1", (w0, 4 * cfg.H, 4 * cfg.W), path)
    table = archive.require(tensors, "F_l", None, path)
    if table.ndim != 2 or table.shape[0] != cfg.C:
        raise archive.TensorShapeError(
            f"{path}: tensor 'F_l' has shape {tuple(table.shape)}, "
            f"expected ({cfg.C}, N_c)"
        )
    vision = VisionFeature(
        grid=torch.from_numpy(grid),
        skips=[torch.from_numpy(skip0), torch.from_numpy(skip1)],
    )
    return vision, TextFeature(table=torch.from_numpy(table))
