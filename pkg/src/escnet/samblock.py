"""Promptable two-way attention block and class-batched vision refinement.

One block runs: token self-attention, token-to-image cross-attention, a
token MLP, and image-to-token cross-attention, each as a pre-norm residual
sublayer (zeroing every output projection makes the block an exact
identity on tokens and identity-plus-dense on the image). Image positions
contribute Fourier positional encodings to cross-attention keys/queries.

Per-class refinements are fused by a shared pointwise projection followed
by a mean over classes, so any class count and ordering is accepted.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import archive
from .config import ModelConfig
from .encoders import VisionFeature
from .ppg import PromptEmbeddings


class Attention(nn.Module):
    """Multi-head attention with an optional internal channel downscale."""

    def __init__(self, dim: int, heads: int, downsample_rate: int = 1):
        super().__init__()
        inner = dim // downsample_rate
        if inner % heads:
            raise ValueError(f"internal dim {inner} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, inner)
        self.k = nn.Linear(dim, inner)
        self.v = nn.Linear(dim, inner)
        self.out = nn.Linear(inner, dim)

    def forward(self, q, k, v):
        q, k, v = self.q(q), self.k(k), self.v(v)
        b, n, c = q.shape
        hd = c // self.heads
        q = q.reshape(b, n, self.heads, hd).transpose(1, 2)
        k = k.reshape(b, k.shape[1], self.heads, hd).transpose(1, 2)
        v = v.reshape(b, v.shape[1], self.heads, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * hd ** -0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.out(out)


class TwoWayBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.C
        mlp_dim = int(C * cfg.sam_mlp_ratio)
        self.token_self = Attention(C, cfg.heads)
        self.t2i = Attention(C, cfg.heads, cfg.attn_downscale)
        self.mlp = nn.ModuleList([nn.Linear(C, mlp_dim), nn.Linear(mlp_dim, C)])
        self.i2t = Attention(C, cfg.heads, cfg.attn_downscale)
        self.norm1 = nn.LayerNorm(C)
        self.norm2 = nn.LayerNorm(C)
        self.norm3 = nn.LayerNorm(C)
        self.norm4 = nn.LayerNorm(C)
        self.fuse = nn.Linear(C, C)

    def forward(self, tokens, image, dense, image_pe):
        """tokens (B,S,C); image, dense (B,C,H,W); image_pe (C,H,W)."""
        if tokens.shape[0] != image.shape[0] or image.shape != dense.shape:
            raise ValueError("tokens/image/dense batch shapes disagree")
        b, c, h, w = image.shape
        src = (image + dense).flatten(2).transpose(1, 2)          # (B, HW, C)
        pe = image_pe.to(src.dtype).flatten(1).t().unsqueeze(0)   # (1, HW, C)

        t = tokens
        tn = self.norm1(t)
        t = t + self.token_self(tn, tn, tn)
        t = t + self.t2i(self.norm2(t), src + pe, src)
        t = t + self.mlp[1](F.relu(self.mlp[0](self.norm3(t))))
        src = src + self.i2t(self.norm4(src) + pe, t, t)
        return t, src.transpose(1, 2).reshape(b, c, h, w)


class RefinedVisionFeature:
    def __init__(self, grid: torch.Tensor):
        self.grid = grid


def refine_vision(vision, embeds: PromptEmbeddings, block: TwoWayBlock,
                  image_pe: torch.Tensor) -> RefinedVisionFeature:
    """Refine the image grid once per class, then fuse with a shared
    pointwise projection and a mean over classes."""
    grid = vision.grid if isinstance(vision, VisionFeature) else vision
    n_c = embeds.sparse.shape[0]
    if n_c == 0:
        raise ValueError("refine_vision needs at least one class")
    image = grid.unsqueeze(0).expand(n_c, -1, -1, -1)
    _, refined = block(embeds.sparse, image, embeds.dense, image_pe)
    projected = block.fuse(refined.permute(0, 2, 3, 1))
    return RefinedVisionFeature(projected.mean(dim=0).permute(2, 0, 1))


# Archive schema for one block; LayerNorm weight/bias map to scale/shift.
_ATTN_PARTS = ("q", "k", "v", "out")


def _block_entries(j: int):
    prefix = f"block{j}."
    entries = []
    for attn in ("token_self", "t2i", "i2t"):
        for part in _ATTN_PARTS:
            for kind in ("weight", "bias"):
                entries.append((f"{prefix}{attn}.{part}.{kind}",
                                f"{attn}.{part}.{kind}"))
    for i in (0, 1):
        for kind in ("weight", "bias"):
            entries.append((f"{prefix}mlp.{i}.{kind}", f"mlp.{i}.{kind}"))
    for i in (1, 2, 3, 4):
        entries.append((f"{prefix}norm{i}.scale", f"norm{i}.weight"))
        entries.append((f"{prefix}norm{i}.shift", f"norm{i}.bias"))
    for kind in ("weight", "bias"):
        entries.append((f"{prefix}fuse.{kind}", f"fuse.{kind}"))
    return entries


def block_state_tensors(block: TwoWayBlock, j: int) -> dict:
    state = block.state_dict()
    return {name: state[key] for name, key in _block_entries(j)}


def save_block_weights(path, blocks, extra: dict = None) -> None:
    """Save a list of two-way blocks (plus optional extra tensors)."""
    tensors = {}
    for j, block in enumerate(blocks):
        tensors.update(block_state_tensors(block, j))
    if extra:
        tensors.update(extra)
    archive.write_archive(path, tensors)


def load_block_weights(path, block_index: int, cfg: ModelConfig) -> TwoWayBlock:
    """Instantiate a block from an archive; reports every offending tensor."""
    tensors = archive.read_archive(path)
    block = TwoWayBlock(cfg)
    load_block_weights_into(tensors, block, block_index, path)
    return block


def load_block_weights_into(tensors: dict, block: TwoWayBlock,
                            block_index: int, path="archive") -> None:
    state = block.state_dict()
    problems = []
    update = {}
    for name, key in _block_entries(block_index):
        if name not in tensors:
            problems.append(f"missing tensor {name!r}")
            continue
        arr = tensors[name]
        if tuple(arr.shape) != tuple(state[key].shape):
            problems.append(
                f"tensor {name!r} has shape {tuple(arr.shape)}, "
                f"expected {tuple(state[key].shape)}"
            )
            continue
        update[key] = torch.from_numpy(arr).to(state[key].dtype)
    if problems:
        raise archive.ArchiveError(f"{path}: " + "; ".join(problems))
    block.load_state_dict(update, strict=True)
