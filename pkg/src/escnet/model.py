"""Full segmentation model: correlation refinement stages plus a decoder.

Each refinement stage turns the incoming scalar correlation map into pseudo
prompts, refines the vision feature with a two-way attention block, and
fuses vision and text back into a per-class embedded correlation; stages
chain on the scalar reduction. The final embedded correlation is decoded
per class (shared weights) with two bilinear-upsample + skip + 3x3 conv
stages and a pointwise one-logit head.

Prompt coordinates are constants of the forward pass: gradients reach the
prompt encoder's learned parameters and flow through the vision feature
and the correlation map, never through binarization or clustering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import archive
from .config import ModelConfig
from .correlation import CorrelationMap, correlate
from .encoders import ToyTextEncoder, ToyVisionEncoder
from .ppg import PromptEncoder, PseudoPrompts, generate_prompts
from .samblock import TwoWayBlock, block_state_tensors, refine_vision
from .seeding import substream
from .vlf import VLF

IGNORE_INDEX = 255


@dataclass
class SegmentationOutput:
    logits: torch.Tensor   # (N_c, S, S)
    labels: torch.Tensor   # (S, S) int64, argmax over classes (ties -> lowest)

    @property
    def M(self) -> torch.Tensor:
        return self.labels


class Decoder(nn.Module):
    """Two upsample+skip+conv stages, then a pointwise one-logit head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w0, w1 = cfg.enc_widths[0], cfg.enc_widths[1]
        d0, d1 = cfg.dec_widths
        self.conv0 = nn.Conv2d(cfg.C + w1, d0, 3, padding=1)
        self.conv1 = nn.Conv2d(d0 + w0, d1, 3, padding=1)
        self.head = nn.Conv2d(d1, 1, 1)
        self.image_size = cfg.image_size

    def forward(self, per_class: torch.Tensor, skips) -> torch.Tensor:
        n_c = per_class.shape[0]
        x = F.interpolate(per_class, scale_factor=2, mode="bilinear",
                          align_corners=False)
        x = torch.cat([x, skips[0].unsqueeze(0).expand(n_c, -1, -1, -1)], dim=1)
        x = F.relu(self.conv0(x))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = torch.cat([x, skips[1].unsqueeze(0).expand(n_c, -1, -1, -1)], dim=1)
        x = F.relu(self.conv1(x))
        if x.shape[-1] != self.image_size:
            x = F.interpolate(x, size=(self.image_size, self.image_size),
                              mode="bilinear", align_corners=False)
        return self.head(x).squeeze(1)


class ESCNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.kmeans_seed = substream(cfg.seed, "ppg.kmeans")
        with torch.random.fork_rng():
            torch.manual_seed(substream(cfg.seed, "init"))
            self.vision = ToyVisionEncoder(cfg)
            self.text = ToyTextEncoder(cfg)
            if cfg.sam_arm != "none":
                self.prompt = PromptEncoder(cfg)
                self.blocks = nn.ModuleList(TwoWayBlock(cfg) for _ in range(cfg.N))
            else:
                self.prompt = None
                self.blocks = None
            self.vlfs = nn.ModuleList(VLF(cfg) for _ in range(cfg.N))
            self.decoder = Decoder(cfg)

    @property
    def uses_prompts(self) -> bool:
        return self.cfg.sam_arm != "none"

    def esc_block(self, j: int, corr: CorrelationMap, vision, text,
                  frozen_prompts: PseudoPrompts = None):
        """One refinement stage; returns (embedded, next scalar map, prompts)."""
        prompts = None
        if self.uses_prompts:
            if frozen_prompts is None:
                with torch.no_grad():
                    values = corr.values.detach().cpu().numpy()
                prompts = generate_prompts(values, self.cfg, self.kmeans_seed)
            else:
                prompts = frozen_prompts
            embeds = self.prompt(prompts)
            pe = self.prompt.pe.grid(self.cfg.H, self.cfg.W)
            refined = refine_vision(vision, embeds, self.blocks[j], pe).grid
        else:
            refined = vision.grid
        embedded, nxt = self.vlfs[j](corr, refined, text.table)
        return embedded, nxt, prompts

    def forward(self, image: torch.Tensor, class_ids,
                frozen_prompts=None, return_prompts: bool = False):
        if len(class_ids) == 0:
            raise ValueError("class_ids must be nonempty")
        vision = self.vision(image)
        text = self.text(class_ids)
        corr = correlate(vision, text)
        used = []
        embedded = None
        for j in range(self.cfg.N):
            frozen = frozen_prompts[j] if frozen_prompts is not None else None
            embedded, corr, prompts = self.esc_block(j, corr, vision, text, frozen)
            used.append(prompts)
        logits = self.decoder(embedded.values, vision.skips)
        out = SegmentationOutput(logits=logits, labels=logits.argmax(dim=0))
        return (out, used) if return_prompts else out

    @torch.no_grad()
    def predict(self, image: torch.Tensor, class_ids) -> SegmentationOutput:
        return self.forward(image, class_ids)

    def parameter_groups(self):
        """(backbone, head) parameter lists for the dual learning rates."""
        backbone = list(self.vision.parameters()) + list(self.text.parameters())
        if self.uses_prompts:
            backbone += list(self.prompt.parameters())
            backbone += list(self.blocks.parameters())
        head = list(self.vlfs.parameters()) + list(self.decoder.parameters())
        return backbone, head


def loss(logits: torch.Tensor, gt_labels: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels."""
    n_c = logits.shape[0]
    keep = gt_labels != IGNORE_INDEX
    if not bool(keep.any()):
        raise ValueError("loss undefined: every pixel carries the ignore index")
    kept = gt_labels[keep]
    if bool((kept < 0).any()) or bool((kept >= n_c).any()):
        raise ValueError(f"ground-truth labels outside [0, {n_c}) present")
    return F.cross_entropy(
        logits.unsqueeze(0), gt_labels.unsqueeze(0).long(),
        ignore_index=IGNORE_INDEX,
    )


# -- parameter archive naming ------------------------------------------------

def _layernorm_prefixes(model: nn.Module):
    return {
        name for name, mod in model.named_modules()
        if isinstance(mod, nn.LayerNorm)
    }


def _archive_name(key: str, ln_prefixes) -> str:
    module_path, _, leaf = key.rpartition(".")
    if module_path in ln_prefixes:
        leaf = {"weight": "scale", "bias": "shift"}[leaf]
    name = module_path + "." + leaf if module_path else leaf
    for src, dst in (("vision.", "enc_v."), ("text.", "enc_t.")):
        if name.startswith(src):
            return dst + name[len(src):]
    for src, fmt in (("blocks.", "block{}"), ("vlfs.", "vlf{}")):
        if name.startswith(src):
            rest = name[len(src):]
            idx, _, tail = rest.partition(".")
            return fmt.format(idx) + "." + tail
    if name.startswith("decoder."):
        return "dec." + name[len("decoder."):]
    return name  # prompt.* stays as-is


def parameter_archive(model: ESCNet) -> dict:
    """Flatten the model state into spec-stable archive names."""
    ln = _layernorm_prefixes(model)
    return {
        _archive_name(key, ln): value
        for key, value in model.state_dict().items()
    }


def save_checkpoint(model: ESCNet, cfg: ModelConfig, prefix) -> None:
    archive.write_archive(str(prefix) + ".tensors", parameter_archive(model))
    cfg.save_json(str(prefix) + ".json")


def load_checkpoint(prefix, dtype=torch.float32) -> tuple:
    """Rebuild a model from `prefix` (.tensors + .json); bit-exact for f32."""
    cfg = ModelConfig.load_json(str(prefix) + ".json")
    model = ESCNet(cfg).to(dtype)
    tensors = archive.read_archive(str(prefix) + ".tensors")
    ln = _layernorm_prefixes(model)
    state = model.state_dict()
    update, problems = {}, []
    for key, current in state.items():
        name = _archive_name(key, ln)
        if name not in tensors:
            problems.append(f"missing tensor {name!r}")
            continue
        arr = tensors[name]
        if tuple(arr.shape) != tuple(current.shape):
            problems.append(
                f"tensor {name!r} has shape {tuple(arr.shape)}, "
                f"expected {tuple(current.shape)}"
            )
            continue
        update[key] = torch.from_numpy(arr).to(dtype)
    if problems:
        raise archive.ArchiveError(f"{prefix}.tensors: " + "; ".join(problems))
    model.load_state_dict(update, strict=True)
    return model, cfg


def load_pretrained_sam(model: ESCNet, path) -> None:
    """Load two-way block and prompt-encoder weights from a weight archive."""
    if not model.uses_prompts:
        raise ValueError("model has no two-way blocks to load into")
    tensors = archive.read_archive(path)
    from .samblock import load_block_weights_into
    for j, block in enumerate(model.blocks):
        load_block_weights_into(tensors, block, j, path)
    prompt_state = model.prompt.state_dict()
    update, problems = {}, []
    for key, current in prompt_state.items():
        name = "prompt." + key
        if name not in tensors:
            problems.append(f"missing tensor {name!r}")
            continue
        arr = tensors[name]
        if tuple(arr.shape) != tuple(current.shape):
            problems.append(f"tensor {name!r} has shape {tuple(arr.shape)}")
            continue
        update[key] = torch.from_numpy(arr).to(current.dtype)
    if problems:
        raise archive.ArchiveError(f"{path}: " + "; ".join(problems))
    model.prompt.load_state_dict(update, strict=True)


def prompt_archive_tensors(model: ESCNet) -> dict:
    return {
        "prompt." + key: value
        for key, value in model.prompt.state_dict().items()
    }


def sam_archive_tensors(model: ESCNet) -> dict:
    tensors = {}
    for j, block in enumerate(model.blocks):
        tensors.update(block_state_tensors(block, j))
    tensors.update(prompt_archive_tensors(model))
    return tensors


def zero_residual_projections(model: nn.Module) -> None:
    """Zero every attention/MLP output projection (and the per-class fuse),
    turning all residual sublayers into exact identities. Diagnostic only."""
    from .samblock import Attention
    from .vlf import ClassFusion, WindowBlock

    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (Attention, WindowBlock, ClassFusion)):
                mod.out.weight.zero_()
                mod.out.bias.zero_()
            if isinstance(mod, (TwoWayBlock, WindowBlock, ClassFusion)):
                mod.mlp[1].weight.zero_()
                mod.mlp[1].bias.zero_()
            if isinstance(mod, TwoWayBlock):
                mod.fuse.weight.zero_()
                mod.fuse.bias.zero_()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
