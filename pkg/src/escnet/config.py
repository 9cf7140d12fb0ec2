"""Model and training configuration.

A single flat dataclass is the source of truth for every architecture and
training hyperparameter. Configs serialize to JSON and support dotted
``key=value`` overrides so run snapshots stay diffable.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


SAM_ARMS = ("none", "random_sam", "pretrained_sam")


@dataclass
class ModelConfig:
    # Feature geometry.
    C: int = 64                 # embedding channels shared by vision/text
    H: int = 24                 # feature-grid rows
    W: int = 24                 # feature-grid cols
    image_size: int = 96        # input pixels; must be a multiple of H

    # Refinement stack.
    N: int = 4                  # number of ESC blocks
    N_o: int = 5                # pseudo prompts per class
    alpha: float = 0.5          # binarization threshold on the max-normalized map
    tau: float = 0.07           # softmax temperature on cosine correlations
    window: int = 8             # spatial-attention window; must divide H and W
    heads: int = 4              # attention heads (two-way block and windowed fusion)
    attn_downscale: int = 2     # internal channel downscale for cross-attention
    sam_mlp_ratio: float = 2.0  # token MLP width multiplier in the two-way block
    vlf_mlp_ratio: float = 2.0  # MLP width multiplier in the fusion blocks

    # Toy encoders and decoder widths.
    enc_widths: tuple = (16, 32, 48, 48)
    dec_widths: tuple = (48, 32)
    prompt_mask_channels: int = 16
    text_table_size: int = 16   # number of known class ids

    # Prompt combination (points+masks is the default configuration).
    use_points: bool = True
    use_masks: bool = True
    use_boxes: bool = False

    # Ablation arm; snapshot field so arm diffs show up in checkpoints.
    sam_arm: str = "pretrained_sam"

    # Optimization.
    lr_backbone: float = 2e-6   # encoders + two-way blocks + prompt encoder
    lr_head: float = 2e-4       # everything else
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4

    # Training budget.
    epochs: int = 40
    samples_per_epoch: int = 2000
    batch_size: int = 8
    eval_samples: int = 128
    target_miou: float = 0.0    # early-stop threshold; 0 disables

    # Promptable-pretraining budget for the two-way blocks.
    pretrain_steps: int = 1200
    pretrain_batch: int = 8
    pretrain_lr: float = 1e-3
    pretrain_eval_samples: int = 64

    # Data.
    n_classes_train: int = 8
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.H % self.window or self.W % self.window:
            raise ValueError(
                f"window {self.window} must divide H={self.H} and W={self.W}"
            )
        if self.image_size % self.H or self.image_size % self.W:
            raise ValueError(
                f"image_size {self.image_size} must be a multiple of the "
                f"feature grid {self.H}x{self.W}"
            )
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.C % self.heads:
            raise ValueError(f"C={self.C} not divisible by heads={self.heads}")
        if (self.C // self.attn_downscale) % self.heads:
            raise ValueError(
                f"downscaled channels {self.C // self.attn_downscale} not "
                f"divisible by heads={self.heads}"
            )
        if self.sam_arm not in SAM_ARMS:
            raise ValueError(f"sam_arm must be one of {SAM_ARMS}, got {self.sam_arm!r}")
        if self.N_o < 1:
            raise ValueError("N_o must be at least 1")
        if not (self.use_points or self.use_masks or self.use_boxes):
            raise ValueError("at least one prompt type must be enabled")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("enc_widths", "dec_widths", "betas"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("enc_widths", "dec_widths", "betas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load_json(cls, path) -> "ModelConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def with_overrides(self, pairs: list[str]) -> "ModelConfig":
        """Apply ``key=value`` overrides. Unknown keys raise, never create."""
        d = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ValueError(f"override {pair!r} is not of the form key=value")
            key, raw = pair.split("=", 1)
            key = key.strip()
            if key not in d:
                raise KeyError(f"unknown config key {key!r}")
            d[key] = _coerce(raw.strip(), d[key])
        return self.from_dict(d)


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse {raw!r} as bool")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (list, tuple)):
        parts = [p for p in raw.strip("[]() ").split(",") if p]
        elem = current[0] if len(current) else 0
        return [type(elem)(p) for p in parts]
    return raw


def tiny_config(**overrides) -> ModelConfig:
    """Small float64-friendly config used by gradient checks and fast tests."""
    base = dict(
        C=16, H=8, W=8, image_size=32, N=2, N_o=2, window=4, heads=2,
        attn_downscale=2, enc_widths=(4, 8, 8, 8), dec_widths=(8, 8),
        prompt_mask_channels=4, text_table_size=8, n_classes_train=4,
        eval_samples=8, samples_per_epoch=16, epochs=2, batch_size=4,
        pretrain_steps=4, pretrain_batch=2, pretrain_eval_samples=4,
    )
    base.update(overrides)
    return ModelConfig(**base)
