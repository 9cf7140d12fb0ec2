"""Vision-language correlation: per-class cosine similarity grids."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .encoders import TextFeature, VisionFeature

# Image positions with a norm below this are treated as degenerate and get
# a zero correlation row; toy encoders can emit near-zero vectors early in
# training and an exception here would abort the run.
NORM_FLOOR = 1e-12


@dataclass
class CorrelationMap:
    """Per-class spatial similarity grid, shape (N_c, H, W)."""
    values: torch.Tensor

    @property
    def class_count(self) -> int:
        return self.values.shape[0]


def correlate(vision: VisionFeature, text: TextFeature) -> CorrelationMap:
    """Cosine similarity between every image position and every class column."""
    grid = vision.grid if isinstance(vision, VisionFeature) else vision
    table = text.table if isinstance(text, TextFeature) else text
    C, H, W = grid.shape
    if table.shape[0] != C:
        raise ValueError(
            f"channel mismatch: vision has {C}, text has {table.shape[0]}"
        )

    t_norm = torch.linalg.vector_norm(table, dim=0)
    if bool((t_norm < NORM_FLOOR).any()):
        raise ValueError("text feature has a zero-norm class column")

    flat = grid.reshape(C, H * W)
    v_norm = torch.linalg.vector_norm(flat, dim=0)
    degenerate = v_norm < NORM_FLOOR
    safe_v = torch.where(degenerate, torch.ones_like(v_norm), v_norm)

    sims = (table.t() @ flat) / (t_norm.unsqueeze(1) * safe_v.unsqueeze(0))
    sims = torch.where(degenerate.unsqueeze(0), torch.zeros_like(sims), sims)
    return CorrelationMap(values=sims.reshape(-1, H, W))
