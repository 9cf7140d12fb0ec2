"""Vision-language fusion.

Per class: the scalar correlation map is lifted to C channels, concatenated
with the refined vision feature and projected back to C, then passed
through two windowed self-attention blocks (regular and half-window cyclic
shift). Across classes: linear attention at each spatial position with the
text embeddings as keys and values, kernel feature map elu(x)+1, no
positional information, so the class axis stays order-agnostic. A final
pointwise head reduces each class back to a scalar map for the next block.

All sublayers are pre-norm residuals: zeroing the output projections makes
the attention blocks exact identities.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .correlation import CorrelationMap


class EmbeddedCorrelation:
    """Per-class, per-channel refined correlation, shape (N_c, C, H, W)."""

    def __init__(self, values: torch.Tensor):
        self.values = values


class WindowBlock(nn.Module):
    """Windowed multi-head self-attention + MLP, both pre-norm residual."""

    def __init__(self, cfg: ModelConfig, shifted: bool):
        super().__init__()
        C = cfg.C
        self.window = cfg.window
        self.shift = cfg.window // 2 if shifted else 0
        self.heads = cfg.heads
        self.norm1 = nn.LayerNorm(C)
        self.qkv = nn.Linear(C, 3 * C)
        self.out = nn.Linear(C, C)
        self.norm2 = nn.LayerNorm(C)
        mlp_dim = int(C * cfg.vlf_mlp_ratio)
        self.mlp = nn.ModuleList([nn.Linear(C, mlp_dim), nn.Linear(mlp_dim, C)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, C, H, W)"""
        b, c, h, w = x.shape
        if h % self.window or w % self.window:
            raise ValueError(f"window {self.window} must divide {h}x{w}")
        t = x.permute(0, 2, 3, 1)
        t = t + self._window_attn(self.norm1(t))
        t = t + self.mlp[1](F.gelu(self.mlp[0](self.norm2(t))))
        return t.permute(0, 3, 1, 2)

    def _window_attn(self, t: torch.Tensor) -> torch.Tensor:
        b, h, w, c = t.shape
        ws = self.window
        if self.shift:
            t = torch.roll(t, shifts=(-self.shift, -self.shift), dims=(1, 2))
        # Partition into (b * n_windows, ws*ws, c).
        t = t.reshape(b, h // ws, ws, w // ws, ws, c)
        t = t.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)

        qkv = self.qkv(t).reshape(-1, ws * ws, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * (c // self.heads) ** -0.5, -1)
        t = (attn @ v).transpose(1, 2).reshape(-1, ws * ws, c)
        t = self.out(t)

        t = t.reshape(b, h // ws, w // ws, ws, ws, c)
        t = t.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
        if self.shift:
            t = torch.roll(t, shifts=(self.shift, self.shift), dims=(1, 2))
        return t


class ClassFusion(nn.Module):
    """Linear attention across classes at each position, text as key/value."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.C
        self.norm_q = nn.LayerNorm(C)
        self.norm_kv = nn.LayerNorm(C)
        self.wq = nn.Linear(C, C)
        self.wk = nn.Linear(C, C)
        self.wv = nn.Linear(C, C)
        self.out = nn.Linear(C, C)
        self.norm2 = nn.LayerNorm(C)
        mlp_dim = int(C * cfg.vlf_mlp_ratio)
        self.mlp = nn.ModuleList([nn.Linear(C, mlp_dim), nn.Linear(mlp_dim, C)])

    @staticmethod
    def feature_map(x: torch.Tensor) -> torch.Tensor:
        return F.elu(x) + 1.0

    def attention_weights(self, c_v: torch.Tensor, text: torch.Tensor):
        """Implicit attention weights, shape (HW, N_c, N_c); rows sum to 1."""
        q, k, _ = self._qkv(c_v, text)
        logits = q @ k.transpose(-2, -1)            # (HW, N_c, N_c), nonneg
        return logits / logits.sum(dim=-1, keepdim=True)

    def _qkv(self, c_v: torch.Tensor, text: torch.Tensor):
        n_c, c, h, w = c_v.shape
        x = c_v.permute(2, 3, 0, 1).reshape(h * w, n_c, c)
        kv = self.norm_kv(text.t())                 # (N_c, C)
        q = self.feature_map(self.wq(self.norm_q(x)))
        k = self.feature_map(self.wk(kv)).unsqueeze(0)
        v = self.wv(kv).unsqueeze(0)
        return q, k, v

    def forward(self, c_v: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        n_c, c, h, w = c_v.shape
        x = c_v.permute(2, 3, 0, 1).reshape(h * w, n_c, c)
        q, k, v = self._qkv(c_v, text)
        kv = k.transpose(-2, -1) @ v                # (1, C, C)
        denom = q @ k.sum(dim=-2, keepdim=True).transpose(-2, -1)
        x = x + self.out((q @ kv) / denom)
        x = x + self.mlp[1](F.gelu(self.mlp[0](self.norm2(x))))
        return x.reshape(h, w, n_c, c).permute(2, 3, 0, 1)


class VLF(nn.Module):
    """One fusion stage: embed, spatial fusion, class fusion, scalar head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Conv2d(1, cfg.C, 1)
        self.inproj = nn.Conv2d(2 * cfg.C, cfg.C, 1)
        self.win0 = WindowBlock(cfg, shifted=False)
        self.win1 = WindowBlock(cfg, shifted=True)
        self.class_fusion = ClassFusion(cfg)
        self.reduce = nn.Conv2d(cfg.C, 1, 1)

    def embed_correlation(self, corr) -> torch.Tensor:
        values = corr.values if isinstance(corr, CorrelationMap) else corr
        return self.embed(values.unsqueeze(1))

    def spatial_fusion(self, c_e: torch.Tensor, refined_grid: torch.Tensor) -> torch.Tensor:
        n_c = c_e.shape[0]
        grid = refined_grid.unsqueeze(0).expand(n_c, -1, -1, -1)
        x = self.inproj(torch.cat([c_e, grid], dim=1))
        return self.win1(self.win0(x))

    def reduce_to_scalar(self, embedded) -> CorrelationMap:
        values = embedded.values if isinstance(embedded, EmbeddedCorrelation) else embedded
        return CorrelationMap(values=self.reduce(values).squeeze(1))

    def forward(self, corr, refined_grid: torch.Tensor, text: torch.Tensor):
        c_e = self.embed_correlation(corr)
        c_v = self.spatial_fusion(c_e, refined_grid)
        embedded = EmbeddedCorrelation(self.class_fusion(c_v, text))
        return embedded, self.reduce_to_scalar(embedded)
