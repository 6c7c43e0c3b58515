"""Per-modality ViT encoders over visible 3D tokens."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .layers import Block, init_params


@dataclass
class EncoderConfig:
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    token_size: Tuple[int, int, int] = (8, 16, 16)
    grid_dims: Tuple[int, int, int] = (4, 10, 12)
    intermediate_taps: Tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        self.token_size = tuple(int(t) for t in self.token_size)
        self.grid_dims = tuple(int(g) for g in self.grid_dims)
        self.intermediate_taps = tuple(int(t) for t in self.intermediate_taps)
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        taps = self.intermediate_taps
        if len(taps) != 4 or any(b <= a for a, b in zip(taps, taps[1:])) or taps[0] < 1 or taps[-1] > self.depth:
            raise ValueError(f"need 4 strictly increasing taps within 1..{self.depth}, got {taps}")

    @property
    def num_tokens(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def token_voxels(self) -> int:
        return int(np.prod(self.token_size))

    @classmethod
    def vit_b(cls, token_size=(8, 16, 16), grid_dims=(4, 10, 12)) -> "EncoderConfig":
        return cls(embed_dim=768, depth=12, heads=12, token_size=token_size, grid_dims=grid_dims,
                   intermediate_taps=(3, 6, 9, 12))


@dataclass
class EncodedRepresentation:
    tokens: torch.Tensor  # (B, n_visible + 1, ch), CLS at position 0
    per_layer: List[torch.Tensor]
    grid_dims: Tuple[int, int, int]
    visible_index: Optional[torch.Tensor] = None  # None means every token is present

    @property
    def cls(self) -> torch.Tensor:
        return self.tokens[:, 0]

    @property
    def is_full(self) -> bool:
        return self.visible_index is None


def gather_positions(pos: torch.Tensor, index: Optional[torch.Tensor], batch: int) -> torch.Tensor:
    """Positional rows for the kept tokens; ``pos`` is (1, T, C)."""
    if index is None:
        return pos.expand(batch, -1, -1)
    if index.ndim == 1:
        return pos[:, index].expand(batch, -1, -1)
    return pos[0][index]


class ModalityEncoder(nn.Module):
    """Linear patch embedding + learned positions gathered by original token
    index + CLS + pre-norm transformer blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.token_voxels, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.embed_dim))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, tokens: torch.Tensor, index: Optional[torch.Tensor] = None) -> EncodedRepresentation:
        if tokens.ndim != 3 or tokens.shape[-1] != self.cfg.token_voxels:
            raise ValueError(f"expected (B, n, {self.cfg.token_voxels}) tokens, got {tuple(tokens.shape)}")
        B, n, _ = tokens.shape
        if index is None and n != self.cfg.num_tokens:
            raise ValueError(f"{n} tokens given without an index map; grid has {self.cfg.num_tokens}")
        if index is not None and index.shape[-1] != n:
            raise ValueError("index map length does not match token count")
        x = self.patch_embed(tokens)
        x = x + gather_positions(self.pos_embed, index, B)
        x = torch.cat([self.cls_token.expand(B, -1, -1), x], dim=1)
        per_layer = []
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in self.cfg.intermediate_taps:
                per_layer.append(x)
        x = self.norm(x)
        return EncodedRepresentation(x, per_layer, self.cfg.grid_dims, index)


def encode(tokens: torch.Tensor, index: Optional[torch.Tensor], encoder: ModalityEncoder) -> EncodedRepresentation:
    return encoder(tokens, index)


def build_encoder(cfg: EncoderConfig, seed: int) -> ModalityEncoder:
    return init_params(ModalityEncoder(cfg), seed)
