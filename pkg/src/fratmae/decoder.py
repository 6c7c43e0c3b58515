"""Cross-attention decoders that rebuild the masked modality from its visible
tokens plus the fully visible other modality, and the reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .encoder import EncodedRepresentation
from .layers import CrossBlock, init_params


@dataclass
class DecoderConfig:
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    self_attention: bool = True
    # position-aligned init: unit-variance positions, cross-attention q/k = gain * I
    aligned_init: bool = True
    qk_gain: float = 2.0
    pos_std: float = 1.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"decoder embed_dim {self.embed_dim} not divisible by heads {self.heads}")


class CrossDecoder(nn.Module):
    """Decoder for one masked modality.

    With ``cross=False`` the blocks are self-attention only, which is the plain
    MAE decoder used by the ablations without cross-modal reconstruction.
    """

    def __init__(self, enc_dim: int, num_tokens: int, token_voxels: int, cfg: DecoderConfig, cross: bool = True):
        super().__init__()
        self.cfg = cfg
        self.cross = cross
        self.num_tokens = num_tokens
        self.embed = nn.Linear(enc_dim, cfg.embed_dim)
        self.kv_embed = nn.Linear(enc_dim, cfg.embed_dim) if cross else None
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_tokens + 1, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            CrossBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, self_attention=cfg.self_attention or not cross,
                       cross=cross)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, token_voxels)

    def aligned_init(self, seed: int) -> "CrossDecoder":
        """Start cross-attention out matching equal grid positions.

        With small random q/k projections the attention is uniform and the
        gradient towards positional matching vanishes, so the decoder learns
        to ignore the other modality. Identity q/k over shared unit-variance
        positions makes each query initially prefer its own position.
        """
        if not self.cfg.aligned_init:
            return self
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            pos = torch.randn(self.pos_embed.shape, generator=gen, dtype=torch.float64) * self.cfg.pos_std
            self.pos_embed.copy_(pos.to(self.pos_embed.dtype))
            for blk in self.blocks:
                if blk.cross_attn is not None:
                    eye = torch.eye(blk.cross_attn.dim) * self.cfg.qk_gain
                    blk.cross_attn.q.weight.copy_(eye)
                    blk.cross_attn.k.weight.copy_(eye)
        return self

    def restore_sequence(self, rep: EncodedRepresentation) -> torch.Tensor:
        """Project encoder output and re-insert mask tokens: (B, T + 1, C)."""
        x = self.embed(rep.tokens)
        B, C = x.shape[0], x.shape[-1]
        cls, vis = x[:, :1], x[:, 1:]
        if rep.visible_index is None:
            if vis.shape[1] != self.num_tokens:
                raise ValueError("full representation does not cover the token grid")
            full = vis
        else:
            index = rep.visible_index
            full = self.mask_token.expand(B, self.num_tokens, C)
            if index.ndim == 1:
                full = full.index_copy(1, index, vis)
            else:
                full = full.scatter(1, index.unsqueeze(-1).expand(-1, -1, C), vis)
        return torch.cat([cls, full], dim=1) + self.pos_embed

    def forward(self, rep_masked: EncodedRepresentation,
                rep_unmasked: Optional[EncodedRepresentation] = None) -> torch.Tensor:
        x = self.restore_sequence(rep_masked)
        context = None
        if self.cross:
            if rep_unmasked is None:
                raise ValueError("cross decoder needs the unmasked modality's representation")
            context = self.kv_embed(rep_unmasked.tokens) + self.pos_embed[:, : rep_unmasked.tokens.shape[1]]
        for blk in self.blocks:
            x = blk(x, context)
        return self.head(self.norm(x))[:, 1:]


def _check_plan(rep: EncodedRepresentation, token_mask: np.ndarray) -> None:
    n_vis = rep.tokens.shape[1] - 1
    expected = int(np.asarray(token_mask).reshape(-1, token_mask.shape[-1])[0].sum())
    if n_vis != expected:
        raise ValueError(f"representation holds {n_vis} visible tokens, plan keeps {expected}")


def decode_cross(rep_masked: EncodedRepresentation, rep_unmasked: Optional[EncodedRepresentation],
                 plan, decoder: CrossDecoder) -> torch.Tensor:
    """Full-length (B, T, voxels) prediction for the plan's masked modality."""
    _check_plan(rep_masked, plan.token_mask)
    return decoder(rep_masked, rep_unmasked)


def reconstruction_loss(pred, target, token_mask, support: str = "masked_only") -> torch.Tensor:
    """Mean squared error over masked tokens (``token_mask == 0``).

    ``support="full"`` averages over every token instead. Returns 0 when
    nothing is masked.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    sq = (pred - target) ** 2
    if support == "full":
        return sq.mean()
    if support != "masked_only":
        raise ValueError(f"unknown loss support {support!r}")
    visible = torch.as_tensor(np.asarray(token_mask), dtype=pred.dtype)
    if pred.ndim == 3 and visible.ndim == 1:
        visible = visible.expand(pred.shape[0], -1)
    if visible.shape != pred.shape[:-1]:
        raise ValueError(f"token mask {tuple(visible.shape)} does not match prediction grid {tuple(pred.shape[:-1])}")
    weight = (1.0 - visible).unsqueeze(-1)
    n = weight.sum() * pred.shape[-1]
    if n == 0:
        return (sq * 0.0).sum()
    return (sq * weight).sum() / n


def build_decoder(enc_dim, num_tokens, token_voxels, cfg: DecoderConfig, cross: bool, seed: int) -> CrossDecoder:
    return init_params(CrossDecoder(enc_dim, num_tokens, token_voxels, cfg, cross=cross), seed).aligned_init(seed)
