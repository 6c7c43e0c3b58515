"""Stage-2 heads on the pre-trained encoders: layer-wise PET/CT fusion, a
UNETR-style lesion segmentation decoder and a centre-crop staging MLP."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncodedRepresentation, EncoderConfig, ModalityEncoder
from .layers import init_params
from .model import MODALITIES, derive_seed
from .patches import PatchSpec, center_origin, extract_stack
from .volume import Modality, VolumePair


@dataclass
class FusedFeatures:
    per_level: List[torch.Tensor]  # 4 x (B, 2ch, h, w, d), CT channels first
    grid_dims: Tuple[int, int, int]


def fuse_layerwise(rep_ct: EncodedRepresentation, rep_pet: EncodedRepresentation) -> FusedFeatures:
    """Concatenate CT and PET tapped layers along channels (CT first), drop the
    CLS token and fold tokens back onto the (h, w, d) grid."""
    if rep_ct.grid_dims != rep_pet.grid_dims:
        raise ValueError(f"grid mismatch: {rep_ct.grid_dims} vs {rep_pet.grid_dims}")
    if not (rep_ct.is_full and rep_pet.is_full):
        raise ValueError("fusion needs unmasked encodings of both modalities")
    h, w, d = rep_ct.grid_dims
    levels = []
    for a, b in zip(rep_ct.per_layer, rep_pet.per_layer):
        x = torch.cat([a[:, 1:], b[:, 1:]], dim=-1)
        if x.shape[1] != h * w * d:
            raise ValueError(f"{x.shape[1]} tokens do not fill grid {rep_ct.grid_dims}")
        levels.append(x.reshape(x.shape[0], h, w, d, x.shape[-1]).permute(0, 4, 1, 2, 3))
    return FusedFeatures(levels, rep_ct.grid_dims)


def _stage_factors(token_size: Sequence[int]) -> List[Tuple[int, int, int]]:
    """Per-stage upsampling factors (2 or 1 per axis) from token grid to voxels."""
    doublings = []
    for t in token_size:
        n = int(round(math.log2(t)))
        if 2 ** n != t:
            raise ValueError(f"segmentation decoder needs power-of-two token sizes, got {tuple(token_size)}")
        doublings.append(n)
    U = max(doublings)
    if U == 0:
        raise ValueError("token size 1x1x1 leaves nothing to upsample")
    return [tuple(2 if s >= U - n else 1 for n in doublings) for s in range(U)]


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv3d(cin, cout, 3, padding=1),
            nn.InstanceNorm3d(cout, affine=True),
            nn.LeakyReLU(0.01),
        )


class UpBlock(nn.Sequential):
    def __init__(self, cin, cout, factor):
        super().__init__(nn.ConvTranspose3d(cin, cout, kernel_size=factor, stride=factor), ConvBlock(cout, cout))


class SegmentationDecoder(nn.Module):
    """Convolutional decoder with skip connections from four fused encoder
    levels plus a full-resolution convolution over the raw PET/CT input.

    Level ``i`` (0 = shallowest) is lifted ``min(3 - i, U)`` stages above the
    token grid, where ``U`` is the number of 2x stages back to voxel scale.
    Channel widths halve per stage starting from ``2 * ch``.
    """

    def __init__(self, ch: int, token_size, in_channels: int = 2, n_classes: int = 2, min_width: int = 8):
        super().__init__()
        self.factors = _stage_factors(token_size)
        U = len(self.factors)
        self.widths = [max(2 * ch >> s, min_width) for s in range(U + 1)]
        self.level_stage = [min(3 - i, U) for i in range(4)]
        self.bottom = ConvBlock(2 * ch, self.widths[0])
        self.skips = nn.ModuleList()
        for i in range(3):
            st = self.level_stage[i]
            layers = [nn.Conv3d(2 * ch, self.widths[0], 1)]
            for s in range(st):
                layers.append(UpBlock(self.widths[s], self.widths[s + 1], self.factors[s]))
            self.skips.append(nn.Sequential(*layers))
        self.input_conv = ConvBlock(in_channels, self.widths[U])
        self.ups = nn.ModuleList(
            nn.ConvTranspose3d(self.widths[s], self.widths[s + 1], self.factors[s], self.factors[s]) for s in range(U)
        )
        self.merges = nn.ModuleList()
        for s in range(1, U + 1):
            n_skip = sum(1 for i in range(3) if self.level_stage[i] == s) + (1 if s == U else 0)
            self.merges.append(ConvBlock(self.widths[s] * (1 + n_skip), self.widths[s]))
        self.out = nn.Conv3d(self.widths[U], n_classes, 1)

    def forward(self, fused: FusedFeatures, image: torch.Tensor) -> torch.Tensor:
        levels = fused.per_level
        skips = [self.skips[i](levels[i]) for i in range(3)]
        x = self.bottom(levels[3])
        U = len(self.factors)
        for s in range(1, U + 1):
            x = self.ups[s - 1](x)
            parts = [x] + [skips[i] for i in range(3) if self.level_stage[i] == s]
            if s == U:
                parts.append(self.input_conv(image))
            x = self.merges[s - 1](torch.cat(parts, dim=1))
        return self.out(x)


class StagingMLP(nn.Module):
    def __init__(self, ch: int, hidden: int = 64, features: str = "cls_pool", n_classes: int = 2):
        super().__init__()
        if features not in ("cls_pool", "cls"):
            raise ValueError(f"unknown staging feature set {features!r}")
        self.features = features
        in_dim = 4 * ch if features == "cls_pool" else 2 * ch
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, rep_ct: EncodedRepresentation, rep_pet: EncodedRepresentation) -> torch.Tensor:
        feats = [rep_ct.cls, rep_pet.cls]
        if self.features == "cls_pool":
            fused = fuse_layerwise(rep_ct, rep_pet).per_level[-1]
            feats.append(fused.flatten(2).mean(-1))
        return self.fc2(F.gelu(self.fc1(torch.cat(feats, dim=-1))))


class DownstreamModel(nn.Module):
    """Twin encoders plus one task head. Parameter names under ``encoders.``
    match the pre-training network so Stage-1 weights load directly."""

    def __init__(self, task: str, enc_cfg: EncoderConfig, mlp_hidden: int = 64, features: str = "cls_pool"):
        super().__init__()
        if task not in ("seg", "stage"):
            raise ValueError(f"task must be 'seg' or 'stage', got {task!r}")
        self.task = task
        self.enc_cfg = enc_cfg
        self.encoders = nn.ModuleDict({m.value: ModalityEncoder(enc_cfg) for m in MODALITIES})
        if task == "seg":
            self.head = SegmentationDecoder(enc_cfg.embed_dim, enc_cfg.token_size)
        else:
            self.head = StagingMLP(enc_cfg.embed_dim, mlp_hidden, features)

    def reset_parameters(self, seed: int) -> "DownstreamModel":
        for key, enc in self.encoders.items():
            init_params(enc, derive_seed(seed, f"encoders.{key}"))
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(seed, "head"))
            for m in self.head.modules():
                if m is not self.head and hasattr(m, "reset_parameters"):
                    m.reset_parameters()
        return self

    def encode_pair(self, ct_tokens, pet_tokens):
        return self.encoders[Modality.CT.value](ct_tokens), self.encoders[Modality.PET.value](pet_tokens)

    def forward(self, ct_tokens, pet_tokens, image: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Logits: (B, 2, H, W, D) for segmentation, (B, 2) for staging."""
        rep_ct, rep_pet = self.encode_pair(ct_tokens, pet_tokens)
        if self.task == "seg":
            if image is None:
                raise ValueError("segmentation needs the raw (B, 2, H, W, D) patch")
            return self.head(fuse_layerwise(rep_ct, rep_pet), image)
        return self.head(rep_ct, rep_pet)


def segment(model: DownstreamModel, ct_tokens, pet_tokens, image) -> torch.Tensor:
    """Per-voxel background/lesion probabilities, (B, 2, H, W, D)."""
    return model(ct_tokens, pet_tokens, image).softmax(dim=1)


def stage_classify(model: DownstreamModel, ct_tokens, pet_tokens) -> torch.Tensor:
    """Probabilities over (early, advanced), (B, 2)."""
    return model(ct_tokens, pet_tokens).softmax(dim=-1)


def seg_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice loss on the lesion channel plus voxel-mean cross-entropy,
    weighted 1:1. ``probs`` is (B, 2, ...) and ``target`` (B, ...) in {0, 1}."""
    target = torch.as_tensor(target)
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise ValueError(f"probabilities {tuple(probs.shape)} do not match target {tuple(target.shape)}")
    if not bool(((target == 0) | (target == 1)).all()):
        raise ValueError("segmentation target must be binary")
    t = target.to(probs.dtype)
    fg = probs[:, 1].flatten(1)
    tf = t.flatten(1)
    dice = (2 * (fg * tf).sum(1) + eps) / (fg.sum(1) + tf.sum(1) + eps)
    p_true = torch.where(target.bool(), probs[:, 1], probs[:, 0])
    ce = -torch.log(p_true.clamp_min(1e-12)).mean()
    return (1 - dice).mean() + ce


def center_crop(pair: VolumePair, spec: PatchSpec):
    """Deterministic centred crop with the same height stacking as pre-training.
    Returns ``(ct_patch, pet_patch, mask_patch_or_None, origin)``."""
    return extract_stack(pair, spec, origin=center_origin(pair.shape, spec))
