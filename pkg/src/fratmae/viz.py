"""Reconstruction panels: coronal mid-slices of the input, the masked input and
the reconstruction for each modality, written as grayscale PNGs."""

from __future__ import annotations

from pathlib import Path
from typing import Dict

import numpy as np
import torch
from PIL import Image

from .data import make_batch
from .masking import MaskingPlan, sample_masking_plan
from .model import MODALITIES, FratMAE
from .patches import PatchSpec, center_origin, unpatchify_batch
from .volume import Modality, VolumePair

PANEL_COLUMNS = ("input", "masked", "reconstruction")


def coronal_mid_slice(patch: np.ndarray) -> np.ndarray:
    """(H, W) slice at the middle of the depth axis of an (H, W, D) patch."""
    return patch[:, :, patch.shape[2] // 2]


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def panel_image(columns, scale: int = 4, gap: int = 2) -> Image.Image:
    """Side-by-side grayscale columns separated by ``gap`` black pixels, each
    enlarged by an integer nearest-neighbour ``scale``."""
    tiles = [np.kron(_to_uint8(c), np.ones((scale, scale), dtype=np.uint8)) for c in columns]
    h = tiles[0].shape[0]
    sep = np.zeros((h, gap), dtype=np.uint8)
    parts = []
    for i, t in enumerate(tiles):
        if i:
            parts.append(sep)
        parts.append(t)
    return Image.fromarray(np.concatenate(parts, axis=1), mode="L")


def reconstruction_panels(model: FratMAE, pair: VolumePair, spec: PatchSpec, seed: int,
                          mask_ratio: float = 0.5) -> Dict[str, Dict[str, np.ndarray]]:
    """One masked forward pass per modality on the centre crop of ``pair``
    (already normalized). The same token mask is used for both modalities;
    visible tokens are pasted back into the reconstruction."""
    if model.decoders is None:
        raise ValueError("checkpoint has no decoders (baseline_none); nothing to reconstruct")
    model.eval()
    batch = make_batch([pair], spec, origins=[center_origin(pair.shape, spec)], keep_patches=True)
    ct, pet = torch.from_numpy(batch.ct), torch.from_numpy(batch.pet)
    base = sample_masking_plan(spec.num_tokens, mask_ratio, np.random.default_rng(seed))
    visible = base.token_mask.astype(np.float32)[None, :, None]
    out = {}
    for modality in MODALITIES:
        plan = MaskingPlan(modality, base.token_mask, mask_ratio)
        pred = model.reconstruct(ct, pet, plan).numpy()
        tokens = batch.ct if modality is Modality.CT else batch.pet
        masked = tokens * visible
        recon = tokens * visible + pred * (1.0 - visible)
        vols = [unpatchify_batch(t, spec.grid_dims, spec.token_size)[0] for t in (tokens, masked, recon)]
        out[modality.value] = {name: coronal_mid_slice(v) for name, v in zip(PANEL_COLUMNS, vols)}
    return out


def write_panels(panels: Dict[str, Dict[str, np.ndarray]], out_dir, scale: int = 4) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for modality, cols in panels.items():
        path = out_dir / f"recon_{modality.lower()}.png"
        panel_image([cols[c] for c in PANEL_COLUMNS], scale).save(path, format="PNG")
        paths[modality] = path
    return paths
