"""Dataset manifests and the in-memory case store used by the training loops."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .patches import PatchSpec, extract_stack, patchify_batch
from .text import format_prompt
from .volume import CT_WINDOW, PET_WINDOW, VolumePair, normalize_pair, read_bundle, resize_pair

MANIFEST_VERSION = 1


class ManifestError(Exception):
    pass


def write_manifest(path, cases: List[Dict], seed: int) -> Path:
    path = Path(path)
    doc = {"format_version": MANIFEST_VERSION, "seed": seed, "cases": cases}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> Dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    if doc.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {doc.get('format_version')!r}")
    for case in doc.get("cases", []):
        if not {"id", "bundle", "split", "prompt"} <= set(case):
            raise ManifestError(f"{path}: case entry missing fields: {case}")
    doc["root"] = str(path.parent)
    return doc


def manifest_cases(manifest: Dict, split: Optional[str] = None) -> List[Dict]:
    return [c for c in manifest["cases"] if split is None or c["split"] == split]


def subset_fraction(cases: Sequence, fraction: float, seed: int) -> List:
    """Seed-deterministic subset of ``ceil(fraction * n)`` cases, order kept."""
    if not 0 < fraction <= 1:
        raise ValueError(f"train fraction must lie in (0, 1], got {fraction}")
    n = len(cases)
    k = math.ceil(fraction * n - 1e-9)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.permutation(n)[:k])
    return [cases[i] for i in keep]


def preprocess(pair: VolumePair, resize_dims=None, ct_window=CT_WINDOW, pet_window=PET_WINDOW) -> VolumePair:
    pair = normalize_pair(pair, ct_window, pet_window)
    if resize_dims is not None:
        pair = resize_pair(pair, resize_dims)
    return pair


def load_pairs(manifest: Dict, cases: Sequence[Dict], resize_dims=None,
               ct_window=CT_WINDOW, pet_window=PET_WINDOW) -> List[VolumePair]:
    root = Path(manifest["root"])
    return [preprocess(read_bundle(root / c["bundle"]), resize_dims, ct_window, pet_window) for c in cases]


@dataclass
class Batch:
    ct: np.ndarray  # (B, T, P)
    pet: np.ndarray
    prompts: List[str]
    mask: Optional[np.ndarray] = None  # (B, H, W, D) lesion mask patches
    ct_patch: Optional[np.ndarray] = None  # (B, H, W, D)
    pet_patch: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return self.ct.shape[0]


def make_batch(pairs: Sequence[VolumePair], spec: PatchSpec, rng=None, origins=None, keep_patches=False) -> Batch:
    """Crop one patch per pair (random origin from ``rng`` unless ``origins``)."""
    cts, pets, masks = [], [], []
    for i, pair in enumerate(pairs):
        origin = None if origins is None else origins[i]
        ct, pet, mask, _ = extract_stack(pair, spec, origin=origin, rng=rng)
        cts.append(ct)
        pets.append(pet)
        masks.append(mask)
    ct = np.stack(cts).astype(np.float32)
    pet = np.stack(pets).astype(np.float32)
    mask = None if any(m is None for m in masks) else np.stack(masks).astype(np.int64)
    labels = None
    if all(p.stage_label is not None for p in pairs):
        labels = np.array([int(p.stage_label.value == "advanced") for p in pairs], dtype=np.int64)
    return Batch(
        ct=patchify_batch(ct, spec.token_size),
        pet=patchify_batch(pet, spec.token_size),
        prompts=[format_prompt(p.metadata) for p in pairs],
        mask=mask,
        ct_patch=ct if keep_patches else None,
        pet_patch=pet if keep_patches else None,
        labels=labels,
    )


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
