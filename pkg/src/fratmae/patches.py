"""Coronal-stack / axial-stack patch extraction and patch <-> token conversion."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .volume import VolumePair


class StackMode(str, enum.Enum):
    CORONAL = "coronal_stack"
    AXIAL = "axial_stack"

    @classmethod
    def _missing_(cls, value):
        # short names as used on the command line
        return {"coronal": cls.CORONAL, "axial": cls.AXIAL}.get(value)

    @classmethod
    def parse(cls, value) -> "StackMode":
        return cls(value)


@dataclass
class PatchSpec:
    patch_dims: Tuple[int, int, int] = (32, 160, 192)
    k: int = 2
    mode: StackMode = StackMode.CORONAL
    token_size: Tuple[int, int, int] = (8, 16, 16)

    def __post_init__(self):
        self.patch_dims = tuple(int(p) for p in self.patch_dims)
        self.token_size = tuple(int(t) for t in self.token_size)
        self.mode = StackMode.parse(self.mode)
        if self.k < 1:
            raise ValueError(f"subsampling factor k must be >= 1, got {self.k}")
        if any(p % t for p, t in zip(self.patch_dims, self.token_size)):
            raise ValueError(f"patch dims {self.patch_dims} not divisible by token size {self.token_size}")

    @property
    def stride(self) -> int:
        """Height stride applied to the source volume."""
        return self.k if self.mode is StackMode.CORONAL else 1

    @property
    def source_extent(self) -> Tuple[int, int, int]:
        """Source voxels spanned by one crop."""
        H, W, D = self.patch_dims
        return (H * self.stride, W, D)

    @property
    def grid_dims(self) -> Tuple[int, int, int]:
        return tuple(p // t for p, t in zip(self.patch_dims, self.token_size))

    @property
    def num_tokens(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def token_voxels(self) -> int:
        return int(np.prod(self.token_size))

    def to_dict(self):
        return {"patch_dims": list(self.patch_dims), "k": self.k, "mode": self.mode.value,
                "token_size": list(self.token_size)}


@dataclass
class TokenGrid:
    tokens: np.ndarray  # (T, prod(token_size))
    grid_dims: Tuple[int, int, int]
    token_size: Tuple[int, int, int]
    origin: Tuple[int, int, int] = (0, 0, 0)

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


def height_indices(origin_h: int, spec: PatchSpec) -> np.ndarray:
    return origin_h + spec.stride * np.arange(spec.patch_dims[0])


def random_origin(shape: Sequence[int], spec: PatchSpec, rng: np.random.Generator) -> Tuple[int, int, int]:
    extent = spec.source_extent
    if any(e > s for e, s in zip(extent, shape)):
        raise ValueError(f"source {tuple(shape)} smaller than crop extent {extent}")
    return tuple(int(rng.integers(0, s - e + 1)) for s, e in zip(shape, extent))


def crop_array(arr: np.ndarray, spec: PatchSpec, origin: Sequence[int]) -> np.ndarray:
    oh, ow, od = (int(o) for o in origin)
    H, W, D = spec.patch_dims
    extent = spec.source_extent
    if any(o < 0 or o + e > s for o, e, s in zip((oh, ow, od), extent, arr.shape)):
        raise IndexError(f"crop at {tuple(origin)} with extent {extent} exceeds source {arr.shape}")
    rows = height_indices(oh, spec)
    return arr[rows][:, ow:ow + W, od:od + D]


def extract_stack(pair: VolumePair, spec: PatchSpec, origin: Optional[Sequence[int]] = None,
                  rng: Optional[np.random.Generator] = None):
    """Crop CT, PET (and the lesion mask when present) with one shared origin.

    Coronal-stack mode reads height slices ``origin_h + i * k``; axial-stack
    mode is a contiguous crop with no subsampling.
    Returns ``(ct_patch, pet_patch, mask_patch_or_None, origin)``.
    """
    if origin is None:
        if rng is None:
            raise ValueError("either origin or rng must be given")
        origin = random_origin(pair.shape, spec, rng)
    origin = tuple(int(o) for o in origin)
    ct = crop_array(pair.ct.data, spec, origin)
    pet = crop_array(pair.pet.data, spec, origin)
    mask = None if pair.lesion_mask is None else crop_array(pair.lesion_mask, spec, origin)
    return ct, pet, mask, origin


def center_origin(shape: Sequence[int], spec: PatchSpec) -> Tuple[int, int, int]:
    extent = spec.source_extent
    if any(e > s for e, s in zip(extent, shape)):
        raise ValueError(f"input {tuple(shape)} smaller than crop extent {extent}")
    return tuple((s - e) // 2 for s, e in zip(shape, extent))


def patchify(patch: np.ndarray, token_size: Sequence[int], origin=(0, 0, 0)) -> TokenGrid:
    """Split a 3D patch into row-major (h, w, d) ordered flattened tokens."""
    token_size = tuple(int(t) for t in token_size)
    if patch.ndim != 3 or any(s % t for s, t in zip(patch.shape, token_size)):
        raise ValueError(f"patch {patch.shape} not divisible by token size {token_size}")
    th, tw, td = token_size
    h, w, d = (s // t for s, t in zip(patch.shape, token_size))
    x = patch.reshape(h, th, w, tw, d, td).transpose(0, 2, 4, 1, 3, 5)
    return TokenGrid(x.reshape(h * w * d, th * tw * td), (h, w, d), token_size, tuple(origin))


def unpatchify(grid: TokenGrid) -> np.ndarray:
    h, w, d = grid.grid_dims
    th, tw, td = grid.token_size
    if grid.tokens.shape != (h * w * d, th * tw * td):
        raise ValueError(
            f"token array {grid.tokens.shape} inconsistent with grid {grid.grid_dims} x {grid.token_size}"
        )
    x = grid.tokens.reshape(h, w, d, th, tw, td).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(h * th, w * tw, d * td)


def patchify_batch(x, token_size):
    """Torch/numpy batched patchify: (B, H, W, D) -> (B, T, P)."""
    B, H, W, D = x.shape
    th, tw, td = token_size
    h, w, d = H // th, W // tw, D // td
    x = x.reshape(B, h, th, w, tw, d, td).permute(0, 1, 3, 5, 2, 4, 6) if hasattr(x, "permute") \
        else x.reshape(B, h, th, w, tw, d, td).transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(B, h * w * d, th * tw * td)


def unpatchify_batch(tokens, grid_dims, token_size):
    """Inverse of :func:`patchify_batch`: (B, T, P) -> (B, H, W, D)."""
    B = tokens.shape[0]
    h, w, d = grid_dims
    th, tw, td = token_size
    x = tokens.reshape(B, h, w, d, th, tw, td)
    x = x.permute(0, 1, 4, 2, 5, 3, 6) if hasattr(x, "permute") else x.transpose(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(B, h * th, w * tw, d * td)
