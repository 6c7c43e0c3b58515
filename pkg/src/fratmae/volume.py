"""Volume data model, intensity windows, resizing, synthetic PET/CT phantoms and
the on-disk bundle format."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .text import TextMetadata

BUNDLE_VERSION = 1

CT_WINDOW = (-1024.0, 1024.0)
PET_WINDOW = (0.0, 15.0)

TRACERS = ("18F FDG", "18F PSMA", "68Ga PSMA")
DIAGNOSES = ("melanoma", "lymphoma", "lung cancer", "prostate cancer", "negative control")


class Modality(str, enum.Enum):
    CT = "CT"
    PET = "PET"


class IntensityUnits(str, enum.Enum):
    HU = "HU"
    SUV = "SUV"
    NORMALIZED = "normalized"


class StageLabel(str, enum.Enum):
    EARLY = "early"
    ADVANCED = "advanced"


class BundleError(Exception):
    """Base class for volume-bundle IO failures."""


class BundleVersionError(BundleError):
    pass


class BundleDimError(BundleError):
    pass


class BundleFormatError(BundleError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Modality = Modality.CT
    intensity_units: IntensityUnits = IntensityUnits.HU

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D with all dims >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.modality = Modality(self.modality)
        self.intensity_units = IntensityUnits(self.intensity_units)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class VolumePair:
    ct: Volume
    pet: Volume
    metadata: TextMetadata
    lesion_mask: Optional[np.ndarray] = None
    stage_label: Optional[StageLabel] = None

    def __post_init__(self):
        if self.ct.shape != self.pet.shape:
            raise ValueError(f"CT {self.ct.shape} and PET {self.pet.shape} are not co-registered")
        if not np.allclose(self.ct.spacing, self.pet.spacing):
            raise ValueError("CT and PET spacing differ")
        if self.lesion_mask is not None:
            mask = np.asarray(self.lesion_mask)
            if mask.shape != self.ct.shape:
                raise ValueError(f"lesion mask {mask.shape} does not match volume {self.ct.shape}")
            if not np.isin(mask, (0, 1)).all():
                raise ValueError("lesion mask must be {0,1}-valued")
            self.lesion_mask = mask.astype(np.uint8)
        if self.stage_label is not None:
            self.stage_label = StageLabel(self.stage_label)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.ct.shape


@dataclass
class SyntheticSpec:
    """Parameters of one synthetic PET/CT phantom.

    ``noise_sigma`` is expressed in normalized units: it is scaled by the
    CT and PET window widths before being added. ``lesion_thirds`` optionally
    forces the lesions to occupy exactly that many height thirds, which is
    how balanced staging cohorts are drawn. ``organ_radius`` bounds organ
    semi-axes as fractions of the grid; ``body_jitter`` randomly scales and
    shifts the body outline by up to that fraction.
    """

    grid_dims: Tuple[int, int, int] = (64, 32, 32)
    n_organs: int = 4
    n_lesions: int = 2
    uptake_correlation: float = 0.8
    noise_sigma: float = 0.01
    seed: int = 0
    spacing: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    lesion_radius: Optional[int] = None
    lesion_thirds: Optional[int] = None
    organ_radius: Tuple[float, float] = (0.05, 0.2)
    body_jitter: float = 0.0

    def validate(self) -> None:
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 4:
            raise ValueError(f"grid_dims must be three ints >= 4, got {self.grid_dims}")
        if self.n_organs < 0 or self.n_lesions < 0:
            raise ValueError("n_organs and n_lesions must be >= 0")
        if not 0.0 <= self.uptake_correlation <= 1.0:
            raise ValueError("uptake_correlation must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        lo, hi = self.organ_radius
        if not 0 < lo <= hi <= 0.5:
            raise ValueError(f"organ_radius must satisfy 0 < lo <= hi <= 0.5, got {self.organ_radius}")
        if not 0.0 <= self.body_jitter < 0.5:
            raise ValueError("body_jitter must lie in [0, 0.5)")
        if self.lesion_thirds is not None:
            if not 1 <= self.lesion_thirds <= 3:
                raise ValueError("lesion_thirds must be 1, 2 or 3")
            if self.n_lesions < self.lesion_thirds:
                raise ValueError("need at least one lesion per requested third")


def normalize(volume: Volume, window: Tuple[float, float]) -> Volume:
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"window must satisfy lo < hi, got {window}")
    data = volume.data.astype(np.float64)
    data = np.nan_to_num(data, nan=lo, posinf=hi, neginf=lo)
    data = (np.clip(data, lo, hi) - lo) / (hi - lo)
    return Volume(data, volume.spacing, volume.modality, IntensityUnits.NORMALIZED)


def default_window(modality: Modality) -> Tuple[float, float]:
    return CT_WINDOW if Modality(modality) is Modality.CT else PET_WINDOW


def resample_array(data: np.ndarray, target_dims: Sequence[int], nearest: bool = False) -> np.ndarray:
    """Trilinear (or nearest) resampling onto ``target_dims``."""
    target_dims = tuple(int(t) for t in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise ValueError(f"target dims must be three ints >= 1, got {target_dims}")
    data = np.asarray(data, dtype=np.float64)
    if data.shape == target_dims:
        return data.copy()
    # grid_mode=False aligns corners: first and last sample centres stay in place
    factors = [t / n for t, n in zip(target_dims, data.shape)]
    return ndimage.zoom(data, factors, order=0 if nearest else 1, mode="nearest", grid_mode=False)


def resize_volume(volume: Volume, target_dims: Sequence[int]) -> Volume:
    target_dims = tuple(int(t) for t in target_dims)
    data = resample_array(volume.data, target_dims)
    spacing = []
    for n, m, s in zip(volume.shape, target_dims, volume.spacing):
        spacing.append(s * (n - 1) / (m - 1) if n > 1 and m > 1 else s * n / m)
    return Volume(data, tuple(spacing), volume.modality, volume.intensity_units)


def resize_mask(mask: np.ndarray, target_dims: Sequence[int]) -> np.ndarray:
    return resample_array(mask, target_dims, nearest=True).astype(np.uint8)


def resize_pair(pair: VolumePair, target_dims: Sequence[int]) -> VolumePair:
    if tuple(target_dims) == pair.shape:
        return pair
    mask = None if pair.lesion_mask is None else resize_mask(pair.lesion_mask, target_dims)
    return VolumePair(
        ct=resize_volume(pair.ct, target_dims),
        pet=resize_volume(pair.pet, target_dims),
        metadata=pair.metadata,
        lesion_mask=mask,
        stage_label=pair.stage_label,
    )


def normalize_pair(pair: VolumePair, ct_window=CT_WINDOW, pet_window=PET_WINDOW) -> VolumePair:
    return VolumePair(
        ct=normalize(pair.ct, ct_window),
        pet=normalize(pair.pet, pet_window),
        metadata=pair.metadata,
        lesion_mask=pair.lesion_mask,
        stage_label=pair.stage_label,
    )


# ---------------------------------------------------------------------------
# staging proxy


def height_thirds(lesion_mask: np.ndarray) -> set:
    """Height thirds (0, 1, 2) occupied by the centroids of lesion components."""
    mask = np.asarray(lesion_mask) > 0
    if not mask.any():
        return set()
    labels, n = ndimage.label(mask)
    centroids = ndimage.center_of_mass(mask, labels, range(1, n + 1))
    height = mask.shape[0]
    return {min(int(3 * c[0] // height), 2) for c in centroids}


def stage_from_mask(lesion_mask: np.ndarray) -> StageLabel:
    """Advanced iff lesions sit in at least two distinct thirds along height.

    A synthetic proxy for lymphatic spread, not a clinical staging rule.
    """
    return StageLabel.ADVANCED if len(height_thirds(lesion_mask)) >= 2 else StageLabel.EARLY


# ---------------------------------------------------------------------------
# synthetic phantom generator

# HU levels spaced >= 40 apart so a +15 HU lesion offset never collides
_ORGAN_HU = (-700.0, -100.0, 60.0, 120.0, 180.0, 240.0, 300.0, 400.0, 500.0, 700.0)
_AIR_HU = -1000.0
_BODY_HU = 20.0
_LESION_HU_OFFSET = 15.0

# characteristic SUV per organ type (aligned with _ORGAN_HU) for each tracer;
# PSMA tracers concentrate uptake in a few organs
_ORGAN_SUV = {
    "18F FDG": (0.6, 1.2, 2.4, 1.8, 3.0, 0.9, 2.0, 0.5, 1.5, 0.8),
    "18F PSMA": (0.3, 0.4, 5.0, 0.6, 1.0, 6.0, 0.5, 0.3, 4.0, 0.4),
    "68Ga PSMA": (0.3, 0.5, 4.0, 0.7, 0.9, 5.0, 0.6, 0.3, 3.0, 0.5),
}


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def _lesion_radius(spec: SyntheticSpec) -> int:
    if spec.lesion_radius is not None:
        return int(spec.lesion_radius)
    return max(1, min(spec.grid_dims) // 12)


def _place_lesions(rng, spec, body, radius):
    H, W, D = spec.grid_dims
    n = spec.n_lesions
    if n == 0:
        return []
    margin = radius + 1
    if min(W, D) < 2 * margin + 1 or H < 3 * (2 * margin + 1):
        raise ValueError(
            f"grid {spec.grid_dims} too small to place lesions of radius {radius}"
        )
    if spec.lesion_thirds is None:
        thirds = [None] * n
    else:
        chosen = list(rng.choice(3, size=spec.lesion_thirds, replace=False))
        thirds = chosen + list(rng.choice(chosen, size=n - len(chosen)))
    centers = []
    for third in thirds:
        if third is None:
            h_lo, h_hi = margin, H - margin
        else:
            h_lo = max(margin, int(np.ceil(third * H / 3)) + radius)
            h_hi = min(H - margin, int((third + 1) * H / 3) - radius)
        placed = False
        for _ in range(500 if h_hi > h_lo else 0):
            c = (
                int(rng.integers(h_lo, h_hi)),
                int(rng.integers(margin, W - margin)),
                int(rng.integers(margin, D - margin)),
            )
            if not body[c]:
                continue
            if all(sum((a - b) ** 2 for a, b in zip(c, o)) > (2 * radius + 2) ** 2 for o in centers):
                centers.append(c)
                placed = True
                break
        if not placed:
            raise ValueError(f"could not place {n} lesions of radius {radius} in grid {spec.grid_dims}")
    return centers


def _sample_metadata(rng) -> TextMetadata:
    tracer = TRACERS[int(rng.integers(len(TRACERS)))]
    if "PSMA" in tracer:
        diagnosis = "prostate cancer"
        sex = "M"
    else:
        diagnosis = DIAGNOSES[int(rng.integers(len(DIAGNOSES)))]
        sex = "M" if rng.random() < 0.6 else "F"
    age = int(np.clip(rng.normal(61, 15), 18, 95))
    return TextMetadata(tracer=tracer, diagnosis=diagnosis, age=age, sex=sex)


def generate_synthetic_pair(spec: SyntheticSpec) -> VolumePair:
    """Draw a co-registered CT/PET phantom with optional hot lesions.

    CT is piecewise constant over an air/body/organ/lesion label map; each
    organ type has a characteristic HU level and a tracer-specific SUV. PET is
    ``c * uptake[label] + (1 - c) * smooth_field`` where ``c`` is
    ``uptake_correlation``, so at ``c == 1`` with no noise PET is an exact
    function of the CT labels.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(n) for n in spec.grid_dims)
    H, W, D = shape
    meta = _sample_metadata(rng)

    center = np.array(shape, dtype=np.float64) / 2.0 - 0.5
    body_radii = np.array(shape) * np.array([0.48, 0.45, 0.42])
    body_center = center
    if spec.body_jitter > 0:
        j = spec.body_jitter
        body_radii = body_radii * rng.uniform(1 - j, 1, 3)
        body_center = center + rng.uniform(-j, j, 3) * np.array(shape) / 2
    body = _ellipsoid(shape, body_center, body_radii)

    labels = np.where(body, 1, 0).astype(np.int32)
    hu = [_AIR_HU, _BODY_HU]
    suv_table = _ORGAN_SUV[meta.tracer]
    uptake = [0.0, 1.0]
    organ_levels = rng.permutation(len(_ORGAN_HU))[: spec.n_organs]
    for i, level in enumerate(organ_levels):
        c = body_center + rng.uniform(-0.25, 0.25, 3) * np.array(shape)
        radii = np.array(shape) * rng.uniform(*spec.organ_radius, 3)
        region = _ellipsoid(shape, c, np.maximum(radii, 1.0)) & body
        labels[region] = i + 2
        hu.append(_ORGAN_HU[level])
        uptake.append(suv_table[level])

    radius = _lesion_radius(spec)
    centers = _place_lesions(rng, spec, body, radius)
    lesion_mask = np.zeros(shape, dtype=np.uint8)
    for c in centers:
        lesion_mask |= _ellipsoid(shape, c, (radius + 0.5,) * 3).astype(np.uint8)
    lesion_mask &= body.astype(np.uint8)
    lesion_suv = float(rng.uniform(7.0, 12.0))

    hu = np.asarray(hu)
    ct = hu[labels] + _LESION_HU_OFFSET * lesion_mask

    pet_anat = np.asarray(uptake)[labels]
    pet_anat = np.where(lesion_mask > 0, lesion_suv, pet_anat)
    c = spec.uptake_correlation
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=max(1.0, min(shape) / 8))
    field_ = (field_ - field_.min()) / (np.ptp(field_) + 1e-12) * 3.0 * body
    pet = c * pet_anat + (1.0 - c) * field_

    if spec.noise_sigma > 0:
        ct = ct + rng.standard_normal(shape) * spec.noise_sigma * (CT_WINDOW[1] - CT_WINDOW[0])
        pet = pet + rng.standard_normal(shape) * spec.noise_sigma * (PET_WINDOW[1] - PET_WINDOW[0])
    pet = np.maximum(pet, 0.0)

    return VolumePair(
        ct=Volume(ct, spec.spacing, Modality.CT, IntensityUnits.HU),
        pet=Volume(pet, spec.spacing, Modality.PET, IntensityUnits.SUV),
        metadata=meta,
        lesion_mask=lesion_mask,
        stage_label=stage_from_mask(lesion_mask),
    )


# ---------------------------------------------------------------------------
# bundle IO


def _bundle_paths(path) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".raw")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_bundle(pair: VolumePair, path) -> Path:
    """Write ``pair`` as ``<path>.raw`` (little-endian float32 blocks) plus a
    ``<path>.json`` sidecar. Returns the sidecar path."""
    sidecar, blob = _bundle_paths(path)
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    blocks = [("ct", pair.ct.data), ("pet", pair.pet.data)]
    if pair.lesion_mask is not None:
        blocks.append(("lesion_mask", pair.lesion_mask))
    payload = b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for _, b in blocks)
    header = {
        "format_version": BUNDLE_VERSION,
        "dims": list(pair.shape),
        "spacing": list(pair.ct.spacing),
        "blocks": [name for name, _ in blocks],
        "ct": {"modality": pair.ct.modality.value, "intensity_units": pair.ct.intensity_units.value},
        "pet": {"modality": pair.pet.modality.value, "intensity_units": pair.pet.intensity_units.value},
        "metadata": pair.metadata.to_dict(),
        "stage_label": None if pair.stage_label is None else pair.stage_label.value,
        "blob": blob.name,
    }
    _atomic_write(blob, payload)
    _atomic_write(sidecar, (json.dumps(header, indent=2, sort_keys=True) + "\n").encode())
    return sidecar


def read_bundle(path) -> VolumePair:
    sidecar, blob = _bundle_paths(path)
    try:
        header = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{sidecar}: malformed sidecar ({exc})") from exc
    if not isinstance(header, dict):
        raise BundleFormatError(f"{sidecar}: sidecar is not an object")
    version = header.get("format_version")
    if version != BUNDLE_VERSION:
        raise BundleVersionError(f"{sidecar}: unsupported format version {version!r}")
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        names = list(header["blocks"])
        meta = TextMetadata.from_dict(header["metadata"])
        ct_info, pet_info = header["ct"], header["pet"]
        stage = header.get("stage_label")
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleFormatError(f"{sidecar}: malformed sidecar ({exc})") from exc
    if len(dims) != 3 or min(dims) < 1 or names[:2] != ["ct", "pet"]:
        raise BundleFormatError(f"{sidecar}: bad dims or block list")

    raw = np.fromfile(blob, dtype="<f4")
    n = int(np.prod(dims))
    if raw.size != n * len(names):
        raise BundleDimError(
            f"{blob}: {raw.size} voxels on disk, sidecar implies {n * len(names)}"
        )
    arrays = {name: raw[i * n:(i + 1) * n].reshape(dims).astype(np.float32) for i, name in enumerate(names)}
    mask = arrays.get("lesion_mask")
    return VolumePair(
        ct=Volume(arrays["ct"], spacing, ct_info["modality"], ct_info["intensity_units"]),
        pet=Volume(arrays["pet"], spacing, pet_info["modality"], pet_info["intensity_units"]),
        metadata=meta,
        lesion_mask=None if mask is None else mask.astype(np.uint8),
        stage_label=stage,
    )
