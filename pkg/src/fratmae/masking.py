"""Asymmetric cross-modal masking: one modality loses a fixed fraction of its
tokens per iteration, the other stays fully visible."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import Modality


@dataclass
class MaskingPlan:
    masked_modality: Modality
    token_mask: np.ndarray  # (T,) or (B, T); 1 = visible, 0 = masked
    ratio: float = 0.5

    def __post_init__(self):
        self.masked_modality = Modality(self.masked_modality)
        self.token_mask = np.asarray(self.token_mask, dtype=np.uint8)

    @property
    def unmasked_modality(self) -> Modality:
        return Modality.PET if self.masked_modality is Modality.CT else Modality.CT

    @property
    def num_tokens(self) -> int:
        return self.token_mask.shape[-1]

    def mask_for(self, modality) -> np.ndarray:
        """Token mask applied to ``modality``; all-ones for the unmasked one."""
        if Modality(modality) is self.masked_modality:
            return self.token_mask
        return np.ones_like(self.token_mask)

    def visible_index(self) -> np.ndarray:
        """Sorted visible token indices, (n_vis,) or (B, n_vis)."""
        if self.token_mask.ndim == 1:
            return np.flatnonzero(self.token_mask)
        return np.stack([np.flatnonzero(row) for row in self.token_mask])


def masked_count(T: int, ratio: float) -> int:
    return int(math.floor(ratio * T))


def _sample_mask(T, n_masked, rng):
    mask = np.ones(T, dtype=np.uint8)
    mask[rng.choice(T, size=n_masked, replace=False)] = 0
    return mask


def sample_masking_plan(T: int, ratio: float, rng: np.random.Generator, batch_size=None) -> MaskingPlan:
    """Pick the masked modality uniformly and mask ``floor(ratio * T)`` tokens
    uniformly without replacement. With ``batch_size`` each sample gets its own
    token mask (same modality, same count)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    if T < 1:
        raise ValueError(f"need at least one token, got T={T}")
    modality = Modality.PET if rng.integers(2) == 1 else Modality.CT
    n = masked_count(T, ratio)
    if batch_size is None:
        mask = _sample_mask(T, n, rng)
    else:
        mask = np.stack([_sample_mask(T, n, rng) for _ in range(batch_size)])
    return MaskingPlan(modality, mask, ratio)


def apply_mask(grid, plan: MaskingPlan, target_modality):
    """Return ``(visible_tokens, visible_index_map)`` for a TokenGrid or a
    (T, P) token array.

    Only the plan's masked modality loses tokens; the other gets the identity.
    """
    tokens = getattr(grid, "tokens", grid)
    T = tokens.shape[0]
    if plan.token_mask.ndim != 1:
        raise ValueError("apply_mask works on a single (T,) plan; index per sample for batched plans")
    if plan.num_tokens != T:
        raise ValueError(f"plan covers {plan.num_tokens} tokens, grid has {T}")
    if Modality(target_modality) is not plan.masked_modality:
        return tokens, np.arange(T)
    index = np.flatnonzero(plan.token_mask)
    return tokens[index], index
