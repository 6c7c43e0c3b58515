"""The pre-training network: twin modality encoders, per-modality decoders and
the optional text alignment head, wired according to the ablation."""

from __future__ import annotations

import enum
import zlib
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from .decoder import CrossDecoder, DecoderConfig, reconstruction_loss
from .encoder import EncodedRepresentation, EncoderConfig, ModalityEncoder
from .layers import init_params
from .masking import MaskingPlan
from .text import AlignmentHead, TextConfig, Vocabulary
from .volume import Modality


class Ablation(str, enum.Enum):
    BASELINE = "baseline_none"
    MAE = "mae"
    MAE_CONTEXTALIGN = "mae_contextalign"
    FRATMAE_NO_CONTEXTALIGN = "fratmae_no_contextalign"
    FRATMAE = "fratmae"

    @property
    def cross(self) -> bool:
        return self in (Ablation.FRATMAE, Ablation.FRATMAE_NO_CONTEXTALIGN)

    @property
    def context_align(self) -> bool:
        return self in (Ablation.FRATMAE, Ablation.MAE_CONTEXTALIGN)

    @property
    def pretrains(self) -> bool:
        return self is not Ablation.BASELINE


MODALITIES = (Modality.CT, Modality.PET)


def derive_seed(seed: int, name: str) -> int:
    return zlib.crc32(f"{seed}:{name}".encode())


def gather_tokens(tokens: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    if index.ndim == 1:
        return tokens[:, index]
    return torch.gather(tokens, 1, index.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


class FratMAE(nn.Module):
    def __init__(self, ablation: Ablation, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig,
                 text_cfg: Optional[TextConfig] = None, vocab: Optional[Vocabulary] = None,
                 temperature: float = 0.07, learnable_temperature: bool = False):
        super().__init__()
        self.ablation = Ablation(ablation)
        self.enc_cfg = enc_cfg
        self.encoders = nn.ModuleDict({m.value: ModalityEncoder(enc_cfg) for m in MODALITIES})
        self.decoders = None
        if self.ablation.pretrains:
            self.decoders = nn.ModuleDict({
                m.value: CrossDecoder(enc_cfg.embed_dim, enc_cfg.num_tokens, enc_cfg.token_voxels, dec_cfg,
                                      cross=self.ablation.cross)
                for m in MODALITIES
            })
        self.align = None
        if self.ablation.context_align:
            if vocab is None or text_cfg is None:
                raise ValueError("context alignment needs a vocabulary and a text config")
            self.align = AlignmentHead(enc_cfg.embed_dim, vocab, text_cfg, temperature, learnable_temperature)

    def reset_parameters(self, seed: int) -> "FratMAE":
        for name, child in self.named_children():
            if isinstance(child, nn.ModuleDict):
                for key, sub in child.items():
                    init_params(sub, derive_seed(seed, f"{name}.{key}"))
                    if isinstance(sub, CrossDecoder):
                        sub.aligned_init(derive_seed(seed, f"{name}.{key}.aligned"))
            elif child is not None:
                init_params(child, derive_seed(seed, name))
        return self

    def encode(self, modality, tokens: torch.Tensor, index: Optional[torch.Tensor] = None) -> EncodedRepresentation:
        return self.encoders[Modality(modality).value](tokens, index)

    def losses(self, ct: torch.Tensor, pet: torch.Tensor, plan: MaskingPlan, prompts=None,
               loss_support: str = "masked_only", align_on_masked: bool = False,
               symmetric_infonce: bool = False) -> Dict[str, torch.Tensor]:
        """Reconstruction (and alignment) losses for one plan."""
        if self.decoders is None:
            raise ValueError("baseline_none has no pre-training objective")
        tokens = {Modality.CT: ct, Modality.PET: pet}
        S, S_bar = plan.masked_modality, plan.unmasked_modality
        index = torch.as_tensor(plan.visible_index(), dtype=torch.long)
        rep_s = self.encode(S, gather_tokens(tokens[S], index), index)
        rep_sbar = self.encode(S_bar, tokens[S_bar])
        pred = self.decoders[S.value](rep_s, rep_sbar if self.ablation.cross else None)
        out = {"mse": reconstruction_loss(pred, tokens[S], plan.token_mask, loss_support), "pred": pred}
        if self.align is not None and prompts is not None:
            if S_bar is Modality.PET:
                pet_rep = rep_sbar
            elif align_on_masked:
                pet_rep = rep_s
            else:
                pet_rep = self.encode(Modality.PET, pet)
            out["infonce"] = self.align.loss(pet_rep.cls, prompts, symmetric=symmetric_infonce)
        return out

    def reconstruct(self, ct: torch.Tensor, pet: torch.Tensor, plan: MaskingPlan) -> torch.Tensor:
        with torch.no_grad():
            return self.losses(ct, pet, plan)["pred"]


def encoder_state(model: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items() if k.startswith("encoders.")}
