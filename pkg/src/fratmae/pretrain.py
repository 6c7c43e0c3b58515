"""Stage-1 pre-training: per-iteration modality selection, combined objective,
AdamW with cosine annealing, checkpoints and a line-delimited metrics log."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Batch, epoch_batches, load_pairs, make_batch, manifest_cases, read_manifest
from .decoder import DecoderConfig, reconstruction_loss
from .encoder import EncoderConfig
from .masking import MaskingPlan, sample_masking_plan
from .model import Ablation, FratMAE
from .patches import PatchSpec, center_origin
from .schema import config_hash, from_dict, to_dict
from .text import TextConfig, Vocabulary, format_prompt
from .volume import CT_WINDOW, PET_WINDOW, Modality

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns NaN or infinite."""


@dataclass
class PretrainConfig:
    ablation: Ablation = Ablation.FRATMAE
    epochs: int = 30
    lr_init: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.95)
    batch_size: int = 4
    seed: int = 0
    loss_weight: float = 1.0
    mask_ratio: float = 0.5
    per_sample_mask: bool = False
    loss_support: str = "masked_only"
    align_on_masked: bool = False
    temperature: float = 0.07
    learnable_temperature: bool = False
    symmetric_infonce: bool = False
    ct_window: Tuple[float, float] = CT_WINDOW
    pet_window: Tuple[float, float] = PET_WINDOW
    resize_dims: Optional[Tuple[int, int, int]] = None
    patch: PatchSpec = field(default_factory=PatchSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    text: TextConfig = field(default_factory=TextConfig)

    def __post_init__(self):
        self.ablation = Ablation(self.ablation)
        if self.loss_support not in ("masked_only", "full"):
            raise ValueError(f"loss_support must be masked_only or full, got {self.loss_support!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        # token geometry always follows the patch spec
        self.encoder.token_size = self.patch.token_size
        self.encoder.grid_dims = self.patch.grid_dims

    @classmethod
    def from_dict(cls, d: Dict) -> "PretrainConfig":
        return from_dict(cls, d, "pretrain")


def lr_schedule(step: int, total_steps: int, lr_init: float = 1e-4, lr_min: float = 0.0) -> float:
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_min`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_init
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def build_model(cfg: PretrainConfig, vocab: Optional[Vocabulary]) -> FratMAE:
    model = FratMAE(cfg.ablation, cfg.encoder, cfg.decoder, cfg.text, vocab,
                    cfg.temperature, cfg.learnable_temperature)
    return model.reset_parameters(cfg.seed)


def make_optimizer(model, cfg: PretrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr_init, betas=tuple(cfg.betas),
                             weight_decay=cfg.weight_decay)


class Pretrainer:
    """Owns the model, optimizer, RNG stream and step/epoch counters."""

    def __init__(self, cfg: PretrainConfig, vocab: Optional[Vocabulary] = None, total_steps: int = 0):
        if not cfg.ablation.pretrains:
            raise ValueError("baseline_none has nothing to pre-train")
        self.cfg = cfg
        self.vocab = vocab
        self.model = build_model(cfg, vocab)
        self.optimizer = make_optimizer(self.model, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        self.epoch = 0
        self.total_steps = total_steps

    def sample_plan(self, batch_size: int) -> MaskingPlan:
        return sample_masking_plan(self.cfg.patch.num_tokens, self.cfg.mask_ratio, self.rng,
                                   batch_size=batch_size if self.cfg.per_sample_mask else None)

    # -- checkpointing -------------------------------------------------------

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        names = {id(p): n for n, p in self.model.named_parameters()}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                for key, value in self.optimizer.state.get(p, {}).items():
                    tensors[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(value)
        return tensors

    def header(self) -> Dict:
        return {
            "kind": "pretrain",
            "ablation": self.cfg.ablation.value,
            "config": to_dict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "epoch": self.epoch,
            "step": self.step_count,
            "total_steps": self.total_steps,
            "rng_state": self.rng.bit_generator.state,
            "vocab": None if self.vocab is None else self.vocab.to_dict(),
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.header(), self.state_tensors())

    @classmethod
    def load(cls, path) -> "Pretrainer":
        header, tensors = load_checkpoint(path)
        if header.get("kind") != "pretrain":
            raise ValueError(f"{path} is not a pre-training checkpoint")
        cfg = PretrainConfig.from_dict(header["config"])
        vocab = None if header["vocab"] is None else Vocabulary.from_dict(header["vocab"])
        trainer = cls(cfg, vocab, header["total_steps"])
        trainer.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        by_name = dict(trainer.model.named_parameters())
        for key, value in tensors.items():
            if key.startswith("optim."):
                pname, slot = key[6:].rsplit(".", 1)
                trainer.optimizer.state[by_name[pname]][slot] = value.clone()
        trainer.rng.bit_generator.state = header["rng_state"]
        trainer.epoch = header["epoch"]
        trainer.step_count = header["step"]
        return trainer


def pretrain_step(batch: Batch, trainer: Pretrainer) -> Dict:
    """One optimisation step; returns the scalar losses and learning rate."""
    cfg = trainer.cfg
    model = trainer.model
    model.train()
    plan = trainer.sample_plan(len(batch))
    ct = torch.from_numpy(batch.ct)
    pet = torch.from_numpy(batch.pet)
    out = model.losses(ct, pet, plan, batch.prompts, loss_support=cfg.loss_support,
                       align_on_masked=cfg.align_on_masked, symmetric_infonce=cfg.symmetric_infonce)
    total = out["mse"]
    if "infonce" in out:
        total = total + cfg.loss_weight * out["infonce"]
    if not torch.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss at step {trainer.step_count}: mse={out['mse'].item()}"
            + (f", infonce={out['infonce'].item()}" if "infonce" in out else "")
        )
    lr = lr_schedule(min(trainer.step_count, trainer.total_steps), max(trainer.total_steps, trainer.step_count),
                     cfg.lr_init, cfg.lr_min)
    for group in trainer.optimizer.param_groups:
        group["lr"] = lr
    trainer.optimizer.zero_grad(set_to_none=True)
    total.backward()
    trainer.optimizer.step()
    record = {
        "step": trainer.step_count,
        "epoch": trainer.epoch,
        "masked_modality": plan.masked_modality.value,
        "loss_mse": out["mse"].item(),
        "loss_infonce": out["infonce"].item() if "infonce" in out else None,
        "loss_total": total.item(),
        "lr": lr,
    }
    trainer.step_count += 1
    return record


def masked_mse_eval(model: FratMAE, pairs, spec: PatchSpec, ratio: float = 0.5, seed: int = 12345,
                    n_plans: int = 2) -> float:
    """Masked-token MSE on centre crops with a fixed set of plans per modality.

    Used to compare pre-training runs on identical data and masks.
    """
    model.eval()
    origins = [center_origin(p.shape, spec) for p in pairs]
    batch = make_batch(pairs, spec, origins=origins)
    ct, pet = torch.from_numpy(batch.ct), torch.from_numpy(batch.pet)
    rng = np.random.default_rng(seed)
    losses = []
    with torch.no_grad():
        for _ in range(n_plans):
            base = sample_masking_plan(spec.num_tokens, ratio, rng)
            for modality in (Modality.CT, Modality.PET):
                plan = MaskingPlan(modality, base.token_mask, ratio)
                pred = model.losses(ct, pet, plan)["pred"]
                target = ct if modality is Modality.CT else pet
                losses.append(reconstruction_loss(pred, target, plan.token_mask).item())
    return float(np.mean(losses))


def _rewrite_log(path: Path, max_step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] < max_step]
    path.write_text("".join(line + "\n" for line in keep))


def run_pretraining(cfg: PretrainConfig, manifest_path, out_dir, resume: bool = False,
                    pairs=None, prompts=None) -> Path:
    """Train for ``cfg.epochs`` epochs over the manifest's train split.

    Writes ``epoch_XXX.ckpt`` after every epoch, ``last.ckpt`` and
    ``metrics.jsonl``. Returns the path of the final checkpoint. ``pairs``
    may be passed to skip bundle loading (already preprocessed).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pairs is None:
        manifest = read_manifest(manifest_path)
        cases = manifest_cases(manifest, "train")
        pairs = load_pairs(manifest, cases, cfg.resize_dims, cfg.ct_window, cfg.pet_window)
    if not pairs:
        raise ValueError("no training cases in manifest")
    prompts = [format_prompt(p.metadata) for p in pairs] if prompts is None else prompts
    vocab = Vocabulary.build(prompts, cfg.text.max_len)
    last = out_dir / "last.ckpt"

    if not cfg.ablation.pretrains:
        # random-init encoders only; downstream "from scratch" arm
        model = build_model(cfg, None)
        header = {"kind": "pretrain", "ablation": cfg.ablation.value, "config": to_dict(cfg),
                  "config_hash": config_hash(cfg), "epoch": 0, "step": 0, "total_steps": 0,
                  "rng_state": None, "vocab": None}
        tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
        return save_checkpoint(last, header, tensors)

    steps_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    log_path = out_dir / "metrics.jsonl"
    if resume and last.exists():
        trainer = Pretrainer.load(last)
        if config_hash(trainer.cfg) != config_hash(cfg):
            raise ValueError("resume checkpoint was written with a different config")
        _rewrite_log(log_path, trainer.step_count)
    else:
        trainer = Pretrainer(cfg, vocab, total_steps)
        log_path.write_text("")
    chash = config_hash(cfg)
    with open(log_path, "a") as fh:
        while trainer.epoch < cfg.epochs:
            for idx in epoch_batches(len(pairs), cfg.batch_size, trainer.rng):
                batch = make_batch([pairs[i] for i in idx], cfg.patch, rng=trainer.rng)
                batch.prompts = [prompts[i] for i in idx]
                record = pretrain_step(batch, trainer)
                record["config_hash"] = chash
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            trainer.epoch += 1
            trainer.save(out_dir / f"epoch_{trainer.epoch:03d}.ckpt")
            trainer.save(last)
            log.info("epoch %d/%d done (step %d)", trainer.epoch, cfg.epochs, trainer.step_count)
    if cfg.epochs == 0:
        trainer.save(last)
    return last
