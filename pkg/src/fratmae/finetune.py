"""Stage-2 training and evaluation for lesion segmentation and binary staging."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_pairs, make_batch, manifest_cases, read_manifest, subset_fraction
from .heads import DownstreamModel, seg_loss
from .metrics import MetricReport, accuracy, dice, iou, macro_sensitivity, report_document
from .patches import PatchSpec, StackMode, center_origin, patchify_batch, random_origin
from .pretrain import PretrainConfig, TrainingDiverged, lr_schedule
from .schema import config_hash, from_dict, to_dict
from .volume import stage_from_mask, write_bundle

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    task: str = "seg"
    steps: int = 300
    lr_init: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 0.01
    batch_size: int = 2
    train_fraction: float = 1.0
    freeze_encoders: bool = False
    seed: int = 0
    mlp_hidden: int = 64
    features: str = "cls_pool"
    mode: StackMode = StackMode.CORONAL
    foreground_prob: float = 0.5
    n_bootstrap: int = 1000

    def __post_init__(self):
        if self.task not in ("seg", "stage"):
            raise ValueError(f"task must be 'seg' or 'stage', got {self.task!r}")
        self.mode = StackMode.parse(self.mode)
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: Dict) -> "FinetuneConfig":
        return from_dict(cls, d, "finetune")


def task_patch_spec(task: str, pcfg: PretrainConfig, mode: StackMode = StackMode.CORONAL) -> PatchSpec:
    """Segmentation crops contiguously at full resolution; staging reuses the
    pre-training stacking (or the axial baseline)."""
    base = pcfg.patch
    if task == "seg":
        return PatchSpec(base.patch_dims, 1, StackMode.AXIAL, base.token_size)
    return PatchSpec(base.patch_dims, base.k, mode, base.token_size)


def task_resize(task: str, pcfg: PretrainConfig):
    return None if task == "seg" else pcfg.resize_dims


def build_downstream(fcfg: FinetuneConfig, pcfg: PretrainConfig, encoder_state=None) -> DownstreamModel:
    model = DownstreamModel(fcfg.task, pcfg.encoder, fcfg.mlp_hidden, fcfg.features).reset_parameters(fcfg.seed)
    if encoder_state is not None:
        missing = [k for k in model.state_dict() if k.startswith("encoders.") and k not in encoder_state]
        if missing:
            raise ValueError(f"pre-trained state lacks encoder tensors, e.g. {missing[:3]}")
        model.load_state_dict({k: v for k, v in encoder_state.items() if k.startswith("encoders.")}, strict=False)
    if fcfg.freeze_encoders:
        for p in model.encoders.parameters():
            p.requires_grad_(False)
    return model


def load_pretrained(path) -> Tuple[PretrainConfig, Dict[str, torch.Tensor]]:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "pretrain":
        raise ValueError(f"{path} is not a pre-training checkpoint")
    cfg = PretrainConfig.from_dict(header["config"])
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    return cfg, state


def _seg_origin(pair, spec, rng, fg_prob):
    if pair.lesion_mask is not None and pair.lesion_mask.any() and rng.random() < fg_prob:
        voxels = np.argwhere(pair.lesion_mask)
        v = voxels[rng.integers(len(voxels))]
        origin = []
        for c, n, e in zip(v, pair.shape, spec.source_extent):
            lo, hi = max(0, c - e + 1), min(c, n - e)
            origin.append(int(rng.integers(lo, hi + 1)))
        return tuple(origin)
    return random_origin(pair.shape, spec, rng)


def _image(batch) -> torch.Tensor:
    return torch.from_numpy(np.stack([batch.ct_patch, batch.pet_patch], axis=1))


def train_downstream(fcfg: FinetuneConfig, pcfg: PretrainConfig, pairs: Sequence, encoder_state=None,
                     log_records: Optional[List] = None) -> DownstreamModel:
    """Optimise encoders + head with AdamW and cosine decay for ``fcfg.steps`` steps."""
    if not pairs:
        raise ValueError("no training cases")
    spec = task_patch_spec(fcfg.task, pcfg, fcfg.mode)
    model = build_downstream(fcfg, pcfg, encoder_state)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=fcfg.lr_init, weight_decay=fcfg.weight_decay)
    rng = np.random.default_rng(fcfg.seed)
    origins = None
    if fcfg.task == "stage":
        origins = [center_origin(p.shape, spec) for p in pairs]
    model.train()
    order = []
    for step in range(fcfg.steps):
        if len(order) < fcfg.batch_size:
            order.extend(rng.permutation(len(pairs)).tolist())
        idx, order = order[: fcfg.batch_size], order[fcfg.batch_size:]
        chosen = [pairs[i] for i in idx]
        if fcfg.task == "seg":
            batch_origins = [_seg_origin(p, spec, rng, fcfg.foreground_prob) for p in chosen]
        else:
            batch_origins = [origins[i] for i in idx]
        batch = make_batch(chosen, spec, origins=batch_origins, keep_patches=fcfg.task == "seg")
        ct, pet = torch.from_numpy(batch.ct), torch.from_numpy(batch.pet)
        if fcfg.task == "seg":
            probs = model(ct, pet, _image(batch)).softmax(dim=1)
            loss = seg_loss(probs, torch.from_numpy(batch.mask))
        else:
            loss = torch.nn.functional.cross_entropy(model(ct, pet), torch.from_numpy(batch.labels))
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite {fcfg.task} loss at step {step}")
        lr = lr_schedule(step, fcfg.steps, fcfg.lr_init, fcfg.lr_min)
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log_records is not None:
            log_records.append({"step": step, "loss": loss.item(), "lr": lr})
    return model


def _tile_starts(n: int, p: int) -> List[int]:
    if n < p:
        raise ValueError(f"volume extent {n} smaller than patch {p}")
    starts = list(range(0, n - p + 1, p))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def predict_volume(model: DownstreamModel, pair, spec: PatchSpec) -> np.ndarray:
    """Binary lesion mask over the whole volume from non-overlapping tiles
    (the last tile per axis is shifted inwards to stay in bounds)."""
    model.eval()
    out = np.zeros(pair.shape, dtype=np.uint8)
    tiles = itertools.product(*(_tile_starts(n, p) for n, p in zip(pair.shape, spec.patch_dims)))
    with torch.no_grad():
        for origin in tiles:
            batch = make_batch([pair], spec, origins=[origin], keep_patches=True)
            probs = model(torch.from_numpy(batch.ct), torch.from_numpy(batch.pet), _image(batch)).softmax(1)
            pred = (probs[0, 1] > 0.5).numpy().astype(np.uint8)
            sl = tuple(slice(o, o + p) for o, p in zip(origin, spec.patch_dims))
            out[sl] = pred
    return out


def evaluate_seg(model, pairs, pcfg: PretrainConfig) -> Dict[str, List[float]]:
    spec = task_patch_spec("seg", pcfg)
    dices, ious = [], []
    for pair in pairs:
        pred = predict_volume(model, pair, spec)
        dices.append(dice(pred, pair.lesion_mask))
        ious.append(iou(pred, pair.lesion_mask))
    return {"dice": dices, "iou": ious}


def predict_stage(model, pairs, pcfg: PretrainConfig, mode=StackMode.CORONAL) -> np.ndarray:
    spec = task_patch_spec("stage", pcfg, mode)
    model.eval()
    batch = make_batch(pairs, spec, origins=[center_origin(p.shape, spec) for p in pairs])
    with torch.no_grad():
        logits = model(torch.from_numpy(batch.ct), torch.from_numpy(batch.pet))
    return logits.argmax(-1).numpy()


def stage_labels(pairs) -> np.ndarray:
    return np.array([int(p.stage_label.value == "advanced") for p in pairs], dtype=np.int64)


def evaluate(model, fcfg: FinetuneConfig, pcfg: PretrainConfig, pairs, seed: int = 0) -> Dict:
    if fcfg.task == "seg":
        per_case = evaluate_seg(model, pairs, pcfg)
        reports = [MetricReport.from_cases(k, v, fcfg.n_bootstrap, seed) for k, v in per_case.items()]
    else:
        preds = predict_stage(model, pairs, pcfg, fcfg.mode)
        labels = stage_labels(pairs)
        correct = (preds == labels).astype(float)
        reports = [
            MetricReport.from_cases("accuracy", correct, fcfg.n_bootstrap, seed),
            MetricReport("sensitivity_macro", [], macro_sensitivity(preds, labels, classes=(0, 1))),
        ]
        assert abs(reports[0].point - accuracy(preds, labels)) < 1e-12
    return report_document(fcfg.task, reports, len(pairs))


def export_predictions(model, fcfg: FinetuneConfig, pcfg: PretrainConfig, pairs, case_ids, out_dir) -> Path:
    """Segmentation: one bundle per case carrying the predicted mask in place
    of the reference. Staging: ``predictions.jsonl`` with one record per case."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fcfg.task == "seg":
        spec = task_patch_spec("seg", pcfg)
        for cid, pair in zip(case_ids, pairs):
            pred = predict_volume(model, pair, spec)
            write_bundle(dataclasses.replace(pair, lesion_mask=pred, stage_label=stage_from_mask(pred)),
                         out_dir / f"{cid}_pred")
        return out_dir
    preds = predict_stage(model, pairs, pcfg, fcfg.mode)
    labels = stage_labels(pairs)
    names = ("early", "advanced")
    path = out_dir / "predictions.jsonl"
    with open(path, "w") as fh:
        for cid, p, t in zip(case_ids, preds, labels):
            fh.write(json.dumps({"id": cid, "pred": names[int(p)], "label": names[int(t)]}, sort_keys=True) + "\n")
    return path


def save_task_checkpoint(path, model: DownstreamModel, fcfg: FinetuneConfig, pcfg: PretrainConfig,
                         source: Optional[str]) -> Path:
    header = {
        "kind": "finetune",
        "task": fcfg.task,
        "finetune": to_dict(fcfg),
        "pretrain": to_dict(pcfg),
        "config_hash": config_hash({"f": to_dict(fcfg), "p": to_dict(pcfg)}),
        "source_checkpoint": source,
    }
    return save_checkpoint(path, header, {f"model.{k}": v for k, v in model.state_dict().items()})


def load_task_checkpoint(path) -> Tuple[DownstreamModel, FinetuneConfig, PretrainConfig]:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "finetune":
        raise ValueError(f"{path} is not a task checkpoint")
    fcfg = FinetuneConfig.from_dict(header["finetune"])
    pcfg = PretrainConfig.from_dict(header["pretrain"])
    model = DownstreamModel(fcfg.task, pcfg.encoder, fcfg.mlp_hidden, fcfg.features)
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items()})
    return model, fcfg, pcfg


def run_finetune(fcfg: FinetuneConfig, pcfg: PretrainConfig, manifest_path, out_dir,
                 pretrained: Optional[str] = None) -> Dict:
    """Train on a seed-deterministic ``train_fraction`` of the train split,
    evaluate on the test split, write ``task.ckpt``, ``report.json`` and
    ``metrics.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder_state = None
    if pretrained is not None:
        src_cfg, encoder_state = load_pretrained(pretrained)
        if src_cfg.encoder != pcfg.encoder or src_cfg.patch.patch_dims != pcfg.patch.patch_dims:
            log.info("using encoder geometry from %s", pretrained)
        pcfg = src_cfg
    manifest = read_manifest(manifest_path)
    train_cases = subset_fraction(manifest_cases(manifest, "train"), fcfg.train_fraction, fcfg.seed)
    test_cases = manifest_cases(manifest, "test")
    resize = task_resize(fcfg.task, pcfg)
    train_pairs = load_pairs(manifest, train_cases, resize, pcfg.ct_window, pcfg.pet_window)
    test_pairs = load_pairs(manifest, test_cases, resize, pcfg.ct_window, pcfg.pet_window)
    records: List[Dict] = []
    model = train_downstream(fcfg, pcfg, train_pairs, encoder_state, records)
    chash = config_hash({"f": to_dict(fcfg), "p": to_dict(pcfg)})
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for r in records:
            r["config_hash"] = chash
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    ckpt = save_task_checkpoint(out_dir / "task.ckpt", model, fcfg, pcfg, pretrained)
    doc = evaluate(model, fcfg, pcfg, test_pairs, seed=fcfg.seed)
    doc.update({"config_hash": chash, "checkpoint": str(ckpt.name), "n_train": len(train_pairs),
                "train_cases": [c["id"] for c in train_cases]})
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
