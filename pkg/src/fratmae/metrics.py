"""Overlap and classification metrics with percentile-bootstrap confidence
intervals over cases."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)


def _masks(pred, true):
    p = np.asarray(pred).astype(bool)
    t = np.asarray(true).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    return p, t


def dice(pred_mask, true_mask) -> float:
    """2|P & T| / (|P| + |T|); 1.0 when both masks are empty."""
    p, t = _masks(pred_mask, true_mask)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def iou(pred_mask, true_mask) -> float:
    """|P & T| / |P | T|; 1.0 when both masks are empty."""
    p, t = _masks(pred_mask, true_mask)
    union = int((p | t).sum())
    if union == 0:
        return 1.0
    return int((p & t).sum()) / union


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("no predictions")
    return float((preds == labels).mean())


def macro_sensitivity(preds, labels, classes: Optional[Sequence] = None) -> float:
    """Unweighted mean of per-class recall. Classes without ground-truth
    instances are skipped with a warning."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    classes = np.unique(labels) if classes is None else list(classes)
    recalls = []
    for c in classes:
        support = labels == c
        if not support.any():
            log.warning("class %r has no ground-truth instances; excluded from macro sensitivity", c)
            continue
        recalls.append(float((preds[support] == c).mean()))
    if not recalls:
        raise ValueError("no class with ground-truth instances")
    return float(np.mean(recalls))


def bootstrap_ci(values, n_samples: int = 1000, level: float = 0.95, seed: int = 0) -> Tuple[float, float]:
    """Percentile interval of the mean from resampling cases with replacement."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("bootstrap needs at least one case")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_samples, values.size))
    means = values[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    # an all-equal sample must give a point interval despite float summation error
    if np.all(values == values[0]):
        return float(values[0]), float(values[0])
    return float(lo), float(hi)


@dataclass
class MetricReport:
    name: str
    per_case: List[float]
    point: float
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    n_bootstrap: int = 0
    seed: int = 0

    @classmethod
    def from_cases(cls, name: str, values, n_bootstrap: int = 1000, seed: int = 0, level: float = 0.95):
        values = [float(v) for v in values]
        lo, hi = bootstrap_ci(values, n_bootstrap, level, seed)
        return cls(name, values, float(np.mean(values)), lo, hi, n_bootstrap, seed)

    def to_dict(self) -> Dict:
        return asdict(self)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["format_version", "task", "metrics", "n_cases"],
    "properties": {
        "format_version": {"const": 1},
        "task": {"enum": ["seg", "stage"]},
        "n_cases": {"type": "integer", "minimum": 0},
        "config_hash": {"type": "string"},
        "checkpoint": {"type": "string"},
        "metrics": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["name", "point"],
                "properties": {
                    "name": {"type": "string"},
                    "point": {"type": "number"},
                    "per_case": {"type": "array", "items": {"type": "number"}},
                    "ci_low": {"type": ["number", "null"]},
                    "ci_high": {"type": ["number", "null"]},
                    "n_bootstrap": {"type": "integer"},
                    "seed": {"type": "integer"},
                },
            },
        },
    },
}


def report_document(task: str, reports: Sequence[MetricReport], n_cases: int, **extra) -> Dict:
    doc = {"format_version": 1, "task": task, "n_cases": n_cases,
           "metrics": {r.name: r.to_dict() for r in reports}}
    doc.update(extra)
    return doc


def validate_report(doc: Dict) -> None:
    import jsonschema

    jsonschema.validate(doc, REPORT_SCHEMA)


def format_table(doc: Dict) -> str:
    """One line per metric: point estimate and, where present, the CI."""
    lines = [f"task: {doc['task']}  cases: {doc['n_cases']}"]
    for name, m in doc["metrics"].items():
        ci = "" if m.get("ci_low") is None else f" ({m['ci_low']:.3f}-{m['ci_high']:.3f})"
        lines.append(f"  {name:<22s} {m['point']:.3f}{ci}")
    return "\n".join(lines)
