"""Experiment configuration: one JSON document aggregating the synthetic-data,
pre-training and fine-tuning settings, with named presets.

Precedence is command-line flags > config file > preset defaults. The
top-level ``seed`` is copied into every sub-config so a run is determined by
(config, seed) alone.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .finetune import FinetuneConfig
from .patches import PatchSpec, StackMode
from .pretrain import PretrainConfig
from .schema import ConfigError, config_hash, from_dict, to_dict
from .text import TextConfig

CONFIG_VERSION = 1


@dataclass
class SynthConfig:
    """Cohort of synthetic phantoms written by ``synth-gen``.

    ``balanced_stages`` alternates one-third and three-third lesion spreads so
    both stage labels are equally represented.
    """

    n_cases: int = 16
    test_fraction: float = 0.25
    grid_dims: Tuple[int, int, int] = (64, 32, 32)
    spacing: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    n_organs: int = 4
    n_lesions: int = 3
    uptake_correlation: float = 0.8
    noise_sigma: float = 0.01
    lesion_radius: Optional[int] = None
    balanced_stages: bool = False

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must lie in [0, 1)")


@dataclass
class ExperimentConfig:
    format_version: int = CONFIG_VERSION
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def __post_init__(self):
        if self.format_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.format_version!r}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        self.pretrain.seed = self.seed
        self.finetune.seed = self.seed

    def to_dict(self) -> Dict:
        return to_dict(self)

    @property
    def hash(self) -> str:
        return config_hash(self)


def _desk() -> ExperimentConfig:
    patch = PatchSpec(patch_dims=(16, 32, 32), k=2, mode=StackMode.CORONAL, token_size=(4, 8, 8))
    return ExperimentConfig(
        synth=SynthConfig(),
        pretrain=PretrainConfig(
            epochs=30, lr_init=1e-3, batch_size=4, patch=patch, resize_dims=None,
            encoder=EncoderConfig(embed_dim=96, depth=4, heads=4),
            decoder=DecoderConfig(embed_dim=64, depth=2, heads=4),
            text=TextConfig(width=64, depth=2, heads=4, align_dim=64),
        ),
        finetune=FinetuneConfig(steps=300, lr_init=1e-3, batch_size=2),
    )


def _tiny() -> ExperimentConfig:
    """Seconds-scale settings used by the test-suite and smoke runs."""
    patch = PatchSpec(patch_dims=(16, 16, 16), k=2, mode=StackMode.CORONAL, token_size=(4, 4, 4))
    return ExperimentConfig(
        synth=SynthConfig(n_cases=8, grid_dims=(32, 16, 16), n_lesions=2, noise_sigma=0.005),
        pretrain=PretrainConfig(
            epochs=2, lr_init=1e-3, batch_size=4, patch=patch,
            encoder=EncoderConfig(embed_dim=32, depth=4, heads=4),
            decoder=DecoderConfig(embed_dim=32, depth=2, heads=4),
            text=TextConfig(width=32, depth=1, heads=4, align_dim=32),
        ),
        finetune=FinetuneConfig(steps=20, lr_init=1e-3, batch_size=2, n_bootstrap=200),
    )


def _paper() -> ExperimentConfig:
    """Full-scale settings: ViT-B encoders, 32x160x192 patches from volumes
    resized to 160x160x192, batch 24, 30 epochs at 1e-4. Not runnable on a
    laptop; kept for fidelity runs."""
    patch = PatchSpec(patch_dims=(32, 160, 192), k=2, mode=StackMode.CORONAL, token_size=(8, 16, 16))
    return ExperimentConfig(
        synth=SynthConfig(n_cases=64, grid_dims=(160, 160, 192)),
        pretrain=PretrainConfig(
            epochs=30, lr_init=1e-4, batch_size=24, patch=patch, resize_dims=(160, 160, 192),
            encoder=EncoderConfig.vit_b(patch.token_size, patch.grid_dims),
            decoder=DecoderConfig(embed_dim=512, depth=8, heads=16),
            text=TextConfig(width=512, depth=12, heads=8, align_dim=512, max_len=16),
        ),
        finetune=FinetuneConfig(task="seg", steps=5000, lr_init=1e-4, batch_size=16),
    )


PRESETS = {"desk": _desk, "tiny": _tiny, "paper": _paper}

# task-specific preset values applied when the task is known
TASK_DEFAULTS = {
    "paper": {"stage": {"lr_init": 5e-5, "batch_size": 2}},
}


def preset(name: str, task: Optional[str] = None) -> ExperimentConfig:
    try:
        cfg = PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if task is not None:
        doc = to_dict(cfg)
        doc["finetune"].update(TASK_DEFAULTS.get(name, {}).get(task, {}), task=task)
        cfg = from_dict(ExperimentConfig, doc)
    return cfg


def _merge(base: Dict, override: Dict, where: str = "") -> Dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"{where or 'config'}: unknown key {key!r}")
        if isinstance(value, dict) and isinstance(out[key], dict):
            out[key] = _merge(out[key], value, f"{where}.{key}" if where else key)
        else:
            out[key] = value
    return out


def config_from_dict(doc: Dict, base: str = "desk", task: Optional[str] = None) -> ExperimentConfig:
    """Overlay ``doc`` on a preset. A ``preset`` key in ``doc`` selects the base."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = dict(doc)
    base = doc.pop("preset", base)
    merged = _merge(to_dict(preset(base, task)), doc)
    return from_dict(ExperimentConfig, merged)


def load_config(path=None, overrides: Optional[Dict] = None, base: str = "desk",
                task: Optional[str] = None) -> ExperimentConfig:
    """Read ``path`` (JSON) over the preset, then apply flag ``overrides``.
    ``task`` selects task-specific preset values for fine-tuning."""
    doc: Dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(doc, base, task)
    if overrides:
        cfg = from_dict(ExperimentConfig, _merge(to_dict(cfg), overrides))
    return cfg


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path
