"""Command-line entry points: synth-gen, pretrain, finetune, eval, recon-demo.

Exit codes: 0 success, 1 configuration or IO error, 2 training diverged (NaN).
Output directories default to ``$FRATMAE_OUT/<command>`` (``./runs`` when the
variable is unset) unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import CheckpointError, read_header
from .config import PRESETS, ExperimentConfig, load_config, save_config
from .data import ManifestError, load_pairs, manifest_cases, preprocess, read_manifest, write_manifest
from .finetune import evaluate, export_predictions, load_task_checkpoint, run_finetune, task_resize
from .metrics import format_table, validate_report
from .model import Ablation, derive_seed
from .patches import StackMode
from .pretrain import Pretrainer, TrainingDiverged, run_pretraining
from .schema import ConfigError
from .text import format_prompt
from .volume import BundleError, SyntheticSpec, generate_synthetic_pair, read_bundle, write_bundle

log = logging.getLogger("fratmae")

OUT_ENV = "FRATMAE_OUT"
EXIT_OK, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2


def output_dir(args, command: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def resolve_config(args) -> ExperimentConfig:
    """Preset, then ``--config`` file, then explicit flags."""
    overrides: Dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "ablation", None) is not None:
        overrides.setdefault("pretrain", {})["ablation"] = args.ablation
    ft = {}
    if getattr(args, "train_fraction", None) is not None:
        ft["train_fraction"] = args.train_fraction
    if getattr(args, "mode", None) is not None:
        ft["mode"] = args.mode
    task = getattr(args, "task", None)
    if task is not None:
        ft["task"] = task
    if ft:
        overrides["finetune"] = ft
    return load_config(args.config, overrides, base=args.preset, task=task)


# ---------------------------------------------------------------------------
# commands


def synth_cases(cfg: ExperimentConfig) -> List[SyntheticSpec]:
    s = cfg.synth
    specs = []
    for i in range(s.n_cases):
        thirds = (1 if i % 2 == 0 else 3) if s.balanced_stages else None
        spec = SyntheticSpec(
            grid_dims=s.grid_dims, n_organs=s.n_organs, n_lesions=s.n_lesions,
            uptake_correlation=s.uptake_correlation, noise_sigma=s.noise_sigma,
            seed=derive_seed(cfg.seed, f"case{i}"), spacing=s.spacing, lesion_radius=s.lesion_radius,
            lesion_thirds=thirds,
        )
        spec.validate()
        specs.append(spec)
    return specs


def cmd_synth_gen(args) -> int:
    cfg = resolve_config(args)
    specs = synth_cases(cfg)
    out = output_dir(args, "synth")
    n = len(specs)
    n_test = int(round(cfg.synth.test_fraction * n))
    test = set(np.random.default_rng(cfg.seed).permutation(n)[:n_test].tolist())
    cases = []
    for i, spec in enumerate(specs):
        pair = generate_synthetic_pair(spec)
        case_id = f"case_{i:04d}"
        write_bundle(pair, out / "bundles" / case_id)
        cases.append({
            "id": case_id,
            "bundle": f"bundles/{case_id}.json",
            "split": "test" if i in test else "train",
            "prompt": format_prompt(pair.metadata),
            "stage_label": pair.stage_label.value,
        })
    write_manifest(out / "manifest.json", cases, cfg.seed)
    save_config(cfg, out / "config.json")
    print(f"wrote {n} bundles ({n - n_test} train, {n_test} test) to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    out = output_dir(args, "pretrain")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    last = run_pretraining(cfg.pretrain, args.manifest, out, resume=args.resume)
    print(f"checkpoint: {last}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    if args.from_pretrained is not None and not Path(args.from_pretrained).exists():
        raise FileNotFoundError(f"pre-trained checkpoint not found: {args.from_pretrained}")
    out = output_dir(args, f"finetune_{cfg.finetune.task}")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    doc = run_finetune(cfg.finetune, cfg.pretrain, args.manifest, out, args.from_pretrained)
    validate_report(doc)
    print(format_table(doc))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, fcfg, pcfg = load_task_checkpoint(args.checkpoint)
    if args.task is not None and args.task != fcfg.task:
        raise ConfigError(f"checkpoint was trained for {fcfg.task!r}, not {args.task!r}")
    if args.mode is not None:
        fcfg.mode = StackMode.parse(args.mode)
    manifest = read_manifest(args.manifest)
    cases = manifest_cases(manifest, args.split)
    if not cases:
        raise ManifestError(f"no {args.split!r} cases in {args.manifest}")
    pairs = load_pairs(manifest, cases, task_resize(fcfg.task, pcfg), pcfg.ct_window, pcfg.pet_window)
    seed = fcfg.seed if args.seed is None else args.seed
    doc = evaluate(model, fcfg, pcfg, pairs, seed=seed)
    doc["checkpoint"] = str(args.checkpoint)
    validate_report(doc)
    out = output_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if args.export is not None:
        export_predictions(model, fcfg, pcfg, pairs, [c["id"] for c in cases], args.export)
    print(format_table(doc))
    return EXIT_OK


def cmd_recon_demo(args) -> int:
    from .viz import reconstruction_panels, write_panels

    header = read_header(args.checkpoint)
    if header.get("kind") != "pretrain":
        raise CheckpointError(f"{args.checkpoint} is not a pre-training checkpoint")
    if args.ablation is not None and Ablation(args.ablation).value != header["ablation"]:
        raise ConfigError(f"checkpoint ablation is {header['ablation']!r}, requested {args.ablation!r}")
    if not Ablation(header["ablation"]).pretrains:
        raise ConfigError("baseline_none checkpoints carry no decoder to reconstruct with")
    trainer = Pretrainer.load(args.checkpoint)
    pcfg = trainer.cfg
    pair = preprocess(read_bundle(args.bundle), pcfg.resize_dims, pcfg.ct_window, pcfg.pet_window)
    seed = 0 if args.seed is None else args.seed
    panels = reconstruction_panels(trainer.model, pair, pcfg.patch, seed, pcfg.mask_ratio)
    paths = write_panels(panels, output_dir(args, "recon"), scale=args.scale)
    for modality, path in paths.items():
        print(f"{modality}: {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--preset", default="desk", choices=sorted(PRESETS), help="base settings under --config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fratmae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    ablations = [a.value for a in Ablation]

    p = sub.add_parser("synth-gen", help="write synthetic PET/CT bundles and a manifest")
    _common(p)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("pretrain", help="stage-1 pre-training")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ablation", choices=ablations)
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage-2 segmentation or staging")
    p.add_argument("task", choices=["seg", "stage"])
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--from-pretrained", metavar="PATH")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--mode", choices=["coronal", "axial"])
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a task checkpoint")
    p.add_argument("task", nargs="?", choices=["seg", "stage"])
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=["coronal", "axial"])
    p.add_argument("--export", metavar="DIR", help="also write per-case predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recon-demo", help="write reconstruction panels for one bundle")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--ablation", choices=ablations, help="fail unless the checkpoint has this ablation")
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_recon_demo)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ManifestError, BundleError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
