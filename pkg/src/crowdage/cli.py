"""Command-line entry points: synth, train, eval, infer.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
The default output root comes from CROWDAGE_OUTPUT_ROOT when set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .augment import AugmentToggles, TilingConfig
from .losses import LossWeights
from .model import PRESETS
from .pipeline import (
    EvalConfig,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .synth_data import (
    SceneGenerationError,
    generate_scene,
    load_manifest,
    manifest_from_scenes,
    save_manifest,
    strip_labels,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _output_root() -> Path:
    return Path(os.environ.get("CROWDAGE_OUTPUT_ROOT", "."))


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _parse_faces_spec(spec: str) -> tuple[int, int]:
    if ":" in spec:
        lo, hi = spec.split(":", 1)
        lo, hi = int(lo), int(hi)
    else:
        lo = hi = int(spec)
    if lo < 0 or hi < lo:
        raise UsageError(f"bad faces-per-scene spec {spec!r}")
    return lo, hi


def cmd_synth(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir) if args.out_dir else _output_root() / args.name
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        print(f"error: {out_dir} exists and is not empty (use --force)", file=sys.stderr)
        return EXIT_USAGE
    lo, hi = _parse_faces_spec(args.faces_per_scene)
    rng = np.random.default_rng(args.seed)
    scenes = []
    for i in range(args.n_scenes):
        n_faces = int(rng.integers(lo, hi + 1))
        scale = (args.face_scale_min, args.face_scale_max)
        scenes.append(
            generate_scene(args.seed + 1 + i, n_faces, args.image_side, scale)
        )
    manifest = manifest_from_scenes(args.name, scenes)
    if args.detection_only:
        manifest = strip_labels(manifest)
    path = save_manifest(manifest, out_dir)
    print(f"wrote {len(scenes)} scenes to {path.parent}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

RUN_CONFIG_KEYS = {
    "preset",
    "mode",
    "epochs",
    "batch_size",
    "lr",
    "lr_milestones",
    "lr_decay",
    "tiling",
    "intermediate_connection",
    "k_train",
    "k_eval",
    "conf_threshold",
    "seed",
    "steps_per_epoch",
    "detector_epochs",
    "detector_lr",
    "loss_weights",
    "augment",
    "tiling_config",
    "manifests",
    "detection_manifest",
    "detector_weights",
    "out_dir",
}


def _load_run_config(path: Path, overrides: dict) -> tuple[TrainConfig, dict]:
    """Parse a YAML run config, rejecting unknown keys; flags win over file values."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must be a mapping")
    unknown = set(raw) - RUN_CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})

    paths = {
        "manifests": raw.pop("manifests", None),
        "detection_manifest": raw.pop("detection_manifest", None),
        "detector_weights": raw.pop("detector_weights", None),
        "out_dir": raw.pop("out_dir", None),
    }
    if not paths["manifests"]:
        raise UsageError("config must list at least one manifest under 'manifests'")

    if raw.get("preset") not in (None, *PRESETS):
        raise UsageError(f"unknown preset {raw.get('preset')!r}")
    if "loss_weights" in raw:
        raw["loss_weights"] = LossWeights(**raw["loss_weights"])
    if "augment" in raw:
        raw["augment"] = AugmentToggles(**raw["augment"])
    if "tiling_config" in raw:
        tc = dict(raw["tiling_config"])
        if "allowed_tile_counts" in tc:
            tc["allowed_tile_counts"] = tuple(tc["allowed_tile_counts"])
        raw["tiling_config"] = TilingConfig(**tc)
    if "lr_milestones" in raw:
        raw["lr_milestones"] = tuple(raw["lr_milestones"])
    try:
        config = TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return config, paths


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {
        "mode": args.mode,
        "preset": args.preset,
        "epochs": args.epochs,
        "seed": args.seed,
        "tiling": args.tiling,
        "intermediate_connection": args.intermediate_connection,
    }
    config, paths = _load_run_config(args.config, overrides)

    manifests = []
    for p in paths["manifests"]:
        if not Path(p).exists():
            raise UsageError(f"manifest path does not exist: {p}")
        manifests.append(load_manifest(Path(p)))
    detection_manifest = None
    if paths["detection_manifest"]:
        if not Path(paths["detection_manifest"]).exists():
            raise UsageError(f"manifest path does not exist: {paths['detection_manifest']}")
        detection_manifest = strip_labels(load_manifest(Path(paths["detection_manifest"])))
    detector_state = None
    if paths["detector_weights"]:
        detector_state = load_checkpoint(Path(paths["detector_weights"])).model.detector.state_dict()

    out_dir = Path(paths["out_dir"]) if paths["out_dir"] else _output_root() / "run"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_echo.json").write_text(
        json.dumps({"config": _jsonable(config), "paths": paths}, indent=2) + "\n"
    )

    result = train(
        config,
        manifests,
        detection_manifest=detection_manifest,
        detector_state=detector_state,
        out_dir=out_dir,
    )
    final = out_dir / "final.ckpt"
    save_checkpoint(final, result.model, config, epoch=config.epochs - 1)
    print(f"trained {config.epochs} epochs; checkpoint at {final}")
    return EXIT_OK


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    bundle = load_checkpoint(Path(args.checkpoint))
    manifest = load_manifest(Path(args.manifest))
    for rec in manifest.records:
        if (rec.height, rec.width) != (manifest.records[0].height, manifest.records[0].width):
            raise UsageError("eval manifest mixes image sizes")
    config = EvalConfig(k=args.k, conf_threshold=args.conf, protocol=args.protocol)
    report = evaluate(bundle.model, manifest, config)
    print(report.format_table())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    else:
        print(json.dumps(report.to_dict()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def cmd_infer(args: argparse.Namespace) -> int:
    from PIL import Image, UnidentifiedImageError

    bundle = load_checkpoint(Path(args.checkpoint))
    try:
        image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        print(f"error: cannot read image {args.image}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    estimates = bundle.model.estimate(image, k=args.k, conf_threshold=args.conf)
    for est in estimates:
        print(
            json.dumps(
                {
                    "box": list(est.box.as_tuple()),
                    "confidence": est.confidence,
                    "age": est.age,
                    "gender": est.gender,
                }
            )
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crowdage", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--name", default="synth")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--n-scenes", type=int, required=True)
    p.add_argument(
        "--faces-per-scene",
        default="1",
        help="fixed count like '1' or an inclusive range 'lo:hi'",
    )
    p.add_argument("--image-side", type=int, default=96)
    p.add_argument("--face-scale-min", type=float, default=0.35)
    p.add_argument("--face-scale-max", type=float, default=0.55)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--detection-only", action="store_true", help="strip age/gender labels")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train from a YAML run config")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("frozen_detector", "end_to_end"), default=None)
    p.add_argument("--preset", choices=tuple(PRESETS), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tiling", type=lambda s: s.lower() == "true", default=None)
    p.add_argument(
        "--intermediate-connection",
        dest="intermediate_connection",
        type=lambda s: s.lower() == "true",
        default=None,
    )
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("-k", type=int, default=20)
    p.add_argument("--conf", type=float, default=0.2)
    p.add_argument("--protocol", choices=("auto", "single", "multi"), default="auto")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="per-face records for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("-k", type=int, default=20)
    p.add_argument("--conf", type=float, default=0.2)
    p.set_defaults(fn=cmd_infer)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SceneGenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
