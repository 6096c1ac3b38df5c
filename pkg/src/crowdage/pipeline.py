"""Training loop, schedule, evaluation protocol, metrics, checkpointing."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .age_estimator import N_AGE_GROUPS, AGE_GROUP_LABELS, to_age_group
from .augment import AugmentToggles, TilingConfig, default_augment, mix_detection_only, tile_scenes
from .detector import detection_loss, encode_targets, stack_targets
from .geometry import iou
from .losses import AgeSupervisionBatch, LossWeights, masked_age_loss, masked_gender_loss, total_loss
from .model import ModelConfig, MultiPersonAgeModel, preset_config
from .synth_data import DatasetManifest, Scene, weighted_sampler

CHECKPOINT_VERSION = 1

MODE_FROZEN = "frozen_detector"
MODE_END_TO_END = "end_to_end"


@dataclass(frozen=True)
class TrainConfig:
    mode: str = MODE_FROZEN
    preset: str = "desk"
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    lr_milestones: tuple[int, ...] = (30, 40)
    lr_decay: float = 0.1
    tiling: bool = False
    intermediate_connection: bool = True
    k_train: Optional[int] = None  # defaults to 9 with tiling, 1 without
    k_eval: int = 20
    conf_threshold: float = 0.2
    seed: int = 0
    steps_per_epoch: Optional[int] = None
    detector_epochs: int = 60
    detector_lr: float = 1e-3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentToggles = field(default_factory=AugmentToggles)
    tiling_config: TilingConfig = field(default_factory=TilingConfig)

    def __post_init__(self):
        if self.mode not in (MODE_FROZEN, MODE_END_TO_END):
            raise ValueError(f"mode must be {MODE_FROZEN!r} or {MODE_END_TO_END!r}")
        if self.k_train is not None and self.k_train < 1:
            raise ValueError("k_train must be >= 1")
        if self.k_eval < 1:
            raise ValueError("k_eval must be >= 1")
        if not (0.0 < self.conf_threshold < 1.0):
            raise ValueError("conf_threshold must be in (0, 1)")

    @property
    def resolved_k_train(self) -> int:
        if self.k_train is not None:
            return self.k_train
        return 9 if self.tiling else 1

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * (self.lr_decay**passed)


@dataclass
class TrainResult:
    model: MultiPersonAgeModel
    metrics: list[dict]
    checkpoint_path: Optional[Path] = None


def _epoch_stream(
    config: TrainConfig,
    manifests: Sequence[DatasetManifest],
    detection_manifest: Optional[DatasetManifest],
    epoch: int,
) -> Iterator[Scene]:
    """Deterministic scene stream for one epoch.

    Rebuilt per epoch from (seed, epoch) so a resumed run replays exactly the
    scenes the uninterrupted run would have seen.
    """
    seed = config.seed * 100003 + epoch
    base = weighted_sampler(manifests, seed)
    rng = np.random.default_rng(seed + 1)
    tc = config.tiling_config

    stream = base
    if config.tiling:
        canvas = manifests[0].records[0].width

        def tiled() -> Iterator[Scene]:
            while True:
                n = int(tc.allowed_tile_counts[rng.integers(0, len(tc.allowed_tile_counts))])
                n_src = min(n, tc.max_distinct_sources)
                sources = [next(base) for _ in range(n_src)]
                yield tile_scenes(sources, n, canvas, rng, tc.max_distinct_sources)

        stream = tiled()
        if detection_manifest is not None and tc.detection_only_mix > 0:
            stream = mix_detection_only(stream, detection_manifest, rng, tc.detection_only_mix)

    if any(asdict(config.augment).values()):
        inner = stream

        def augmented() -> Iterator[Scene]:
            for scene in inner:
                yield default_augment(scene, rng, config.augment)

        stream = augmented()
    return stream


def _batch_tensors(scenes: list[Scene]) -> torch.Tensor:
    shapes = {s.image.shape for s in scenes}
    if len(shapes) != 1:
        raise ValueError(f"scenes in a batch must share one size, got {shapes}")
    return torch.from_numpy(np.stack([s.image for s in scenes]))


def _supervision(pred, scenes: list[Scene]) -> AgeSupervisionBatch:
    return AgeSupervisionBatch(
        age_probs=pred.age_probs,
        gender_probs=pred.gender_probs,
        pred_boxes=pred.detections,
        gt_boxes=[[f.box for f in s.faces] for s in scenes],
        gt_ages=[[f.age for f in s.faces] for s in scenes],
        gt_genders=[[f.gender_index for f in s.faces] for s in scenes],
    )


def _steps_per_epoch(config: TrainConfig, manifests: Sequence[DatasetManifest]) -> int:
    if config.steps_per_epoch is not None:
        return config.steps_per_epoch
    biggest = max(len(m) for m in manifests)
    return max(1, math.ceil(biggest / config.batch_size))


def pretrain_detector(
    model: MultiPersonAgeModel,
    config: TrainConfig,
    manifests: Sequence[DatasetManifest],
    detection_manifest: Optional[DatasetManifest] = None,
) -> list[dict]:
    """Train the detection sub-network alone with the detection loss.

    Uses the same scene stream the main run will see (tiling included), so a
    frozen-mode run without pretrained weights is self-contained.
    """
    torch.manual_seed(config.seed + 1)
    opt = torch.optim.Adam(model.detector.parameters(), lr=config.detector_lr)
    steps = _steps_per_epoch(config, manifests)
    cfg = model.config
    log = []
    model.detector.train()
    for epoch in range(config.detector_epochs):
        stream = _epoch_stream(config, manifests, detection_manifest, epoch)
        running = 0.0
        for _ in range(steps):
            scenes = [next(stream) for _ in range(config.batch_size)]
            images = _batch_tensors(scenes)
            det_out, _ = model.detector(
                _resize_for_detector(images, cfg).permute(0, 3, 1, 2)
            )
            targets = stack_targets(
                [encode_targets(s, cfg.detector_input, cfg.stride) for s in scenes]
            )
            terms = detection_loss(det_out, targets, config.loss_weights)
            if not torch.isfinite(terms.total):
                raise RuntimeError(
                    f"non-finite detector loss at pretrain epoch {epoch} (seed {config.seed})"
                )
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            running += float(terms.total.detach())
        log.append({"phase": "detector", "epoch": epoch, "l_det": running / steps})
    model.detector.eval()
    return log


def _resize_for_detector(images: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    from .geometry import BBox, crop_and_resize

    b, h, w = images.shape[0], images.shape[1], images.shape[2]
    side = cfg.detector_input
    if (h, w) == (side, side):
        return images
    full = BBox(0.0, 0.0, float(w), float(h))
    return torch.stack([crop_and_resize(images[i], full, side, side) for i in range(b)])


def train(
    config: TrainConfig,
    manifests: Sequence[DatasetManifest],
    detection_manifest: Optional[DatasetManifest] = None,
    detector_state: Optional[dict] = None,
    out_dir: Optional[Path] = None,
    resume_from: Optional[Path] = None,
) -> TrainResult:
    """Run the configured training regime and return the model plus metric log.

    Frozen mode trains only the age sub-network under L_age + L_gen while the
    detection parameters stay byte-identical (L_det is still logged);
    end-to-end mode updates everything under the full objective. Without
    pretrained detector weights, frozen mode pretrains the detector first.
    """
    if not manifests:
        raise ValueError("need at least one training manifest")
    torch.manual_seed(config.seed)

    metrics: list[dict] = []
    start_epoch = 0
    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        model = bundle.model
        start_epoch = bundle.epoch + 1
        torch.set_rng_state(bundle.torch_rng)
        opt_state = bundle.optimizer_state
    else:
        model_cfg = preset_config(
            config.preset, intermediate_connection=config.intermediate_connection
        )
        model = MultiPersonAgeModel(model_cfg)
        opt_state = None
        if config.mode == MODE_FROZEN:
            if detector_state is not None:
                model.detector.load_state_dict(detector_state)
            else:
                metrics.extend(
                    pretrain_detector(model, config, manifests, detection_manifest)
                )

    frozen = config.mode == MODE_FROZEN
    if frozen:
        for p in model.detector.parameters():
            p.requires_grad_(False)
        trainable = list(model.age_net.parameters())
    else:
        trainable = list(model.parameters())

    opt = torch.optim.Adam(trainable, lr=config.lr)
    if opt_state is not None:
        opt.load_state_dict(opt_state)

    steps = _steps_per_epoch(config, manifests)
    k = config.resolved_k_train
    cfg = model.config
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    checkpoint_path = None
    for epoch in range(start_epoch, config.epochs):
        lr = config.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.age_net.train()
        if frozen:
            model.detector.eval()  # keep normalization buffers byte-identical
        else:
            model.detector.train()

        stream = _epoch_stream(config, manifests, detection_manifest, epoch)
        sums = {"l_det": 0.0, "l_age": 0.0, "l_gen": 0.0, "l": 0.0}
        for step in range(steps):
            scenes = [next(stream) for _ in range(config.batch_size)]
            images = _batch_tensors(scenes)
            pred = model(images, k)
            targets = stack_targets(
                [encode_targets(s, cfg.detector_input, cfg.stride) for s in scenes]
            )
            det_terms = detection_loss(pred.det_out, targets, config.loss_weights)
            sup = _supervision(pred, scenes)
            l_age = masked_age_loss(sup, config.loss_weights)
            l_gen = masked_gender_loss(sup, config.loss_weights)
            try:
                full = total_loss(det_terms.total, l_age, l_gen)
            except ValueError as exc:
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(seed {config.seed}, batch seed {config.seed * 100003 + epoch}): {exc}"
                ) from exc
            objective = l_age + l_gen if frozen else full
            full = full.detach()
            opt.zero_grad()
            if objective.requires_grad:  # a fully masked batch has nothing to train
                objective.backward()
                opt.step()
            sums["l_det"] += float(det_terms.total.detach())
            sums["l_age"] += float(l_age.detach())
            sums["l_gen"] += float(l_gen.detach())
            sums["l"] += float(full)

        record = {
            "epoch": epoch,
            "lr": lr,
            "l_det": sums["l_det"] / steps,
            "l_age": sums["l_age"] / steps,
            "l_gen": sums["l_gen"] / steps,
            "l": sums["l"] / steps,
        }
        metrics.append(record)
        if out_path is not None:
            with (out_path / "metrics.jsonl").open("a") as fh:
                fh.write(json.dumps(record) + "\n")
            checkpoint_path = out_path / "last.ckpt"
            save_checkpoint(checkpoint_path, model, config, opt, epoch)

    model.eval()
    return TrainResult(model, metrics, checkpoint_path)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    k: int = 20
    conf_threshold: float = 0.2
    iou_threshold: float = 0.5
    protocol: str = "auto"  # multi | single | auto

    def __post_init__(self):
        if self.protocol not in ("multi", "single", "auto"):
            raise ValueError(f"unknown protocol {self.protocol!r}")


@dataclass
class EvalReport:
    mae: Optional[float]
    group_accuracy: Optional[float]
    one_off_accuracy: Optional[float]
    gender_accuracy: Optional[float]
    per_group: list[dict]
    detection_recall: float
    detection_precision: float
    n_scenes: int
    n_gt_faces: int
    n_age_evaluated: int
    n_gender_evaluated: int

    def to_dict(self) -> dict:
        return asdict(self)

    def format_table(self) -> str:
        lines = [
            f"scenes {self.n_scenes}  gt faces {self.n_gt_faces}  "
            f"recall {self.detection_recall:.3f}  precision {self.detection_precision:.3f}",
            f"MAE {self.mae:.2f} yrs  group acc {self.group_accuracy:.2f}%  "
            f"1-off {self.one_off_accuracy:.2f}%  gender {self.gender_accuracy:.2f}%"
            if self.mae is not None
            else "no labeled faces evaluated",
            f"{'group':>8} {'count':>6} {'age':>7} {'1-off':>7} {'gender':>7}",
        ]
        for row in self.per_group:
            age = f"{row['age_acc']:.1f}" if row["age_acc"] is not None else "-"
            off = f"{row['one_off_acc']:.1f}" if row["one_off_acc"] is not None else "-"
            gen = f"{row['gender_acc']:.1f}" if row["gender_acc"] is not None else "-"
            lines.append(
                f"{row['label']:>8} {row['count']:>6} {age:>7} {off:>7} {gen:>7}"
            )
        return "\n".join(lines)


def evaluate(
    model: MultiPersonAgeModel, manifest: DatasetManifest, config: EvalConfig
) -> EvalReport:
    """Score a model on a manifest.

    Detections above the confidence threshold are matched to ground truth
    greedily by confidence at the IOU threshold; a scene with no detection
    above threshold falls back to its single most confident one. Single-face
    protocol (chosen automatically when every scene has one face) compares
    the largest detected face against the lone ground truth regardless of
    overlap, as real single-face test sets are scored.
    """
    if len(manifest) == 0:
        raise ValueError(f"manifest {manifest.name!r} is empty")
    protocol = config.protocol
    if protocol == "auto":
        protocol = "single" if all(len(r.faces) == 1 for r in manifest.records) else "multi"

    model.eval()
    n_gt = 0
    n_matched = 0
    n_pred = 0
    age_pairs: list[tuple[float, int]] = []
    gender_pairs: list[tuple[str, str, int]] = []  # (pred, true, true_group)

    for i in range(len(manifest)):
        scene = manifest.load_scene(i)
        ests = model.estimate(scene.image, k=config.k, conf_threshold=0.0)
        above = [e for e in ests if e.confidence > config.conf_threshold]
        if not above:
            above = ests[:1]
        n_pred += len(above)
        n_gt += len(scene.faces)

        unmatched = list(range(len(scene.faces)))
        pairs = []
        for est in above:  # already sorted by confidence
            if not unmatched:
                break
            best, best_iou = None, 0.0
            for gi in unmatched:
                v = iou(est.box, scene.faces[gi].box)
                if v > best_iou:
                    best, best_iou = gi, v
            if best is not None and best_iou >= config.iou_threshold:
                unmatched.remove(best)
                pairs.append((est, scene.faces[best]))
        n_matched += len(pairs)

        if protocol == "single":
            target = max(above, key=lambda e: e.box.area)
            scored = [(target, scene.faces[0])]
        else:
            scored = pairs

        for est, face in scored:
            if face.has_age:
                age_pairs.append((est.age, int(face.age)))
            if face.has_gender:
                group = to_age_group(face.age) if face.has_age else None
                gender_pairs.append((est.gender, face.gender, group))

    group_counts = np.zeros(N_AGE_GROUPS, dtype=int)
    group_hits = np.zeros(N_AGE_GROUPS, dtype=int)
    group_one_off = np.zeros(N_AGE_GROUPS, dtype=int)
    group_gender_counts = np.zeros(N_AGE_GROUPS, dtype=int)
    group_gender_hits = np.zeros(N_AGE_GROUPS, dtype=int)

    abs_errors = []
    for pred_age, true_age in age_pairs:
        abs_errors.append(abs(pred_age - true_age))
        g_true = to_age_group(true_age)
        g_pred = to_age_group(pred_age)
        group_counts[g_true] += 1
        group_hits[g_true] += int(g_pred == g_true)
        group_one_off[g_true] += int(abs(g_pred - g_true) <= 1)
    for pred_gender, true_gender, group in gender_pairs:
        if group is not None:
            group_gender_counts[group] += 1
            group_gender_hits[group] += int(pred_gender == true_gender)

    per_group = []
    for g in range(N_AGE_GROUPS):
        per_group.append(
            {
                "label": AGE_GROUP_LABELS[g],
                "count": int(group_counts[g]),
                "age_acc": 100.0 * group_hits[g] / group_counts[g] if group_counts[g] else None,
                "one_off_acc": 100.0 * group_one_off[g] / group_counts[g]
                if group_counts[g]
                else None,
                "gender_acc": 100.0 * group_gender_hits[g] / group_gender_counts[g]
                if group_gender_counts[g]
                else None,
            }
        )

    n_age = len(age_pairs)
    n_gender = len(gender_pairs)
    return EvalReport(
        mae=float(np.mean(abs_errors)) if abs_errors else None,
        group_accuracy=100.0 * group_hits.sum() / n_age if n_age else None,
        one_off_accuracy=100.0 * group_one_off.sum() / n_age if n_age else None,
        gender_accuracy=(
            100.0 * sum(p == t for p, t, _ in gender_pairs) / n_gender if n_gender else None
        ),
        per_group=per_group,
        detection_recall=n_matched / n_gt if n_gt else 0.0,
        detection_precision=n_matched / n_pred if n_pred else 0.0,
        n_scenes=len(manifest),
        n_gt_faces=n_gt,
        n_age_evaluated=n_age,
        n_gender_evaluated=n_gender,
    )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

@dataclass
class CheckpointBundle:
    model: MultiPersonAgeModel
    train_config: Optional[TrainConfig]
    epoch: int
    optimizer_state: Optional[dict]
    torch_rng: torch.Tensor


def _config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["loss_weights"] = asdict(config.loss_weights)
    d["augment"] = asdict(config.augment)
    d["tiling_config"] = asdict(config.tiling_config)
    return d


def _config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["loss_weights"] = LossWeights(**d["loss_weights"])
    d["augment"] = AugmentToggles(**d["augment"])
    tc = dict(d["tiling_config"])
    tc["allowed_tile_counts"] = tuple(tc["allowed_tile_counts"])
    d["tiling_config"] = TilingConfig(**tc)
    d["lr_milestones"] = tuple(d["lr_milestones"])
    return TrainConfig(**d)


def save_checkpoint(
    path: Path,
    model: MultiPersonAgeModel,
    train_config: Optional[TrainConfig] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    epoch: int = 0,
) -> Path:
    """Write a versioned checkpoint: parameters, config echo, rng state."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "model_state": model.state_dict(),
        "train_config": _config_to_dict(train_config) if train_config else None,
        "optimizer_state": optimizer.state_dict() if optimizer else None,
        "epoch": epoch,
        "torch_rng": torch.get_rng_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path) -> CheckpointBundle:
    """Restore a checkpoint; wrong version or unreadable file raises."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise ValueError(f"{path} is not a checkpoint file")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {payload['version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    mc = dict(payload["model_config"])
    for key in ("det_widths", "age_widths", "age_blocks"):
        mc[key] = tuple(mc[key])
    model = MultiPersonAgeModel(ModelConfig(**mc))
    model.load_state_dict(payload["model_state"])
    model.eval()
    train_config = (
        _config_from_dict(payload["train_config"]) if payload["train_config"] else None
    )
    return CheckpointBundle(
        model,
        train_config,
        payload["epoch"],
        payload["optimizer_state"],
        payload["torch_rng"],
    )
