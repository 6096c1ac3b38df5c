import copy
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from crowdage.detector import encode_targets, stack_targets
from crowdage.geometry import BBox
from crowdage.losses import LossWeights, masked_age_loss
from crowdage.model import FaceEstimate, MultiPersonAgeModel, preset_config
from crowdage.pipeline import (
    EvalConfig,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from crowdage.pipeline import _supervision
from crowdage.synth_data import (
    FaceAnnotation,
    Scene,
    generate_scene,
    manifest_from_scenes,
)


def state_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


@pytest.fixture()
def tiny_manifest():
    return manifest_from_scenes("tiny", [generate_scene(700 + i, 1) for i in range(8)])


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_lr_schedule_example():
    cfg = TrainConfig(epochs=50, lr=1e-4, lr_milestones=(30, 40))
    assert cfg.lr_at(0) == pytest.approx(1e-4)
    assert cfg.lr_at(30) == pytest.approx(1e-5)
    assert cfg.lr_at(40) == pytest.approx(1e-6)
    assert cfg.lr_at(29) == pytest.approx(1e-4)


def test_k_train_resolution():
    assert TrainConfig(tiling=True).resolved_k_train == 9
    assert TrainConfig(tiling=False).resolved_k_train == 1
    assert TrainConfig(tiling=True, k_train=4).resolved_k_train == 4


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="sideways")
    with pytest.raises(ValueError):
        TrainConfig(conf_threshold=0.0)
    with pytest.raises(ValueError):
        TrainConfig(k_eval=0)


# ---------------------------------------------------------------------------
# evaluate (stub models isolate the metric machinery)
# ---------------------------------------------------------------------------

class StubModel:
    """Duck-typed model returning canned estimates per scene index."""

    def __init__(self, manifest, estimates_fn):
        self._scenes = [manifest.load_scene(i) for i in range(len(manifest))]
        self._fn = estimates_fn

    def eval(self):
        return self

    def estimate(self, image, k, conf_threshold):
        for idx, scene in enumerate(self._scenes):
            if np.array_equal(scene.image, image):
                ests = self._fn(idx, scene)
                return [e for e in ests if e.confidence > conf_threshold]
        raise AssertionError("unknown image")


def make_estimate(box, conf, age, gender="female"):
    probs = np.zeros(101)
    probs[min(100, int(age))] = 1.0
    gp = np.array([1.0, 0.0]) if gender == "female" else np.array([0.0, 1.0])
    return FaceEstimate(box, conf, float(age), gender, probs, gp)


def test_evaluate_perfect_predictor(tiny_manifest):
    def perfect(idx, scene):
        return [
            make_estimate(f.box, 0.9, f.age, f.gender) for f in scene.faces
        ]

    report = evaluate(StubModel(tiny_manifest, perfect), tiny_manifest, EvalConfig())
    assert report.mae == 0.0
    assert report.group_accuracy == 100.0
    assert report.one_off_accuracy == 100.0
    assert report.gender_accuracy == 100.0
    assert report.detection_recall == 1.0
    assert report.detection_precision == 1.0


def test_evaluate_mae_example():
    scenes = [
        Scene(np.full((96, 96, 3), 0.5, np.float32), [FaceAnnotation(BBox(10, 10, 40, 40), age, "male")])
        for age in (20, 30)
    ]
    manifest = manifest_from_scenes("two", scenes)

    def predict(idx, scene):
        return [make_estimate(scene.faces[0].box, 0.9, 25.0, "male")]

    report = evaluate(StubModel(manifest, predict), manifest, EvalConfig())
    assert report.mae == pytest.approx(5.0)


def test_evaluate_one_off_neighbor_group():
    scene = Scene(
        np.full((96, 96, 3), 0.5, np.float32),
        [FaceAnnotation(BBox(10, 10, 40, 40), 25, "male")],  # group 4
    )
    manifest = manifest_from_scenes("one", [scene])

    def predict(idx, scene):
        return [make_estimate(scene.faces[0].box, 0.9, 15.0, "male")]  # group 3

    report = evaluate(StubModel(manifest, predict), manifest, EvalConfig())
    assert report.group_accuracy == 0.0
    assert report.one_off_accuracy == 100.0
    assert report.one_off_accuracy >= report.group_accuracy


def test_evaluate_fallback_to_most_confident(tiny_manifest):
    def quiet(idx, scene):
        return [make_estimate(f.box, 0.05, f.age, f.gender) for f in scene.faces]

    report = evaluate(StubModel(tiny_manifest, quiet), tiny_manifest, EvalConfig())
    # every scene fell back to its (correct) best detection
    assert report.detection_recall == 1.0
    assert report.mae == 0.0


def test_evaluate_single_protocol_largest_face():
    scene = Scene(
        np.full((96, 96, 3), 0.5, np.float32),
        [FaceAnnotation(BBox(30, 30, 50, 50), 20, "male")],
    )
    manifest = manifest_from_scenes("single", [scene])

    def predict(idx, scene):
        return [
            make_estimate(BBox(5, 5, 90, 90), 0.9, 40.0, "male"),  # large, wrong age
            make_estimate(scene.faces[0].box, 0.8, 20.0, "male"),  # right box
        ]

    report = evaluate(StubModel(manifest, predict), manifest, EvalConfig(protocol="single"))
    assert report.mae == pytest.approx(20.0)  # largest face wins under the protocol
    multi = evaluate(StubModel(manifest, predict), manifest, EvalConfig(protocol="multi"))
    assert multi.mae == pytest.approx(0.0)


def test_evaluate_empty_manifest_errors():
    from crowdage.synth_data import DatasetManifest

    with pytest.raises(ValueError):
        evaluate(StubModel(manifest_from_scenes("x", [generate_scene(1, 1)]), lambda i, s: []),
                 DatasetManifest("empty", []), EvalConfig())


def test_recall_monotone_in_k():
    torch.manual_seed(0)
    model = MultiPersonAgeModel(preset_config("desk"))
    manifest = manifest_from_scenes(
        "m", [generate_scene(800 + i, 2, face_scale_range=(0.2, 0.3)) for i in range(4)]
    )
    recalls = [
        evaluate(model, manifest, EvalConfig(k=k, conf_threshold=0.2)).detection_recall
        for k in (1, 5, 20)
    ]
    assert recalls[0] <= recalls[1] <= recalls[2]


# ---------------------------------------------------------------------------
# training contracts
# ---------------------------------------------------------------------------

def test_frozen_mode_detector_untouched(tiny_manifest):
    torch.manual_seed(0)
    donor = MultiPersonAgeModel(preset_config("desk"))
    detector_state = copy.deepcopy(donor.detector.state_dict())

    cfg = TrainConfig(mode="frozen_detector", epochs=2, batch_size=4, seed=1, steps_per_epoch=2)
    result = train(cfg, [tiny_manifest], detector_state=detector_state)
    after = result.model.detector.state_dict()
    assert sorted(after) == sorted(detector_state)
    for name in detector_state:
        assert torch.equal(after[name], detector_state[name]), name


def test_end_to_end_age_loss_reaches_detector_through_connection():
    torch.manual_seed(0)
    model = MultiPersonAgeModel(preset_config("desk"))
    model.age_net.train()
    model.detector.train()
    scenes = [generate_scene(900, 1)]
    images = torch.from_numpy(np.stack([s.image for s in scenes]))
    pred = model(images, k=1)
    # force inclusion: supervise with the predicted box itself as ground truth
    gt_scene = Scene(
        scenes[0].image,
        [FaceAnnotation(pred.detections[0][0].box, 42, "female")],
    )
    sup = _supervision(pred, [gt_scene])
    l_age = masked_age_loss(sup, LossWeights())
    assert float(l_age.detach()) > 0.0
    l_age.backward()
    grad = model.detector.out_conv[0].weight.grad
    assert grad is not None and torch.count_nonzero(grad) > 0


def test_nonfinite_loss_aborts_with_diagnostic(tiny_manifest, monkeypatch):
    import crowdage.pipeline as pipeline_mod
    from crowdage.detector import DetectionLossTerms

    def bad_loss(pred, gt, weights):
        inf = torch.tensor(float("inf"), requires_grad=True)
        zero = torch.tensor(0.0)
        return DetectionLossTerms(inf, inf, zero, zero)

    monkeypatch.setattr(pipeline_mod, "detection_loss", bad_loss)
    cfg = TrainConfig(mode="end_to_end", epochs=1, batch_size=2, seed=3, steps_per_epoch=1)
    with pytest.raises(RuntimeError, match="seed 3"):
        train(cfg, [tiny_manifest])


def test_training_determinism(tiny_manifest):
    cfg = TrainConfig(
        mode="frozen_detector",
        epochs=2,
        batch_size=4,
        seed=5,
        steps_per_epoch=2,
        detector_epochs=2,
    )
    a = train(cfg, [tiny_manifest]).metrics
    b = train(cfg, [tiny_manifest]).metrics
    assert a == b


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_identical(tmp_path, tiny_manifest):
    torch.manual_seed(0)
    model = MultiPersonAgeModel(preset_config("desk"))
    cfg = TrainConfig(epochs=3)
    path = save_checkpoint(tmp_path / "m.ckpt", model, cfg, epoch=1)
    bundle = load_checkpoint(path)
    for (ka, va), (kb, vb) in zip(
        sorted(model.state_dict().items()), sorted(bundle.model.state_dict().items())
    ):
        assert ka == kb and torch.equal(va, vb)
    assert bundle.train_config == cfg
    assert bundle.epoch == 1

    r1 = evaluate(model, tiny_manifest, EvalConfig(k=5))
    r2 = evaluate(bundle.model, tiny_manifest, EvalConfig(k=5))
    assert r1.to_dict() == r2.to_dict()


def test_checkpoint_corrupted_file_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"this is not a checkpoint")
    with pytest.raises(ValueError, match="cannot read checkpoint"):
        load_checkpoint(bad)


def test_checkpoint_version_mismatch_errors(tmp_path):
    payload = {"version": 99, "model_config": {}, "model_state": {}}
    p = tmp_path / "v99.ckpt"
    torch.save(payload, p)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(p)


def test_resume_matches_schedule_position(tmp_path, tiny_manifest):
    cfg = TrainConfig(
        mode="frozen_detector",
        epochs=2,
        batch_size=4,
        seed=7,
        steps_per_epoch=1,
        detector_epochs=1,
        lr_milestones=(3,),
    )
    first = train(cfg, [tiny_manifest], out_dir=tmp_path)
    cfg_resumed = TrainConfig(
        mode="frozen_detector",
        epochs=5,
        batch_size=4,
        seed=7,
        steps_per_epoch=1,
        detector_epochs=1,
        lr_milestones=(3,),
    )
    resumed = train(cfg_resumed, [tiny_manifest], resume_from=tmp_path / "last.ckpt")
    epochs = [m["epoch"] for m in resumed.metrics]
    assert epochs == [2, 3, 4]
    by_epoch = {m["epoch"]: m["lr"] for m in resumed.metrics}
    assert by_epoch[2] == pytest.approx(1e-4)
    assert by_epoch[3] == pytest.approx(1e-5)  # milestone applied mid-resume


def test_train_writes_metrics_and_checkpoint(tmp_path, tiny_manifest):
    cfg = TrainConfig(
        mode="frozen_detector",
        epochs=2,
        batch_size=4,
        seed=2,
        steps_per_epoch=1,
        detector_epochs=1,
    )
    result = train(cfg, [tiny_manifest], out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert {"epoch", "lr", "l_det", "l_age", "l_gen", "l"} <= set(rec)
    assert result.checkpoint_path == tmp_path / "last.ckpt"
    assert result.checkpoint_path.exists()
