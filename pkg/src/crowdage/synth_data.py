"""Deterministic synthetic scenes standing in for the real face datasets.

Faces are procedural disks on a neutral gray textured background. Age is
encoded in appearance, not size: the disk's flat core luminance rises
linearly with age and its outer annulus carries rings whose frequency also
grows with age. Gender adds an opposite-sign tint to the red and blue
channels, which doubles as the segmentation cue for the render-extent
oracle (the background stays exactly gray). The annotation schema, cleaning
rule, and weighted multi-dataset sampling mirror what a real corpus would
need.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import BBox, Detection

GENDERS = ("female", "male")

MIN_SCENE_SIDE = 64

# face rendering constants; decode_age_cue inverts CORE_BASE/CORE_GAIN
CORE_BASE = 0.30
CORE_GAIN = 0.42
RING_AMPLITUDE = 0.10
RING_FREQ_BASE = 1.5
RING_FREQ_GAIN = 2.5
CORE_RADIUS_FRAC = 0.35
GENDER_TINT = 0.10


class SceneGenerationError(RuntimeError):
    """Raised when faces can't be placed without overlap."""


@dataclass(frozen=True)
class FaceAnnotation:
    """A ground-truth face; age and gender labels are optional."""

    box: BBox
    age: Optional[int] = None
    gender: Optional[str] = None

    def __post_init__(self):
        if self.age is not None and not (0 <= int(self.age) <= 100):
            raise ValueError(f"age {self.age} outside 0..100")
        if self.gender is not None and self.gender not in GENDERS:
            raise ValueError(f"gender must be one of {GENDERS}, got {self.gender!r}")

    @property
    def has_age(self) -> bool:
        return self.age is not None

    @property
    def has_gender(self) -> bool:
        return self.gender is not None

    @property
    def gender_index(self) -> Optional[int]:
        return None if self.gender is None else GENDERS.index(self.gender)

    def without_labels(self) -> "FaceAnnotation":
        return FaceAnnotation(self.box)


@dataclass
class Scene:
    """An annotated image: (H, W, 3) float32 pixels in [0, 1] plus faces."""

    image: np.ndarray
    faces: list[FaceAnnotation]
    source_dataset: str = "synthetic"

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if h < MIN_SCENE_SIDE or w < MIN_SCENE_SIDE:
            raise ValueError(f"scene must be at least {MIN_SCENE_SIDE} px per side, got {h}x{w}")
        for f in self.faces:
            if f.box.x2 <= 0 or f.box.y2 <= 0 or f.box.x1 >= w or f.box.y1 >= h:
                raise ValueError(f"face box {f.box} does not intersect the {h}x{w} image")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class SceneRecord:
    """One manifest entry: annotations plus either an image path or a cached scene."""

    width: int
    height: int
    faces: list[FaceAnnotation]
    image_path: Optional[str] = None
    scene: Optional[Scene] = None


@dataclass
class DatasetManifest:
    """A named collection of scene records with a sampling weight.

    The weight defaults to the scene count, so multi-dataset sampling draws
    proportionally to dataset size.
    """

    name: str
    records: list[SceneRecord]
    weight: Optional[float] = None
    root: Optional[Path] = None

    def __post_init__(self):
        if self.weight is None:
            self.weight = float(len(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def load_scene(self, index: int) -> Scene:
        rec = self.records[index]
        if rec.scene is not None:
            return rec.scene
        if rec.image_path is None:
            raise ValueError(f"record {index} of {self.name!r} has neither scene nor image_path")
        path = Path(rec.image_path)
        if self.root is not None and not path.is_absolute():
            path = self.root / path
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        return Scene(arr, list(rec.faces), source_dataset=self.name)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _render_background(rng: np.random.Generator, side: int) -> np.ndarray:
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    fx, fy = rng.uniform(1.0, 3.0, size=2)
    px, py = rng.uniform(0.0, 2 * np.pi, size=2)
    wave = np.sin(2 * np.pi * fx * xs / side + px) * np.sin(2 * np.pi * fy * ys / side + py)
    gray = 0.5 + 0.05 * wave
    return np.repeat(gray[:, :, None], 3, axis=2).astype(np.float32)


def _render_face(
    image: np.ndarray, cx: float, cy: float, radius: float, age: int, gender: str
) -> BBox:
    """Paint one face disk in place and return its tight pixel extent."""
    h, w = image.shape[:2]
    x_lo, x_hi = max(int(cx - radius) - 1, 0), min(int(cx + radius) + 2, w)
    y_lo, y_hi = max(int(cy - radius) - 1, 0), min(int(cy + radius) + 2, h)
    ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi].astype(np.float64)
    dist = np.hypot(xs - cx, ys - cy)
    mask = dist <= radius

    base = CORE_BASE + CORE_GAIN * age / 100.0
    freq = RING_FREQ_BASE + RING_FREQ_GAIN * age / 100.0
    rnorm = dist / radius
    rings = RING_AMPLITUDE * np.cos(2 * np.pi * freq * rnorm)
    value = base + np.where(rnorm < CORE_RADIUS_FRAC, 0.0, rings)
    tint = GENDER_TINT if gender == "female" else -GENDER_TINT

    window = image[y_lo:y_hi, x_lo:x_hi]
    window[mask, 0] = np.clip(value + tint, 0.0, 1.0)[mask]
    window[mask, 1] = np.clip(value, 0.0, 1.0)[mask]
    window[mask, 2] = np.clip(value - tint, 0.0, 1.0)[mask]

    face_ys, face_xs = np.nonzero(mask)
    return BBox(
        float(x_lo + face_xs.min()),
        float(y_lo + face_ys.min()),
        float(x_lo + face_xs.max() + 1),
        float(y_lo + face_ys.max() + 1),
    )


def generate_scene(
    seed: int,
    n_faces: int,
    image_side: int = 96,
    face_scale_range: tuple[float, float] = (0.35, 0.55),
    max_tries: int = 200,
) -> Scene:
    """Render a deterministic scene with n_faces non-overlapping faces.

    The same seed reproduces the scene bit-for-bit. Annotated boxes are the
    exact extents of the painted masks. Raises SceneGenerationError when the
    requested faces cannot be placed disjointly within the retry budget.
    """
    if n_faces < 0:
        raise ValueError("n_faces must be >= 0")
    rng = np.random.default_rng(seed)
    image = _render_background(rng, image_side)

    placed: list[tuple[float, float, float]] = []
    faces: list[FaceAnnotation] = []
    for _ in range(n_faces):
        for attempt in range(max_tries + 1):
            if attempt == max_tries:
                raise SceneGenerationError(
                    f"could not place {n_faces} faces of scale {face_scale_range} "
                    f"on a {image_side} px canvas after {max_tries} tries"
                )
            radius = 0.5 * rng.uniform(*face_scale_range) * image_side
            cx = rng.uniform(radius + 1, image_side - radius - 1)
            cy = rng.uniform(radius + 1, image_side - radius - 1)
            if all(
                np.hypot(cx - ox, cy - oy) >= radius + orad + 2 for ox, oy, orad in placed
            ):
                placed.append((cx, cy, radius))
                break
        age = int(rng.integers(0, 101))
        gender = GENDERS[int(rng.integers(0, 2))]
        box = _render_face(image, cx, cy, radius, age, gender)
        faces.append(FaceAnnotation(box, age, gender))
    return Scene(image, faces)


def decode_age_cue(image: np.ndarray, box: BBox) -> float:
    """Oracle decoder: mean green-channel value of the face's flat core.

    The renderer makes this value a strictly increasing function of the age
    label, so recovering it proves the learning task is solvable.
    """
    cx, cy = box.center
    radius = 0.5 * min(box.width, box.height)
    sample_r = max(1.5, 0.2 * radius)
    x_lo, x_hi = int(cx - sample_r), int(cx + sample_r) + 1
    y_lo, y_hi = int(cy - sample_r), int(cy + sample_r) + 1
    ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    inside = np.hypot(xs - cx, ys - cy) <= sample_r
    return float(image[y_lo:y_hi, x_lo:x_hi, 1][inside].mean())


def decode_gender_cue(image: np.ndarray, box: BBox) -> str:
    """Oracle decoder: sign of the red-blue tint inside the face core."""
    cx, cy = box.center
    radius = 0.5 * min(box.width, box.height)
    sample_r = max(1.5, 0.2 * radius)
    x_lo, x_hi = int(cx - sample_r), int(cx + sample_r) + 1
    y_lo, y_hi = int(cy - sample_r), int(cy + sample_r) + 1
    window = image[y_lo:y_hi, x_lo:x_hi]
    diff = float((window[:, :, 0] - window[:, :, 2]).mean())
    return "female" if diff > 0 else "male"


# ---------------------------------------------------------------------------
# Manifest construction and serialization
# ---------------------------------------------------------------------------

def manifest_from_scenes(
    name: str, scenes: Sequence[Scene], weight: Optional[float] = None
) -> DatasetManifest:
    records = [
        SceneRecord(s.width, s.height, list(s.faces), scene=s) for s in scenes
    ]
    return DatasetManifest(name, records, weight)


def strip_labels(manifest: DatasetManifest) -> DatasetManifest:
    """Copy of a manifest with every age/gender label removed (box-only)."""
    records = []
    for rec in manifest.records:
        faces = [f.without_labels() for f in rec.faces]
        scene = None
        if rec.scene is not None:
            scene = Scene(rec.scene.image, faces, rec.scene.source_dataset)
        records.append(SceneRecord(rec.width, rec.height, faces, rec.image_path, scene))
    return DatasetManifest(manifest.name, records, manifest.weight, manifest.root)


def _face_to_json(face: FaceAnnotation) -> dict:
    entry = {
        "x1": face.box.x1,
        "y1": face.box.y1,
        "x2": face.box.x2,
        "y2": face.box.y2,
    }
    if face.age is not None:
        entry["age"] = int(face.age)
    if face.gender is not None:
        entry["gender"] = face.gender
    return entry


def _face_from_json(entry: dict) -> FaceAnnotation:
    return FaceAnnotation(
        BBox(entry["x1"], entry["y1"], entry["x2"], entry["y2"]),
        entry.get("age"),
        entry.get("gender"),
    )


def save_manifest(manifest: DatasetManifest, out_dir: Path) -> Path:
    """Write images (lossless PNG), annotations.jsonl, and manifest.json."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    ann_path = out_dir / "annotations.jsonl"
    with ann_path.open("w") as fh:
        for i, rec in enumerate(manifest.records):
            image_path = rec.image_path
            if image_path is None:
                if rec.scene is None:
                    raise ValueError(f"record {i} has no scene to save")
                image_path = f"images/{manifest.name}_{i:05d}.png"
                arr = np.clip(np.rint(rec.scene.image * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(arr).save(out_dir / image_path)
            fh.write(
                json.dumps(
                    {
                        "image_path": image_path,
                        "width": rec.width,
                        "height": rec.height,
                        "faces": [_face_to_json(f) for f in rec.faces],
                    }
                )
                + "\n"
            )

    meta_path = out_dir / "manifest.json"
    meta_path.write_text(
        json.dumps(
            {
                "name": manifest.name,
                "count": len(manifest.records),
                "weight": manifest.weight,
                "annotations": "annotations.jsonl",
            },
            indent=2,
        )
        + "\n"
    )
    return meta_path


def load_manifest(path: Path) -> DatasetManifest:
    """Load a manifest from its directory or manifest.json path."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    meta = json.loads(path.read_text())
    root = path.parent
    records = []
    with (root / meta["annotations"]).open() as fh:
        for line in fh:
            entry = json.loads(line)
            records.append(
                SceneRecord(
                    entry["width"],
                    entry["height"],
                    [_face_from_json(f) for f in entry["faces"]],
                    image_path=entry["image_path"],
                )
            )
    if len(records) != meta["count"]:
        raise ValueError(
            f"manifest {meta['name']!r} lists {meta['count']} scenes but has {len(records)} records"
        )
    return DatasetManifest(meta["name"], records, meta.get("weight"), root=root)


# ---------------------------------------------------------------------------
# Cleaning and sampling
# ---------------------------------------------------------------------------

def clean_single_face(
    manifest: DatasetManifest,
    detect: Callable[[np.ndarray], Sequence[Detection]],
    conf_th: float = 0.2,
) -> DatasetManifest:
    """Keep only scenes where the detector finds exactly one face.

    The surviving record's face box becomes the detected box (the detector is
    the box annotator); labels transfer from the best-overlapping original
    face. Scenes with zero or multiple detections above conf_th are dropped.
    """
    from .geometry import iou as box_iou

    survivors = []
    for i in range(len(manifest.records)):
        scene = manifest.load_scene(i)
        confident = [d for d in detect(scene.image) if d.confidence > conf_th]
        if len(confident) != 1:
            continue
        det = confident[0]
        rec = manifest.records[i]
        if rec.faces:
            best = max(rec.faces, key=lambda f: box_iou(det.box, f.box))
            face = FaceAnnotation(det.box, best.age, best.gender)
        else:
            face = FaceAnnotation(det.box)
        survivors.append(
            SceneRecord(
                rec.width,
                rec.height,
                [face],
                rec.image_path,
                Scene(scene.image, [face], scene.source_dataset) if rec.scene is not None else None,
            )
        )
    return DatasetManifest(manifest.name, survivors, weight=None, root=manifest.root)


def weighted_sampler(
    manifests: Sequence[DatasetManifest], seed: int
) -> Iterator[Scene]:
    """Infinite scene stream: pick a dataset by weight, then a uniform scene."""
    if not manifests:
        raise ValueError("need at least one manifest")
    for m in manifests:
        if len(m) == 0:
            raise ValueError(f"manifest {m.name!r} is empty")
    weights = np.array([m.weight for m in manifests], dtype=np.float64)
    probs = weights / weights.sum()

    def stream() -> Iterator[Scene]:
        rng = np.random.default_rng(seed)
        while True:
            d = int(rng.choice(len(manifests), p=probs))
            i = int(rng.integers(0, len(manifests[d])))
            yield manifests[d].load_scene(i)

    return stream()
