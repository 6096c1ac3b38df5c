"""Default augmentations and the tiling that builds pseudo-multi-person scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from .geometry import BBox, crop_and_resize
from .synth_data import DatasetManifest, FaceAnnotation, Scene


@dataclass(frozen=True)
class TilingConfig:
    allowed_tile_counts: tuple[int, ...] = (1, 4, 9)
    max_distinct_sources: int = 4
    detection_only_mix: float = 0.25

    def __post_init__(self):
        for n in self.allowed_tile_counts:
            if int(math.isqrt(n)) ** 2 != n:
                raise ValueError(f"tile count {n} is not a perfect square")
        if self.max_distinct_sources < 1:
            raise ValueError("max_distinct_sources must be >= 1")
        if not (0.0 <= self.detection_only_mix <= 1.0):
            raise ValueError("detection_only_mix must be a probability")


@dataclass(frozen=True)
class AugmentToggles:
    flip: bool = False
    scale: bool = False
    crop: bool = False
    rotation: bool = False
    color_jitter: bool = False
    blur: bool = False

    @classmethod
    def all_on(cls) -> "AugmentToggles":
        return cls(True, True, True, True, True, True)


def _resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    region = BBox(0.0, 0.0, float(w), float(h))
    return crop_and_resize(image, region, out_h=out_h, out_w=out_w)


def tile_scenes(
    sources: Sequence[Scene],
    n_tiles: int,
    canvas_side: int,
    rng: np.random.Generator,
    max_sources: int = 4,
) -> Scene:
    """Tile sources into a sqrt(n) x sqrt(n) grid of equal cells.

    Each cell gets a uniformly drawn source (with replacement, so sources
    repeat when n_tiles exceeds their number), stretched to the cell; every
    annotation is carried through the cell's scale-and-translate map with its
    labels intact.
    """
    grid = math.isqrt(n_tiles)
    if grid * grid != n_tiles:
        raise ValueError(f"n_tiles {n_tiles} is not a perfect square")
    if not (1 <= len(sources) <= max_sources):
        raise ValueError(f"need 1..{max_sources} sources, got {len(sources)}")
    if canvas_side % grid != 0:
        raise ValueError(f"canvas {canvas_side} not divisible into {grid} equal cells")
    cell = canvas_side // grid

    canvas = np.zeros((canvas_side, canvas_side, 3), dtype=np.float32)
    faces: list[FaceAnnotation] = []
    for row in range(grid):
        for col in range(grid):
            src = sources[int(rng.integers(0, len(sources)))]
            tile = _resize_image(src.image, cell, cell)
            canvas[row * cell : (row + 1) * cell, col * cell : (col + 1) * cell] = tile
            sx, sy = cell / src.width, cell / src.height
            for f in src.faces:
                box = f.box.scaled(sx, sy).shifted(col * cell, row * cell)
                faces.append(FaceAnnotation(box, f.age, f.gender))
    return Scene(canvas, faces, source_dataset="tiled")


def mix_detection_only(
    stream: Iterator[Scene],
    manifest: DatasetManifest,
    rng: np.random.Generator,
    probability: float = 0.25,
) -> Iterator[Scene]:
    """Substitute a seamless detection-only scene for a stream draw with probability p.

    Yielded detection-dataset faces never carry age or gender labels, so the
    boolean masks silence their age/gender losses.
    """
    if len(manifest) == 0:
        raise ValueError("detection-only manifest is empty")

    def mixed() -> Iterator[Scene]:
        while True:
            if rng.random() < probability:
                scene = manifest.load_scene(int(rng.integers(0, len(manifest))))
                faces = [f.without_labels() for f in scene.faces]
                yield Scene(scene.image, faces, scene.source_dataset)
            else:
                yield next(stream)

    return mixed()


def _transform_boxes(
    faces: Sequence[FaceAnnotation],
    fn,
    width: int,
    height: int,
) -> list[FaceAnnotation]:
    """Map boxes through fn, clip to the canvas, and drop ones fully outside."""
    out = []
    for f in faces:
        x1, y1, x2, y2 = fn(f.box)
        x1, x2 = max(0.0, min(x1, x2)), min(float(width), max(x1, x2))
        y1, y2 = max(0.0, min(y1, y2)), min(float(height), max(y1, y2))
        if x2 - x1 >= 1.0 and y2 - y1 >= 1.0:
            out.append(FaceAnnotation(BBox(x1, y1, x2, y2), f.age, f.gender))
    return out


def _flip_horizontal(scene: Scene) -> Scene:
    w = scene.width
    image = np.ascontiguousarray(scene.image[:, ::-1])
    faces = _transform_boxes(
        scene.faces, lambda b: (w - b.x2, b.y1, w - b.x1, b.y2), w, scene.height
    )
    return Scene(image, faces, scene.source_dataset)


def _scale_and_crop(scene: Scene, rng: np.random.Generator, random_origin: bool) -> Scene:
    h, w = scene.height, scene.width
    s = float(rng.uniform(0.8, 1.25))
    new_h, new_w = max(round(h * s), h // 2), max(round(w * s), w // 2)
    scaled = _resize_image(scene.image, new_h, new_w)
    sy, sx = new_h / h, new_w / w

    pad_y, pad_x = max(h - new_h, 0), max(w - new_w, 0)
    if pad_y or pad_x:
        scaled = np.pad(scaled, ((0, pad_y), (0, pad_x), (0, 0)), mode="edge")
    max_oy, max_ox = scaled.shape[0] - h, scaled.shape[1] - w
    if random_origin:
        oy = int(rng.integers(0, max_oy + 1))
        ox = int(rng.integers(0, max_ox + 1))
    else:
        oy, ox = max_oy // 2, max_ox // 2
    image = np.ascontiguousarray(scaled[oy : oy + h, ox : ox + w])
    faces = _transform_boxes(
        scene.faces,
        lambda b: (b.x1 * sx - ox, b.y1 * sy - oy, b.x2 * sx - ox, b.y2 * sy - oy),
        w,
        h,
    )
    return Scene(image, faces, scene.source_dataset)


def _random_crop(scene: Scene, rng: np.random.Generator) -> Scene:
    h, w = scene.height, scene.width
    frac = float(rng.uniform(0.8, 1.0))
    ch, cw = max(round(h * frac), 1), max(round(w * frac), 1)
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    window = scene.image[oy : oy + ch, ox : ox + cw]
    image = _resize_image(window, h, w)
    sy, sx = h / ch, w / cw
    faces = _transform_boxes(
        scene.faces,
        lambda b: (
            (b.x1 - ox) * sx,
            (b.y1 - oy) * sy,
            (b.x2 - ox) * sx,
            (b.y2 - oy) * sy,
        ),
        w,
        h,
    )
    return Scene(image, faces, scene.source_dataset)


def _rotate(scene: Scene, rng: np.random.Generator) -> Scene:
    h, w = scene.height, scene.width
    angle = float(rng.uniform(-10.0, 10.0))
    image = ndimage.rotate(
        scene.image, angle, reshape=False, order=1, mode="nearest"
    ).astype(np.float32)
    # positive angles move content counterclockwise on screen (y down), so
    # a point (dx, dy) relative to the center maps as below
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    def rotate_box(b: BBox):
        xs, ys = [], []
        for x, y in ((b.x1, b.y1), (b.x1, b.y2), (b.x2, b.y1), (b.x2, b.y2)):
            dx, dy = x - cx, y - cy
            xs.append(cx + cos_t * dx + sin_t * dy)
            ys.append(cy - sin_t * dx + cos_t * dy)
        return min(xs), min(ys), max(xs), max(ys)

    faces = _transform_boxes(scene.faces, rotate_box, w, h)
    return Scene(image, faces, scene.source_dataset)


def _color_jitter(scene: Scene, rng: np.random.Generator) -> Scene:
    gain = rng.uniform(0.9, 1.1, size=3).astype(np.float32)
    offset = rng.uniform(-0.05, 0.05, size=3).astype(np.float32)
    image = np.clip(scene.image * gain + offset, 0.0, 1.0)
    return Scene(image, list(scene.faces), scene.source_dataset)


def _blur(scene: Scene, rng: np.random.Generator) -> Scene:
    sigma = float(rng.uniform(0.3, 1.0))
    image = ndimage.gaussian_filter(scene.image, sigma=(sigma, sigma, 0.0)).astype(np.float32)
    return Scene(image, list(scene.faces), scene.source_dataset)


def default_augment(
    scene: Scene, rng: np.random.Generator, toggles: AugmentToggles
) -> Scene:
    """Apply the enabled default augmentations, keeping boxes consistent.

    Geometric transforms move the annotations with the pixels; faces pushed
    fully off the canvas are dropped. With every toggle off the scene passes
    through untouched.
    """
    out = scene
    if toggles.flip and rng.random() < 0.5:
        out = _flip_horizontal(out)
    if toggles.scale:
        out = _scale_and_crop(out, rng, random_origin=toggles.crop)
    elif toggles.crop:
        out = _random_crop(out, rng)
    if toggles.rotation:
        out = _rotate(out, rng)
    if toggles.color_jitter:
        out = _color_jitter(out, rng)
    if toggles.blur:
        out = _blur(out, rng)
    return out
