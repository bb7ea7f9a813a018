"""Deterministic synthetic shapes-with-distractors dataset and the episodic sampler.

Every image holds one colored class shape over a dim background, plus a
few neutral-gray distractors (bars, dots, crosses) drawn from a family
disjoint from the class colors. The class shape's tight pixel box is the
ground-truth annotation. All randomness is driven by generators derived
from (seed, class, sample index), so a (spec, seed) pair fully determines
every byte on disk.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .episodic import Episode
from .localization import BoundingBox
from .tns_io import read_tns, write_tns

SHAPES = ("circle", "square", "triangle", "plus", "diamond")

_DEFAULT_COLORS = (
    (0.85, 0.10, 0.10),   # red
    (0.10, 0.80, 0.15),   # green
    (0.15, 0.25, 0.90),   # blue
)

# 12 classes: 4 shapes x 3 colors, shape-major order
_DEFAULT_CLASSES = tuple(
    (shape, color) for shape in SHAPES[:4] for color in _DEFAULT_COLORS)

# every shape appears in the train split; test pairs differ in color or shape
_DEFAULT_SPLITS = {
    "train": (0, 3, 5, 7, 11),
    "val": (8, 10),
    "test": (1, 2, 4, 6, 9),
}


class InsufficientData(ValueError):
    """Split lacks the classes or per-class items an episode needs."""


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 32
    classes: tuple = _DEFAULT_CLASSES
    per_class_count: int = 200
    distractors_min: int = 1
    distractors_max: int = 3
    background: str = "solid-noise"   # or "gradient"
    splits: tuple = tuple(sorted(_DEFAULT_SPLITS.items()))

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if self.per_class_count < 1:
            raise ValueError("per_class_count must be positive")
        if not 0 <= self.distractors_min <= self.distractors_max:
            raise ValueError(
                f"bad distractor range [{self.distractors_min}, {self.distractors_max}]")
        if self.background not in ("solid-noise", "gradient"):
            raise ValueError(f"unknown background {self.background!r}")
        seen = []
        for shape, color in self.classes:
            if shape not in SHAPES:
                raise ValueError(f"unknown shape {shape!r}")
            color = tuple(float(v) for v in color)
            if max(color) - min(color) < 0.2:
                raise ValueError(
                    f"class color {color} too gray; it would collide with distractors")
            seen.append((shape, color))
        covered = sorted(c for _, idxs in self.splits for c in idxs)
        if covered != list(range(len(self.classes))):
            raise ValueError("splits must disjointly cover all class indices")

    @property
    def split_map(self) -> dict:
        return {name: tuple(idxs) for name, idxs in self.splits}

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "classes": [[shape, list(color)] for shape, color in self.classes],
            "per_class_count": self.per_class_count,
            "distractors_min": self.distractors_min,
            "distractors_max": self.distractors_max,
            "background": self.background,
            "splits": {name: list(idxs) for name, idxs in self.splits},
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetSpec":
        return DatasetSpec(
            image_size=int(d["image_size"]),
            classes=tuple((shape, tuple(color)) for shape, color in d["classes"]),
            per_class_count=int(d["per_class_count"]),
            distractors_min=int(d["distractors_min"]),
            distractors_max=int(d["distractors_max"]),
            background=d["background"],
            splits=tuple(sorted((name, tuple(idxs)) for name, idxs in d["splits"].items())),
        )


@dataclass
class Sample:
    image: np.ndarray          # (S, S, 3) float64 in [0, 1]
    class_index: int
    gt_box: BoundingBox


class SplitData(NamedTuple):
    name: str
    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray


def _pixel_grid(size):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = _pixel_grid(size)
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if shape == "triangle":
        # upward triangle: apex at cy - r, base at cy + r spanning [cx - r, cx + r]
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "plus":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(f"unknown shape {shape!r}")


def _draw_background(spec: DatasetSpec, rng) -> np.ndarray:
    s = spec.image_size
    if spec.background == "solid-noise":
        base = rng.uniform(0.04, 0.12)
        lum = base + rng.uniform(0.0, 0.08, size=(s, s))
    else:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        yy, xx = _pixel_grid(s)
        proj = (yy * np.sin(theta) + xx * np.cos(theta)) / (s * np.sqrt(2.0))
        lum = 0.05 + 0.13 * (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    return np.repeat(lum[:, :, None], 3, axis=2)


def _draw_distractor(img: np.ndarray, rng) -> None:
    """One neutral-gray bar, dot, or cross; grays never match a class color."""
    s = img.shape[0]
    kind = rng.integers(0, 3)
    gray = rng.uniform(0.35, 0.65)
    if kind == 0:    # bar, 2 pixels thick
        length = int(rng.integers(4, 11))
        y = int(rng.integers(0, s - 2))
        x = int(rng.integers(0, s - 2))
        if rng.integers(0, 2):
            img[y:y + 2, x:min(x + length, s)] = gray
        else:
            img[y:min(y + length, s), x:x + 2] = gray
    elif kind == 1:  # dot
        r = float(rng.integers(1, 3))
        cy = rng.uniform(r, s - 1 - r)
        cx = rng.uniform(r, s - 1 - r)
        img[_shape_mask("circle", s, cy, cx, r)] = gray
    else:            # cross
        r = float(rng.integers(2, 5))
        cy = rng.uniform(r, s - 1 - r)
        cx = rng.uniform(r, s - 1 - r)
        img[_shape_mask("plus", s, cy, cx, r)] = gray


def render_sample(spec: DatasetSpec, class_index: int, rng) -> Sample:
    """Render one sample; fully determined by the generator's state."""
    if not 0 <= class_index < len(spec.classes):
        raise ValueError(f"class index {class_index} out of range")
    s = spec.image_size
    img = _draw_background(spec, rng)

    shape, color = spec.classes[class_index]
    scale = rng.uniform(0.2, 0.45) * s
    r = scale / 2.0
    cy = rng.uniform(r + 1.0, s - 2.0 - r)
    cx = rng.uniform(r + 1.0, s - 2.0 - r)
    mask = _shape_mask(shape, s, cy, cx, r)

    n_distractors = int(rng.integers(spec.distractors_min, spec.distractors_max + 1))
    for _ in range(n_distractors):
        _draw_distractor(img, rng)

    img[mask] = np.asarray(color, dtype=np.float64)
    ys, xs = np.nonzero(mask)
    box = BoundingBox(int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max()))
    return Sample(img, class_index, box)


def _sample_rng(seed: int, class_index: int, item: int):
    return np.random.default_rng((seed, class_index, item))


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_dataset(spec: DatasetSpec, seed: int, out_dir) -> dict:
    """Render all splits to TNS1 files plus a JSON manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "protoloc-dataset-v1",
        "seed": int(seed),
        "spec": spec.to_dict(),
        "splits": {},
    }
    for name, class_indices in spec.splits:
        images, labels, boxes = [], [], []
        for c in class_indices:
            for i in range(spec.per_class_count):
                sample = render_sample(spec, c, _sample_rng(seed, c, i))
                images.append(sample.image)
                labels.append(c)
                boxes.append(tuple(sample.gt_box))
        split_dir = out / name
        split_dir.mkdir(exist_ok=True)
        write_tns(split_dir / "images.tns", np.stack(images))
        write_tns(split_dir / "labels.tns", np.asarray(labels, dtype=np.uint32))
        write_tns(split_dir / "boxes.tns", np.asarray(boxes, dtype=np.uint32))
        manifest["splits"][name] = {
            "count": len(labels),
            "classes": list(class_indices),
            "digests": {
                "images.tns": _digest(split_dir / "images.tns"),
                "labels.tns": _digest(split_dir / "labels.tns"),
                "boxes.tns": _digest(split_dir / "boxes.tns"),
            },
        }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_dataset(data_dir):
    """Load a generated dataset; returns (manifest, {split name: SplitData})."""
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    splits = {}
    for name in manifest["splits"]:
        split_dir = data_dir / name
        splits[name] = SplitData(
            name=name,
            images=read_tns(split_dir / "images.tns"),
            labels=read_tns(split_dir / "labels.tns").astype(np.int64),
            boxes=read_tns(split_dir / "boxes.tns").astype(np.int64),
        )
    return manifest, splits


def sample_episode(split: SplitData, n_way: int, k_shot: int,
                   queries_per_class: int, task_rng) -> Episode:
    """Draw an N-way K-shot episode without replacement, relabeling classes
    0..N-1 in sampled order. Within a class, items are stored in ascending
    dataset-index order, which keeps downstream reductions canonical."""
    classes = np.unique(split.labels)
    if classes.size < n_way:
        raise InsufficientData(
            f"split {split.name!r} has {classes.size} classes, need {n_way}")
    chosen = task_rng.choice(classes, size=n_way, replace=False)
    need = k_shot + queries_per_class
    sup_idx, qry_idx = [], []
    for c in chosen:
        pool = np.nonzero(split.labels == c)[0]
        if pool.size < need:
            raise InsufficientData(
                f"class {c} has {pool.size} items, need {need}")
        pick = task_rng.choice(pool, size=need, replace=False)
        sup_idx.append(np.sort(pick[:k_shot]))
        qry_idx.append(np.sort(pick[k_shot:]))
    sup = np.concatenate(sup_idx)
    qry = np.concatenate(qry_idx)
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        support_images=split.images[sup],
        support_labels=np.repeat(np.arange(n_way), k_shot),
        support_boxes=split.boxes[sup],
        query_images=split.images[qry],
        query_labels=np.repeat(np.arange(n_way), queries_per_class),
        query_boxes=split.boxes[qry],
        split=split.name,
    )
