"""Deterministic synthetic scenes for weakly supervised detection experiments.

Every object is a large low-contrast body carrying a small high-contrast
part. Part appearance is tightly clustered per class while body appearance
jitters into neighboring classes' ranges, so the most reliable classification
evidence concentrates in the part. Ground-truth boxes and masks describe the
full body and are recorded for evaluation only; training sees image-level
labels alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BBox, box_iou


@dataclass
class SceneSpec:
    """Generator parameters; a sample is a pure function of (seed, index)."""

    image_size: int = 32
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 2
    body_size_range: tuple[int, int] = (9, 14)
    part_side_fraction: tuple[float, float] = (0.30, 0.42)
    min_part_area_ratio: float = 0.04
    body_intensity_base: float = 0.30
    body_intensity_step: float = 0.10
    body_jitter: float = 0.06
    body_noise: float = 0.02
    part_intensity_base: float = 0.72
    part_intensity_step: float = 0.11
    part_jitter: float = 0.01
    background_level: float = 0.10
    background_noise: float = 0.04
    overlap_max_iou: float = 0.0
    placement_retries: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if not 0 < self.min_part_area_ratio <= 0.5:
            raise ValueError("min_part_area_ratio must be in (0, 0.5]")
        if self.body_size_range[1] > self.image_size:
            raise ValueError("bodies must fit inside the image")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("bad object count range")


@dataclass
class ObjectRecord:
    """One placed object: class, tight body box, body and part pixel masks."""

    class_id: int
    box: BBox
    body_mask: np.ndarray
    part_mask: np.ndarray


@dataclass
class SyntheticSample:
    """Rendered scene with evaluation-only ground truth."""

    image: np.ndarray  # (H, W) float64 in [0, 1]
    y: np.ndarray  # (N,) 0/1 image-level labels
    objects: list[ObjectRecord]

    @property
    def boxes(self) -> list[tuple[int, BBox]]:
        return [(o.class_id, o.box) for o in self.objects]

    def labelmap(self) -> np.ndarray:
        """(H, W) int map: 0 background, k+1 for class-k body pixels."""
        out = np.zeros(self.image.shape, dtype=np.int64)
        for o in self.objects:
            out[o.body_mask] = o.class_id + 1
        return out

    def class_mask(self, k: int) -> np.ndarray:
        return self.labelmap() == k + 1


def _draw_body(rng, spec: SceneSpec) -> tuple[np.ndarray, BBox]:
    size = spec.image_size
    bw = int(rng.integers(spec.body_size_range[0], spec.body_size_range[1] + 1))
    bh = int(rng.integers(spec.body_size_range[0], spec.body_size_range[1] + 1))
    x0 = int(rng.integers(0, size - bw + 1))
    y0 = int(rng.integers(0, size - bh + 1))
    shape = rng.integers(0, 2)  # 0: rectangle, 1: ellipse
    mask = np.zeros((size, size), dtype=bool)
    if shape == 0:
        mask[y0 : y0 + bh, x0 : x0 + bw] = True
    else:
        cy, cx = y0 + (bh - 1) / 2.0, x0 + (bw - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        mask = ((xx - cx) / (bw / 2.0)) ** 2 + ((yy - cy) / (bh / 2.0)) ** 2 <= 1.0
    ys, xs = np.nonzero(mask)
    box = BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return mask, box


def _draw_part(rng, spec: SceneSpec, body_mask: np.ndarray, box: BBox) -> np.ndarray | None:
    frac = rng.uniform(*spec.part_side_fraction)
    side = max(3, int(round(frac * min(box.width, box.height))))
    if side + 2 > min(box.width, box.height):
        side = max(3, min(box.width, box.height) - 2)
    px = int(rng.integers(box.x0 + 1, box.x1 - side))
    py = int(rng.integers(box.y0 + 1, box.y1 - side))
    part = np.zeros_like(body_mask)
    part[py : py + side, px : px + side] = True
    part &= body_mask
    ratio = part.sum() / body_mask.sum()
    if ratio < spec.min_part_area_ratio or ratio > 0.5:
        return None
    return part


def generate_sample(spec: SceneSpec, index: int) -> SyntheticSample:
    """Render scene `index`; identical (seed, index) gives identical bytes."""
    if index < 0:
        raise ValueError("index must be nonnegative")
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    image = spec.background_level + rng.uniform(
        -spec.background_noise, spec.background_noise, (size, size)
    )
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects: list[ObjectRecord] = []
    for _ in range(n_objects):
        placed = False
        for _ in range(spec.placement_retries):
            class_id = int(rng.integers(0, spec.num_classes))
            body_mask, box = _draw_body(rng, spec)
            if any(box_iou(box, o.box) > spec.overlap_max_iou for o in objects):
                continue
            part_mask = _draw_part(rng, spec, body_mask, box)
            if part_mask is None:
                continue
            body_int = (
                spec.body_intensity_base
                + spec.body_intensity_step * class_id
                + rng.uniform(-spec.body_jitter, spec.body_jitter)
            )
            part_int = (
                spec.part_intensity_base
                + spec.part_intensity_step * class_id
                + rng.uniform(-spec.part_jitter, spec.part_jitter)
            )
            image[body_mask] = body_int + rng.uniform(
                -spec.body_noise, spec.body_noise, int(body_mask.sum())
            )
            image[part_mask] = part_int
            objects.append(ObjectRecord(class_id, box, body_mask, part_mask))
            placed = True
            break
        if not placed:
            raise RuntimeError(f"could not place object {len(objects)} in sample {index}")
    y = np.zeros(spec.num_classes, dtype=np.int64)
    for o in objects:
        y[o.class_id] = 1
    return SyntheticSample(image=np.clip(image, 0.0, 1.0), y=y, objects=objects)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid the on-disk PNG carries."""
    return np.round(image * 255.0) / 255.0


@dataclass
class Sample:
    """Runtime view of one dataset entry (image already 8-bit quantized)."""

    index: int
    image: np.ndarray  # (H, W) float64, multiples of 1/255
    y: np.ndarray
    boxes: list[tuple[int, BBox]]
    labelmap: np.ndarray

    def class_mask(self, k: int) -> np.ndarray:
        return self.labelmap == k + 1


def materialize(spec: SceneSpec, index: int) -> Sample:
    """Generate and quantize one sample without touching the filesystem."""
    raw = generate_sample(spec, index)
    return Sample(
        index=index,
        image=quantize(raw.image),
        y=raw.y,
        boxes=raw.boxes,
        labelmap=raw.labelmap(),
    )


def generate_split(spec: SceneSpec, count: int, train_count: int | None = None) -> dict:
    """Manifest for samples 0..count-1 with disjoint train/test index ranges."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if train_count is None:
        train_count = max(1, (2 * count) // 3)
    if not 0 < train_count <= count:
        raise ValueError(f"train_count {train_count} out of range for count {count}")
    images = []
    for index in range(count):
        sample = generate_sample(spec, index)
        images.append(
            {
                "index": index,
                "path": f"images/{index:05d}.png",
                "mask_path": f"masks/{index:05d}.png",
                "split": "train" if index < train_count else "test",
                "labels": [int(v) for v in sample.y],
                "boxes": [
                    {"class": c, "x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1}
                    for c, b in sample.boxes
                ],
            }
        )
    return {
        "version": 1,
        "seed": spec.seed,
        "spec": asdict(spec),
        "count": count,
        "train_count": train_count,
        "images": images,
    }


def write_dataset(spec: SceneSpec, count: int, out_dir: str | Path, train_count=None) -> str:
    """Write PNGs plus manifest.json; returns the dataset content digest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    manifest = generate_split(spec, count, train_count)
    for entry in manifest["images"]:
        raw = generate_sample(spec, entry["index"])
        img8 = np.round(raw.image * 255.0).astype(np.uint8)
        Image.fromarray(img8, mode="L").save(out / entry["path"])
        lm = raw.labelmap().astype(np.uint8)
        Image.fromarray(lm, mode="L").save(out / entry["mask_path"])
    manifest_text = json.dumps(manifest, indent=1, sort_keys=True)
    (out / "manifest.json").write_text(manifest_text)
    return dataset_digest(out)


def dataset_digest(out_dir: str | Path) -> str:
    """Order-stable sha256 over the manifest and every image byte."""
    out = Path(out_dir)
    h = hashlib.sha256()
    h.update((out / "manifest.json").read_bytes())
    manifest = json.loads((out / "manifest.json").read_text())
    for entry in manifest["images"]:
        h.update((out / entry["path"]).read_bytes())
        h.update((out / entry["mask_path"]).read_bytes())
    return h.hexdigest()


def load_samples(out_dir: str | Path, split: str) -> list[Sample]:
    """Read one split back from disk."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    samples = []
    for entry in manifest["images"]:
        if entry["split"] != split:
            continue
        img = np.asarray(Image.open(out / entry["path"]), dtype=np.float64) / 255.0
        lm = np.asarray(Image.open(out / entry["mask_path"]), dtype=np.int64)
        boxes = [
            (b["class"], BBox(b["x0"], b["y0"], b["x1"], b["y1"])) for b in entry["boxes"]
        ]
        samples.append(
            Sample(
                index=entry["index"],
                image=img,
                y=np.array(entry["labels"], dtype=np.int64),
                boxes=boxes,
                labelmap=lm,
            )
        )
    return samples


def split_samples(spec: SceneSpec, count: int, train_count: int) -> tuple[list[Sample], list[Sample]]:
    """In-memory train/test splits mirroring write_dataset's layout."""
    train = [materialize(spec, i) for i in range(train_count)]
    test = [materialize(spec, i) for i in range(train_count, count)]
    return train, test
