"""Seeded synthetic property-scene generator.

Scenes are noisy textured backgrounds with 1..N axis-aligned class-colored
rectangles. Class frequencies follow a Zipf law so head classes dominate;
tail classes are also rendered at reduced contrast ("subtle"), and the
first six palette entries form three near-color pairs so class confusion
is a real failure mode. Everything is reproducible bit-for-bit from the
64-bit seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (ClassSpec, Dataset, GroundTruthBox, Sample,
                   save_class_config, severity_ramp)
from .imageio import write_ppm
from .rng import SplitMix64

# Three confusable pairs up front (benchmarks use 6 classes), spread hues after.
PALETTE = [
    (0.82, 0.18, 0.16), (0.86, 0.40, 0.14),  # red / red-orange
    (0.16, 0.42, 0.78), (0.16, 0.60, 0.66),  # blue / teal
    (0.42, 0.62, 0.20), (0.58, 0.64, 0.30),  # olive / yellow-olive
    (0.55, 0.20, 0.65), (0.90, 0.75, 0.20), (0.20, 0.20, 0.22),
    (0.88, 0.88, 0.85), (0.60, 0.40, 0.22), (0.30, 0.75, 0.30),
    (0.80, 0.45, 0.60), (0.25, 0.28, 0.55), (0.70, 0.70, 0.45),
    (0.45, 0.16, 0.25), (0.13, 0.35, 0.30),
]


@dataclass
class SynthConfig:
    image_size: int = 96
    num_classes: int = 6
    zipf_skew: float = 1.2
    objects_min: int = 1
    objects_max: int = 4
    subtle_contrast: float = 0.45
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ValueError("objects-per-image range must be >= 1")
        if self.num_classes < 1:
            raise ValueError("need at least one class")


def zipf_pmf(num_classes: int, skew: float) -> np.ndarray:
    """p_k proportional to 1/(k+1)^skew."""
    w = 1.0 / np.power(np.arange(1, num_classes + 1, dtype=np.float64), skew)
    return w / w.sum()


def subtle_ids(num_classes: int) -> set[int]:
    """Tail third of the id range renders at low contrast."""
    return set(range(math.ceil(2 * num_classes / 3), num_classes))


def synth_classes(num_classes: int) -> list[ClassSpec]:
    ramp = severity_ramp(num_classes)
    return [ClassSpec(k, f"class_{k:02d}", ramp[k]) for k in range(num_classes)]


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def generate_synthetic(cfg: SynthConfig, count: int,
                       split: str = "synth") -> Dataset:
    """Generate `count` annotated scenes from cfg.seed."""
    rng = SplitMix64(cfg.seed)
    size = cfg.image_size
    cum = np.cumsum(zipf_pmf(cfg.num_classes, cfg.zipf_skew))
    subtle = subtle_ids(cfg.num_classes)
    classes = synth_classes(cfg.num_classes)
    samples: list[Sample] = []
    errors: list[str] = []
    for i in range(count):
        base = np.array([rng.uniform(0.35, 0.55) for _ in range(3)])
        noise = rng.fill_uniform((size, size, 3), -cfg.noise, cfg.noise)
        img = np.clip(base[None, None, :] + noise, 0.0, 1.0)
        n_obj = rng.randint(cfg.objects_min, cfg.objects_max)
        boxes: list[GroundTruthBox] = []
        placed: list[tuple[float, float, float, float]] = []
        for _ in range(n_obj):
            class_id = int(np.searchsorted(cum, rng.uniform(), side="right"))
            class_id = min(class_id, cfg.num_classes - 1)
            corners = None
            for _attempt in range(20):
                w = rng.uniform(0.12, 0.34)
                h = rng.uniform(0.12, 0.34)
                cx = rng.uniform(w / 2, 1.0 - w / 2)
                cy = rng.uniform(h / 2, 1.0 - h / 2)
                cand = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
                if all(_iou(cand, p) <= 0.25 for p in placed):
                    corners = cand
                    break
            jitter = np.array([rng.uniform(-0.03, 0.03) for _ in range(3)])
            if corners is None:
                errors.append(f"img {i}: dropped object after 20 placement tries")
                continue
            x1p = int(round(corners[0] * size))
            y1p = int(round(corners[1] * size))
            x2p = max(x1p + 3, int(round(corners[2] * size)))
            y2p = max(y1p + 3, int(round(corners[3] * size)))
            x2p, y2p = min(x2p, size), min(y2p, size)
            color = np.array(PALETTE[class_id % len(PALETTE)]) + jitter
            if class_id in subtle:
                color = base + cfg.subtle_contrast * (color - base)
            region = color[None, None, :] + 0.5 * noise[y1p:y2p, x1p:x2p]
            img[y1p:y2p, x1p:x2p] = np.clip(region, 0.0, 1.0)
            placed.append(corners)
            boxes.append(GroundTruthBox(
                class_id,
                cx=(x1p + x2p) / (2.0 * size), cy=(y1p + y2p) / (2.0 * size),
                w=(x2p - x1p) / size, h=(y2p - y1p) / size,
                severity=classes[class_id].severity,
            ))
        samples.append(Sample(f"img_{i:06d}", img, boxes))
    return Dataset(split, samples, classes, errors)


def write_dataset(ds: Dataset, out_dir) -> None:
    """Materialize images/*.ppm, labels/*.txt and classes.json."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for sample in ds.samples:
        write_ppm(out / "images" / f"{sample.stem}.ppm", sample.image)
        lines = []
        for b in sample.boxes:
            lines.append(f"{b.class_id} {b.cx:.6f} {b.cy:.6f} "
                         f"{b.w:.6f} {b.h:.6f}")
        (out / "labels" / f"{sample.stem}.txt").write_text(
            "\n".join(lines) + ("\n" if lines else ""))
    save_class_config(out / "classes.json", ds.classes)
