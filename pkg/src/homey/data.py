"""Dataset ingestion: YOLO-style label files, class/severity config, images.

Labels are one object per line, ``class_id cx cy w h [severity]``, all
coordinates normalized to the image. Boxes reaching outside the frame are
clipped (not rejected) on load so rare-class instances survive sloppy
annotation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import imageio


class DataError(ValueError):
    """Invalid dataset input (config, label or image)."""


# The 17 risk categories the severity/threshold config ships for.
PROPERTY_CLASS_NAMES = [
    "Bad Driveway", "Boarded", "Cracked Foundation", "Damage", "Dead Yard",
    "Falling Gutters", "For Sale", "Garbage", "Hazard Signs", "House",
    "Old Car", "Old Window", "Overgrown Bush", "Overgrown Yard",
    "Overgrowth", "Paint-Rust Issues", "Roof Issues",
]


@dataclass(frozen=True)
class ClassSpec:
    id: int
    name: str
    severity: float
    conf_threshold: float = 0.25


@dataclass
class GroundTruthBox:
    """Annotated object in normalized center form; severity None means
    'use class default'."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    severity: float | None = None

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def area(self) -> float:
        return self.w * self.h


@dataclass
class Sample:
    stem: str
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    boxes: list[GroundTruthBox]


@dataclass
class Dataset:
    split: str
    samples: list[Sample]
    classes: list[ClassSpec]
    errors: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def class_by_id(self) -> dict[int, ClassSpec]:
        return {c.id: c for c in self.classes}


def severity_ramp(num_classes: int) -> list[float]:
    """Fixed declining per-class severities, 1.0 down to 0.4."""
    if num_classes == 1:
        return [1.0]
    return [round(1.0 - 0.6 * k / (num_classes - 1), 4)
            for k in range(num_classes)]


def default_classes(num_classes: int) -> list[ClassSpec]:
    """Generic class table with ramped severities and 0.25 thresholds."""
    ramp = severity_ramp(num_classes)
    return [ClassSpec(k, f"class_{k:02d}", ramp[k]) for k in range(num_classes)]


def parse_label_line(line: str) -> GroundTruthBox:
    """Parse ``class_id cx cy w h [severity]`` (5 or 6 fields)."""
    fields = line.split()
    if len(fields) not in (5, 6):
        raise DataError(f"expected 5 or 6 fields, got {len(fields)}")
    try:
        class_id = int(fields[0])
        vals = [float(f) for f in fields[1:]]
    except ValueError as exc:
        raise DataError(f"non-numeric field in {line!r}") from exc
    cx, cy, w, h = vals[:4]
    for name, v in zip(("cx", "cy", "w", "h"), (cx, cy, w, h)):
        if not 0.0 <= v <= 1.0:
            raise DataError(f"{name}={v} outside [0, 1]")
    if w <= 0 or h <= 0:
        raise DataError("box extents must be positive")
    severity = None
    if len(vals) == 5:
        severity = vals[4]
        if not 0.0 <= severity <= 1.0:
            raise DataError(f"severity={severity} outside [0, 1]")
    return GroundTruthBox(class_id, cx, cy, w, h, severity)


def format_label_line(box: GroundTruthBox) -> str:
    core = f"{box.class_id} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"
    if box.severity is not None:
        core += f" {box.severity:.6f}"
    return core


def clip_box(box: GroundTruthBox) -> GroundTruthBox | None:
    """Clip corners into [0,1]; None if nothing remains."""
    x1, y1, x2, y2 = box.corners()
    x1, y1 = max(x1, 0.0), max(y1, 0.0)
    x2, y2 = min(x2, 1.0), min(y2, 1.0)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return None
    return replace(box, cx=(x1 + x2) / 2.0, cy=(y1 + y2) / 2.0,
                   w=x2 - x1, h=y2 - y1)


def load_class_config(path) -> list[ClassSpec]:
    """JSON array of {id, name, severity, conf_threshold}."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing class config {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in class config {path}: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise DataError("class config must be a non-empty JSON array")
    specs = []
    seen = set()
    for entry in raw:
        try:
            spec = ClassSpec(int(entry["id"]), str(entry["name"]),
                             float(entry["severity"]),
                             float(entry.get("conf_threshold", 0.25)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad class entry {entry!r}") from exc
        if spec.id in seen:
            raise DataError(f"duplicate class id {spec.id}")
        if not 0.0 <= spec.severity <= 1.0:
            raise DataError(f"severity for class {spec.id} outside [0, 1]")
        if not 0.0 < spec.conf_threshold < 1.0:
            raise DataError(f"conf_threshold for class {spec.id} outside (0, 1)")
        seen.add(spec.id)
        specs.append(spec)
    specs.sort(key=lambda c: c.id)
    if [c.id for c in specs] != list(range(len(specs))):
        raise DataError("class ids must be dense 0..C-1")
    return specs


def save_class_config(path, classes: list[ClassSpec]) -> None:
    rows = [{"id": c.id, "name": c.name, "severity": c.severity,
             "conf_threshold": c.conf_threshold} for c in classes]
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")


def _decode_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".ppm":
        return imageio.read_ppm(path)
    if path.suffix.lower() == ".png":
        return imageio.read_png(path)
    raise DataError(f"unsupported image format {path.suffix}")


def load_dataset(images_dir, labels_dir, class_config_path,
                 split: str = "train") -> Dataset:
    """Load images + labels matched by stem, in lexicographic stem order.

    Per-file problems (missing labels, bad lines, unknown class ids) are
    collected in Dataset.errors; offending boxes are dropped.
    """
    classes = load_class_config(class_config_path)
    num_classes = len(classes)
    images_dir, labels_dir = Path(images_dir), Path(labels_dir)
    paths = sorted(
        (p for p in images_dir.iterdir()
         if p.suffix.lower() in (".ppm", ".png")),
        key=lambda p: p.stem,
    )
    samples: list[Sample] = []
    errors: list[str] = []
    for img_path in paths:
        try:
            image = _decode_image(img_path)
        except (imageio.ImageFormatError, OSError) as exc:
            raise DataError(f"unreadable image {img_path}: {exc}") from exc
        boxes: list[GroundTruthBox] = []
        label_path = labels_dir / f"{img_path.stem}.txt"
        if not label_path.exists():
            errors.append(f"{img_path.stem}: missing label file")
        else:
            for ln, line in enumerate(label_path.read_text().splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    box = parse_label_line(line)
                except DataError as exc:
                    errors.append(f"{label_path.name}:{ln}: {exc}")
                    continue
                if not 0 <= box.class_id < num_classes:
                    errors.append(f"{label_path.name}:{ln}: unknown class id "
                                  f"{box.class_id}")
                    continue
                clipped = clip_box(box)
                if clipped is None:
                    errors.append(f"{label_path.name}:{ln}: box entirely "
                                  "outside the frame")
                    continue
                if clipped.severity is None:
                    clipped.severity = classes[clipped.class_id].severity
                boxes.append(clipped)
        samples.append(Sample(img_path.stem, image, boxes))
    return Dataset(split, samples, classes, errors)
