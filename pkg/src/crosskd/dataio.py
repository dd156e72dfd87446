"""Datasets: seeded synthetic class templates and a flat CSV format."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigError, DataError


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x ch, float64 in [0, 1]
    labels: np.ndarray  # N, int64
    class_names: list[str]
    provenance: dict = field(default_factory=dict)
    templates: np.ndarray | None = None  # class templates, synthetic data only

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be N x H x W x ch, got shape {list(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("labels must index into class_names")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_side(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[indices], self.labels[indices], list(self.class_names), dict(self.provenance), self.templates
        )

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "num_samples": len(self),
            "image_shape": list(self.images.shape[1:]),
            "class_names": list(self.class_names),
            "class_counts": dict(zip(self.class_names, self.class_counts())),
            "checksum_sha256": self.checksum(),
            "provenance": self.provenance,
        }


@dataclass
class SyntheticSpec:
    counts: list = field(default_factory=lambda: [60, 60, 60])
    image_side: int = 32
    channels: int = 1
    sigma: float = 0.05
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def validate(self) -> None:
        if not self.counts or any(int(c) < 1 for c in self.counts):
            raise ConfigError(f"every class count must be >= 1, got {self.counts}")
        if self.sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.sigma}")
        if self.image_side < 1 or self.channels < 1:
            raise ConfigError("image side and channels must be positive")


def make_templates(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """One box-smoothed uniform-noise template per class."""
    shape = (spec.num_classes, spec.image_side, spec.image_side, spec.channels)
    raw = rng.uniform(0.0, 1.0, size=shape)
    return uniform_filter(raw, size=(1, 3, 3, 1), mode="reflect")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Samples are their class template plus clipped Gaussian noise; deterministic per seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    templates = make_templates(spec, rng)
    labels = np.concatenate([np.full(int(n), c, dtype=np.int64) for c, n in enumerate(spec.counts)])
    noise = rng.normal(0.0, spec.sigma, size=(len(labels),) + templates.shape[1:]) if spec.sigma > 0 else 0.0
    images = np.clip(templates[labels] + noise, 0.0, 1.0)
    names = [f"class{c}" for c in range(spec.num_classes)]
    prov = {"source": "synthetic", **asdict(spec)}
    return Dataset(images, labels, names, prov, templates)


def nearest_template_predict(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Baseline oracle: label of the template closest in Euclidean distance."""
    flat = images.reshape(len(images), -1)
    tflat = templates.reshape(len(templates), -1)
    d2 = (flat**2).sum(1)[:, None] - 2 * flat @ tflat.T + (tflat**2).sum(1)[None, :]
    return d2.argmin(axis=1)


def save_csv(ds: Dataset, path: str | Path) -> None:
    n = int(np.prod(ds.images.shape[1:]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"p{i}" for i in range(n)])
        for img, lab in zip(ds.images.reshape(len(ds), -1), ds.labels):
            writer.writerow([ds.class_names[lab]] + [repr(float(v)) for v in img])


def load_csv(path: str | Path, channels: int = 1) -> Dataset:
    """Read ``label,p0,...,p{H*W*ch-1}`` rows into a square-image dataset.

    Labels are arbitrary tokens; class indices follow first appearance.
    Errors cite 1-based file line numbers (the header is line 1).
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: line 1: empty file") from None
        npix = len(header) - 1
        if header[:1] != ["label"] or npix < 1 or header[1:] != [f"p{i}" for i in range(npix)]:
            raise DataError(f"{path}: line 1: header must be label,p0,...,p<n-1>")
        side = int(round(np.sqrt(npix / channels)))
        if side * side * channels != npix:
            raise DataError(f"{path}: line 1: {npix} pixels do not form a square {channels}-channel image")
        names: list[str] = []
        index: dict[str, int] = {}
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != npix + 1:
                raise DataError(f"{path}: line {lineno}: expected {npix + 1} fields, got {len(row)}")
            try:
                pixels = [float(v) for v in row[1:]]
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric pixel value") from None
            if any(not 0.0 <= v <= 1.0 for v in pixels):
                raise DataError(f"{path}: line {lineno}: pixel value outside [0, 1]")
            token = row[0]
            if token not in index:
                index[token] = len(names)
                names.append(token)
            labels.append(index[token])
            rows.append(pixels)
    if not rows:
        raise DataError(f"{path}: no samples")
    images = np.array(rows, dtype=np.float64).reshape(len(rows), side, side, channels)
    prov = {"source": "csv", "path": str(path), "label_mapping": {n: i for i, n in enumerate(names)}}
    return Dataset(images, np.array(labels), names, prov)
