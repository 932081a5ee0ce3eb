"""Synthetic benchmark generation and small-image corpus IO.

The synthetic generator is the acceptance substrate: Gaussian clusters at
seeded random centers with a guaranteed minimum separation, an optional
nuisance subspace of class-free high-variance noise, and a fixed 80/20
split.  Image loading covers an idx-style binary pair and a directory of
raw P6 PPM files with a label CSV; both scale pixels to [0, 1].
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..seeding import rng_for

__all__ = [
    "DataFormatError",
    "SyntheticDatasetSpec",
    "LabeledDataset",
    "generate_synthetic",
    "load_image_dataset",
    "write_idx_dataset",
    "write_ppm_dir",
]

CENTER_RETRIES = 100


class DataFormatError(ValueError):
    """Malformed dataset file."""


class LabeledDataset(NamedTuple):
    x: np.ndarray
    y: np.ndarray


@dataclass
class SyntheticDatasetSpec:
    num_classes: int = 4
    samples_per_class: int = 500
    input_dim: int = 32
    separation: float = 6.0
    within_sigma: float = 1.0
    nuisance_dim: int = 0
    nuisance_sigma: float | None = None  # defaults to within_sigma
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2 or self.samples_per_class < 2:
            raise ValueError("need at least 2 classes and 2 samples per class")
        if self.input_dim <= 0 or not 0 <= self.nuisance_dim < self.input_dim:
            raise ValueError(
                f"invalid dims: input_dim={self.input_dim}, nuisance_dim={self.nuisance_dim}"
            )
        if self.separation <= 0 or self.within_sigma < 0:
            raise ValueError("separation must be positive and within_sigma non-negative")


def _sample_centers(spec: SyntheticDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    signal_dim = spec.input_dim - spec.nuisance_dim
    for _ in range(CENTER_RETRIES):
        centers = rng.normal(0.0, spec.separation, size=(spec.num_classes, signal_dim))
        dists = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        if dists.min() >= spec.separation:
            return centers
    raise ValueError(
        f"could not place {spec.num_classes} centers with separation {spec.separation} "
        f"in {signal_dim} dims after {CENTER_RETRIES} attempts"
    )


def generate_synthetic(spec: SyntheticDatasetSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic labeled clusters with an 80/20 per-class split."""
    spec.validate()
    rng = rng_for(spec.seed, "synthetic")
    centers = _sample_centers(spec, rng)
    signal_dim = spec.input_dim - spec.nuisance_dim
    nuisance_sigma = spec.within_sigma if spec.nuisance_sigma is None else spec.nuisance_sigma

    train_x, train_y, test_x, test_y = [], [], [], []
    n_train = int(round(0.8 * spec.samples_per_class))
    for label in range(spec.num_classes):
        x = np.zeros((spec.samples_per_class, spec.input_dim))
        x[:, :signal_dim] = centers[label] + rng.normal(
            0.0, spec.within_sigma, size=(spec.samples_per_class, signal_dim)
        )
        if spec.nuisance_dim:
            x[:, signal_dim:] = rng.normal(
                0.0, nuisance_sigma, size=(spec.samples_per_class, spec.nuisance_dim)
            )
        train_x.append(x[:n_train])
        test_x.append(x[n_train:])
        train_y.append(np.full(n_train, label))
        test_y.append(np.full(spec.samples_per_class - n_train, label))

    def bundle(xs, ys) -> LabeledDataset:
        x = np.vstack(xs)
        y = np.concatenate(ys).astype(int)
        order = rng.permutation(len(y))
        return LabeledDataset(x[order], y[order])

    return bundle(train_x, train_y), bundle(test_x, test_y)


# ---------------------------------------------------------------------------
# idx-style binary
# ---------------------------------------------------------------------------


def _read_idx(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(f"{path}: not an idx file (bad magic)")
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code != 0x08:
        raise DataFormatError(f"{path}: unsupported idx dtype 0x{dtype_code:02x} (expected ubyte)")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(f"{path}: truncated idx header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    if len(raw) != header_len + count:
        raise DataFormatError(
            f"{path}: payload has {len(raw) - header_len} bytes, dims {dims} need {count}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def _write_idx(path: Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def write_idx_dataset(images: np.ndarray, labels: np.ndarray, directory) -> None:
    """Write uint8 images ([N x H x W] or [N x C x H x W]) plus labels."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_idx(directory / "images.idx", images)
    _write_idx(directory / "labels.idx", np.asarray(labels))


def _load_idx_dataset(directory: Path) -> LabeledDataset:
    images = _read_idx(directory / "images.idx")
    labels = _read_idx(directory / "labels.idx")
    if labels.ndim != 1:
        raise DataFormatError(f"{directory}/labels.idx: labels must be 1-D, got {labels.shape}")
    if images.ndim == 3:
        images = images[:, None, :, :]
    elif images.ndim != 4:
        raise DataFormatError(f"{directory}/images.idx: expected 3 or 4 dims, got {images.ndim}")
    if len(images) != len(labels):
        raise DataFormatError(
            f"{directory}: {len(images)} images but {len(labels)} labels"
        )
    return LabeledDataset(images.astype(np.float64) / 255.0, labels.astype(int))


# ---------------------------------------------------------------------------
# PPM directory + label CSV
# ---------------------------------------------------------------------------


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise DataFormatError(f"{path}: expected binary P6, got {fields[0]!r}")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    expected = width * height * 3
    data = raw[pos : pos + expected]
    if len(data) != expected:
        raise DataFormatError(f"{path}: pixel payload truncated ({len(data)}/{expected} bytes)")
    img = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return np.transpose(img, (2, 0, 1))


def write_ppm_dir(images: np.ndarray, labels: np.ndarray, directory) -> None:
    """Write uint8 [N x 3 x H x W] images as name-ordered PPMs plus labels.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, img in enumerate(np.asarray(images, dtype=np.uint8)):
        name = f"img{i:05d}.ppm"
        c, h, w = img.shape
        with open(directory / name, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(np.transpose(img, (1, 2, 0)).tobytes())
        rows.append((name, int(labels[i])))
    with open(directory / "labels.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def _load_ppm_dataset(directory: Path) -> LabeledDataset:
    label_path = directory / "labels.csv"
    if not label_path.exists():
        raise DataFormatError(f"{directory}: missing labels.csv")
    labels: dict[str, int] = {}
    with open(label_path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            if len(row) != 2:
                raise DataFormatError(f"{label_path}: row {i} must be 'filename,label'")
            labels[row[0]] = int(row[1])
    files = sorted(p.name for p in directory.glob("*.ppm"))
    if len(files) != len(labels):
        raise DataFormatError(
            f"{directory}: {len(files)} ppm files but {len(labels)} label rows"
        )
    images, ys = [], []
    for i, name in enumerate(files):
        if name not in labels:
            raise DataFormatError(f"{directory}: no label for file {name} (record {i})")
        images.append(_read_ppm(directory / name))
        ys.append(labels[name])
    return LabeledDataset(np.stack(images).astype(np.float64) / 255.0, np.array(ys, dtype=int))


def load_image_dataset(path, format: str) -> LabeledDataset:
    """Load a labeled image corpus; format is 'idx' or 'ppm-dir'."""
    directory = Path(path)
    if not directory.exists():
        raise FileNotFoundError(f"dataset path does not exist: {directory}")
    if format == "idx":
        return _load_idx_dataset(directory)
    if format == "ppm-dir":
        return _load_ppm_dataset(directory)
    raise ValueError(f"unknown image dataset format '{format}' (expected idx or ppm-dir)")
