"""MNIST ingestion, the digit-to-reflectivity scene map, dataset splits and the
results CSV."""
from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .em import SceneGrid, SceneReflectivity
from .errors import ParseError, ShapeError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

FULL_SIZES = (51_000, 9_000, 10_000)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    """Decode one IDX payload of unsigned bytes (gzip already stripped)."""
    if len(raw) < 4:
        raise ParseError(f"{what}: truncated header (magic)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise ParseError(f"{what}: truncated header (dimension sizes)")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    count = int(np.prod(dims, dtype=np.int64))
    payload = raw[end:]
    if len(payload) < count:
        raise ParseError(f"{what}: truncated payload ({len(payload)} of {count} bytes)")
    if len(payload) > count:
        raise ParseError(f"{what}: {len(payload) - count} trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


@dataclass(frozen=True, eq=False)
class RawDigits:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def load_mnist(image_path, label_path) -> RawDigits:
    """Read an IDX image/label pair (optionally gzipped)."""
    images = parse_idx(_read_bytes(image_path), IMAGE_MAGIC, "images")
    labels = parse_idx(_read_bytes(label_path), LABEL_MAGIC, "labels")
    if images.ndim != 3:
        raise ParseError(f"images: expected 3 dimensions, found {images.ndim}")
    if labels.ndim != 1:
        raise ParseError(f"labels: expected 1 dimension, found {labels.ndim}")
    if len(images) != len(labels):
        raise ParseError(f"count: {len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise ParseError("labels: value outside 0..9")
    return RawDigits(images, labels)


def load_mnist_dir(directory) -> tuple[RawDigits, RawDigits]:
    """Train and test pairs from a directory with the canonical MNIST file names."""
    d = Path(directory)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (d / name).exists():
                return d / name
        raise FileNotFoundError(d / stem)

    train = load_mnist(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    test = load_mnist(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    return train, test


def scene_values(pixels: np.ndarray, binarize: bool = False) -> np.ndarray:
    """Reflectivity from 8-bit pixels: ``pixel / 255``, or thresholded at 0.5."""
    sigma = np.asarray(pixels, dtype=float) / 255.0
    if binarize:
        sigma = (sigma > 0.5).astype(float)
    return sigma


def scene_from_digit(pixels: np.ndarray, grid: SceneGrid, binarize: bool = False) -> SceneReflectivity:
    pixels = np.asarray(pixels)
    if pixels.shape != grid.shape:
        raise ShapeError(f"digit shape {pixels.shape} does not match grid {grid.shape}")
    return SceneReflectivity(scene_values(pixels, binarize), grid)


@dataclass(frozen=True)
class LabeledScene:
    scene: SceneReflectivity
    label: int

    def __post_init__(self):
        if not 0 <= int(self.label) <= 9:
            raise ValueError("label must be in 0..9")


class DatasetSplits:
    """Train / validation / test digits kept as raw bytes, mapped to scenes lazily."""

    def __init__(self, train: RawDigits, validation: RawDigits, test: RawDigits, binarize: bool = False):
        self.train = train
        self.validation = validation
        self.test = test
        self.binarize = binarize
        self._cache: dict = {}

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)

    def _arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self._cache:
            raw = getattr(self, name)
            x = scene_values(raw.images.reshape(len(raw), -1), self.binarize)
            self._cache[name] = (x, raw.labels.astype(int))
        return self._cache[name]

    def train_arrays(self):
        return self._arrays("train")

    def validation_arrays(self):
        return self._arrays("validation")

    def test_arrays(self):
        return self._arrays("test")

    def labeled(self, name: str, grid: SceneGrid) -> list[LabeledScene]:
        raw = getattr(self, name)
        return [LabeledScene(scene_from_digit(img, grid, self.binarize), int(lbl))
                for img, lbl in zip(raw.images, raw.labels)]


def split_sizes(scale: float) -> tuple[int, int, int]:
    return tuple(int(round(n * scale)) for n in FULL_SIZES)


def split(train_file: RawDigits, test_file: RawDigits, rng_seed=0, scale: float = 1.0,
          binarize: bool = False) -> DatasetSplits:
    """Shuffle the training file by seed and carve train/validation at 51:9.

    The test split is the leading part of the canonical test file.
    """
    n_train, n_val, n_test = split_sizes(scale)
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"scale {scale} yields an empty split {(n_train, n_val, n_test)}")
    if n_train + n_val > len(train_file):
        raise ValueError(f"scale {scale} needs {n_train + n_val} training-file digits, have {len(train_file)}")
    if n_test > len(test_file):
        raise ValueError(f"scale {scale} needs {n_test} test-file digits, have {len(test_file)}")
    order = np.random.default_rng(rng_seed).permutation(len(train_file))
    tr, va = order[:n_train], order[n_train:n_train + n_val]
    return DatasetSplits(
        RawDigits(train_file.images[tr], train_file.labels[tr]),
        RawDigits(train_file.images[va], train_file.labels[va]),
        RawDigits(test_file.images[:n_test], test_file.labels[:n_test]),
        binarize=binarize,
    )


# -- results table ------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    mode: str
    M: int
    noise_kind: str
    train_level: float
    test_level: float
    seed: int
    accuracy: float
    overlap: float
    intensity_ratio: float
    on_ratio: float
    wall_time: float

    def key(self) -> tuple:
        return (self.mode, self.M, self.noise_kind, self.train_level, self.seed)

    def __eq__(self, other):
        if not isinstance(other, ResultRow):
            return NotImplemented
        return all(_same(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))

    def __hash__(self):
        return hash(self.key())


def _same(a, b) -> bool:
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


COLUMNS = [f.name for f in fields(ResultRow)]
_TYPES = {f.name: f.type for f in fields(ResultRow)}


def _render(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def format_rows(rows: Iterable[ResultRow]) -> list[list[str]]:
    return [[_render(getattr(r, c)) for c in COLUMNS] for r in rows]


def persist_results(rows: Iterable[ResultRow], path, append: bool = False) -> None:
    """Write (or append) rows; a header is written whenever the file is new."""
    path = Path(path)
    new = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(COLUMNS)
        writer.writerows(format_rows(rows))


def _parse_value(column: str, text: str):
    kind = _TYPES[column]
    if kind in ("int", int):
        return int(text)
    if kind in ("float", float):
        return float(text)
    return text


def load_results(path) -> list[ResultRow]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty results file") from None
        if header != COLUMNS:
            raise ParseError(f"{path}: unexpected header {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(COLUMNS):
                raise ParseError(f"{path}:{lineno}: expected {len(COLUMNS)} fields, found {len(rec)}")
            try:
                rows.append(ResultRow(**{c: _parse_value(c, v) for c, v in zip(COLUMNS, rec)}))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return rows


def row_dict(row: ResultRow) -> dict:
    return asdict(row)
