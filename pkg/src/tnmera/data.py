"""MNIST IDX loading, NeedleMNIST synthesis and the on-disk dataset format.

A dataset directory holds one binary PGM per image, ``labels.csv`` with
header ``filename,label``, and, for generated data, ``manifest.json``.
"""

from __future__ import annotations

import csv
import gzip
import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import rng_stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
PATCH = 28
PLACEMENT_RETRIES = 200


class DataError(ValueError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 2:
            raise DataError("pixels must be a 2D grid")
        if np.any(self.pixels < 0) or np.any(self.pixels > 1):
            raise DataError("pixels must lie in [0, 1]")


@dataclass
class Dataset:
    """Images stacked as an (n, H, W) array in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.images[i], self.labels[i], self.num_classes)
        return ImageSample(self.images[i], int(self.labels[i]))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def _open_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); bytes scale to [0, 1] by /255."""
    img = _open_bytes(images_path)
    lab = _open_bytes(labels_path)
    if len(img) < 16 or len(lab) < 8:
        raise DataError("truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"bad image magic {magic:#010x}")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataError(f"bad label magic {lmagic:#010x}")
    if n != ln:
        raise DataError(f"{n} images but {ln} labels")
    if len(img) < 16 + n * rows * cols or len(lab) < 8 + n:
        raise DataError("truncated IDX payload")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8)
    return Dataset(pixels.reshape(n, rows, cols) / 255.0, labels.astype(np.int64))


def write_idx(dataset: Dataset, images_path, labels_path):
    data = quantize(dataset.images)
    n, h, w = data.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + data.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def find_idx_pair(directory) -> tuple[Path, Path]:
    d = Path(directory)
    images = sorted(d.glob("*images*idx3*"))
    labels = sorted(d.glob("*labels*idx1*"))
    if len(images) != 1 or len(labels) != 1:
        raise DataError(f"expected one IDX image file and one label file in {d}")
    return images[0], labels[0]


def quantize(pixels) -> np.ndarray:
    """[0, 1] -> bytes with round-half-up."""
    p = np.asarray(pixels, dtype=float)
    if np.any(p < 0) or np.any(p > 1):
        raise DataError("pixels must lie in [0, 1]")
    return np.floor(p * 255.0 + 0.5).astype(np.uint8)


def write_pgm(sample, path):
    pixels = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample)
    data = quantize(pixels)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path, label: int = 0) -> ImageSample:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5)")
    pos = 2
    header = []
    for _ in range(3):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None or not m.group(1).isdigit():
            raise DataError(f"{path}: malformed PGM header")
        header.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = header
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte after maxval
    if len(raw) < pos + w * h:
        raise DataError(f"{path}: truncated pixel data")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return ImageSample(data / 255.0, label)


def pad_center(pixels, target_h: int, target_w: int) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float)
    h, w = pixels.shape
    if target_h < h or target_w < w:
        raise DataError(f"cannot pad {h}x{w} to smaller {target_h}x{target_w}")
    top, left = (target_h - h) // 2, (target_w - w) // 2
    out = np.zeros((target_h, target_w))
    out[top:top + h, left:left + w] = pixels
    return out


def resize_or_pad(sample, target_h: int, target_w: int, mode: str = "pad_zero"):
    """Center zero-padding, or block-mean downsampling after padding to a multiple of the target."""
    is_sample = isinstance(sample, ImageSample)
    pixels = sample.pixels if is_sample else np.asarray(sample, dtype=float)
    h, w = pixels.shape
    if mode == "pad_zero":
        out = pad_center(pixels, target_h, target_w)
    elif mode == "downsample_mean":
        if target_h > h or target_w > w:
            raise DataError(f"cannot downsample {h}x{w} to larger {target_h}x{target_w}")
        fh, fw = -(-h // target_h), -(-w // target_w)
        padded = pad_center(pixels, fh * target_h, fw * target_w)
        out = padded.reshape(target_h, fh, target_w, fw).mean(axis=(1, 3))
    else:
        raise DataError(f"unknown resize mode {mode!r}")
    return ImageSample(out, sample.label) if is_sample else out


def resize_dataset(ds: Dataset, size: int, mode: str) -> Dataset:
    return Dataset(np.stack([resize_or_pad(im, size, size, mode) for im in ds.images]),
                   ds.labels, ds.num_classes)


@dataclass
class NeedleConfig:
    canvas_size: int = 64
    object_digit: int = 3
    num_distractors: int = 4
    count_per_class: int = 100
    allow_overlap: bool = False
    rng_seed: int = 0
    source: str = ""
    source_range: tuple[int, int] | None = None

    def validate(self):
        if self.canvas_size < 2 * PATCH:
            raise DataError(f"canvas_size must be >= {2 * PATCH}")
        if self.num_distractors < 0:
            raise DataError("num_distractors must be >= 0")
        if not 0 <= self.object_digit <= 9:
            raise DataError("object_digit must be a digit")
        if self.count_per_class < 1:
            raise DataError("count_per_class must be >= 1")
        return self

    @property
    def o2i_ratio(self) -> float:
        return PATCH * PATCH / self.canvas_size ** 2


def ink_box(patch) -> tuple[int, int, int, int]:
    """Tight ``(row, col, height, width)`` box around the non-zero pixels."""
    rows = np.flatnonzero(np.any(patch > 0, axis=1))
    cols = np.flatnonzero(np.any(patch > 0, axis=0))
    if len(rows) == 0:
        return 0, 0, 1, 1
    return int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


def _disjoint(a, b) -> bool:
    return a[0] + a[2] <= b[0] or b[0] + b[2] <= a[0] or a[1] + a[3] <= b[1] or b[1] + b[3] <= a[1]


def _place(rng, canvas: int, sizes: Sequence[tuple[int, int]], allow_overlap: bool) -> list[tuple[int, int]]:
    """Uniform top-left corners for boxes of the given (height, width).

    Boxes are placed one at a time; a draw that overlaps an earlier box is
    rejected. Each box gets at most ``PLACEMENT_RETRIES`` draws, and a layout
    that runs out is restarted from scratch, at most ``PLACEMENT_RETRIES``
    times.
    """
    for _ in range(PLACEMENT_RETRIES):
        placed = []
        for h, w in sizes:
            for _ in range(PLACEMENT_RETRIES):
                box = (int(rng.integers(0, canvas - h + 1)), int(rng.integers(0, canvas - w + 1)), h, w)
                if allow_overlap or all(_disjoint(box, other) for other in placed):
                    placed.append(box)
                    break
            else:
                break
        if len(placed) == len(sizes):
            return [(b[0], b[1]) for b in placed]
    raise DataError(f"could not place {len(sizes)} disjoint digits on a {canvas}x{canvas} canvas "
                    f"after {PLACEMENT_RETRIES} restarts")


def load_source(source) -> Dataset:
    if isinstance(source, Dataset):
        return source
    path = Path(source)
    if not path.exists():
        raise DataError(f"MNIST source {path} not found")
    if path.is_dir():
        return load_idx(*find_idx_pair(path))
    raise DataError(f"MNIST source {path} must be a directory holding an IDX pair")


def gen_needle(cfg: NeedleConfig, source: Dataset | None = None) -> tuple[Dataset, dict]:
    """Synthesize a balanced tiny-object presence dataset.

    Positive images hold one ``object_digit`` patch plus ``num_distractors``
    patches of other digits; negatives hold ``num_distractors + 1`` patches of
    other digits. Each patch is cropped to the bounding box of its ink and
    pasted with an element-wise max at a uniform position; unless overlap is
    allowed, the boxes are pairwise disjoint. Each sample draws from its own
    random stream, so the output is a pure function of the config.
    """
    cfg.validate()
    mnist = load_source(source if source is not None else cfg.source)
    lo, hi = cfg.source_range or (0, len(mnist))
    idx = np.arange(lo, min(hi, len(mnist)))
    labels = mnist.labels[idx]
    objects = idx[labels == cfg.object_digit]
    others = idx[labels != cfg.object_digit]
    if len(objects) == 0 or len(others) == 0:
        raise DataError("source lacks object or distractor digits")

    n = 2 * cfg.count_per_class
    k = cfg.num_distractors + 1
    images = np.zeros((n, cfg.canvas_size, cfg.canvas_size))
    out_labels = np.zeros(n, dtype=np.int64)
    records = []
    for i in range(n):
        rng = rng_stream(cfg.rng_seed, "needle", i)
        positive = i % 2 == 0
        picks = [int(rng.choice(others)) for _ in range(k)]
        if positive:
            picks[0] = int(rng.choice(objects))
        boxes = [ink_box(mnist.images[src]) for src in picks]
        positions = _place(rng, cfg.canvas_size, [(b[2], b[3]) for b in boxes], cfg.allow_overlap)
        patches = []
        for src, (br, bc, bh, bw), (r, c) in zip(picks, boxes, positions):
            view = images[i, r:r + bh, c:c + bw]
            np.maximum(view, mnist.images[src][br:br + bh, bc:bc + bw], out=view)
            patches.append({"digit": int(mnist.labels[src]), "row": r, "col": c, "height": bh, "width": bw,
                            "source_index": src})
        out_labels[i] = int(positive)
        records.append({"file": f"img_{i:05d}.pgm", "label": int(positive), "patches": patches})

    manifest = {
        "config": asdict(cfg),
        "seed": cfg.rng_seed,
        "o2i_ratio": cfg.o2i_ratio,
        "o2i_percent": round(100 * cfg.o2i_ratio, 4),
        "counts": {"0": cfg.count_per_class, "1": cfg.count_per_class},
        "records": records,
    }
    return Dataset(images, out_labels, 2), manifest


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()


def write_dataset(directory, ds: Dataset, manifest: dict | None = None, names: Sequence[str] | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = list(names) if names is not None else [f"img_{i:05d}.pgm" for i in range(len(ds))]
    with open(d / "labels.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["filename", "label"])
        for name, image, label in zip(names, ds.images, ds.labels):
            write_pgm(image, d / name)
            w.writerow([name, int(label)])
    if manifest is not None:
        (d / "manifest.json").write_bytes(manifest_bytes(manifest))


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    with open(d / "labels.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise DataError(f"{d / 'labels.csv'} is empty")
    images = [read_pgm(d / r["filename"]).pixels for r in rows]
    labels = [int(r["label"]) for r in rows]
    num_classes = None
    if (d / "manifest.json").exists():
        num_classes = len(json.loads((d / "manifest.json").read_text()).get("counts", {})) or None
    return Dataset(np.stack(images), np.asarray(labels), num_classes)


_SLICE = re.compile(r"^(.*)\[(\d*):(\d*)\]$")


def load_any(spec: str) -> Dataset:
    """Load a dataset from ``path`` or ``path[start:stop]``.

    ``path`` is either a dataset directory with ``labels.csv`` or a directory
    holding one IDX image/label pair.
    """
    m = _SLICE.match(spec)
    path, sl = (m.group(1), slice(int(m.group(2)) if m.group(2) else None,
                                  int(m.group(3)) if m.group(3) else None)) if m else (spec, slice(None))
    p = Path(path)
    if (p / "labels.csv").exists():
        ds = read_dataset(p)
    elif p.is_dir():
        ds = load_idx(*find_idx_pair(p))
    else:
        raise DataError(f"no dataset at {path}")
    return ds[sl]
