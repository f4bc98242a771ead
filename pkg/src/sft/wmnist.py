"""MNIST IDX reading and the 64x64 wide-MNIST (WMNIST) dataset."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CANVAS = 64
DIGIT = 28
MAX_OFFSET = CANVAS - DIGIT  # offsets drawn from {0..36}
GENERATOR_VERSION = 1
SPLITS = {"train": 0, "test": 1}
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


class IdxCountError(IdxError):
    pass


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 + 4 * ndim:
        raise IdxDimensionError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    body = data[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)):
        raise IdxDimensionError(f"{path}: header dims {dims} need {int(np.prod(dims))} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def read_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Parse an MNIST image/label IDX pair into (N, 28, 28) u8 and (N,) u8."""
    images = _read_idx(images_path, 0x00000803, 3)
    if images.shape[1:] != (DIGIT, DIGIT):
        raise IdxDimensionError(f"{images_path}: expected {DIGIT}x{DIGIT} images, got {images.shape[1:]}")
    labels = _read_idx(labels_path, 0x00000801, 1)
    if labels.shape[0] != images.shape[0]:
        raise IdxCountError(f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}")
    return images, labels


@dataclass
class WmnistSample:
    image: np.ndarray  # (64, 64) u8
    label: int
    bbox: tuple  # inclusive (x_min, y_min, x_max, y_max)
    offset: tuple  # (ox, oy)

    @property
    def fg_mask(self) -> np.ndarray:
        return foreground_mask(self.image, self.offset)


def tight_bbox(mask: np.ndarray):
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if ys.size == 0:
        return None
    return (int(xs[0]), int(ys[0]), int(xs[-1]), int(ys[-1]))


def foreground_mask(image: np.ndarray, offset) -> np.ndarray:
    """Non-zero digit pixels inside the embedded 28x28 window."""
    ox, oy = offset
    mask = np.zeros(image.shape, bool)
    mask[oy:oy + DIGIT, ox:ox + DIGIT] = image[oy:oy + DIGIT, ox:ox + DIGIT] > 0
    return mask


def embed_digit(digit: np.ndarray, rng: np.random.Generator | None = None, label: int = -1, offset=None) -> WmnistSample:
    """Place a 28x28 digit at a uniformly random offset on a zero 64x64 canvas."""
    digit = np.asarray(digit, dtype=np.uint8)
    if digit.shape != (DIGIT, DIGIT):
        raise ValueError(f"digit must be {DIGIT}x{DIGIT}, got {digit.shape}")
    if offset is None:
        ox, oy = (int(v) for v in rng.integers(0, MAX_OFFSET + 1, size=2))
    else:
        ox, oy = (int(v) for v in offset)
    canvas = np.zeros((CANVAS, CANVAS), np.uint8)
    canvas[oy:oy + DIGIT, ox:ox + DIGIT] = digit
    bbox = tight_bbox(canvas > 0)
    return WmnistSample(canvas, int(label), bbox, (ox, oy))


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS[split], index])


@dataclass
class WmnistSplit:
    """In-memory WMNIST split: images (N, 64, 64) u8 plus annotations."""

    images: np.ndarray
    labels: np.ndarray
    bboxes: np.ndarray  # (N, 4) inclusive x0, y0, x1, y1
    offsets: np.ndarray  # (N, 2) ox, oy
    name: str = ""

    def __len__(self):
        return self.images.shape[0]

    def sample(self, i: int) -> WmnistSample:
        return WmnistSample(self.images[i], int(self.labels[i]), tuple(int(v) for v in self.bboxes[i]),
                            tuple(int(v) for v in self.offsets[i]))

    def fg_masks(self, idx) -> np.ndarray:
        """Foreground masks for the samples at ``idx``."""
        idx = np.asarray(idx)
        imgs = self.images[idx]
        masks = np.zeros(imgs.shape, bool)
        for j, (ox, oy) in enumerate(self.offsets[idx]):
            masks[j, oy:oy + DIGIT, ox:ox + DIGIT] = imgs[j, oy:oy + DIGIT, ox:ox + DIGIT] > 0
        return masks

    def subset(self, idx) -> "WmnistSplit":
        idx = np.asarray(idx)
        return WmnistSplit(self.images[idx], self.labels[idx], self.bboxes[idx], self.offsets[idx], self.name)

    def batch(self, idx) -> np.ndarray:
        """Model input for ``idx``: (B, 1, 64, 64) float32 in [0, 1]."""
        return to_input(self.images[np.asarray(idx)])


def to_input(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32) / np.float32(255.0)
    return x[:, None, :, :]


def make_split(digits: np.ndarray, labels: np.ndarray, seed: int, split: str) -> WmnistSplit:
    n = digits.shape[0]
    images = np.zeros((n, CANVAS, CANVAS), np.uint8)
    bboxes = np.zeros((n, 4), np.int64)
    offsets = np.zeros((n, 2), np.int64)
    for i in range(n):
        s = embed_digit(digits[i], sample_rng(seed, split, i), int(labels[i]))
        images[i] = s.image
        bboxes[i] = s.bbox
        offsets[i] = s.offset
    return WmnistSplit(images, np.asarray(labels, np.int64), bboxes, offsets, split)


def save_split(ds: WmnistSplit, out_dir, seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images.bin").write_bytes(np.ascontiguousarray(ds.images, np.uint8).tobytes())
    lines = []
    for i in range(len(ds)):
        rec = {
            "index": i,
            "label": int(ds.labels[i]),
            "bbox": [int(v) for v in ds.bboxes[i]],
            "offset": [int(v) for v in ds.offsets[i]],
        }
        lines.append(json.dumps(rec, separators=(",", ":")))
    (out / "annotations.jsonl").write_text("\n".join(lines) + "\n")
    manifest = {"count": len(ds), "seed": seed, "generator_version": GENERATOR_VERSION}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_split(split_dir, name: str | None = None) -> WmnistSplit:
    d = Path(split_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    n = manifest["count"]
    raw = (d / "images.bin").read_bytes()
    if len(raw) != n * CANVAS * CANVAS:
        raise ValueError(f"{d / 'images.bin'}: expected {n * CANVAS * CANVAS} bytes, found {len(raw)}")
    images = np.frombuffer(raw, np.uint8).reshape(n, CANVAS, CANVAS)
    labels = np.zeros(n, np.int64)
    bboxes = np.zeros((n, 4), np.int64)
    offsets = np.zeros((n, 2), np.int64)
    with open(d / "annotations.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            i = rec["index"]
            labels[i] = rec["label"]
            bboxes[i] = rec["bbox"]
            offsets[i] = rec["offset"]
    return WmnistSplit(images, labels, bboxes, offsets, name or d.name)


def split_digest(split_dir) -> str:
    h = hashlib.sha256()
    for fname in ("images.bin", "annotations.jsonl", "manifest.json"):
        h.update((Path(split_dir) / fname).read_bytes())
    return h.hexdigest()


def build_wmnist(mnist_dir, out_dir, seed: int = 17, splits=("train", "test"), limit: int | None = None) -> dict:
    """Build WMNIST splits from MNIST IDX files; returns {split: directory}.

    Every sample's placement comes from an rng seeded by (seed, split,
    index), so rebuilding with the same seed is byte-identical.
    """
    mnist_dir = Path(mnist_dir)
    out = {}
    for split in splits:
        img_name, lbl_name = IDX_FILES[split]
        for p in (mnist_dir / img_name, mnist_dir / lbl_name):
            if not p.exists():
                raise FileNotFoundError(f"missing MNIST file: {p}")
        digits, labels = read_idx(mnist_dir / img_name, mnist_dir / lbl_name)
        if limit is not None:
            digits, labels = digits[:limit], labels[:limit]
        ds = make_split(digits, labels, seed, split)
        out[split] = save_split(ds, Path(out_dir) / split, seed)
    return out
