import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MNIST_DIR, fake_mnist, write_idx
from sft import wmnist


# ---------------------------------------------------------------------------
# IDX


def test_read_idx_roundtrip(tmp_path, rng):
    imgs = rng.integers(0, 256, (5, 28, 28))
    write_idx(tmp_path / "i", imgs, 0x803)
    write_idx(tmp_path / "l", [3, 1, 4, 1, 5], 0x801)
    x, y = wmnist.read_idx(tmp_path / "i", tmp_path / "l")
    assert x.shape == (5, 28, 28) and np.array_equal(x, imgs)
    assert y.tolist() == [3, 1, 4, 1, 5]


def test_read_idx_bad_magic(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 28, 28)), 0x801)
    write_idx(tmp_path / "l", [0, 0], 0x801)
    with pytest.raises(wmnist.IdxMagicError):
        wmnist.read_idx(tmp_path / "i", tmp_path / "l")
    write_idx(tmp_path / "i", np.zeros((2, 28, 28)), 0x803)
    write_idx(tmp_path / "l", [0, 0], 0x803)
    with pytest.raises(wmnist.IdxMagicError):
        wmnist.read_idx(tmp_path / "i", tmp_path / "l")


def test_read_idx_dimension_errors(tmp_path):
    write_idx(tmp_path / "l", [0, 0], 0x801)
    write_idx(tmp_path / "i", np.zeros((2, 20, 20)), 0x803)
    with pytest.raises(wmnist.IdxDimensionError):
        wmnist.read_idx(tmp_path / "i", tmp_path / "l")
    # header promises more bytes than the body holds
    with open(tmp_path / "i", "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, 3, 28, 28) + bytes(28 * 28 * 2))
    with pytest.raises(wmnist.IdxDimensionError):
        wmnist.read_idx(tmp_path / "i", tmp_path / "l")
    (tmp_path / "i").write_bytes(b"\x00\x00")
    with pytest.raises(wmnist.IdxDimensionError):
        wmnist.read_idx(tmp_path / "i", tmp_path / "l")


def test_read_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((3, 28, 28)), 0x803)
    write_idx(tmp_path / "l", [0, 0], 0x801)
    with pytest.raises(wmnist.IdxCountError):
        wmnist.read_idx(tmp_path / "i", tmp_path / "l")


def test_idx_errors_are_distinct():
    kinds = {wmnist.IdxMagicError, wmnist.IdxDimensionError, wmnist.IdxCountError}
    assert len(kinds) == 3 and all(issubclass(k, wmnist.IdxError) for k in kinds)


@pytest.mark.skipif(not (MNIST_DIR / "train-images-idx3-ubyte").exists(), reason="MNIST IDX files not present")
def test_standard_mnist_counts():
    x, y = wmnist.read_idx(MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte")
    assert x.shape == (60000, 28, 28) and y.shape == (60000,)
    x, y = wmnist.read_idx(MNIST_DIR / "t10k-images-idx3-ubyte", MNIST_DIR / "t10k-labels-idx1-ubyte")
    assert x.shape == (10000, 28, 28) and set(np.unique(y)) == set(range(10))


# ---------------------------------------------------------------------------
# embedding


def _digit_rows_4_24_cols_6_22():
    d = np.zeros((28, 28), np.uint8)
    d[4, 10] = d[24, 12] = d[10, 6] = d[12, 22] = 200
    d[14, 14] = 90
    return d


def test_embed_offset_zero_and_max():
    d = _digit_rows_4_24_cols_6_22()
    s = wmnist.embed_digit(d, offset=(0, 0), label=3)
    assert s.bbox == (6, 4, 22, 24) and s.label == 3
    s = wmnist.embed_digit(d, offset=(36, 36))
    assert s.bbox == (42, 40, 58, 60)
    assert s.image.sum() == d.astype(np.int64).sum()
    assert s.image.shape == (64, 64)


def test_embed_rejects_bad_shape():
    with pytest.raises(ValueError):
        wmnist.embed_digit(np.zeros((27, 28)), offset=(0, 0))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_embed_invariants(seed):
    rng = np.random.default_rng(seed)
    d = np.zeros((28, 28), np.uint8)
    k = int(rng.integers(1, 60))
    d[rng.integers(0, 28, k), rng.integers(0, 28, k)] = rng.integers(1, 256, k)
    s = wmnist.embed_digit(d, rng)
    ox, oy = s.offset
    assert 0 <= ox <= 36 and 0 <= oy <= 36
    mask = s.fg_mask
    x0, y0, x1, y1 = s.bbox
    ys, xs = np.nonzero(mask)
    assert (x0, y0, x1, y1) == (xs.min(), ys.min(), xs.max(), ys.max())
    assert (xs >= x0).all() and (xs <= x1).all() and (ys >= y0).all() and (ys <= y1).all()
    outside = np.ones((64, 64), bool)
    outside[oy:oy + 28, ox:ox + 28] = False
    assert not s.image[outside].any()
    assert s.image.astype(np.int64).sum() == d.astype(np.int64).sum()


def test_sample_rng_keys():
    a = wmnist.sample_rng(17, "train", 5).integers(0, 1 << 30, 4)
    b = wmnist.sample_rng(17, "train", 5).integers(0, 1 << 30, 4)
    c = wmnist.sample_rng(17, "test", 5).integers(0, 1 << 30, 4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


# ---------------------------------------------------------------------------
# build and format


def test_build_twice_byte_identical(tmp_path):
    mnist = fake_mnist(tmp_path / "m", n_train=30, n_test=12)
    wmnist.build_wmnist(mnist, tmp_path / "a", seed=17)
    wmnist.build_wmnist(mnist, tmp_path / "b", seed=17)
    for split in ("train", "test"):
        for f in ("images.bin", "annotations.jsonl", "manifest.json"):
            assert (tmp_path / "a" / split / f).read_bytes() == (tmp_path / "b" / split / f).read_bytes()
    wmnist.build_wmnist(mnist, tmp_path / "c", seed=18)
    assert (tmp_path / "a/train/images.bin").read_bytes() != (tmp_path / "c/train/images.bin").read_bytes()


def test_split_format_and_load(tmp_path):
    mnist = fake_mnist(tmp_path / "m", n_train=25, n_test=10)
    dirs = wmnist.build_wmnist(mnist, tmp_path / "w", seed=17)
    d = dirs["train"]
    man = json.loads((d / "manifest.json").read_text())
    assert man == {"count": 25, "seed": 17, "generator_version": wmnist.GENERATOR_VERSION}
    assert (d / "images.bin").stat().st_size == 25 * 64 * 64
    lines = (d / "annotations.jsonl").read_text().splitlines()
    rec = json.loads(lines[3])
    assert set(rec) == {"index", "label", "bbox", "offset"} and rec["index"] == 3
    ds = wmnist.load_split(d)
    _, labels = wmnist.read_idx(mnist / "train-images-idx3-ubyte", mnist / "train-labels-idx1-ubyte")
    assert np.array_equal(np.bincount(ds.labels, minlength=10), np.bincount(labels, minlength=10))
    assert ((ds.bboxes >= 0) & (ds.bboxes <= 63)).all()
    for i in range(len(ds)):
        s = ds.sample(i)
        assert wmnist.tight_bbox(s.fg_mask) == s.bbox
    masks = ds.fg_masks(np.arange(5))
    assert all(np.array_equal(masks[i], ds.sample(i).fg_mask) for i in range(5))
    x = ds.batch([0, 1])
    assert x.shape == (2, 1, 64, 64) and x.dtype == np.float32 and x.max() <= 1.0


def test_load_rejects_truncated_images(tmp_path):
    mnist = fake_mnist(tmp_path / "m", n_train=4, n_test=2)
    d = wmnist.build_wmnist(mnist, tmp_path / "w")["test"]
    (d / "images.bin").write_bytes((d / "images.bin").read_bytes()[:-1])
    with pytest.raises(ValueError):
        wmnist.load_split(d)


def test_build_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        wmnist.build_wmnist(tmp_path / "nothing", tmp_path / "w")


def test_build_limit(tmp_path):
    mnist = fake_mnist(tmp_path / "m", n_train=20, n_test=10)
    dirs = wmnist.build_wmnist(mnist, tmp_path / "w", limit=7)
    assert len(wmnist.load_split(dirs["train"])) == 7
    assert wmnist.split_digest(dirs["train"]) == wmnist.split_digest(dirs["train"])
