import os
import struct
from pathlib import Path

import numpy as np
import pytest

from sft import core, models
from sft.models import Conv, Flatten, Linear, Network, Pool, ReLU

MNIST_DIR = Path(os.environ.get("SFT_MNIST_DIR", "/root/data/mnist"))
RUN_DIR = Path(os.environ.get("SFT_RUN_DIR", "/root/work/runs"))


def toy_net(rng, n_conv=None, *, channels=None, size=None, num_classes=None, pool=None, dtype=np.float32):
    """Random small conv net: up to two conv(+relu, optional pool) blocks, flatten, linear."""
    n_conv = int(rng.integers(1, 3)) if n_conv is None else n_conv
    c = int(rng.integers(1, 3)) if channels is None else channels
    s = int(rng.integers(5, 9)) if size is None else size
    k_cls = int(rng.integers(2, 5)) if num_classes is None else num_classes
    layers, params = [], {}
    shape = (c, s, s)
    for i in range(n_conv):
        k = int(rng.integers(2, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        if (shape[1] + 2 * pad - k) // stride + 1 < 2:
            stride, pad = 1, 1
        c_out = int(rng.integers(1, 4))
        w, b = f"conv{i + 1}.weight", f"conv{i + 1}.bias"
        params[w] = core.Parameter(w, rng.normal(0, 0.7, (c_out, shape[0], k, k)).astype(dtype))
        params[b] = core.Parameter(b, rng.normal(0, 0.1, c_out).astype(dtype))
        layers += [Conv(w, b, stride, pad), ReLU()]
        side = (shape[1] + 2 * pad - k) // stride + 1
        shape = (c_out, side, side)
        use_pool = (rng.random() < 0.5) if pool is None else pool
        if use_pool and side >= 4:
            layers.append(Pool(2, 2))
            shape = (c_out, side // 2, side // 2)
    layers.append(Flatten())
    f = int(np.prod(shape))
    params["fc.weight"] = core.Parameter("fc.weight", rng.normal(0, 0.7, (k_cls, f)).astype(dtype))
    params["fc.bias"] = core.Parameter("fc.bias", rng.normal(0, 0.1, k_cls).astype(dtype))
    layers.append(Linear("fc.weight", "fc.bias"))
    return Network("toy", layers, params, k_cls, (c, s, s))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_idx(path, array, magic):
    array = np.asarray(array, np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def fake_mnist(directory, n_train=40, n_test=20, seed=0):
    """Write four small IDX files with blob-shaped 'digits'."""
    rng = np.random.default_rng(seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
             "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}
    for split, n in (("train", n_train), ("test", n_test)):
        imgs = np.zeros((n, 28, 28), np.uint8)
        for i in range(n):
            y0, x0 = rng.integers(3, 10, size=2)
            h, w = rng.integers(8, 16, size=2)
            imgs[i, y0:y0 + h, x0:x0 + w] = rng.integers(1, 256, size=(h, w))
        write_idx(directory / names[split][0], imgs, 0x803)
        write_idx(directory / names[split][1], rng.integers(0, 10, n), 0x801)
    return directory


@pytest.fixture
def mnist_dir(tmp_path):
    return fake_mnist(tmp_path / "mnist")


@pytest.fixture(scope="session")
def small_splits(tmp_path_factory):
    from sft import wmnist

    root = tmp_path_factory.mktemp("wm")
    fake_mnist(root / "mnist", n_train=64, n_test=32)
    wmnist.build_wmnist(root / "mnist", root / "wmnist")
    return wmnist.load_split(root / "wmnist" / "train"), wmnist.load_split(root / "wmnist" / "test")


def lenet(seed=0):
    return models.build_lenet5_64(seed=seed)
