"""Network definitions for 1x64x64 inputs, forward traces and checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core
from .core import Parameter, Tape, Tensor

INPUT_SHAPE = (1, 64, 64)

ARCH_IDS = {"lenet5": 1, "alexnet_s": 2}
ARCH_NAMES = {v: k for k, v in ARCH_IDS.items()}

CKPT_MAGIC = b"STFT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class Conv:
    weight: str
    bias: str
    stride: int = 1
    pad: int = 0
    kind = "conv"


@dataclass(frozen=True)
class Pool:
    k: int = 2
    stride: int = 2
    kind = "pool"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Linear:
    weight: str
    bias: str
    kind = "linear"


@dataclass
class ForwardTrace:
    """Hidden activities h_0..h_L of one pass plus the pooling winners.

    ``pool_argmax`` maps a layer index to the flat index (into that layer's
    input tensor) of each output unit's window winner.
    """

    layer_outputs: list
    pool_argmax: dict = field(default_factory=dict)

    @property
    def logits(self) -> np.ndarray:
        return self.layer_outputs[-1]


@dataclass
class Network:
    arch: str
    layers: list
    params: dict
    num_classes: int
    input_shape: tuple = INPUT_SHAPE

    @property
    def parameters(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def forward(self, x, tape: Tape | None = None, multipliers=None):
        """Run the network on a batch.

        ``multipliers[i]``, when given and not None, is a constant that
        multiplies the layer-i input h_i before layer i is applied; this is
        how the gated pass is expressed. Returns (logits tensor, trace).
        """
        tape = tape if tape is not None else Tape()
        h = x if isinstance(x, Tensor) else tape.constant(np.asarray(x))
        outputs = [h.data]
        argmax = {}
        for i, layer in enumerate(self.layers):
            if multipliers is not None and multipliers[i] is not None:
                h = core.mul_const(h, multipliers[i])
            h, amax = _apply(self, layer, h)
            if amax is not None:
                argmax[i] = amax
            outputs.append(h.data)
        return h, ForwardTrace(outputs, argmax)

    def predict(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(x)
        return logits.data

    def copy(self, dtype=None) -> "Network":
        params = {}
        for name, p in self.params.items():
            q = Parameter(name, p.value.astype(dtype or p.value.dtype, copy=True))
            q.momentum_buffer[...] = p.momentum_buffer
            params[name] = q
        return Network(self.arch, list(self.layers), params, self.num_classes, self.input_shape)

    def layer_shapes(self, input_shape=None) -> list:
        return infer_shapes(self, input_shape or self.input_shape)


def _apply(net: Network, layer, h: Tensor):
    kind = layer.kind
    if kind == "conv":
        return core.conv2d(h, net.params[layer.weight], net.params[layer.bias], layer.stride, layer.pad), None
    if kind == "pool":
        return core.maxpool2d(h, layer.k, layer.stride)
    if kind == "relu":
        return core.relu(h), None
    if kind == "flatten":
        return core.flatten(h), None
    if kind == "linear":
        return core.linear(h, net.params[layer.weight], net.params[layer.bias]), None
    raise ValueError(f"unknown layer kind {kind!r}")


def infer_shapes(net: Network, input_shape) -> list:
    """Per-layer output shapes (without batch) by the size formulas alone."""
    shape = tuple(input_shape)
    shapes = [shape]
    for layer in net.layers:
        if layer.kind == "conv":
            o, c, k, _ = net.params[layer.weight].shape
            if shape[0] != c:
                raise core.ShapeError(f"conv expects {c} channels, got shape {shape}")
            shape = (o,) + tuple(core.conv_output_size(n, k, layer.stride, layer.pad) for n in shape[1:])
        elif layer.kind == "pool":
            if min(shape[1:]) < layer.k:
                raise core.ShapeError(f"pool window {layer.k} larger than {shape}")
            shape = (shape[0],) + tuple((n - layer.k) // layer.stride + 1 for n in shape[1:])
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "linear":
            o, f = net.params[layer.weight].shape
            if shape != (f,):
                raise core.ShapeError(f"linear expects ({f},), got {shape}")
            shape = (o,)
        if min(shape) < 1:
            raise core.ShapeError(f"layer {layer} produces empty shape {shape}")
        shapes.append(shape)
    return shapes


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.layers = []
        self.params = {}
        self._n = 0

    def conv(self, c_in, c_out, k, stride=1, pad=0):
        self._n += 1
        w, b = f"conv{self._n}.weight", f"conv{self._n}.bias"
        self.params[w] = Parameter(w, core.glorot_uniform(self.rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k))
        self.params[b] = Parameter(b, np.zeros(c_out, np.float32))
        self.layers.append(Conv(w, b, stride, pad))

    def linear(self, f_in, f_out, name):
        w, b = f"{name}.weight", f"{name}.bias"
        self.params[w] = Parameter(w, core.glorot_uniform(self.rng, (f_out, f_in), f_in, f_out))
        self.params[b] = Parameter(b, np.zeros(f_out, np.float32))
        self.layers.append(Linear(w, b))

    def add(self, layer):
        self.layers.append(layer)


def build_lenet5_64(num_classes: int = 10, seed: int = 0) -> Network:
    """LeNet-5 with the classic 6/16/120 channel plan resized for 64x64 input.

    1x64x64 -> 6x60x60 -> 6x30x30 -> 16x26x26 -> 16x13x13 -> 120x9x9
    -> 9720 -> 84 -> K
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    b = _Builder(seed)
    b.conv(1, 6, 5); b.add(ReLU()); b.add(Pool(2, 2))
    b.conv(6, 16, 5); b.add(ReLU()); b.add(Pool(2, 2))
    b.conv(16, 120, 5); b.add(ReLU()); b.add(Flatten())
    b.linear(120 * 9 * 9, 84, "fc1"); b.add(ReLU())
    b.linear(84, num_classes, "fc2")
    return Network("lenet5", b.layers, b.params, num_classes)


def build_alexnet_s(num_classes: int = 10, seed: int = 0) -> Network:
    """Reduced AlexNet-style network for 1x64x64 input.

    conv5x5/2 (32) -> pool -> conv3x3 (64) -> pool -> conv3x3 (96)
    -> conv3x3 (96) -> conv3x3 (64) -> pool -> fc256 -> fc256 -> K
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    b = _Builder(seed)
    b.conv(1, 32, 5, stride=2); b.add(ReLU()); b.add(Pool(2, 2))     # 30 -> 15
    b.conv(32, 64, 3, pad=1); b.add(ReLU()); b.add(Pool(2, 2))       # 15 -> 7
    b.conv(64, 96, 3, pad=1); b.add(ReLU())
    b.conv(96, 96, 3, pad=1); b.add(ReLU())
    b.conv(96, 64, 3, pad=1); b.add(ReLU()); b.add(Pool(2, 2))       # 7 -> 3
    b.add(Flatten())
    b.linear(64 * 3 * 3, 256, "fc1"); b.add(ReLU())
    b.linear(256, 256, "fc2"); b.add(ReLU())
    b.linear(256, num_classes, "fc3")
    return Network("alexnet_s", b.layers, b.params, num_classes)


BUILDERS = {"lenet5": build_lenet5_64, "alexnet_s": build_alexnet_s}


def build(arch: str, num_classes: int = 10, seed: int = 0) -> Network:
    try:
        return BUILDERS[arch](num_classes, seed)
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(BUILDERS)}") from None


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or unsupported version."""


class CheckpointTruncatedError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


def save_checkpoint(net: Network, path, *, seed=None, epochs=None, phase=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [CKPT_MAGIC, struct.pack("<IBI", CKPT_VERSION, ARCH_IDS[net.arch], len(net.params))]
    for name, p in net.params.items():
        raw = name.encode("utf-8")
        value = np.ascontiguousarray(p.value, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    path.write_bytes(b"".join(chunks))
    meta = {
        "seed": seed,
        "epochs": epochs,
        "phase": phase,
        "arch": net.arch,
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, expected_arch: str | None = None, num_classes: int | None = None) -> Network:
    """Read a checkpoint and rebuild its network.

    Raises CheckpointFormatError, CheckpointTruncatedError or
    ArchitectureMismatchError.
    """
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    version, arch_id, count = r.unpack("<IBI", "header")
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if arch_id not in ARCH_NAMES:
        raise ArchitectureMismatchError(f"unknown architecture id {arch_id}")
    arch = ARCH_NAMES[arch_id]
    if expected_arch is not None and arch != expected_arch:
        raise ArchitectureMismatchError(f"checkpoint holds {arch!r}, expected {expected_arch!r}")
    values = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of parameter #{i}")
        name = r.take(n, f"name of parameter #{i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * size, f"values of {name}")
        values[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{len(r.data) - r.pos} trailing bytes after last parameter")
    if num_classes is None:
        last = [v for k, v in values.items() if k.endswith(".bias")][-1]
        num_classes = last.shape[0]
    net = build(arch, num_classes)
    if set(values) != set(net.params):
        raise ArchitectureMismatchError(
            f"parameter names {sorted(values)} do not match architecture {arch!r}"
        )
    for name, v in values.items():
        if v.shape != net.params[name].shape:
            raise ArchitectureMismatchError(f"{name}: shape {v.shape} != expected {net.params[name].shape}")
        net.params[name].value[...] = v
    return net


def read_checkpoint_meta(path) -> dict:
    return json.loads(Path(str(path) + ".meta.json").read_text())
