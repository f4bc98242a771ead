"""Dense tensor ops, a reverse-mode tape and SGD with momentum.

Values live on a :class:`Tape` as numpy arrays. Every differentiable op
records a node (op tag, input ids, output id, saved activations) so the
tape can be replayed forward or walked backward. Ops follow the dtype of
their inputs, which is how the float64 replay mode used by gradient
checks works: cast the parameters, run the same code.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    momentum_buffer: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.momentum_buffer = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


class Node(NamedTuple):
    op: str
    inputs: tuple
    output: int
    attrs: dict
    saved: object


class Tensor:
    """Handle to one value recorded on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def data(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(id={self.index}, shape={self.shape}, dtype={self.data.dtype})"


# op tag -> (forward(*arrays, **attrs) -> (out, saved), backward(grad, saved, *arrays, **attrs) -> grads)
_OPS: dict[str, tuple[Callable, Callable]] = {}
# ops whose backward also takes ``needs``, a per-input flag saying whether
# that input leads to a parameter, so unused input gradients are skipped
_NEEDS_AWARE = {"conv2d"}


def _register(name):
    def wrap(pair_factory):
        _OPS[name] = pair_factory()
        return pair_factory

    return wrap


class Tape:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.nodes: list[Node] = []
        self.leaf_params: dict[int, Parameter] = {}
        self.requires: set[int] = set()
        self._param_ids: dict[int, int] = {}

    def __len__(self):
        return len(self.nodes)

    def constant(self, array) -> Tensor:
        self.values.append(np.asarray(array))
        return Tensor(self, len(self.values) - 1)

    def watch(self, param: Parameter) -> Tensor:
        key = id(param)
        if key not in self._param_ids:
            self.values.append(param.value)
            idx = len(self.values) - 1
            self._param_ids[key] = idx
            self.leaf_params[idx] = param
            self.requires.add(idx)
        return Tensor(self, self._param_ids[key])

    def _as_tensor(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise TapeError("tensor belongs to a different tape")
            return x
        if isinstance(x, Parameter):
            return self.watch(x)
        return self.constant(x)

    def record(self, op: str, inputs, **attrs) -> Tensor:
        ins = tuple(self._as_tensor(x).index for x in inputs)
        forward, _ = _OPS[op]
        out, saved = forward(*(self.values[i] for i in ins), **attrs)
        self.values.append(out)
        idx = len(self.values) - 1
        self.nodes.append(Node(op, ins, idx, attrs, saved))
        if any(i in self.requires for i in ins):
            self.requires.add(idx)
        return Tensor(self, idx)

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from the leaves."""
        produced = {node.output for node in self.nodes}
        values = [None if i in produced else v for i, v in enumerate(self.values)]
        for node in self.nodes:
            for i in node.inputs:
                if values[i] is None:
                    raise TapeError(f"node {node.op} consumes id {i} before it is produced")
            out, _ = _OPS[node.op][0](*(values[i] for i in node.inputs), **node.attrs)
            values[node.output] = out
        return values


def backward(loss: Tensor, scale: float = 1.0) -> None:
    """Accumulate d(scale * loss)/d(param) into every watched parameter's grad."""
    tape = loss.tape
    if not tape.nodes:
        raise TapeError("backward called on an empty tape")
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.index: np.full_like(loss.data, scale)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        _, bwd = _OPS[node.op]
        attrs = node.attrs
        if node.op in _NEEDS_AWARE:
            attrs = {**attrs, "needs": tuple(i in tape.requires for i in node.inputs)}
        in_grads = bwd(g, node.saved, *(tape.values[i] for i in node.inputs), **attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or i not in tape.requires:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    for idx, param in tape.leaf_params.items():
        if idx in grads:
            param.grad += grads[idx].astype(param.grad.dtype, copy=False)


# ---------------------------------------------------------------------------
# convolution helpers


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, C, H, W) -> view (N, C, Ho, Wo, k, k)."""
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


@njit(cache=True)
def _col2im(dcols, dxp, stride):
    """Scatter-add (N, Ho, Wo, C, k, k) window gradients into padded dx."""
    n, ho, wo, c, k, _ = dcols.shape
    for i in range(n):
        for y in range(ho):
            for x in range(wo):
                for ch in range(c):
                    for ky in range(k):
                        for kx in range(k):
                            dxp[i, ch, y * stride + ky, x * stride + kx] += dcols[i, y, x, ch, ky, kx]


@_register("conv2d")
def _conv2d_pair():
    def forward(x, w, b, stride, pad):
        n, c, h, wd = x.shape
        o, ci, k, k2 = w.shape
        xp = _pad(x, pad)
        win = _windows(xp, k, stride)  # N C Ho Wo k k
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = cols @ w.reshape(o, -1).T + b
        out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), cols

    def backward(g, cols, x, w, b, stride, pad, needs=(True, True, True)):
        n, c, h, wd = x.shape
        o, _, k, _ = w.shape
        ho, wo = g.shape[2], g.shape[3]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(w.shape)
        db = g2.sum(axis=0)
        if not needs[0]:
            return None, dw, db
        dcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
        _col2im(dcols, dxp, stride)
        dx = np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd]) if pad else dxp
        return dx, dw, db

    return forward, backward


@_register("maxpool2d")
def _maxpool_pair():
    def forward(x, k, stride):
        n, c, h, w = x.shape
        win = _windows(x, k, stride)
        ho, wo = win.shape[2], win.shape[3]
        flat = win.reshape(n, c, ho, wo, k * k)
        local = flat.argmax(axis=-1)  # first max -> lowest flat index
        out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
        ky, kx = np.divmod(local, k)
        rows = np.arange(ho)[:, None] * stride + ky
        cols = np.arange(wo)[None, :] * stride + kx
        base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
        argmax = base + rows * w + cols
        return np.ascontiguousarray(out), argmax

    def backward(g, argmax, x, k, stride):
        dx = np.bincount(argmax.ravel(), weights=g.ravel(), minlength=x.size)
        return (dx.reshape(x.shape).astype(g.dtype, copy=False),)

    return forward, backward


@_register("relu")
def _relu_pair():
    def forward(x):
        return np.maximum(x, 0), None

    def backward(g, saved, x):
        return (g * (x > 0),)

    return forward, backward


@_register("linear")
def _linear_pair():
    def forward(x, w, b):
        return x @ w.T + b, None

    def backward(g, saved, x, w, b):
        return g @ w, g.T @ x, g.sum(axis=0)

    return forward, backward


@_register("flatten")
def _flatten_pair():
    def forward(x):
        return x.reshape(x.shape[0], -1), None

    def backward(g, saved, x):
        return (g.reshape(x.shape),)

    return forward, backward


@_register("mul_const")
def _mul_const_pair():
    # second input is a constant; no gradient flows into it
    def forward(x, m):
        return x * m, None

    def backward(g, saved, x, m):
        return g * m, None

    return forward, backward


@_register("sum")
def _sum_pair():
    def forward(x):
        return np.asarray(x.sum(), dtype=x.dtype), None

    def backward(g, saved, x):
        return (np.broadcast_to(g, x.shape).copy(),)

    return forward, backward


@_register("sq_error")
def _sq_error_pair():
    def forward(x, target):
        d = x - target
        return np.asarray(0.5 * (d * d).sum(), dtype=x.dtype), d

    def backward(g, d, x, target):
        return g * d, None

    return forward, backward


@_register("softmax_xent")
def _softmax_xent_pair():
    def forward(logits, labels):
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e.sum(axis=1, keepdims=True)
        probs = e / s
        logp = z - np.log(s)
        n = logits.shape[0]
        per_sample = -logp[np.arange(n), labels]
        return np.asarray(per_sample.mean(), dtype=logits.dtype), (probs, per_sample)

    def backward(g, saved, logits, labels):
        probs, _ = saved
        n = logits.shape[0]
        d = probs.copy()
        d[np.arange(n), labels] -= 1
        return (d * (g / n),)

    return forward, backward


# ---------------------------------------------------------------------------
# public op surface


def conv2d(x: Tensor, weight: Parameter, bias: Parameter, stride: int = 1, pad: int = 0) -> Tensor:
    xs, ws = x.shape, weight.shape
    if len(xs) != 4 or len(ws) != 4 or xs[1] != ws[1]:
        raise ShapeError(f"conv2d: input shape {xs} incompatible with weight shape {ws}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if xs[2] + 2 * pad < ws[2] or xs[3] + 2 * pad < ws[3]:
        raise ShapeError(f"conv2d: kernel {ws} larger than padded input {xs}")
    return x.tape.record("conv2d", (x, weight, bias), stride=stride, pad=pad)


def maxpool2d(x: Tensor, k: int, stride: int) -> tuple[Tensor, np.ndarray]:
    """Max pooling without padding; returns the output and flat input argmax per unit."""
    if k < 1 or stride < 1:
        raise ShapeError(f"maxpool2d: need k >= 1 and stride >= 1, got k={k} stride={stride}")
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"maxpool2d: window {k}x{k} larger than input {x.shape}")
    out = x.tape.record("maxpool2d", (x,), k=k, stride=stride)
    return out, x.tape.nodes[-1].saved


def relu(x: Tensor) -> Tensor:
    return x.tape.record("relu", (x,))


def linear(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    return x.tape.record("linear", (x, weight, bias))


def flatten(x: Tensor) -> Tensor:
    return x.tape.record("flatten", (x,))


def mul_const(x: Tensor, m: np.ndarray) -> Tensor:
    """Elementwise product with a constant; the constant receives no gradient."""
    return x.tape.record("mul_const", (x, np.asarray(m, dtype=x.data.dtype)))


def tensor_sum(x) -> Tensor:
    tape = x.tape if isinstance(x, Tensor) else None
    if tape is None:
        raise TapeError("tensor_sum needs a tensor on a tape")
    return tape.record("sum", (x,))


def sq_error(x: Tensor, target) -> Tensor:
    """0.5 * sum((x - target)^2)."""
    return x.tape.record("sq_error", (x, np.asarray(target, dtype=x.data.dtype)))


def softmax_xent(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch; also returns the softmax rows."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent: {labels.shape[0] if labels.ndim else 0} labels for batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_xent: labels must lie in [0, {k})")
    loss = logits.tape.record("softmax_xent", (logits,), labels=labels)
    probs, _ = logits.tape.nodes[-1].saved
    return loss, probs


def per_sample_xent(loss: Tensor) -> np.ndarray:
    """Per-sample cross-entropy values saved by the softmax_xent node producing `loss`."""
    for node in reversed(loss.tape.nodes):
        if node.output == loss.index and node.op == "softmax_xent":
            return node.saved[1]
    raise TapeError("tensor was not produced by softmax_xent")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# optimizer and init


def sgd_step(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    for p in params:
        buf = p.momentum_buffer
        buf *= p.value.dtype.type(momentum)
        buf += p.grad
        if weight_decay:
            buf += p.value.dtype.type(weight_decay) * p.value
        p.value -= p.value.dtype.type(lr) * buf
        p.zero_grad()


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
