"""Gated second forward pass, the two-term loss, and the training loops.

A fine-tune step runs a plain forward pass, a TD pass seeded with the
ground-truth labels, then a second forward pass whose layer inputs are
scaled by the (normalized, constant) gating. Both tapes are
back-propagated into the same parameter gradients before one SGD step.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import core, td
from .models import Network
from .wmnist import WmnistSplit

LOG_FIELDS = ["phase", "epoch", "loss_F", "loss_S", "loss_T", "clean_cls_acc", "clean_loc_acc", "wall_seconds"]
GATE_SITES = ("parametric", "all")


@dataclass(frozen=True)
class GateFactors:
    alpha_gate: float = 1.0
    beta_gate: float = 1.0

    def __post_init__(self):
        if self.alpha_gate < 0 or self.beta_gate < 0:
            raise ValueError(f"gate factors must be >= 0, got {self.alpha_gate}, {self.beta_gate}")


@dataclass(frozen=True)
class LossWeights:
    alpha_loss: float = 1.0

    def __post_init__(self):
        if self.alpha_loss < 0:
            raise ValueError(f"alpha_loss must be >= 0, got {self.alpha_loss}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 15
    seed: int = 0
    gate: GateFactors = field(default_factory=GateFactors)
    loss: LossWeights = field(default_factory=LossWeights)
    deterministic: bool = True
    gate_sites: str = "parametric"
    selection: td.SelectionParams = field(default_factory=td.SelectionParams)
    eval_samples: int = 0  # test samples scored after each epoch (0 = skip)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.gate_sites not in GATE_SITES:
            raise ValueError(f"gate_sites must be one of {GATE_SITES}, got {self.gate_sites!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def normalize_gating(g: np.ndarray) -> np.ndarray:
    """Per-sample min-max rescale to [0, 1]; constant samples map to zeros."""
    g = np.asarray(g, dtype=np.float64)
    flat = g.reshape(g.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    hi = flat.max(axis=1, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (flat - lo) / safe, 0.0)
    return out.reshape(g.shape)


def gate_sites(net: Network, mode: str = "parametric") -> list:
    """Layer indices whose input gets gated.

    "parametric" gates the input of every conv/linear layer. "all" gates
    the input of every layer except flatten (whose units are gated again,
    reshaped, at the next layer).
    """
    if mode == "parametric":
        return [i for i, l in enumerate(net.layers) if l.kind in ("conv", "linear")]
    if mode == "all":
        return [i for i, l in enumerate(net.layers) if l.kind != "flatten"]
    raise ValueError(f"unknown gate site mode {mode!r}")


def gate_multipliers(net: Network, gating, f: GateFactors, sites, dtype=np.float32, normalized: bool = False) -> list:
    """alpha_gate * g~ + beta_gate at each gated layer input, None elsewhere."""
    mult = [None] * len(net.layers)
    for i in sites:
        g = np.asarray(gating[i]) if normalized else normalize_gating(gating[i])
        mult[i] = (f.alpha_gate * g + f.beta_gate).astype(dtype)
    return mult


def gated_forward(net: Network, x, gating, f: GateFactors = GateFactors(), *, sites: str | list = "parametric",
                  normalized: bool = False, tape: core.Tape | None = None):
    """Second forward pass with t_i = alpha*(h_i * g~_i) + beta*h_i at the gated inputs.

    ``gating`` is the list g_0..g_L from the TD pass (raw gating, or g~
    directly when ``normalized``). Returns (logits tensor, tape).
    """
    x = np.asarray(x)
    if len(gating) < len(net.layers):
        raise core.ShapeError(f"gating has {len(gating)} entries, network has {len(net.layers)} layers")
    idx = gate_sites(net, sites) if isinstance(sites, str) else list(sites)
    shapes = net.layer_shapes(x.shape[1:])
    for i in idx:
        want = (x.shape[0], *shapes[i])
        if np.shape(gating[i]) != want:
            raise core.ShapeError(f"gating[{i}] has shape {np.shape(gating[i])}, layer input is {want}")
    tape = tape if tape is not None else core.Tape()
    mult = gate_multipliers(net, gating, f, idx, dtype=x.dtype, normalized=normalized)
    logits, _ = net.forward(x, tape, multipliers=mult)
    return logits, tape


def total_loss(p, p_tilde, y, w: LossWeights = LossWeights()) -> float:
    """mean cross-entropy of p plus alpha_loss times that of p_tilde."""
    y = np.asarray(y, dtype=np.int64)
    rows = np.arange(y.size)
    lf = -np.log(np.asarray(p, np.float64)[rows, y]).mean()
    ls = -np.log(np.asarray(p_tilde, np.float64)[rows, y]).mean()
    return float(lf + w.alpha_loss * ls)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def plain_step(net: Network, x, y, cfg: TrainConfig) -> dict:
    """One SGD step on the single-pass cross-entropy."""
    logits, _ = net.forward(x)
    loss, _ = core.softmax_xent(logits, y)
    core.backward(loss)
    core.sgd_step(net.parameters, cfg.lr, cfg.momentum, cfg.weight_decay)
    lf = float(loss.data)
    return {"loss_F": lf, "loss_S": float("nan"), "loss_T": lf}


def finetune_step(net: Network, x, y, cfg: TrainConfig) -> dict:
    """First pass, TD from labels, gated pass, backward through both tapes, one SGD step."""
    logits, trace = net.forward(x)
    loss_f, _ = core.softmax_xent(logits, y)
    d = td.init_signals(y, net.num_classes)
    gating = td.td_pass(net, trace, d, cfg.selection)
    logits2, _ = gated_forward(net, x, gating, cfg.gate, sites=cfg.gate_sites)
    loss_s, _ = core.softmax_xent(logits2, y)
    core.backward(loss_f)
    core.backward(loss_s, scale=cfg.loss.alpha_loss)
    core.sgd_step(net.parameters, cfg.lr, cfg.momentum, cfg.weight_decay)
    lf, ls = float(loss_f.data), float(loss_s.data)
    return {"loss_F": lf, "loss_S": ls, "loss_T": lf + cfg.loss.alpha_loss * ls}


def run_epoch(net: Network, data: WmnistSplit, cfg: TrainConfig, phase: str, step, eval_split=None,
              epoch: int = 1, progress=None) -> dict:
    """One pass over ``data`` in an (seed, epoch)-keyed order; returns the log row."""
    from .evaluation import evaluate

    t0 = time.perf_counter()
    sums = {"loss_F": 0.0, "loss_S": 0.0, "loss_T": 0.0}
    seen = 0
    n = len(data)
    for b in _batches(n, cfg.batch_size, cfg.seed, epoch):
        out = step(net, data.batch(b), data.labels[b], cfg)
        for k in sums:
            sums[k] += out[k] * b.size
        seen += b.size
        if progress is not None:
            progress(phase, epoch, seen, n, out)
    row = {"phase": phase, "epoch": epoch}
    row.update({k: v / max(seen, 1) for k, v in sums.items()})
    if eval_split is not None and cfg.eval_samples > 0:
        idx = np.arange(min(cfg.eval_samples, len(eval_split)))
        res = evaluate(net, eval_split, None, td_params=cfg.selection, indices=idx)
        row["clean_cls_acc"], row["clean_loc_acc"] = res.cls_acc, res.loc_acc
    else:
        row["clean_cls_acc"] = row["clean_loc_acc"] = float("nan")
    row["wall_seconds"] = time.perf_counter() - t0
    return row


def _run(net, data, cfg, phase, step, eval_split, progress) -> list:
    return [run_epoch(net, data, cfg, phase, step, eval_split, e, progress) for e in range(1, cfg.epochs + 1)]


def pretrain(net: Network, data: WmnistSplit, cfg: TrainConfig, eval_split: WmnistSplit | None = None,
             progress=None) -> tuple[Network, list]:
    """Single-pass SGD on the cross-entropy; returns (net, per-epoch log)."""
    return net, _run(net, data, cfg, "pretrain", plain_step, eval_split, progress)


def finetune(net: Network, data: WmnistSplit, cfg: TrainConfig, eval_split: WmnistSplit | None = None,
             progress=None) -> tuple[Network, list]:
    """Selective fine-tuning epochs; returns (net, per-epoch log)."""
    return net, _run(net, data, cfg, "finetune", finetune_step, eval_split, progress)


def write_log(rows: list, path, append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})
    return path
