"""Classification, IoU localization and noise-robustness evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import td
from .models import Network
from .noise import NoiseSpec, perturb_batch
from .wmnist import WmnistSplit

SWEEP_FIELDS = ["model", "family", "level", "metric", "clean_acc", "noisy_acc", "robustness", "n"]
DEFAULT_LEVELS = tuple(range(0, 251, 25))
METRICS = ("cls", "loc", "loc_gt")  # loc_gt: ground-truth TD init, diagnostic only


def iou(box_a, box_b) -> float:
    """IoU of two inclusive integer pixel boxes (x0, y0, x1, y1)."""
    for b in (box_a, box_b):
        if b[2] < b[0] or b[3] < b[1]:
            raise ValueError(f"degenerate box {tuple(b)}")
    ix = min(box_a[2], box_b[2]) - max(box_a[0], box_b[0]) + 1
    iy = min(box_a[3], box_b[3]) - max(box_a[1], box_b[1]) + 1
    inter = max(ix, 0) * max(iy, 0)
    area_a = (box_a[2] - box_a[0] + 1) * (box_a[3] - box_a[1] + 1)
    area_b = (box_b[2] - box_b[0] + 1) * (box_b[3] - box_b[1] + 1)
    return inter / (area_a + area_b - inter)


def robustness(noisy_acc: float, clean_acc: float) -> float:
    """noisy / clean accuracy; NaN when the clean accuracy is zero."""
    if clean_acc <= 0:
        return math.nan
    return noisy_acc / clean_acc


@dataclass
class EvalResult:
    predictions: np.ndarray
    correct: np.ndarray
    boxes: list
    hits: np.ndarray

    @property
    def cls_acc(self) -> float:
        return float(self.correct.mean()) if self.correct.size else math.nan

    @property
    def loc_acc(self) -> float:
        return float(self.hits.mean()) if self.hits.size else math.nan


def evaluate(net: Network, split: WmnistSplit, noise: NoiseSpec | None = None, *,
             localize: bool = True, td_params: td.SelectionParams = td.SelectionParams(),
             init_mode: str = "predicted", batch_size: int = 64, indices=None) -> EvalResult:
    """Per-sample classification and (optionally) localization outcomes.

    Noise streams are keyed by the sample's index in ``split`` so every
    network sees the same perturbed images.
    """
    if init_mode not in ("predicted", "ground_truth"):
        raise ValueError(f"init_mode must be 'predicted' or 'ground_truth', got {init_mode!r}")
    indices = np.arange(len(split)) if indices is None else np.asarray(indices)
    preds, boxes, hits = [], [], []
    for start in range(0, indices.size, batch_size):
        idx = indices[start:start + batch_size]
        images = split.images[idx]
        masks = split.fg_masks(idx) if noise is not None and noise.level > 0 else None
        pixels = perturb_batch(images, masks, noise, idx)
        x = (pixels / np.float32(255.0))[:, None]
        logits, trace = net.forward(x)
        pred = logits.data.argmax(axis=1)
        preds.append(pred)
        if not localize:
            continue
        init = pred if init_mode == "predicted" else split.labels[idx]
        gating = td.td_pass(net, trace, td.init_signals(init, net.num_classes), td_params)
        for j, g0 in enumerate(gating[0]):
            box = td.extract_bbox(g0)
            boxes.append(box)
            hits.append(box is not None and iou(box, split.bboxes[idx[j]]) >= 0.5)
    preds = np.concatenate(preds) if preds else np.zeros(0, np.int64)
    return EvalResult(preds, preds == split.labels[indices], boxes, np.asarray(hits, bool))


def classify_eval(net: Network, split: WmnistSplit, noise: NoiseSpec | None = None, **kw) -> float:
    return evaluate(net, split, noise, localize=False, **kw).cls_acc


def localize_eval(net: Network, split: WmnistSplit, td_params: td.SelectionParams = td.SelectionParams(),
                  init_mode: str = "predicted", noise: NoiseSpec | None = None, **kw) -> float:
    return evaluate(net, split, noise, td_params=td_params, init_mode=init_mode, **kw).loc_acc


@dataclass
class MetricsReport:
    model: str
    dataset: str
    family: str
    level: float
    cls_acc: float
    loc_acc: float
    cls_robustness: float
    loc_robustness: float
    n: int


def noise_sweep(nets: dict, split: WmnistSplit, family: str, levels=DEFAULT_LEVELS, *, seed: int = 0,
                td_params: td.SelectionParams = td.SelectionParams(), indices=None,
                batch_size: int = 64) -> list:
    """Evaluate every named network at every noise level.

    ``nets`` maps a model tag (e.g. "ref", "sft") to a network. Returns
    MetricsReports in (model, level) order.
    """
    reports = []
    for tag, net in nets.items():
        clean = None
        rows = []
        for level in levels:
            spec = NoiseSpec(family, level, seed)
            res = evaluate(net, split, spec, td_params=td_params, indices=indices, batch_size=batch_size)
            if clean is None:
                clean = res if level == 0 else evaluate(net, split, None, td_params=td_params,
                                                        indices=indices, batch_size=batch_size)
            rows.append(MetricsReport(
                tag, split.name, family, level, res.cls_acc, res.loc_acc,
                robustness(res.cls_acc, clean.cls_acc), robustness(res.loc_acc, clean.loc_acc),
                int(res.correct.size),
            ))
        reports.extend(rows)
    return reports


def _clean_lookup(reports):
    clean = {}
    for r in reports:
        if r.level == 0:
            clean[r.model] = r
    return clean


def sweep_rows(reports: list) -> list:
    """Flatten reports into sweep-CSV rows (one per model, level and metric)."""
    rows = []
    clean = _clean_lookup(reports)
    for r in reports:
        for metric in ("cls", "loc"):
            base = clean.get(r.model)
            rows.append({
                "model": r.model,
                "family": r.family,
                "level": _fmt_level(r.level),
                "metric": metric,
                "clean_acc": _fmt(getattr(base, f"{metric}_acc") if base else math.nan),
                "noisy_acc": _fmt(getattr(r, f"{metric}_acc")),
                "robustness": _fmt(getattr(r, f"{metric}_robustness")),
                "n": r.n,
            })
    return rows


def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def _fmt_level(level) -> str:
    return str(int(level)) if float(level).is_integer() else repr(float(level))


def write_rows(rows: list, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def write_sweep_csv(reports: list, path) -> Path:
    return write_rows(sweep_rows(reports), path)


def read_sweep_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SWEEP_FIELDS:
            raise ValueError(f"{path}: header {reader.fieldnames} does not match {SWEEP_FIELDS}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    for r in rows:
        try:
            float(r["level"]), float(r["noisy_acc"]), float(r["robustness"]), int(r["n"])
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: malformed row {r}") from exc
        if r["metric"] not in METRICS:
            raise ValueError(f"{path}: unknown metric {r['metric']!r}")
    return rows


def report_dicts(reports: list) -> list:
    return [asdict(r) for r in reports]
