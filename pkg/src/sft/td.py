"""Top-down selection pass.

Starting from a one-hot class signal at the logits, each layer hands its
gating mass down to the units that fed it:

* conv / linear: for every gated parent unit the receptive-field
  contributions (input activity times kernel weight) are pruned to the
  smallest set of largest positive terms covering a ``zeta`` fraction of
  the positive mass (stage 1); for conv layers the survivors are grouped
  into spatially connected components and the best-scoring component is
  kept (stage 2); the parent's gate is then split over the kept children
  in proportion to their contributions (stage 3).
* pool: the whole gate goes to the recorded window winner.
* relu: gating survives only where the pre-activation was positive.
* flatten: reshape.

Gating is computed in float64. All loops over parents run in index order
so the result is deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .models import ForwardTrace, Network


@dataclass(frozen=True)
class SelectionParams:
    zeta: float = 0.9
    lam: float = 0.5
    connectivity: int = 8

    def __post_init__(self):
        if not 0.0 < self.zeta <= 1.0:
            raise ValueError(f"zeta must lie in (0, 1], got {self.zeta}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")


def init_signal(cls: int, num_classes: int) -> np.ndarray:
    if not 0 <= cls < num_classes:
        raise ValueError(f"class {cls} outside [0, {num_classes})")
    d = np.zeros(num_classes)
    d[cls] = 1.0
    return d


def init_signals(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    d = np.zeros((labels.shape[0], num_classes))
    d[np.arange(labels.shape[0]), labels] = 1.0
    return d


# ---------------------------------------------------------------------------
# stage kernels


_NB = 64


@njit(cache=True)
def _prune(pv, pi, npos, zeta, kv, ki, bsum, wk, bk):
    """Stage 1 on a compact list of positive contributions.

    ``pv[:npos]``/``pi[:npos]`` hold the positive values and their RF
    indices in ascending index order. Survivors are the shortest prefix of
    these values sorted descending (ties by lower index) whose running sum
    reaches ``zeta`` times their total; they are written to ``kv``/``ki``
    and their count returned. ``wk``/``bk`` are int scratch of length npos.

    The cutoff is located by binning values into ``_NB`` equal-width
    buckets and re-binning the bucket where the cumulative sum crosses the
    target until it is small enough to order exactly.
    """
    if npos == 0:
        return 0
    total = 0.0
    vmax = 0.0
    for j in range(npos):
        total += pv[j]
        if pv[j] > vmax:
            vmax = pv[j]
        wk[j] = j
    need = zeta * total
    lo = 0.0
    hi = vmax
    m = npos
    kept = 0
    while m > 32 and hi > lo:
        for b in range(_NB):
            bsum[b] = 0.0
        scale = _NB / (hi - lo)
        for t in range(m):
            j = wk[t]
            b = min(int((pv[j] - lo) * scale), _NB - 1)
            bk[t] = b
            bsum[b] += pv[j]
        above = 0.0
        cross = _NB - 1
        while cross > 0 and above + bsum[cross] < need:
            above += bsum[cross]
            cross -= 1
        # sure survivors out, crossing members compacted in index order
        m2 = 0
        lo = np.inf
        hi = -np.inf
        for t in range(m):
            j = wk[t]
            if bk[t] > cross:
                kv[kept] = pv[j]
                ki[kept] = pi[j]
                kept += 1
            elif bk[t] == cross:
                wk[m2] = j
                m2 += 1
                lo = min(lo, pv[j])
                hi = max(hi, pv[j])
        need -= above
        m = m2
    start = kept
    for t in range(m):
        kv[start + t] = pv[wk[t]]
        ki[start + t] = pi[wk[t]]
    # stable insertion sort, descending; equal values keep index order
    for j in range(start + 1, start + m):
        v = kv[j]
        x = ki[j]
        k = j - 1
        while k >= start and kv[k] < v:
            kv[k + 1] = kv[k]
            ki[k + 1] = ki[k]
            k -= 1
        kv[k + 1] = v
        ki[k + 1] = x
    for j in range(start, start + m):
        kept += 1
        need -= kv[j]
        if need <= 0.0:
            break
    return kept


@njit(cache=True)
def _positive_entries(vals, pv, pi):
    npos = 0
    for i in range(vals.shape[0]):
        if vals[i] > 0.0:
            pv[npos] = vals[i]
            pi[npos] = i
            npos += 1
    return npos


@njit(cache=True)
def _neighbor_table(rows, cols, conn8):
    nbr = np.zeros((rows * cols, 8), np.int64)
    nnbr = np.zeros(rows * cols, np.int64)
    for r in range(rows):
        for c in range(cols):
            s = r * cols + c
            for dr in range(-1, 2):
                for dc in range(-1, 2):
                    if dr == 0 and dc == 0:
                        continue
                    if not conn8 and dr != 0 and dc != 0:
                        continue
                    rr = r + dr
                    cc = c + dc
                    if 0 <= rr < rows and 0 <= cc < cols:
                        nbr[s, nnbr[s]] = rr * cols + cc
                        nnbr[s] += 1
    return nbr, nnbr


@njit(cache=True)
def _label_sites(active, nsites, nbr, nnbr, labels, stack):
    """Connected components of the active sites, numbered in raster order.

    Writes 1-based labels (0 = inactive) and returns the component count;
    a component's number follows the order of its first site.
    """
    for s in range(nsites):
        labels[s] = 0
    count = 0
    for s in range(nsites):
        if not active[s] or labels[s] != 0:
            continue
        count += 1
        labels[s] = count
        top = 1
        stack[0] = s
        while top > 0:
            top -= 1
            cur = stack[top]
            for j in range(nnbr[cur]):
                nb = nbr[cur, j]
                if active[nb] and labels[nb] == 0:
                    labels[nb] = count
                    stack[top] = nb
                    top += 1
    return count


@njit(cache=True)
def _best_group(site_active, site_activity, nsites, nbr, nnbr, lam, labels, stack, size, act):
    """Stage 2 on a site grid. Returns the winning 1-based label (0 if none).

    Score = lam * size/total_size + (1 - lam) * activity/total_activity;
    ties go to the component whose first site is lexicographically smallest.
    ``size`` and ``act`` are scratch buffers of length nsites + 1.
    """
    ncomp = _label_sites(site_active, nsites, nbr, nnbr, labels, stack)
    if ncomp <= 1:
        return ncomp
    for lab in range(ncomp + 1):
        size[lab] = 0.0
        act[lab] = 0.0
    for s in range(nsites):
        lab = labels[s]
        if lab > 0:
            size[lab] += 1.0
            act[lab] += site_activity[s]
    total_size = 0.0
    total_act = 0.0
    for lab in range(1, ncomp + 1):
        total_size += size[lab]
        total_act += act[lab]
    best = 0
    best_score = -1.0
    for lab in range(1, ncomp + 1):
        score = lam * size[lab] / total_size
        if total_act > 0.0:
            score += (1.0 - lam) * act[lab] / total_act
        if score > best_score:
            best_score = score
            best = lab
    return best


@njit(cache=True, parallel=True)
def _td_conv(g_up, hp, w, stride, zeta, lam, conn8, g_low):
    """Conv selection on a zero-padded input ``hp``; accumulates into padded ``g_low``."""
    n_batch, n_out, ho, wo = g_up.shape
    n_in = hp.shape[1]
    hh = hp.shape[2]
    ww = hp.shape[3]
    kh = w.shape[2]
    kw = w.shape[3]
    ksz = kh * kw
    m = n_in * ksz
    nonneg_input = True
    for v in hp.ravel():
        if v < 0:
            nonneg_input = False
            break
    # per output channel: RF entries whose product can be positive, with
    # their offset into one padded sample and their site in the k x k grid
    wflat = w.reshape(n_out, m)
    cand_w = np.zeros((n_out, m))
    cand_off = np.zeros((n_out, m), np.int64)
    cand_site = np.zeros((n_out, m), np.int64)
    ncand = np.zeros(n_out, np.int64)
    for o in range(n_out):
        for c in range(n_in):
            for ky in range(kh):
                for kx in range(kw):
                    i = (c * kh + ky) * kw + kx
                    wv = wflat[o, i]
                    if wv > 0 or (not nonneg_input and wv != 0):
                        j = ncand[o]
                        cand_w[o, j] = wv
                        cand_off[o, j] = (c * hh + ky) * ww + kx
                        cand_site[o, j] = ky * kw + kx
                        ncand[o] += 1
    nbr, nnbr = _neighbor_table(kh, kw, conn8)
    plane = n_in * hh * ww
    hflat = hp.reshape(n_batch, plane)
    gflat = g_low.reshape(n_batch, plane)
    # samples are independent and write disjoint slices of g_low
    for n in prange(n_batch):
        pv = np.zeros(m)
        pi = np.zeros(m, np.int64)
        kv = np.zeros(m)
        ki = np.zeros(m, np.int64)
        bsum = np.zeros(_NB)
        wk = np.zeros(m, np.int64)
        bk = np.zeros(m, np.int64)
        site_active = np.zeros(ksz, np.bool_)
        site_activity = np.zeros(ksz)
        labels = np.zeros(ksz, np.int64)
        stack = np.zeros(ksz, np.int64)
        size = np.zeros(ksz + 1)
        act = np.zeros(ksz + 1)
        hn = hflat[n]
        gn = gflat[n]
        for o in range(n_out):
            for y in range(ho):
                for x in range(wo):
                    gate = g_up[n, o, y, x]
                    if gate <= 0.0:
                        continue
                    base = y * stride * ww + x * stride
                    npos = 0
                    for j in range(ncand[o]):
                        v = np.float64(hn[base + cand_off[o, j]]) * cand_w[o, j]
                        if v > 0.0:
                            pv[npos] = v
                            pi[npos] = j
                            npos += 1
                    kept = _prune(pv, pi, npos, zeta, kv, ki, bsum, wk, bk)
                    if kept == 0:
                        continue
                    for s in range(ksz):
                        site_active[s] = False
                        site_activity[s] = 0.0
                    for j in range(kept):
                        s = cand_site[o, ki[j]]
                        site_active[s] = True
                        site_activity[s] += kv[j]
                    best = _best_group(site_active, site_activity, ksz, nbr, nnbr, lam, labels, stack, size, act)
                    total = 0.0
                    for j in range(kept):
                        if labels[cand_site[o, ki[j]]] == best:
                            total += kv[j]
                    for j in range(kept):
                        if labels[cand_site[o, ki[j]]] == best:
                            gn[base + cand_off[o, ki[j]]] += gate * (kv[j] / total)


@njit(cache=True, parallel=True)
def _td_fc(g_up, h, w, zeta, g_low):
    n_batch, n_out = g_up.shape
    n_in = h.shape[1]
    for n in prange(n_batch):
        pv = np.zeros(n_in)
        pi = np.zeros(n_in, np.int64)
        kv = np.zeros(n_in)
        ki = np.zeros(n_in, np.int64)
        bsum = np.zeros(_NB)
        wk = np.zeros(n_in, np.int64)
        bk = np.zeros(n_in, np.int64)
        for o in range(n_out):
            gate = g_up[n, o]
            if gate <= 0.0:
                continue
            npos = 0
            for i in range(n_in):
                v = np.float64(h[n, i]) * np.float64(w[o, i])
                if v > 0.0:
                    pv[npos] = v
                    pi[npos] = i
                    npos += 1
            kept = _prune(pv, pi, npos, zeta, kv, ki, bsum, wk, bk)
            if kept == 0:
                continue
            total = 0.0
            for j in range(kept):
                total += kv[j]
            for j in range(kept):
                g_low[n, ki[j]] += gate * (kv[j] / total)


# ---------------------------------------------------------------------------
# stage functions on plain data


def stage1_prune(values, zeta: float = 0.9) -> np.ndarray:
    """Indices (ascending) of the contributions that survive pruning."""
    vals = np.ascontiguousarray(values, dtype=np.float64).ravel()
    n = vals.shape[0]
    pv, kv = np.zeros(n), np.zeros(n)
    pi, ki = np.zeros(n, np.int64), np.zeros(n, np.int64)
    npos = _positive_entries(vals, pv, pi)
    kept = _prune(pv, pi, npos, float(zeta), kv, ki, np.zeros(_NB), np.zeros(n, np.int64), np.zeros(n, np.int64))
    return np.sort(ki[:kept])


def stage2_group_select(sites, values, lam: float = 0.5, connectivity: int = 8) -> np.ndarray:
    """Boolean mask over surviving entries that belong to the winning group.

    ``sites`` is an (M, 2) array of (row, col) grid positions and
    ``values`` the M surviving contributions; several entries (channels)
    may share a site.
    """
    sites = np.asarray(sites, dtype=np.int64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64).ravel()
    if sites.shape[0] == 0:
        return np.zeros(0, bool)
    rows, cols = int(sites[:, 0].max()) + 1, int(sites[:, 1].max()) + 1
    flat = sites[:, 0] * cols + sites[:, 1]
    active = np.zeros(rows * cols, np.bool_)
    active[flat] = True
    activity = np.zeros(rows * cols)
    np.add.at(activity, flat, values)
    labels = np.zeros(rows * cols, np.int64)
    stack = np.zeros(rows * cols, np.int64)
    scratch = np.zeros((2, rows * cols + 1))
    nbr, nnbr = _neighbor_table(rows, cols, connectivity == 8)
    best = _best_group(
        active, activity, rows * cols, nbr, nnbr, float(lam), labels, stack, scratch[0], scratch[1]
    )
    return labels[flat] == best


def stage3_normalize_propagate(values, parent_gate: float, accumulator, indices=None):
    """Add ``parent_gate * value / sum(values)`` to the accumulator at ``indices``."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if indices is None:
        indices = np.arange(values.shape[0])
    total = 0.0
    for v in values:
        total += v
    acc = accumulator.reshape(-1)
    for i, v in zip(np.asarray(indices).ravel(), values):
        acc[i] += parent_gate * (v / total)
    return accumulator


# ---------------------------------------------------------------------------
# layer-wise selection


def td_layer_conv(g_upper, h_lower, weight, stride: int, pad: int, params: SelectionParams = SelectionParams()):
    h_pad = np.ascontiguousarray(np.pad(h_lower, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else h_lower)
    g_low = np.zeros(h_pad.shape)
    _td_conv(
        np.ascontiguousarray(g_upper, dtype=np.float64),
        h_pad,
        np.ascontiguousarray(weight, dtype=h_lower.dtype),
        stride, params.zeta, params.lam, params.connectivity == 8, g_low,
    )
    if pad:
        g_low = np.ascontiguousarray(g_low[:, :, pad:-pad, pad:-pad])
    return g_low


def td_layer_fc(g_upper, h_lower, weight, params: SelectionParams = SelectionParams()):
    g_low = np.zeros(h_lower.shape)
    _td_fc(
        np.ascontiguousarray(g_upper, dtype=np.float64),
        np.ascontiguousarray(h_lower),
        np.ascontiguousarray(weight, dtype=h_lower.dtype),
        params.zeta, g_low,
    )
    return g_low


def td_layer_pool(g_upper, pool_argmax, lower_shape):
    g_upper = np.asarray(g_upper, dtype=np.float64)
    active = g_upper > 0
    size = int(np.prod(lower_shape))
    g_low = np.bincount(pool_argmax[active], weights=g_upper[active], minlength=size)
    return g_low.reshape(lower_shape)


def td_layer_relu(g_upper, h_lower):
    return np.where(h_lower > 0, g_upper, 0.0)


def td_pass(net: Network, trace: ForwardTrace, d, params: SelectionParams = SelectionParams()) -> list:
    """Gating activities g_0..g_L, index-aligned with ``trace.layer_outputs``.

    ``d`` is a batch of init signals of shape (N, K) (a single K-vector is
    treated as a batch of one).
    """
    hs = trace.layer_outputs
    if len(hs) != len(net.layers) + 1:
        raise ValueError(f"trace has {len(hs)} activations, network needs {len(net.layers) + 1}")
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 1:
        d = d[None]
    if d.shape != hs[-1].shape:
        raise ValueError(f"init signal shape {d.shape} does not match logits shape {hs[-1].shape}")
    gating = [None] * len(hs)
    gating[-1] = d
    g = d
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        h_low = hs[i]
        if layer.kind == "conv":
            g = td_layer_conv(g, h_low, net.params[layer.weight].value, layer.stride, layer.pad, params)
        elif layer.kind == "linear":
            g = td_layer_fc(g, h_low, net.params[layer.weight].value, params)
        elif layer.kind == "pool":
            g = td_layer_pool(g, trace.pool_argmax[i], h_low.shape)
        elif layer.kind == "relu":
            g = td_layer_relu(g, h_low)
        elif layer.kind == "flatten":
            g = g.reshape(h_low.shape)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        gating[i] = g
    return gating


def extract_bbox(g0):
    """Inclusive (x_min, y_min, x_max, y_max) around non-zero gating, or None.

    ``g0`` is one sample's input-layer gating, (H, W) or (C, H, W).
    """
    g0 = np.asarray(g0)
    if g0.ndim == 3:
        g0 = (g0 > 0).any(axis=0)
    ys = np.flatnonzero((g0 > 0).any(axis=1))
    xs = np.flatnonzero((g0 > 0).any(axis=0))
    if ys.size == 0:
        return None
    return (int(xs[0]), int(ys[0]), int(xs[-1]), int(ys[-1]))
