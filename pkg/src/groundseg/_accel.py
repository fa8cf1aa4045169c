"""Run-length mask kernels.

Every kernel has a numba-compiled loop version and a vectorized numpy version.
The numba path is used when numba imports and ``GROUNDSEG_DISABLE_NUMBA`` is
unset (or ``0``); otherwise the numpy path is bound. Both paths are always
importable under their ``*_numba`` / ``*_numpy`` names so tests and the
benchmark can compare them directly.

Run convention: row-major flattening, alternating background/foreground runs,
first run is background (possibly zero-length).
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


def _flag_disabled() -> bool:
    return os.environ.get("GROUNDSEG_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")


NUMBA_ENABLED = HAVE_NUMBA and not _flag_disabled()


# ---------------------------------------------------------------- numpy path


def encode_runs_numpy(flat: np.ndarray) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.uint8)
    n = flat.size
    if n == 0:
        return np.zeros(1, dtype=np.int64)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [n]))
    counts = np.diff(bounds).astype(np.int64)
    if flat[0]:
        counts = np.concatenate(([0], counts))
    return counts


def decode_runs_numpy(counts: np.ndarray, n: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    values = (np.arange(counts.size) & 1).astype(np.uint8)
    flat = np.repeat(values, counts)
    if flat.size != n:
        raise ValueError(f"run lengths sum to {flat.size}, expected {n}")
    return flat


def area_numpy(counts: np.ndarray) -> int:
    return int(np.asarray(counts, dtype=np.int64)[1::2].sum())


def intersection_numpy(ca: np.ndarray, cb: np.ndarray) -> int:
    # Overlap of each foreground run of `a` with `b`, via b's prefix fg count.
    ca = np.asarray(ca, dtype=np.int64)
    ends_a = np.cumsum(ca)
    sa, ea = (ends_a - ca)[1::2], ends_a[1::2]
    if sa.size == 0:
        return 0
    prefix = _fg_prefix(np.asarray(cb, dtype=np.int64))
    return int((prefix(ea) - prefix(sa)).sum())


def _fg_prefix(counts: np.ndarray):
    """Return F(x) = number of foreground pixels in [0, x)."""
    ends = np.cumsum(counts)
    starts = ends - counts
    fg = np.where(np.arange(counts.size) & 1, counts, 0)
    before = np.concatenate(([0], np.cumsum(fg)))

    def prefix(x: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(ends, x, side="right")
        inside = idx < counts.size
        safe = np.minimum(idx, counts.size - 1)
        partial = np.where(inside & ((safe & 1) == 1), x - starts[safe], 0)
        return before[idx] + partial

    return prefix


def iou_matrix_numpy(pred: list[np.ndarray], gt: list[np.ndarray], n: int) -> np.ndarray:
    if not pred or not gt:
        return np.zeros((len(pred), len(gt)))
    p = np.stack([decode_runs_numpy(c, n) for c in pred]).astype(np.float64)
    g = np.stack([decode_runs_numpy(c, n) for c in gt]).astype(np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    out = np.ones_like(inter)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


# ---------------------------------------------------------------- numba path


@njit(cache=True)
def _encode_runs_nb(flat):
    n = flat.shape[0]
    # first pass sizes the output so we never allocate n + 1 slots
    runs = 1 if flat[0] == 0 else 2
    for i in range(1, n):
        if flat[i] != flat[i - 1]:
            runs += 1
    out = np.empty(runs, dtype=np.int64)
    k = 0
    start = 0
    if flat[0] != 0:
        out[0] = 0
        k = 1
    for i in range(1, n):
        if flat[i] != flat[i - 1]:
            out[k] = i - start
            k += 1
            start = i
    out[k] = n - start
    return out


@njit(cache=True)
def _decode_runs_nb(counts, n):
    out = np.zeros(n, dtype=np.uint8)
    pos = 0
    for i in range(counts.shape[0]):
        c = counts[i]
        if i & 1:
            for j in range(pos, pos + c):
                out[j] = 1
        pos += c
    return out


@njit(cache=True)
def _area_nb(counts):
    s = 0
    for i in range(1, counts.shape[0], 2):
        s += counts[i]
    return s


@njit(cache=True)
def _intersection_nb(ca, cb):
    na = ca.shape[0]
    nb = cb.shape[0]
    i = 0
    j = 0
    ra = ca[0] if na > 0 else 0
    rb = cb[0] if nb > 0 else 0
    inter = 0
    while True:
        while ra == 0 and i < na - 1:
            i += 1
            ra = ca[i]
        while rb == 0 and j < nb - 1:
            j += 1
            rb = cb[j]
        if ra == 0 or rb == 0:
            break
        step = ra if ra < rb else rb
        if (i & 1) and (j & 1):
            inter += step
        ra -= step
        rb -= step
    return inter


@njit(cache=True)
def _iou_matrix_nb(pc, po, gc, go, n_pred, n_gt):
    out = np.empty((n_pred, n_gt), dtype=np.float64)
    pa = np.empty(n_pred, dtype=np.int64)
    ga = np.empty(n_gt, dtype=np.int64)
    for a in range(n_pred):
        pa[a] = _area_nb(pc[po[a]:po[a + 1]])
    for b in range(n_gt):
        ga[b] = _area_nb(gc[go[b]:go[b + 1]])
    for a in range(n_pred):
        for b in range(n_gt):
            inter = _intersection_nb(pc[po[a]:po[a + 1]], gc[go[b]:go[b + 1]])
            union = pa[a] + ga[b] - inter
            out[a, b] = 1.0 if union == 0 else inter / union
    return out


def _pack(runs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(runs) + 1, dtype=np.int64)
    if runs:
        offsets[1:] = np.cumsum([r.size for r in runs])
        flat = np.concatenate([np.asarray(r, dtype=np.int64) for r in runs])
    else:
        flat = np.zeros(0, dtype=np.int64)
    return flat, offsets


def encode_runs_numba(flat: np.ndarray) -> np.ndarray:
    flat = (np.ascontiguousarray(flat).reshape(-1) != 0).view(np.uint8)
    if flat.size == 0:
        return np.zeros(1, dtype=np.int64)
    return _encode_runs_nb(flat)


def decode_runs_numba(counts: np.ndarray, n: int) -> np.ndarray:
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total != n:
        raise ValueError(f"run lengths sum to {total}, expected {n}")
    return _decode_runs_nb(counts, n)


def area_numba(counts: np.ndarray) -> int:
    return int(_area_nb(np.ascontiguousarray(counts, dtype=np.int64)))


def intersection_numba(ca: np.ndarray, cb: np.ndarray) -> int:
    return int(
        _intersection_nb(
            np.ascontiguousarray(ca, dtype=np.int64), np.ascontiguousarray(cb, dtype=np.int64)
        )
    )


def iou_matrix_numba(pred: list[np.ndarray], gt: list[np.ndarray], n: int) -> np.ndarray:
    if not pred or not gt:
        return np.zeros((len(pred), len(gt)))
    pc, po = _pack(pred)
    gc, go = _pack(gt)
    return _iou_matrix_nb(pc, po, gc, go, len(pred), len(gt))


if NUMBA_ENABLED:
    encode_runs = encode_runs_numba
    decode_runs = decode_runs_numba
    run_area = area_numba
    run_intersection = intersection_numba
    iou_matrix = iou_matrix_numba
else:
    encode_runs = encode_runs_numpy
    decode_runs = decode_runs_numpy
    run_area = area_numpy
    run_intersection = intersection_numpy
    iou_matrix = iou_matrix_numpy

BACKEND = "numba" if NUMBA_ENABLED else "numpy"
