"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``FEDDICE_DISABLE_NUMBA`` is
unset (or set to ``0``/``false``). Both paths are always importable as
``<name>_numba`` / ``<name>_numpy`` so tests and the benchmark can compare
them; the bare ``<name>`` is the one selected for this process.

Both paths perform the same floating point operations in the same order, so
for a given input they agree bitwise (checked in tests/test_accel.py).
"""

import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def deco(fn):
            return fn
        return deco


def _flag_disabled():
    val = os.environ.get("FEDDICE_DISABLE_NUMBA", "").strip().lower()
    return val not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _flag_disabled()

N_PROTO = 4
N_HIST = 8

# column layout of the per-(window, protocol) statistics block
ST_COUNT = 0
ST_PKT_SUM = 1
ST_PKT_MEAN = 2
ST_PKT_VAR = 3
ST_LOAD_SUM = 4
ST_LOAD_MEAN = 5
ST_LOAD_VAR = 6
ST_IAT_MEAN = 7
ST_IAT_VAR = 8
ST_BPP = 9
ST_HIST = 10            # N_HIST columns
ST_LAST_PKT = ST_HIST + N_HIST
ST_LAST_LOAD = ST_LAST_PKT + 1
ST_LAST_IAT = ST_LAST_PKT + 2
ST_LAST_AGE = ST_LAST_PKT + 3
N_STAT = ST_LAST_PKT + 4


# ---------------------------------------------------------------- window stats

@njit(cache=True)
def _hist_bin_scalar(p):
    # bin k holds packet counts in [2**k, 2**(k+1)); zero packets fall in bin 0
    b = 0
    v = 2.0
    while b < N_HIST - 1 and p >= v:
        b += 1
        v *= 2.0
    return b


def _hist_bins(packets):
    b = np.zeros(packets.shape[0], dtype=np.int64)
    v = 2.0
    for k in range(1, N_HIST):
        b[packets >= v] = k
        v *= 2.0
    return b


@njit(cache=True)
def window_stats_numba(offsets, proto, packets, load, iat, start, window_end):
    n_groups = offsets.shape[0] - 1
    out = np.zeros((n_groups, N_PROTO, N_STAT))
    for g in range(n_groups):
        lo = offsets[g]
        hi = offsets[g + 1]
        for i in range(lo, hi):
            p = proto[i]
            out[g, p, ST_COUNT] += 1.0
            out[g, p, ST_PKT_SUM] += packets[i]
            out[g, p, ST_LOAD_SUM] += load[i]
            out[g, p, ST_IAT_MEAN] += iat[i]
            out[g, p, ST_HIST + _hist_bin_scalar(packets[i])] += 1.0
            out[g, p, ST_LAST_PKT] = packets[i]
            out[g, p, ST_LAST_LOAD] = load[i]
            out[g, p, ST_LAST_IAT] = iat[i]
            out[g, p, ST_LAST_AGE] = window_end[g] - start[i]
        for p in range(N_PROTO):
            c = out[g, p, ST_COUNT]
            if c > 0.0:
                out[g, p, ST_PKT_MEAN] = out[g, p, ST_PKT_SUM] / c
                out[g, p, ST_LOAD_MEAN] = out[g, p, ST_LOAD_SUM] / c
                out[g, p, ST_IAT_MEAN] = out[g, p, ST_IAT_MEAN] / c
                if out[g, p, ST_PKT_SUM] > 0.0:
                    out[g, p, ST_BPP] = out[g, p, ST_LOAD_SUM] / out[g, p, ST_PKT_SUM]
        for i in range(lo, hi):
            p = proto[i]
            d = packets[i] - out[g, p, ST_PKT_MEAN]
            out[g, p, ST_PKT_VAR] += d * d
            d = load[i] - out[g, p, ST_LOAD_MEAN]
            out[g, p, ST_LOAD_VAR] += d * d
            d = iat[i] - out[g, p, ST_IAT_MEAN]
            out[g, p, ST_IAT_VAR] += d * d
        for p in range(N_PROTO):
            c = out[g, p, ST_COUNT]
            if c > 0.0:
                out[g, p, ST_PKT_VAR] = out[g, p, ST_PKT_VAR] / c
                out[g, p, ST_LOAD_VAR] = out[g, p, ST_LOAD_VAR] / c
                out[g, p, ST_IAT_VAR] = out[g, p, ST_IAT_VAR] / c
    return out


def window_stats_numpy(offsets, proto, packets, load, iat, start, window_end):
    n_groups = offsets.shape[0] - 1
    n_keys = n_groups * N_PROTO
    group = np.repeat(np.arange(n_groups), np.diff(offsets))
    key = group * N_PROTO + proto.astype(np.int64)
    out = np.zeros((n_keys, N_STAT))

    count = np.bincount(key, minlength=n_keys).astype(np.float64)
    out[:, ST_COUNT] = count
    out[:, ST_PKT_SUM] = np.bincount(key, weights=packets, minlength=n_keys)
    out[:, ST_LOAD_SUM] = np.bincount(key, weights=load, minlength=n_keys)
    iat_sum = np.bincount(key, weights=iat, minlength=n_keys)

    has = count > 0.0
    safe = np.where(has, count, 1.0)
    out[:, ST_PKT_MEAN] = np.where(has, out[:, ST_PKT_SUM] / safe, 0.0)
    out[:, ST_LOAD_MEAN] = np.where(has, out[:, ST_LOAD_SUM] / safe, 0.0)
    out[:, ST_IAT_MEAN] = np.where(has, iat_sum / safe, 0.0)
    pkt_pos = has & (out[:, ST_PKT_SUM] > 0.0)
    out[:, ST_BPP] = np.where(
        pkt_pos, out[:, ST_LOAD_SUM] / np.where(pkt_pos, out[:, ST_PKT_SUM], 1.0), 0.0)

    for col, mcol, x in ((ST_PKT_VAR, ST_PKT_MEAN, packets),
                         (ST_LOAD_VAR, ST_LOAD_MEAN, load),
                         (ST_IAT_VAR, ST_IAT_MEAN, iat)):
        d = x - out[key, mcol]
        ss = np.bincount(key, weights=d * d, minlength=n_keys)
        out[:, col] = np.where(has, ss / safe, 0.0)

    hkey = key * N_HIST + _hist_bins(packets)
    out[:, ST_HIST:ST_HIST + N_HIST] = np.bincount(
        hkey, minlength=n_keys * N_HIST).reshape(n_keys, N_HIST)

    last = np.full(n_keys, -1, dtype=np.int64)
    np.maximum.at(last, key, np.arange(key.shape[0]))
    sel = last >= 0
    li = last[sel]
    out[sel, ST_LAST_PKT] = packets[li]
    out[sel, ST_LAST_LOAD] = load[li]
    out[sel, ST_LAST_IAT] = iat[li]
    out[sel, ST_LAST_AGE] = window_end[group[li]] - start[li]
    return out.reshape(n_groups, N_PROTO, N_STAT)


# ------------------------------------------------------------------ confusion

@njit(cache=True)
def confusion_counts_numba(pred, labels):
    tp = 0
    fp = 0
    tn = 0
    fn = 0
    for i in range(pred.shape[0]):
        if labels[i] == 0:
            if pred[i] == 0:
                tp += 1
            else:
                fn += 1
        else:
            if pred[i] == 0:
                fp += 1
            else:
                tn += 1
    return tp, fp, tn, fn


def confusion_counts_numpy(pred, labels):
    pos = labels == 0
    ppos = pred == 0
    tp = int(np.count_nonzero(pos & ppos))
    fn = int(np.count_nonzero(pos & ~ppos))
    fp = int(np.count_nonzero(~pos & ppos))
    tn = int(np.count_nonzero(~pos & ~ppos))
    return tp, fp, tn, fn


# --------------------------------------------------------------- weighted sum

@njit(cache=True)
def weighted_sum_numba(coeffs, mat):
    n, d = mat.shape
    out = np.empty(d)
    for j in range(d):
        acc = coeffs[0] * mat[0, j]
        for i in range(1, n):
            acc = acc + coeffs[i] * mat[i, j]
        out[j] = acc
    return out


def weighted_sum_numpy(coeffs, mat):
    acc = coeffs[0] * mat[0]
    for i in range(1, mat.shape[0]):
        acc = acc + coeffs[i] * mat[i]
    return acc


# --------------------------------------------------------------------- spread

@njit(cache=True)
def spread_numba(indptr, indices, infected, susceptible, uniforms, p):
    n = infected.shape[0]
    hit = np.full(n, -1, dtype=np.int64)
    for s in range(n):
        if not infected[s]:
            continue
        for e in range(indptr[s], indptr[s + 1]):
            t = indices[e]
            if susceptible[t] and hit[t] < 0 and uniforms[e] < p:
                hit[t] = s
    return hit


def spread_numpy(indptr, indices, infected, susceptible, uniforms, p):
    n = infected.shape[0]
    src = np.repeat(np.arange(n), np.diff(indptr))
    ok = infected[src] & susceptible[indices] & (uniforms < p)
    hit = np.full(n, -1, dtype=np.int64)
    # first infector in (source, edge) order wins
    e = np.nonzero(ok)[0]
    targets, first = np.unique(indices[e], return_index=True)
    hit[targets] = src[e[first]]
    return hit


if USE_NUMBA:
    window_stats = window_stats_numba
    confusion_counts = confusion_counts_numba
    weighted_sum = weighted_sum_numba
    spread = spread_numba
else:
    window_stats = window_stats_numpy
    confusion_counts = confusion_counts_numpy
    weighted_sum = weighted_sum_numpy
    spread = spread_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
