"""Hot per-query loops: AP, tie-aware expected AP, CMC accumulation, Hamming.

Every kernel exists twice: a loop version compiled with numba ``@njit`` and a
vectorised numpy version.  ``XMBENCH_DISABLE_NUMBA=1`` (or a missing numba)
selects the numpy path.  The public names at the bottom of the module point at
whichever backend is active; both are importable for cross-checking.

Conventions shared by all kernels:

* ``rel`` is a ``(Q, N)`` uint8 matrix of relevance bits *in rank order*.
* ``gid`` is a ``(Q, N)`` int64 matrix of tie-group ids in rank order,
  non-decreasing along each row and starting at 0.  A ranking without ties
  has ``gid[q] == arange(N)``.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("XMBENCH_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by XMBENCH_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def ap_sorted_numpy(rel):
    rel = np.asarray(rel, dtype=np.float64)
    if rel.ndim == 1:
        rel = rel[None, :]
    hits = np.cumsum(rel, axis=1)
    ranks = np.arange(1, rel.shape[1] + 1, dtype=np.float64)
    cl = rel.sum(axis=1)
    # cumsum adds left to right, matching the loop kernel bit for bit
    total = np.cumsum(rel * hits / ranks, axis=1)[:, -1] if rel.shape[1] else np.zeros(rel.shape[0])
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / cl
    out[cl == 0] = np.nan
    return out


def _group_geometry(rel, gid):
    """Per-position start, size, positive count and positives-before of its tie group."""
    q, n = rel.shape
    pos = np.broadcast_to(np.arange(n), (q, n))
    first = np.ones((q, n), dtype=bool)
    first[:, 1:] = gid[:, 1:] != gid[:, :-1]
    start = np.maximum.accumulate(np.where(first, pos, 0), axis=1)
    flat = (gid + (np.arange(q) * n)[:, None]).ravel()
    size = np.bincount(flat, minlength=q * n)[flat].reshape(q, n)
    npos = np.bincount(flat, weights=rel.ravel(), minlength=q * n)[flat].reshape(q, n)
    before = np.cumsum(rel, axis=1) - rel
    rows = np.arange(q)[:, None]
    pos_before = before[rows, start]
    return pos, start, size.astype(np.float64), npos, pos_before


def expected_ap_sorted_numpy(rel, gid):
    rel = np.atleast_2d(np.asarray(rel, dtype=np.float64))
    gid = np.atleast_2d(np.asarray(gid, dtype=np.int64))
    pos, start, size, m, before = _group_geometry(rel, gid)
    j = (pos - start).astype(np.float64)  # zero-based offset inside the group
    others = np.where(size > 1, j * (m - 1.0) / np.maximum(size - 1.0, 1.0), 0.0)
    contrib = (m / size) * (before + 1.0 + others) / (pos + 1.0)
    cl = rel.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = contrib.sum(axis=1) / cl
    out[cl == 0] = np.nan
    return out


def cmc_accumulate_numpy(rel, gid, expected):
    """Sum of per-query first-hit CDFs and the number of queries with cl >= 1."""
    rel = np.atleast_2d(np.asarray(rel, dtype=np.float64))
    q, n = rel.shape
    valid = rel.sum(axis=1) > 0
    rel = rel[valid]
    if rel.shape[0] == 0:
        return np.zeros(n), 0
    if not expected:
        first = np.argmax(rel > 0, axis=1)
        curve = (np.arange(n)[None, :] >= first[:, None]).astype(np.float64)
        return curve.sum(axis=0), int(rel.shape[0])
    gid = np.atleast_2d(np.asarray(gid, dtype=np.int64))[valid]
    pos, start, size, m, _ = _group_geometry(rel, gid)
    first = np.argmax(rel > 0, axis=1)
    rows = np.arange(rel.shape[0])
    g_first = gid[rows, first][:, None]
    in_group = gid == g_first
    after = gid > g_first
    i = (pos - start).astype(np.float64)
    ratio = np.where(in_group, np.clip((size - m - i) / (size - i), 0.0, 1.0), 1.0)
    miss = np.cumprod(ratio, axis=1)
    curve = np.where(in_group, 1.0 - miss, 0.0)
    curve[after] = 1.0
    return curve.sum(axis=0), int(rel.shape[0])


if hasattr(np, "bitwise_count"):

    def _popcount(x):
        return np.bitwise_count(x)

else:  # numpy < 2.0
    _POP8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def _popcount(x):
        return _POP8[x]


def hamming_numpy(query_codes, gallery_codes):
    """Pairwise Hamming distances between packed uint8 code rows."""
    x = np.bitwise_xor(query_codes[:, None, :], gallery_codes[None, :, :])
    return _popcount(x).sum(axis=2, dtype=np.int64)


# --------------------------------------------------------------------------
# numba implementations (plain loops)
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def ap_sorted_numba(rel):
        q, n = rel.shape
        out = np.empty(q, dtype=np.float64)
        for r in range(q):
            hits = 0.0
            total = 0.0
            for k in range(n):
                if rel[r, k]:
                    hits += 1.0
                    total += hits / (k + 1.0)
            out[r] = total / hits if hits > 0 else np.nan
        return out

    @njit(cache=True, nogil=True)
    def expected_ap_sorted_numba(rel, gid):
        q, n = rel.shape
        out = np.empty(q, dtype=np.float64)
        for r in range(q):
            total = 0.0
            before = 0.0
            s = 0
            while s < n:
                e = s + 1
                while e < n and gid[r, e] == gid[r, s]:
                    e += 1
                size = e - s
                m = 0.0
                for k in range(s, e):
                    m += rel[r, k]
                if m > 0:
                    for j in range(size):
                        others = j * (m - 1.0) / (size - 1.0) if size > 1 else 0.0
                        total += (m / size) * (before + 1.0 + others) / (s + j + 1.0)
                before += m
                s = e
            out[r] = total / before if before > 0 else np.nan
        return out

    @njit(cache=True, nogil=True)
    def _cmc_accumulate_numba(rel, gid, expected):
        q, n = rel.shape
        curve = np.zeros(n, dtype=np.float64)
        count = 0
        for r in range(q):
            first = -1
            for k in range(n):
                if rel[r, k]:
                    first = k
                    break
            if first < 0:
                continue
            count += 1
            if not expected:
                for k in range(first, n):
                    curve[k] += 1.0
                continue
            s = first
            while s > 0 and gid[r, s - 1] == gid[r, first]:
                s -= 1
            e = first + 1
            while e < n and gid[r, e] == gid[r, first]:
                e += 1
            size = e - s
            m = 0.0
            for k in range(s, e):
                m += rel[r, k]
            miss = 1.0
            for i in range(size):
                ratio = (size - m - i) / (size - i)
                if ratio < 0.0:
                    ratio = 0.0
                miss *= ratio
                curve[s + i] += 1.0 - miss
            for k in range(e, n):
                curve[k] += 1.0
        return curve, count

    def cmc_accumulate_numba(rel, gid, expected):
        rel = np.ascontiguousarray(np.atleast_2d(rel), dtype=np.uint8)
        gid = np.ascontiguousarray(np.atleast_2d(gid), dtype=np.int64)
        return _cmc_accumulate_numba(rel, gid, bool(expected))

    @njit(cache=True, nogil=True)
    def _hamming_numba(query_codes, gallery_codes, table):
        q, nbytes = query_codes.shape
        g = gallery_codes.shape[0]
        out = np.empty((q, g), dtype=np.int64)
        for a in range(q):
            for b in range(g):
                d = 0
                for k in range(nbytes):
                    d += table[query_codes[a, k] ^ gallery_codes[b, k]]
                out[a, b] = d
        return out

    _TABLE = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)

    def hamming_numba(query_codes, gallery_codes):
        return _hamming_numba(
            np.ascontiguousarray(query_codes, dtype=np.uint8),
            np.ascontiguousarray(gallery_codes, dtype=np.uint8),
            _TABLE,
        )


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def _as_rel(rel):
    return np.ascontiguousarray(np.atleast_2d(rel), dtype=np.uint8)


def _as_gid(gid):
    return np.ascontiguousarray(np.atleast_2d(gid), dtype=np.int64)


if HAVE_NUMBA:

    def ap_sorted(rel):
        return ap_sorted_numba(_as_rel(rel))

    def expected_ap_sorted(rel, gid):
        return expected_ap_sorted_numba(_as_rel(rel), _as_gid(gid))

    cmc_accumulate = cmc_accumulate_numba
    hamming = hamming_numba
else:
    ap_sorted = ap_sorted_numpy
    expected_ap_sorted = expected_ap_sorted_numpy
    cmc_accumulate = cmc_accumulate_numpy
    hamming = hamming_numpy
