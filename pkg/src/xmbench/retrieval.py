"""Ranking galleries by similarity, Hamming distance, or predicted class.

A ranking always carries its tie structure.  Ties are resolved by a
:class:`TieOrderingPolicy`:

``stable_index``
    equal scores keep gallery index order.
``seeded_shuffle``
    equal scores are shuffled with a seeded generator.
``expected_ap_analytic``
    the stable order is kept only as a placeholder; metrics average over every
    within-tie permutation in closed form.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import RetrievalError

METRICS = ("cosine", "neg_euclidean", "correlation")
POLICIES = ("stable_index", "seeded_shuffle", "expected_ap_analytic")


@dataclass(frozen=True)
class TieOrderingPolicy:
    kind: str = "expected_ap_analytic"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise RetrievalError(f"unknown tie policy {self.kind!r}; expected one of {POLICIES}")

    @property
    def analytic(self) -> bool:
        return self.kind == "expected_ap_analytic"


STABLE = TieOrderingPolicy("stable_index")


@dataclass(frozen=True)
class RankedList:
    query_id: object
    order: np.ndarray
    scores: np.ndarray
    group_ids: np.ndarray
    policy: TieOrderingPolicy = STABLE
    fallback: bool = False

    def __post_init__(self):
        n = self.order.shape[0]
        if self.scores.shape[0] != n or self.group_ids.shape[0] != n:
            raise RetrievalError("order, scores and group ids must have equal length")

    def __len__(self):
        return self.order.shape[0]

    @property
    def tie_groups(self) -> list:
        """``(start, stop)`` spans of positions whose scores are equal."""
        return _spans(self.group_ids)


def _spans(gid: np.ndarray) -> list:
    if gid.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(gid)) + 1
    bounds = np.concatenate([[0], cuts, [gid.size]])
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass(frozen=True)
class RankedBatch:
    """Rankings of many queries against one gallery, one row per query."""

    order: np.ndarray  # (Q, N) gallery indices, best first
    scores: np.ndarray  # (Q, N) scores in rank order, non-increasing
    group_ids: np.ndarray  # (Q, N) tie-group ids in rank order
    policy: TieOrderingPolicy = STABLE
    fallback: Optional[np.ndarray] = None

    def __len__(self):
        return self.order.shape[0]

    def row(self, i: int, query_id=None) -> RankedList:
        fb = bool(self.fallback[i]) if self.fallback is not None else False
        return RankedList(query_id if query_id is not None else i, self.order[i], self.scores[i],
                          self.group_ids[i], self.policy, fb)

    @classmethod
    def stack(cls, lists: Sequence[RankedList]) -> "RankedBatch":
        if not lists:
            raise RetrievalError("no ranked lists")
        return cls(
            np.stack([r.order for r in lists]), np.stack([r.scores for r in lists]),
            np.stack([r.group_ids for r in lists]), lists[0].policy,
            np.array([r.fallback for r in lists]),
        )


# --------------------------------------------------------------------------
# scores
# --------------------------------------------------------------------------


def _neg_euclidean(q, g):
    d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return -np.sqrt(np.maximum(d2, 0.0))


def score_matrix(queries, gallery, metric: str = "cosine"):
    """Similarity scores ``(Q, N)`` and a per-query fallback flag.

    Under cosine and correlation a query of zero norm (or zero variance) is
    scored with negative Euclidean distance instead and flagged; degenerate
    gallery rows score 0.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if g.shape[0] == 0:
        raise RetrievalError("empty gallery")
    if q.shape[1] != g.shape[1]:
        raise RetrievalError(f"dimension mismatch: queries {q.shape[1]}, gallery {g.shape[1]}")
    if metric not in METRICS:
        raise RetrievalError(f"unknown metric {metric!r}; expected one of {METRICS}")
    fallback = np.zeros(q.shape[0], dtype=bool)
    if metric == "neg_euclidean":
        return _neg_euclidean(q, g), fallback
    if metric == "correlation":
        q = q - q.mean(axis=1, keepdims=True)
        g = g - g.mean(axis=1, keepdims=True)
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    tiny = 1e-12
    s = (q / np.where(qn > tiny, qn, 1.0)[:, None]) @ (g / np.where(gn > tiny, gn, 1.0)[:, None]).T
    s[:, gn <= tiny] = 0.0
    fallback = qn <= tiny
    if fallback.any():
        raw_q = np.atleast_2d(np.asarray(queries, dtype=np.float64))[fallback]
        raw_g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
        s[fallback] = _neg_euclidean(raw_q, raw_g)
    return s, fallback


def _group_ids_sorted(sorted_scores: np.ndarray) -> np.ndarray:
    gid = np.zeros(sorted_scores.shape, dtype=np.int64)
    gid[:, 1:] = np.cumsum(sorted_scores[:, 1:] != sorted_scores[:, :-1], axis=1)
    return gid


def _shuffle_within(order, gid, rng):
    order = order.copy()
    for a, b in _spans(gid):
        if b - a > 1:
            order[a:b] = order[a:b][rng.permutation(b - a)]
    return order


def rank_scores(scores, policy: TieOrderingPolicy = STABLE, fallback=None, query_offset: int = 0) -> RankedBatch:
    """Order a ``(Q, N)`` score matrix best-first, honouring the tie policy."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if not np.all(np.isfinite(scores)):
        raise RetrievalError("non-finite scores")
    order = np.argsort(-scores, axis=1, kind="stable")
    ranked = np.take_along_axis(scores, order, axis=1)
    gid = _group_ids_sorted(ranked)
    if policy.kind == "seeded_shuffle":
        for i in range(order.shape[0]):
            rng = np.random.default_rng([policy.seed, query_offset + i])
            order[i] = _shuffle_within(order[i], gid[i], rng)
    return RankedBatch(order, ranked, gid, policy, fallback)


def rank_many(queries, gallery, metric: str = "cosine", policy: TieOrderingPolicy = STABLE) -> RankedBatch:
    s, fb = score_matrix(queries, gallery, metric)
    return rank_scores(s, policy, fb)


def rank(query_vec, gallery_matrix, metric: str = "cosine", policy: TieOrderingPolicy = STABLE,
         query_id=0) -> RankedList:
    q = np.asarray(query_vec, dtype=np.float64)
    if q.ndim != 1:
        raise RetrievalError("rank() takes a single query vector; use rank_many for batches")
    return rank_many(q[None, :], gallery_matrix, metric, policy).row(0, query_id)


def _as_bits(codes):
    c = np.asarray(codes)
    if c.dtype != bool:
        c = c.astype(bool)
    return np.atleast_2d(c)


def hamming_distances(query_codes, gallery_codes) -> np.ndarray:
    qb, gb = _as_bits(query_codes), _as_bits(gallery_codes)
    if qb.shape[1] != gb.shape[1]:
        raise RetrievalError(f"code length mismatch: {qb.shape[1]} vs {gb.shape[1]}")
    if gb.shape[0] == 0:
        raise RetrievalError("empty gallery")
    return _kernels.hamming(np.packbits(qb, axis=1), np.packbits(gb, axis=1))


def rank_hamming_many(query_codes, gallery_codes, policy: TieOrderingPolicy = STABLE) -> RankedBatch:
    return rank_scores(-hamming_distances(query_codes, gallery_codes).astype(np.float64), policy)


def rank_hamming(query_code, gallery_codes, policy: TieOrderingPolicy = STABLE, query_id=0) -> RankedList:
    return rank_hamming_many(_as_bits(query_code), gallery_codes, policy).row(0, query_id)


def rank_ts_many(query_preds, gallery_preds, policy: TieOrderingPolicy = STABLE) -> RankedBatch:
    """Items predicted into the query's class first, the rest after; two tie groups."""
    gp = np.asarray(gallery_preds)
    if gp.size == 0:
        raise RetrievalError("empty gallery")
    qp = np.atleast_1d(np.asarray(query_preds))
    scores = (qp[:, None] == gp[None, :]).astype(np.float64)
    return rank_scores(scores, policy)


def rank_ts(query_pred, gallery_preds, policy: TieOrderingPolicy = STABLE, query_id=0) -> RankedList:
    gp = np.asarray(gallery_preds)
    if gp.size == 0:
        raise RetrievalError("empty gallery")
    scores = (gp == query_pred).astype(np.float64)
    order = np.concatenate([np.flatnonzero(scores == 1.0), np.flatnonzero(scores == 0.0)])
    ranked = scores[order]
    gid = _group_ids_sorted(ranked[None, :])[0]
    if policy.kind == "seeded_shuffle":
        order = _shuffle_within(order, gid, np.random.default_rng(policy.seed))
    return RankedList(query_id, order, ranked, gid, policy)


# --------------------------------------------------------------------------
# run files
# --------------------------------------------------------------------------

RUN_MAGIC = b"XMBR"


def write_run(path, batch: RankedBatch, query_ids: Sequence[str], gallery_ids: Sequence[str]) -> None:
    """Compact binary run: magic, u32 header length, JSON header, then per query
    u32[N] gallery permutation followed by f32[N] scores."""
    if len(query_ids) != len(batch) or len(gallery_ids) != batch.order.shape[1]:
        raise RetrievalError("id lists do not match the batch shape")
    header = json.dumps({
        "query_ids": list(map(str, query_ids)), "gallery_ids": list(map(str, gallery_ids)),
        "tie_policy": [batch.policy.kind, batch.policy.seed],
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(RUN_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for i in range(len(batch)):
            fh.write(np.ascontiguousarray(batch.order[i], dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(batch.scores[i], dtype="<f4").tobytes())


def write_trec_run(path, batch: RankedBatch, query_ids: Sequence[str], gallery_ids: Sequence[str],
                   tag: str = "xmbench") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, qid in enumerate(query_ids):
            for r, (g, s) in enumerate(zip(batch.order[i], batch.scores[i]), start=1):
                fh.write(f"{qid} Q0 {gallery_ids[g]} {r} {float(s):.9g} {tag}\n")


def read_run(path):
    """Load a binary or TREC-format run.

    Returns ``(query_ids, gallery_ids, batch)`` where ``batch.order`` indexes
    ``gallery_ids``.  Tie groups are recovered from equal scores.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == RUN_MAGIC:
        (hlen,) = struct.unpack_from("<I", raw, 4)
        header = json.loads(raw[8:8 + hlen])
        qids, gids = header["query_ids"], header["gallery_ids"]
        n = len(gids)
        off = 8 + hlen
        orders, scores = [], []
        for _ in qids:
            orders.append(np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64))
            off += 4 * n
            scores.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64))
            off += 4 * n
        if off != len(raw):
            raise RetrievalError(f"{path}: size does not match header")
        policy = TieOrderingPolicy(*header.get("tie_policy", ["stable_index", 0]))
        sc = np.stack(scores)
        return qids, gids, RankedBatch(np.stack(orders), sc, _group_ids_sorted(sc), policy)
    return _read_trec(path, raw.decode("utf-8"))


def _read_trec(path, text):
    per_query = {}
    qorder = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 5:
            raise RetrievalError(f"{path}:{lineno}: expected 'qid Q0 docid rank score [tag]'")
        qid, doc, rnk, score = parts[0], parts[2], int(parts[3]), float(parts[4])
        if qid not in per_query:
            per_query[qid] = []
            qorder.append(qid)
        per_query[qid].append((rnk, doc, score))
    if not qorder:
        raise RetrievalError(f"{path}: empty run")
    gallery = sorted({d for rows in per_query.values() for _, d, _ in rows})
    col = {d: i for i, d in enumerate(gallery)}
    orders, scores = [], []
    for qid in qorder:
        rows = sorted(per_query[qid])
        if len(rows) != len(gallery):
            raise RetrievalError(f"{path}: query {qid} ranks {len(rows)} of {len(gallery)} gallery items")
        orders.append([col[d] for _, d, _ in rows])
        scores.append([s for _, _, s in rows])
    sc = np.asarray(scores, dtype=np.float64)
    return qorder, gallery, RankedBatch(np.asarray(orders, dtype=np.int64), sc, _group_ids_sorted(sc), STABLE)
