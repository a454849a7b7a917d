"""AP, MAP, CMC curves and fold aggregation.

AP of one ranked list over the whole gallery::

    AP = (1 / cl) * sum_i rel[i] * precision@i

where ``rel`` is in rank order and ``cl`` is the number of relevant items.
Queries with ``cl == 0`` have no defined AP; they are excluded from MAP and
CMC and counted separately.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels
from .errors import MetricError
from .protocol import RelevanceVector
from .retrieval import RankedBatch, RankedList


def _bits(rel) -> np.ndarray:
    if isinstance(rel, RelevanceVector):
        return np.asarray(rel.bits, dtype=np.uint8)
    return np.asarray(rel, dtype=np.uint8)


def average_precision(ranked: RankedList, rel) -> float:
    """AP of a single ranked list; ``rel`` is indexed by gallery position.

    Under the ``expected_ap_analytic`` policy the expectation over tie orders
    is returned.  Returns ``nan`` when the query has no relevant item.
    """
    bits = _bits(rel)
    if bits.shape[0] != len(ranked):
        raise MetricError(f"relevance has {bits.shape[0]} entries, ranking has {len(ranked)}")
    sorted_bits = bits[ranked.order][None, :]
    if ranked.policy.analytic:
        return float(_kernels.expected_ap_sorted(sorted_bits, ranked.group_ids[None, :])[0])
    return float(_kernels.ap_sorted(sorted_bits)[0])


def _group_ids_from(tie_groups, n: int) -> np.ndarray:
    spans = list(tie_groups)
    gid = np.empty(n, dtype=np.int64)
    pos = 0
    for g, span in enumerate(spans):
        a, b = int(span[0]), int(span[1])
        if a != pos or b <= a:
            raise MetricError(f"tie groups do not partition the ranking: span {span} at position {pos}")
        gid[a:b] = g
        pos = b
    if pos != n:
        raise MetricError(f"tie groups cover {pos} positions, ranking has {n}")
    return gid


def expected_ap_with_ties(tie_groups, rel_in_rank_order) -> float:
    """Expected AP when each tie group is uniformly permuted.

    ``tie_groups`` is a sequence of consecutive ``(start, stop)`` spans that
    partition the ranking; ``rel_in_rank_order`` holds relevance bits by rank
    position.  Returns ``nan`` when nothing is relevant.
    """
    bits = _bits(rel_in_rank_order)
    gid = _group_ids_from(tie_groups, bits.shape[0])
    return float(_kernels.expected_ap_sorted(bits[None, :], gid[None, :])[0])


class MapResult(NamedTuple):
    value: float
    num_queries: int
    num_excluded: int


def mean_average_precision(aps) -> MapResult:
    aps = np.asarray(aps, dtype=np.float64)
    defined = ~np.isnan(aps)
    if not defined.any():
        raise MetricError(f"all {aps.size} queries lack relevant items; MAP undefined")
    return MapResult(float(aps[defined].mean()), int(defined.sum()), int((~defined).sum()))


@dataclass(frozen=True)
class CmcCurve:
    """``values[n]``: fraction of queries whose first relevant item is within rank ``n + 1``."""

    values: np.ndarray
    num_queries: int
    num_excluded: int = 0

    def __len__(self):
        return self.values.shape[0]

    def rank1(self) -> float:
        return float(self.values[0])


def _sorted_relevance(batch: RankedBatch, rel_matrix) -> np.ndarray:
    rel = np.atleast_2d(np.asarray(rel_matrix, dtype=np.uint8))
    if rel.shape != batch.order.shape:
        raise MetricError(f"relevance shape {rel.shape} does not match ranking shape {batch.order.shape}")
    return np.take_along_axis(rel, batch.order, axis=1)


def batch_ap(batch: RankedBatch, rel_matrix) -> np.ndarray:
    """Per-query AP (expected over ties under the analytic policy)."""
    rs = _sorted_relevance(batch, rel_matrix)
    if batch.policy.analytic:
        return _kernels.expected_ap_sorted(rs, batch.group_ids)
    return _kernels.ap_sorted(rs)


def batch_cmc(batch: RankedBatch, rel_matrix) -> CmcCurve:
    rs = _sorted_relevance(batch, rel_matrix)
    if rs.shape[0] == 0:
        raise MetricError("empty query set")
    total, count = _kernels.cmc_accumulate(rs, batch.group_ids, batch.policy.analytic)
    if count == 0:
        raise MetricError("no query has a relevant gallery item")
    return CmcCurve(total / count, int(count), int(rs.shape[0] - count))


def cmc(ranked_lists: Sequence[RankedList], rels) -> CmcCurve:
    if len(ranked_lists) == 0:
        raise MetricError("empty query set")
    if len(ranked_lists) != len(rels):
        raise MetricError(f"{len(ranked_lists)} rankings but {len(rels)} relevance vectors")
    batch = RankedBatch.stack(list(ranked_lists))
    return batch_cmc(batch, np.stack([_bits(r) for r in rels]))


def random_rank1(rel_matrix) -> float:
    """Expected rank-1 CMC of a uniformly random ranking (queries with cl >= 1)."""
    rel = np.atleast_2d(np.asarray(rel_matrix, dtype=np.float64))
    frac = rel.mean(axis=1)
    return float(frac[frac > 0].mean())


@dataclass(frozen=True)
class FoldEntry:
    fold: int
    map: float
    cmc: np.ndarray
    num_queries: int = 0
    num_excluded: int = 0
    dropped_straddlers: int = 0


def aggregate_folds(entries: Sequence[FoldEntry], n_folds: int = None) -> dict:
    """Fold-averaged MAP and pointwise-mean CMC truncated to the shortest curve."""
    if not entries:
        raise MetricError("nothing to aggregate")
    if n_folds is not None and len(entries) != n_folds:
        raise MetricError(f"expected {n_folds} folds, got {len(entries)}")
    folds = [e.fold for e in entries]
    if len(set(folds)) != len(folds):
        raise MetricError(f"duplicate fold ids {folds}")
    length = min(len(e.cmc) for e in entries)
    maps = [float(e.map) for e in entries]
    return {
        "map_mean": float(np.mean(maps)),
        "map_per_fold": maps,
        "cmc_mean": np.mean([np.asarray(e.cmc[:length], dtype=np.float64) for e in entries], axis=0),
        "cmc_length": int(length),
        "n_folds": len(entries),
    }
