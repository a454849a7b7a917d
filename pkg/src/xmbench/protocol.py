"""Class-disjoint fold construction and retrieval task definitions.

Each fold shuffles the class ids, gives the first ``ceil(C/2)`` to training
and the rest to testing, and splits each half into a database subset and a
query subset.  Two tasks are then defined per fold:

* ``non_xtd``: train on the training database, query with the training query
  subset, search the training database.
* ``xtd``: train on the training database, query with the testing query
  subset, search the testing database.  No class is shared with training.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .dataset import CrossModalDataset, LabelTable
from .errors import ProtocolError

MODES = ("non_xtd", "xtd")
DIRECTIONS = ("image_to_text", "text_to_image")
_DIRECTION_ALIASES = {"i2t": "image_to_text", "t2i": "text_to_image"}


def canonical_direction(direction: str) -> str:
    d = _DIRECTION_ALIASES.get(direction, direction)
    if d not in DIRECTIONS:
        raise ProtocolError(f"unknown direction {direction!r}")
    return d


@dataclass(frozen=True)
class ClassPartition:
    train_classes: frozenset
    test_classes: frozenset

    def __post_init__(self):
        tr, te = frozenset(self.train_classes), frozenset(self.test_classes)
        object.__setattr__(self, "train_classes", tr)
        object.__setattr__(self, "test_classes", te)
        if tr & te:
            raise ProtocolError(f"class overlap between halves: {sorted(tr & te)}")
        if abs(len(tr) - len(te)) > 1:
            raise ProtocolError(f"unbalanced partition {len(tr)}/{len(te)}")


@dataclass(frozen=True)
class SubsetAssignment:
    train_db: tuple
    train_query: tuple
    test_db: tuple
    test_query: tuple
    dropped: tuple = ()

    def __post_init__(self):
        lists = [self.train_db, self.train_query, self.test_db, self.test_query, self.dropped]
        seen = set()
        for lst in lists:
            s = set(lst)
            if s & seen:
                raise ProtocolError("subset lists are not pairwise disjoint")
            seen |= s


@dataclass(frozen=True)
class TaskSpec:
    mode: str
    direction: str
    fold_index: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ProtocolError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "direction", canonical_direction(self.direction))
        if self.fold_index < 0:
            raise ProtocolError("fold_index must be non-negative")


@dataclass(frozen=True)
class RelevanceVector:
    bits: np.ndarray
    cl: int

    def __len__(self):
        return len(self.bits)


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    seed: int
    fraction_db: float
    folds: tuple
    assignments: tuple

    @property
    def dropped_samples(self):
        return [a.dropped for a in self.assignments]

    def to_dict(self, dataset: Optional[CrossModalDataset] = None) -> dict:
        out = {
            "n_folds": self.n_folds,
            "seed": self.seed,
            "fraction_db": self.fraction_db,
            "folds": [],
        }
        for part, asg in zip(self.folds, self.assignments):
            entry = {
                "train_classes": sorted(part.train_classes),
                "test_classes": sorted(part.test_classes),
                "train_db": list(asg.train_db),
                "train_query": list(asg.train_query),
                "test_db": list(asg.test_db),
                "test_query": list(asg.test_query),
                "dropped": list(asg.dropped),
                "num_dropped": len(asg.dropped),
            }
            if dataset is not None:
                entry["dropped_ids"] = [dataset.sample_ids[i] for i in asg.dropped]
            out["folds"].append(entry)
        return out

    def to_json(self, dataset: Optional[CrossModalDataset] = None) -> str:
        return json.dumps(self.to_dict(dataset), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        folds, asgs = [], []
        for f in d["folds"]:
            folds.append(ClassPartition(frozenset(f["train_classes"]), frozenset(f["test_classes"])))
            asgs.append(SubsetAssignment(
                tuple(f["train_db"]), tuple(f["train_query"]),
                tuple(f["test_db"]), tuple(f["test_query"]), tuple(f["dropped"]),
            ))
        if len(folds) != d["n_folds"]:
            raise ProtocolError(f"plan lists {len(folds)} folds but n_folds={d['n_folds']}")
        return cls(int(d["n_folds"]), int(d["seed"]), float(d["fraction_db"]), tuple(folds), tuple(asgs))


def partition_classes(num_classes: int, seed: int) -> ClassPartition:
    perm = np.random.default_rng(seed).permutation(num_classes)
    half = math.ceil(num_classes / 2)
    return ClassPartition(frozenset(int(c) for c in perm[:half]), frozenset(int(c) for c in perm[half:]))


def find_straddlers(labels: LabelTable, part: ClassPartition) -> list:
    tr = np.zeros(labels.num_classes, dtype=bool)
    tr[list(part.train_classes)] = True
    ind = labels.indicator
    return np.flatnonzero(ind[:, tr].any(axis=1) & ind[:, ~tr].any(axis=1)).tolist()


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def assign_subsets(
    dataset: CrossModalDataset,
    fold: ClassPartition,
    fraction_db: float,
    seed: int,
    override: Optional[Sequence] = None,
) -> SubsetAssignment:
    """Split both class halves into database/query subsets.

    Sampling is stratified by each sample's smallest label id; a class with
    ``n`` samples contributes ``floor(fraction_db * n + 0.5)`` to the
    database.  ``override`` (one of ``"db"``/``"query"`` per sample) replaces
    the random draw, e.g. to keep a dataset's published train/test membership.
    """
    if not 0.0 < fraction_db < 1.0:
        raise ProtocolError(f"fraction_db must lie in (0, 1), got {fraction_db}")
    labels = dataset.labels
    dropped = set(find_straddlers(labels, fold))
    if override is not None:
        override = list(override)
        if len(override) != len(dataset):
            raise ProtocolError(f"override has {len(override)} entries for {len(dataset)} samples")
        bad = {v for v in override if v not in ("db", "query")}
        if bad:
            raise ProtocolError(f"override values must be 'db' or 'query', got {sorted(bad)}")
    primary = labels.primary()
    ind = labels.indicator
    rng = np.random.default_rng(seed)
    out = {}
    for half_name, classes in (("train", fold.train_classes), ("test", fold.test_classes)):
        mask = np.zeros(labels.num_classes, dtype=bool)
        mask[list(classes)] = True
        members = [i for i in np.flatnonzero(ind[:, mask].any(axis=1)) if i not in dropped]
        if not members:
            raise ProtocolError(f"{half_name} half {sorted(classes)} has no usable samples")
        db, query = [], []
        for c in sorted(classes):
            group = [i for i in members if primary[i] == c]
            if not group:
                continue
            if override is not None:
                db += [i for i in group if override[i] == "db"]
                query += [i for i in group if override[i] == "query"]
                continue
            perm = rng.permutation(len(group))
            n_db = _round_half_up(fraction_db * len(group))
            if n_db >= len(group):
                raise ProtocolError(
                    f"fraction_db={fraction_db} leaves class {c} ({len(group)} samples) with an empty query subset"
                )
            if n_db == 0:
                raise ProtocolError(
                    f"fraction_db={fraction_db} leaves class {c} ({len(group)} samples) with an empty database subset"
                )
            db += [group[k] for k in perm[:n_db]]
            query += [group[k] for k in perm[n_db:]]
        if not db or not query:
            raise ProtocolError(f"{half_name} half has an empty database or query subset")
        out[half_name] = (tuple(sorted(int(i) for i in db)), tuple(sorted(int(i) for i in query)))
    return SubsetAssignment(
        out["train"][0], out["train"][1], out["test"][0], out["test"][1], tuple(sorted(dropped))
    )


def make_fold_plan(
    dataset: CrossModalDataset,
    n_folds: int = 5,
    seed: int = 0,
    fraction_db: float = 0.8,
    override: Optional[Sequence] = None,
) -> FoldPlan:
    if n_folds < 1:
        raise ProtocolError(f"n_folds must be >= 1, got {n_folds}")
    if dataset.num_classes < 2:
        raise ProtocolError("need at least two classes")
    folds, asgs = [], []
    for f in range(n_folds):
        part = partition_classes(dataset.num_classes, seed + f)
        folds.append(part)
        asgs.append(assign_subsets(dataset, part, fraction_db, seed + f, override=override))
    return FoldPlan(n_folds, seed, fraction_db, tuple(folds), tuple(asgs))


def ground_truth(query_labels, gallery: LabelTable) -> RelevanceVector:
    """Relevance of every gallery item: 1 iff it shares a label with the query."""
    q = frozenset(query_labels)
    if not q:
        raise ProtocolError("query has an empty label set")
    if len(gallery) == 0:
        raise ProtocolError("empty gallery")
    cols = [c for c in q if 0 <= c < gallery.num_classes]
    bits = gallery.indicator[:, cols].any(axis=1).astype(np.uint8) if cols else np.zeros(len(gallery), np.uint8)
    return RelevanceVector(bits, int(bits.sum()))


def relevance_matrix(query_labels: LabelTable, gallery_labels: LabelTable) -> np.ndarray:
    """``(Q, N)`` uint8 matrix of class ground truth for a batch of queries."""
    qi = query_labels.indicator.astype(np.int32)
    gi = gallery_labels.indicator.astype(np.int32)
    return (qi @ gi.T > 0).astype(np.uint8)


class TaskViews(NamedTuple):
    train: np.ndarray
    query: np.ndarray
    gallery: np.ndarray
    query_modality: str
    gallery_modality: str


def build_task(plan: FoldPlan, task: TaskSpec, assignment: Optional[SubsetAssignment] = None) -> TaskViews:
    if task.fold_index >= plan.n_folds:
        raise ProtocolError(f"fold_index {task.fold_index} >= n_folds {plan.n_folds}")
    asg = assignment if assignment is not None else plan.assignments[task.fold_index]
    train = np.asarray(asg.train_db, dtype=np.int64)
    if task.mode == "non_xtd":
        query, gallery = asg.train_query, asg.train_db
    else:
        query, gallery = asg.test_query, asg.test_db
    if not query or not gallery:
        raise ProtocolError(f"{task}: empty query or gallery view")
    qm, gm = ("a", "b") if task.direction == "image_to_text" else ("b", "a")
    return TaskViews(train, np.asarray(query, dtype=np.int64), np.asarray(gallery, dtype=np.int64), qm, gm)
