"""Paired two-modality datasets with multi-label annotations.

On-disk layout of a dataset directory::

    meta.json        name, modality names, dims, num_classes, num_samples, file names
    <a>.xmbf         modality A features (XMBF binary, or .csv fallback)
    <b>.xmbf         modality B features
    labels.csv       sample_id,labels   (labels are ';'-separated class ids)
    classes.csv      class_id,name      (optional)

XMBF is ``b"XMBF"``, u32 rows, u32 cols, then rows*cols little-endian float32
values in row-major order.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DatasetError

XMBF_MAGIC = b"XMBF"
_HEADER = struct.Struct("<4sII")


# --------------------------------------------------------------------------
# feature files
# --------------------------------------------------------------------------


def write_features(path, matrix) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DatasetError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    path = Path(path)
    payload = np.ascontiguousarray(matrix, dtype="<f4")
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in payload:
                writer.writerow([repr(float(v)) for v in row])
        return
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(XMBF_MAGIC, payload.shape[0], payload.shape[1]))
        fh.write(payload.tobytes())


def read_features(path) -> np.ndarray:
    """Read an XMBF (or CSV) feature file into a float64 matrix."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing feature file: {path}")
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if not rows:
            raise DatasetError(f"{path}: empty feature file")
        width = len(rows[0])
        for i, r in enumerate(rows):
            if len(r) != width:
                raise DatasetError(f"{path}: row {i} has {len(r)} columns, expected {width}")
        try:
            mat = np.array(rows, dtype=np.float32).astype(np.float64)
        except ValueError as exc:
            raise DatasetError(f"{path}: unparsable value ({exc})") from None
    else:
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise DatasetError(f"{path}: truncated header")
        magic, rows, cols = _HEADER.unpack_from(raw)
        if magic != XMBF_MAGIC:
            raise DatasetError(f"{path}: bad magic {magic!r}, expected {XMBF_MAGIC!r}")
        expected = _HEADER.size + 4 * rows * cols
        if len(raw) != expected:
            raise DatasetError(
                f"{path}: header declares {rows}x{cols} values "
                f"({expected} bytes) but file has {len(raw)} bytes"
            )
        mat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)
    _check_finite(mat, str(path))
    return mat


def _check_finite(mat, where):
    if mat.ndim != 2 or mat.shape[0] < 1 or mat.shape[1] < 1:
        raise DatasetError(f"{where}: feature matrix must have at least one row and column, got {mat.shape}")
    bad = ~np.isfinite(mat)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DatasetError(f"{where}: non-finite value {mat[r, c]!r} at row {r}, col {c}")


# --------------------------------------------------------------------------
# labels
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelTable:
    """Per-sample label sets over ``num_classes`` class ids."""

    sets: tuple
    num_classes: int

    def __post_init__(self):
        sets = tuple(frozenset(int(c) for c in s) for s in self.sets)
        object.__setattr__(self, "sets", sets)
        if self.num_classes < 2:
            raise DatasetError(f"num_classes must be >= 2, got {self.num_classes}")
        for i, s in enumerate(sets):
            if not s:
                raise DatasetError(f"sample {i} has no labels")
            bad = [c for c in s if c < 0 or c >= self.num_classes]
            if bad:
                raise DatasetError(f"sample {i}: label id {bad[0]} out of range [0, {self.num_classes})")
        ind = np.zeros((len(sets), self.num_classes), dtype=bool)
        for i, s in enumerate(sets):
            ind[i, list(s)] = True
        ind.setflags(write=False)
        object.__setattr__(self, "_indicator", ind)

    def __len__(self):
        return len(self.sets)

    def __getitem__(self, i):
        return self.sets[i]

    @property
    def indicator(self) -> np.ndarray:
        """Read-only boolean ``(samples, num_classes)`` membership matrix."""
        return self._indicator

    def subset(self, idx) -> "LabelTable":
        return LabelTable(tuple(self.sets[int(i)] for i in idx), self.num_classes)

    def primary(self) -> np.ndarray:
        """Smallest label id of each sample."""
        return np.array([min(s) for s in self.sets], dtype=np.int64)


def read_labels(path):
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing label file: {path}")
    ids, sets = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["sample_id", "labels"]:
            raise DatasetError(f"{path}: expected header 'sample_id,labels', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            sid, lab = row[0].strip(), row[1].strip()
            try:
                labels = [int(t) for t in lab.split(";") if t.strip() != ""]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: bad label list {lab!r}") from None
            if any(c < 0 for c in labels):
                raise DatasetError(f"{path}:{lineno}: negative label id in {lab!r}")
            ids.append(sid)
            sets.append(frozenset(labels))
    return ids, sets


def write_labels(path, sample_ids, labels: LabelTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "labels"])
        for sid, s in zip(sample_ids, labels.sets):
            writer.writerow([sid, ";".join(str(c) for c in sorted(s))])


# --------------------------------------------------------------------------
# dataset
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossModalDataset:
    modality_a: np.ndarray
    modality_b: np.ndarray
    labels: LabelTable
    sample_ids: tuple
    name: str = "dataset"
    modality_names: tuple = ("image", "text")
    class_names: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.array(self.modality_a, dtype=np.float64)
        b = np.array(self.modality_b, dtype=np.float64)
        _check_finite(a, f"{self.name}/{self.modality_names[0]}")
        _check_finite(b, f"{self.name}/{self.modality_names[1]}")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "modality_a", a)
        object.__setattr__(self, "modality_b", b)
        ids = tuple(str(s) for s in self.sample_ids)
        object.__setattr__(self, "sample_ids", ids)
        n = len(ids)
        if not (a.shape[0] == b.shape[0] == len(self.labels) == n):
            raise DatasetError(
                f"row count mismatch: {self.modality_names[0]} has {a.shape[0]}, "
                f"{self.modality_names[1]} has {b.shape[0]}, labels list {len(self.labels)}, "
                f"ids list {n}"
            )
        if len(set(ids)) != n:
            seen = set()
            dup = next(s for s in ids if s in seen or seen.add(s))
            raise DatasetError(f"duplicate sample id {dup!r}")

    def __len__(self):
        return len(self.sample_ids)

    @property
    def num_classes(self) -> int:
        return self.labels.num_classes

    def features(self, modality: str) -> np.ndarray:
        if modality in ("a", self.modality_names[0]):
            return self.modality_a
        if modality in ("b", self.modality_names[1]):
            return self.modality_b
        raise DatasetError(f"unknown modality {modality!r}")

    def is_single_label(self) -> bool:
        return all(len(s) == 1 for s in self.labels.sets)


def load_dataset(root) -> CrossModalDataset:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DatasetError(f"missing file: {meta_path}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    files = meta.get("files", {})
    names = tuple(meta.get("modalities", ["image", "text"]))
    path_a = root / files.get("a", f"{names[0]}.xmbf")
    path_b = root / files.get("b", f"{names[1]}.xmbf")
    path_labels = root / files.get("labels", "labels.csv")
    a = read_features(path_a)
    b = read_features(path_b)
    ids, sets = read_labels(path_labels)
    for path, mat in ((path_a, a), (path_b, b)):
        if mat.shape[0] != len(ids):
            raise DatasetError(
                f"shape mismatch: {path.name} has {mat.shape[0]} rows but {path_labels.name} lists {len(ids)} ids"
            )
    dims = meta.get("dims")
    if dims is not None and [a.shape[1], b.shape[1]] != list(dims):
        raise DatasetError(f"meta.json declares dims {dims}, files have {[a.shape[1], b.shape[1]]}")
    if "num_samples" in meta and meta["num_samples"] != len(ids):
        raise DatasetError(f"meta.json declares {meta['num_samples']} samples, label file lists {len(ids)}")
    if "num_classes" not in meta:
        raise DatasetError("meta.json lacks num_classes")
    labels = LabelTable(tuple(sets), int(meta["num_classes"]))
    class_names = None
    names_file = files.get("class_names")
    if names_file and (root / names_file).is_file():
        class_names = _read_class_names(root / names_file, labels.num_classes)
    extra = {k: v for k, v in meta.items() if k not in ("files", "modalities", "dims", "num_classes", "num_samples", "name")}
    return CrossModalDataset(
        a, b, labels, tuple(ids),
        name=meta.get("name", root.name),
        modality_names=names,
        class_names=class_names,
        meta=extra,
    )


def _read_class_names(path, num_classes):
    out = [str(i) for i in range(num_classes)]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if len(row) >= 2 and row[0].strip().isdigit():
                cid = int(row[0])
                if cid < num_classes:
                    out[cid] = row[1]
    return tuple(out)


def write_dataset(dataset: CrossModalDataset, root, fmt: str = "xmbf") -> Path:
    if fmt not in ("xmbf", "csv"):
        raise DatasetError(f"unknown feature format {fmt!r}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    na, nb = dataset.modality_names
    files = {"a": f"{na}.{fmt}", "b": f"{nb}.{fmt}", "labels": "labels.csv"}
    write_features(root / files["a"], dataset.modality_a)
    write_features(root / files["b"], dataset.modality_b)
    write_labels(root / files["labels"], dataset.sample_ids, dataset.labels)
    if dataset.class_names is not None:
        files["class_names"] = "classes.csv"
        with open(root / "classes.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_id", "name"])
            for i, n in enumerate(dataset.class_names):
                w.writerow([i, n])
    meta = {
        "name": dataset.name,
        "modalities": [na, nb],
        "dims": [int(dataset.modality_a.shape[1]), int(dataset.modality_b.shape[1])],
        "num_classes": dataset.num_classes,
        "num_samples": len(dataset),
        "files": files,
        **dataset.meta,
    }
    with open(root / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return root


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Class-conditional Gaussian generator for paired two-modality data.

    Each class owns a latent center of norm ``class_separation``.  Centers start
    from orthonormal directions and are perturbed by a random component scaled
    by ``center_overlap``, so some class pairs sit closer than others.  A
    sample's latent vector is its class center plus Gaussian jitter: standard
    deviation ``jitter_scale`` inside the span of the centers and
    ``nuisance_scale`` in the remaining ``latent_dim - num_classes``
    directions.  Nuisance directions carry no class information but are shared
    across modalities.  Modality A is a random linear projection of the latent;
    modality B projects ``rho * latent + sqrt(1 - rho**2) * fresh`` where
    ``rho = cross_modal_correlation``.  Both get iid observation noise of
    standard deviation ``noise_scale``.  Multi-labelled samples sit at the
    midpoint of their two class centers.
    """

    num_classes: int = 10
    samples_per_class: int = 200
    dim_a: int = 64
    dim_b: int = 32
    class_separation: float = 3.0
    cross_modal_correlation: float = 0.9
    multilabel_rate: float = 0.1
    seed: int = 7
    latent_dim: int = 32
    noise_scale: float = 0.3
    center_overlap: float = 0.6
    jitter_scale: float = 0.8
    nuisance_scale: float = 1.0

    def __post_init__(self):
        problems = []
        if self.num_classes < 2:
            problems.append(f"num_classes={self.num_classes} < 2")
        if self.samples_per_class < 4:
            problems.append(f"samples_per_class={self.samples_per_class} < 4")
        if self.dim_a < 2 or self.dim_b < 2:
            problems.append(f"dims ({self.dim_a}, {self.dim_b}) must be >= 2")
        if not self.class_separation >= 0:
            problems.append(f"class_separation={self.class_separation} < 0")
        if not 0.0 <= self.cross_modal_correlation <= 1.0:
            problems.append(f"cross_modal_correlation={self.cross_modal_correlation} outside [0, 1]")
        if not 0.0 <= self.multilabel_rate <= 1.0:
            problems.append(f"multilabel_rate={self.multilabel_rate} outside [0, 1]")
        if self.latent_dim < self.num_classes:
            problems.append(f"latent_dim={self.latent_dim} < num_classes={self.num_classes}")
        if not self.noise_scale >= 0:
            problems.append(f"noise_scale={self.noise_scale} < 0")
        if not (self.jitter_scale >= 0 and self.nuisance_scale >= 0):
            problems.append(f"jitter_scale={self.jitter_scale}, nuisance_scale={self.nuisance_scale} must be >= 0")
        if not self.center_overlap >= 0:
            problems.append(f"center_overlap={self.center_overlap} < 0")
        if problems:
            raise DatasetError("invalid SynthSpec: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def generate_synthetic(spec: SynthSpec) -> CrossModalDataset:
    rng = np.random.default_rng(spec.seed)
    c, L = spec.num_classes, spec.latent_dim
    basis, _ = np.linalg.qr(rng.standard_normal((L, L)))
    centers = basis[:c] + spec.center_overlap * rng.standard_normal((c, L)) / math.sqrt(L)
    centers *= spec.class_separation / np.linalg.norm(centers, axis=1, keepdims=True)

    primary = np.repeat(np.arange(c), spec.samples_per_class)
    n = primary.size
    extra = np.full(n, -1)
    multi = rng.random(n) < spec.multilabel_rate
    shift = rng.integers(1, c, size=n)  # offset so the extra label differs from the primary
    extra[multi] = (primary[multi] + shift[multi]) % c

    mu = centers[primary].copy()
    mu[multi] = 0.5 * (centers[primary[multi]] + centers[extra[multi]])
    # split the jitter into the class-center span and its orthogonal complement
    span, _ = np.linalg.qr(centers.T)
    z = rng.standard_normal((n, L))
    z_in = (z @ span) @ span.T
    latent = mu + spec.jitter_scale * z_in + spec.nuisance_scale * (z - z_in)
    rho = spec.cross_modal_correlation
    latent_b = rho * latent + math.sqrt(max(0.0, 1.0 - rho * rho)) * rng.standard_normal((n, L))

    proj_a = rng.standard_normal((L, spec.dim_a)) / math.sqrt(L)
    proj_b = rng.standard_normal((L, spec.dim_b)) / math.sqrt(L)
    a = latent @ proj_a + spec.noise_scale * rng.standard_normal((n, spec.dim_a))
    b = latent_b @ proj_b + spec.noise_scale * rng.standard_normal((n, spec.dim_b))

    sets = tuple(
        frozenset((int(p),) if e < 0 else (int(p), int(e))) for p, e in zip(primary, extra)
    )
    ids = tuple(f"s{i:05d}" for i in range(n))
    return CrossModalDataset(
        a, b, LabelTable(sets, c), ids,
        name="synthetic",
        modality_names=("image", "text"),
        meta={"synth_spec": spec.to_dict()},
    )


def dataset_fingerprint(dataset: CrossModalDataset) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.modality_a).tobytes())
    h.update(np.ascontiguousarray(dataset.modality_b).tobytes())
    for sid, s in zip(dataset.sample_ids, dataset.labels.sets):
        h.update(f"{sid}:{sorted(s)};".encode())
    return h.hexdigest()
