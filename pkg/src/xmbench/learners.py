"""Baseline cross-modal learners.

* ``cm``  - correlation matching: ridge-regularised CCA, K canonical pairs.
* ``sm``  - semantic matching: one multinomial logistic regression per
  modality, embedding = class-posterior vector.
* ``scm`` - CCA first, then the SM classifiers inside the CCA subspace.
* ``ts``  - the classifier-only "trivial solution": SM's classifiers, but the
  model exposes argmax predictions instead of embeddings.

Every model standardises each modality with statistics of its own training
rows only.  ``binarize`` turns a real-valued model into a sign-code encoder.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import CrossModalDataset, read_features
from .errors import LearnerError

SCALE_FLOOR = 1e-8
REAL_KINDS = ("cm", "sm", "scm")
KINDS = REAL_KINDS + ("ts",)


def _digest(x: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(x, dtype=np.float64).tobytes(), digest_size=12).hexdigest()


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    fingerprint: str = ""
    n_fit: int = 0

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise LearnerError(f"cannot standardise array of shape {x.shape}")
        mean = x.mean(axis=0)
        scale = np.maximum(x.std(axis=0), SCALE_FLOOR)
        return cls(mean, scale, _digest(x), x.shape[0])

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise LearnerError(f"expected {self.mean.shape[0]} features, got {x.shape[-1]}")
        return (x - self.mean) / self.scale


@dataclass(frozen=True)
class LinearMap:
    weights: np.ndarray  # (input_dim, K)
    offset: np.ndarray  # (K,)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.offset))):
            raise LearnerError("non-finite entries in linear map")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def __call__(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.offset


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# canonical correlation analysis
# --------------------------------------------------------------------------


def _inv_sqrt(cov: np.ndarray, reg: float, which: str) -> np.ndarray:
    d = cov.shape[0]
    cov = cov + reg * (np.trace(cov) / d) * np.eye(d)
    w, v = np.linalg.eigh(cov)
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        raise LearnerError(
            f"covariance of modality {which} is rank-deficient (min eigenvalue {w[0]:.3g}); increase reg"
        )
    return (v / np.sqrt(w)) @ v.T


def cca(x: np.ndarray, y: np.ndarray, k: int, reg: float = 1e-4):
    """Top-``k`` canonical directions of two centred matrices.

    Returns ``(wx, wy, corr)`` with ``x @ wx`` and ``y @ wy`` the paired
    canonical variates and ``corr`` the non-increasing canonical correlations.
    """
    n = x.shape[0]
    if y.shape[0] != n:
        raise LearnerError(f"row mismatch: {n} vs {y.shape[0]}")
    if reg < 0:
        raise LearnerError(f"reg must be non-negative, got {reg}")
    limit = min(x.shape[1], y.shape[1], n - 1)
    if not 1 <= k <= limit:
        raise LearnerError(f"k={k} outside [1, {limit}] (dims {x.shape[1]}/{y.shape[1]}, {n} rows)")
    cxx = x.T @ x / (n - 1)
    cyy = y.T @ y / (n - 1)
    cxy = x.T @ y / (n - 1)
    wx = _inv_sqrt(cxx, reg, "a")
    wy = _inv_sqrt(cyy, reg, "b")
    u, s, vt = np.linalg.svd(wx @ cxy @ wy)
    u, v = u[:, :k], vt[:k].T
    # fix the SVD sign ambiguity so repeated fits agree
    flip = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(k)])
    flip[flip == 0] = 1.0
    return wx @ (u * flip), wy @ (v * flip), s[:k].copy()


# --------------------------------------------------------------------------
# multinomial logistic regression
# --------------------------------------------------------------------------


def logistic_loss_grad(params: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float):
    """Mean negative log-likelihood plus ``l2/2 * ||W||^2`` and its gradient.

    ``params`` is the flattened ``(d + 1, K)`` matrix whose last row is the
    unpenalised bias; ``y`` is a one-hot ``(n, K)`` target matrix.
    """
    n, d = x.shape
    k = y.shape[1]
    w = params.reshape(d + 1, k)
    z = x @ w[:-1] + w[-1]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(y * logp).sum() / n + 0.5 * l2 * np.sum(w[:-1] ** 2)
    diff = (np.exp(logp) - y) / n
    grad = np.empty_like(w)
    grad[:-1] = x.T @ diff + l2 * w[:-1]
    grad[-1] = diff.sum(axis=0)
    return loss, grad.ravel()


def lbfgs(
    fun: Callable,
    x0: np.ndarray,
    max_iter: int = 500,
    gtol: float = 1e-6,
    memory: int = 10,
):
    """Limited-memory BFGS with Armijo backtracking; gradients only."""
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    if not np.isfinite(f):
        raise LearnerError("non-finite loss at the starting point")
    s_hist, y_hist = [], []
    it = 0
    while np.max(np.abs(g)) >= gtol and it < max_iter:
        q = g.copy()
        alphas = []
        for s, yv in zip(reversed(s_hist), reversed(y_hist)):
            a = (s @ q) / (yv @ s)
            alphas.append(a)
            q -= a * yv
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            q /= max(np.linalg.norm(g), 1.0)
        for (s, yv), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            b = (yv @ q) / (yv @ s)
            q += (a - b) * s
        direction = -q
        slope = g @ direction
        if slope >= 0:  # not a descent direction: restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            direction = -g / max(np.linalg.norm(g), 1.0)
            slope = g @ direction
        step = 1.0
        while True:
            x_new = x + step * direction
            f_new, g_new = fun(x_new)
            if not np.isfinite(f_new):
                raise LearnerError("training diverged: non-finite loss")
            if f_new <= f + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-20:
                break
        s, yv = x_new - x, g_new - g
        x, f, g = x_new, f_new, g_new
        it += 1
        if step < 1e-20:
            break
        if s @ yv > 1e-12:
            s_hist.append(s)
            y_hist.append(yv)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
    gmax = float(np.max(np.abs(g)))
    return x, {"iterations": it, "converged": gmax < gtol, "loss": float(f), "grad_max": gmax, "max_iter": max_iter}


def _expand_labels(labels: Sequence, classes: Sequence):
    """Row index and class column for each (sample, label) pair."""
    col = {c: i for i, c in enumerate(classes)}
    rows, cols = [], []
    for i, s in enumerate(labels):
        for c in sorted(s):
            if c not in col:
                raise LearnerError(f"sample {i} carries label {c} outside the training classes {list(classes)}")
            rows.append(i)
            cols.append(col[c])
    return np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)


def fit_logistic(x, labels, classes, l2: float = 1e-3, max_iter: int = 500, gtol: float = 1e-6):
    """Multinomial logistic regression; multi-label samples count once per label."""
    x = np.asarray(x, dtype=np.float64)
    k = len(classes)
    if k < 2:
        raise LearnerError(f"need at least 2 classes, got {k}")
    if l2 < 0:
        raise LearnerError(f"l2 must be non-negative, got {l2}")
    rows, cols = _expand_labels(labels, classes)
    counts = np.bincount(cols, minlength=k)
    if np.any(counts == 0):
        raise LearnerError(f"empty class(es) in training data: {[classes[i] for i in np.flatnonzero(counts == 0)]}")
    xr = x[rows]
    y = np.zeros((rows.size, k))
    y[np.arange(rows.size), cols] = 1.0
    d = x.shape[1]
    params, info = lbfgs(lambda p: logistic_loss_grad(p, xr, y, l2), np.zeros((d + 1) * k), max_iter, gtol)
    w = params.reshape(d + 1, k)
    return LinearMap(w[:-1].copy(), w[-1].copy()), info


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingModel:
    kind: str
    std_a: Standardizer
    std_b: Standardizer
    proj_a: Optional[LinearMap] = None
    proj_b: Optional[LinearMap] = None
    clf_a: Optional[LinearMap] = None
    clf_b: Optional[LinearMap] = None
    train_classes: tuple = ()
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        last = self.clf_a if self.clf_a is not None else self.proj_a
        return last.out_dim

    def _parts(self, modality):
        if modality in ("a", 0):
            return self.std_a, self.proj_a, self.clf_a
        if modality in ("b", 1):
            return self.std_b, self.proj_b, self.clf_b
        raise LearnerError(f"unknown modality {modality!r}")

    def _forward(self, x, modality):
        std, proj, clf = self._parts(modality)
        z = std.transform(x)
        if proj is not None:
            z = proj(z)
        if clf is not None:
            z = softmax(clf(z))
        return z

    def embed(self, x, modality) -> np.ndarray:
        if self.kind == "ts":
            raise LearnerError("a trivial-solution model exposes predictions, not embeddings")
        return self._forward(x, modality)

    def predict(self, x, modality) -> np.ndarray:
        if self.clf_a is None:
            raise LearnerError(f"model kind {self.kind!r} has no classifier")
        post = self._forward(x, modality)
        return np.asarray(self.train_classes, dtype=np.int64)[np.argmax(post, axis=1)]

    def embed_rows(self, dataset: CrossModalDataset, modality, idx) -> np.ndarray:
        return self.embed(dataset.features(modality)[idx], modality)

    def predict_rows(self, dataset: CrossModalDataset, modality, idx) -> np.ndarray:
        return self.predict(dataset.features(modality)[idx], modality)


def _check_pair(train_a, train_b):
    a = np.asarray(train_a, dtype=np.float64)
    b = np.asarray(train_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise LearnerError(f"paired training matrices must share rows, got {a.shape} and {b.shape}")
    return a, b


def fit_cm(train_a, train_b, k: int, reg: float = 1e-4) -> EmbeddingModel:
    a, b = _check_pair(train_a, train_b)
    sa, sb = Standardizer.fit(a), Standardizer.fit(b)
    wa, wb, corr = cca(sa.transform(a), sb.transform(b), k, reg)
    return EmbeddingModel(
        "cm", sa, sb,
        proj_a=LinearMap(wa, np.zeros(k)), proj_b=LinearMap(wb, np.zeros(k)),
        metadata={"k": k, "reg": reg, "canonical_correlations": corr.tolist()},
    )


def _resolve_classes(labels, k, classes):
    if classes is None:
        classes = sorted(set().union(*[set(s) for s in labels])) if len(labels) else []
    classes = tuple(int(c) for c in classes)
    if k != len(classes):
        raise LearnerError(f"k={k} but there are {len(classes)} training classes")
    if k < 2:
        raise LearnerError(f"semantic matching needs at least 2 classes, got k={k}")
    return classes


def _fit_classifier_pair(kind, za, zb, labels, classes, l2, max_iter, sa, sb, proj=(None, None), meta=None):
    clf_a, info_a = fit_logistic(za, labels, classes, l2, max_iter)
    clf_b, info_b = fit_logistic(zb, labels, classes, l2, max_iter)
    metadata = dict(meta or {})
    metadata.update({
        "k": len(classes), "l2": l2, "multilabel": "replicate-per-label",
        "train_a": info_a, "train_b": info_b,
    })
    return EmbeddingModel(kind, sa, sb, proj[0], proj[1], clf_a, clf_b, classes, metadata)


def fit_sm(train_a, train_b, train_labels, k: int, l2: float = 1e-3, classes=None, max_iter: int = 500):
    a, b = _check_pair(train_a, train_b)
    classes = _resolve_classes(train_labels, k, classes)
    sa, sb = Standardizer.fit(a), Standardizer.fit(b)
    return _fit_classifier_pair("sm", sa.transform(a), sb.transform(b), train_labels, classes, l2, max_iter, sa, sb)


def fit_ts(train_a, train_b, train_labels, k: int, l2: float = 1e-3, classes=None, max_iter: int = 500):
    model = fit_sm(train_a, train_b, train_labels, k, l2, classes, max_iter)
    return EmbeddingModel("ts", model.std_a, model.std_b, None, None, model.clf_a, model.clf_b,
                          model.train_classes, model.metadata)


def fit_scm(train_a, train_b, train_labels, k: int, reg: float = 1e-4, l2: float = 1e-3, classes=None,
            max_iter: int = 500):
    a, b = _check_pair(train_a, train_b)
    classes = _resolve_classes(train_labels, k, classes)
    cm = fit_cm(a, b, k, reg)
    za = cm.proj_a(cm.std_a.transform(a))
    zb = cm.proj_b(cm.std_b.transform(b))
    return _fit_classifier_pair(
        "scm", za, zb, train_labels, classes, l2, max_iter, cm.std_a, cm.std_b,
        proj=(cm.proj_a, cm.proj_b), meta={"reg": reg, "canonical_correlations": cm.metadata["canonical_correlations"]},
    )


def prediction_bits(num_classes: int) -> int:
    """Bits needed to store one class prediction."""
    return max(1, math.ceil(math.log2(num_classes)))


# --------------------------------------------------------------------------
# binarisation
# --------------------------------------------------------------------------


def lower_median(x: np.ndarray) -> np.ndarray:
    """Column-wise median taking the lower middle value for even counts."""
    s = np.sort(x, axis=0)
    return s[(x.shape[0] - 1) // 2]


@dataclass(frozen=True)
class BinaryEncoder:
    model: EmbeddingModel
    code_length: int
    rotation: np.ndarray  # (model.dim, code_length)
    thresholds_a: np.ndarray
    thresholds_b: np.ndarray
    extension: str = "hyperplane"

    def project(self, x, modality) -> np.ndarray:
        return self.model.embed(x, modality) @ self.rotation

    def encode(self, x, modality) -> np.ndarray:
        th = self.thresholds_a if modality in ("a", 0) else self.thresholds_b
        return self.project(x, modality) > th

    def encode_rows(self, dataset, modality, idx) -> np.ndarray:
        return self.encode(dataset.features(modality)[idx], modality)


def pack_codes(bits: np.ndarray) -> np.ndarray:
    return np.packbits(np.asarray(bits, dtype=bool), axis=1)


def binarize(
    model: EmbeddingModel,
    code_length: int,
    train_a,
    train_b,
    extension: str = "hyperplane",
    seed: int = 0,
) -> BinaryEncoder:
    """Sign codes from a real-valued model, thresholded at training medians.

    Codes no longer than the model's K dims use its leading dimensions.  Longer
    codes extend the K-dim projection: ``"hyperplane"`` appends seeded random
    Gaussian hyperplanes over it, ``"refit"`` (CM only) re-fits CCA with
    ``k = code_length``.
    """
    if model.kind not in REAL_KINDS:
        raise LearnerError(f"cannot binarize a {model.kind!r} model")
    if code_length < 1:
        raise LearnerError(f"code_length must be >= 1, got {code_length}")
    if extension not in ("hyperplane", "refit"):
        raise LearnerError(f"unknown extension {extension!r}")
    a, b = _check_pair(train_a, train_b)
    base = model
    k = model.dim
    if code_length <= k:
        rotation = np.eye(k)[:, :code_length]
    elif extension == "hyperplane":
        extra = np.random.default_rng(seed).standard_normal((k, code_length - k))
        rotation = np.hstack([np.eye(k), extra])
    else:
        if model.kind != "cm":
            raise LearnerError("refit extension only applies to CM models")
        limit = min(a.shape[1], b.shape[1], a.shape[0] - 1)
        if code_length > limit:
            raise LearnerError(f"code_length={code_length} unobtainable: CCA supports at most {limit} dims")
        base = fit_cm(a, b, code_length, model.metadata.get("reg", 1e-4))
        rotation = np.eye(code_length)
    pa = base.embed(a, "a") @ rotation
    pb = base.embed(b, "b") @ rotation
    return BinaryEncoder(base, code_length, rotation, lower_median(pa), lower_median(pb), extension)


# --------------------------------------------------------------------------
# plugin: precomputed embeddings
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PrecomputedEmbedding:
    """Per-sample embeddings produced elsewhere (any external method).

    Rows follow the dataset's sample order, so ``embed_rows`` indexes them
    directly instead of transforming raw features.
    """

    emb_a: np.ndarray
    emb_b: np.ndarray
    kind: str = "precomputed"
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.emb_a.shape[1]

    def embed_rows(self, dataset, modality, idx) -> np.ndarray:
        emb = self.emb_a if modality in ("a", 0) else self.emb_b
        return emb[idx]


def load_precomputed(path_a, path_b, dataset: Optional[CrossModalDataset] = None) -> PrecomputedEmbedding:
    ea, eb = read_features(path_a), read_features(path_b)
    if ea.shape != eb.shape:
        raise LearnerError(f"precomputed embeddings disagree in shape: {ea.shape} vs {eb.shape}")
    if dataset is not None and ea.shape[0] != len(dataset):
        raise LearnerError(f"precomputed embeddings have {ea.shape[0]} rows, dataset has {len(dataset)}")
    return PrecomputedEmbedding(ea, eb, metadata={"source": [str(path_a), str(path_b)]})


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------

MODEL_MAGIC = b"XMBM"


def _model_arrays(model: EmbeddingModel, prefix=""):
    arrays = {}
    for side in ("a", "b"):
        std = getattr(model, f"std_{side}")
        arrays[f"{prefix}std_{side}.mean"] = std.mean
        arrays[f"{prefix}std_{side}.scale"] = std.scale
        for part in ("proj", "clf"):
            m = getattr(model, f"{part}_{side}")
            if m is not None:
                arrays[f"{prefix}{part}_{side}.weights"] = m.weights
                arrays[f"{prefix}{part}_{side}.offset"] = m.offset
    return arrays


def _model_header(model: EmbeddingModel):
    return {
        "kind": model.kind,
        "train_classes": list(model.train_classes),
        "metadata": model.metadata,
        "fingerprints": {"a": [model.std_a.fingerprint, model.std_a.n_fit],
                         "b": [model.std_b.fingerprint, model.std_b.n_fit]},
    }


def save_model(model, path) -> None:
    """Write a model blob: magic, u32 header length, JSON header, float32 arrays."""
    if isinstance(model, BinaryEncoder):
        header = {"kind": "binary", "code_length": model.code_length, "extension": model.extension,
                  "inner": _model_header(model.model)}
        arrays = _model_arrays(model.model, "inner.")
        arrays.update({"rotation": model.rotation, "thresholds_a": model.thresholds_a,
                       "thresholds_b": model.thresholds_b})
    elif isinstance(model, EmbeddingModel):
        header = _model_header(model)
        arrays = _model_arrays(model)
    else:
        raise LearnerError(f"cannot serialise {type(model).__name__}")
    header["arrays"] = [[name, list(np.shape(v))] for name, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def _rebuild_model(header, arrays, prefix=""):
    def lm(name):
        w = arrays.get(f"{prefix}{name}.weights")
        return None if w is None else LinearMap(w, arrays[f"{prefix}{name}.offset"])

    fp = header.get("fingerprints", {})
    sa = Standardizer(arrays[f"{prefix}std_a.mean"], arrays[f"{prefix}std_a.scale"], *fp.get("a", ["", 0]))
    sb = Standardizer(arrays[f"{prefix}std_b.mean"], arrays[f"{prefix}std_b.scale"], *fp.get("b", ["", 0]))
    return EmbeddingModel(
        header["kind"], sa, sb, lm("proj_a"), lm("proj_b"), lm("clf_a"), lm("clf_b"),
        tuple(header["train_classes"]), header["metadata"],
    )


def load_model(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise LearnerError(f"{path}: not a model blob")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    offset = 8 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * count
    if offset != len(raw):
        raise LearnerError(f"{path}: trailing or missing bytes")
    if header["kind"] == "binary":
        inner = _rebuild_model(header["inner"], arrays, "inner.")
        return BinaryEncoder(inner, header["code_length"], arrays["rotation"], arrays["thresholds_a"],
                             arrays["thresholds_b"], header["extension"])
    return _rebuild_model(header, arrays)
