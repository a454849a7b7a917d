"""End-to-end benchmark runs: config -> folds -> models -> rankings -> report.

A run executes the grid fold x method x mode x direction (x code length for
binary methods).  Models are trained once per (fold, method) and reused for
every task of that fold.  Each (fold, method) unit's cell results are cached
under ``<out>/cache/<cache key>/`` so an unchanged config re-emits its report
without retraining.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import learners
from .dataset import CrossModalDataset, SynthSpec, dataset_fingerprint, generate_synthetic, load_dataset
from .errors import ConfigError, XmbenchError
from .metrics import FoldEntry, aggregate_folds, batch_ap, batch_cmc, mean_average_precision, random_rank1
from .protocol import (
    MODES, FoldPlan, TaskSpec, build_task, canonical_direction, make_fold_plan, relevance_matrix,
)
from .retrieval import METRICS, TieOrderingPolicy, rank_hamming_many, rank_many, rank_ts_many, write_run

log = logging.getLogger(__name__)

METHOD_NAMES = ("cm", "sm", "scm", "ts", "precomputed")
_SHORT = {"image_to_text": "i2t", "text_to_image": "t2i"}

DEFAULT_CONFIG = {
    "dataset": {"synthetic": {}},
    "n_folds": 5,
    "seed": 0,
    "fraction_db": 0.8,
    "methods": [{"name": "cm"}, {"name": "sm"}, {"name": "scm"}, {"name": "ts"}],
    "modes": ["non_xtd", "xtd"],
    "directions": ["i2t", "t2i"],
    "code_lengths": [8, 16, 32],
    "binary_extension": "hyperplane",
    "tie_policy": {"kind": "expected_ap_analytic", "seed": 0},
    "metric": "cosine",
    "out_dir": "runs/default",
    "save_runs": False,
    "save_models": False,
}
_METHOD_DEFAULTS = {"reg": 1e-4, "l2": 1e-3, "max_iter": 500, "binary": False}


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = copy.deepcopy(DEFAULT_CONFIG)
        cfg.update(copy.deepcopy(d))
        cfg["methods"] = [_normalise_method(m) for m in cfg["methods"]]
        cfg["directions"] = [_SHORT[canonical_direction(x)] for x in cfg["directions"]]
        ds = cfg["dataset"]
        if not isinstance(ds, dict) or len(set(ds) & {"synthetic", "path"}) != 1:
            raise ConfigError("dataset must hold exactly one of 'synthetic' or 'path'")
        if "synthetic" in ds:
            ds["synthetic"] = SynthSpec.from_dict(ds["synthetic"] or {}).to_dict()
        tp = cfg["tie_policy"]
        if isinstance(tp, str):
            tp = {"kind": tp, "seed": 0}
        cfg["tie_policy"] = {"kind": tp.get("kind", "expected_ap_analytic"), "seed": int(tp.get("seed", 0))}
        TieOrderingPolicy(**cfg["tie_policy"])
        _validate(cfg)
        return cls(cfg)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def __getitem__(self, key):
        return self.raw[key]

    def config_hash(self) -> str:
        hashed = {k: v for k, v in self.raw.items() if k != "out_dir"}
        blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def cells(self) -> list:
        """Every (method label, mode, direction) the config asks for, per fold."""
        out = []
        for m in self.raw["methods"]:
            for label in method_labels(m, self.raw["code_lengths"]):
                for mode in self.raw["modes"]:
                    for d in self.raw["directions"]:
                        out.append((label, mode, d))
        return out


def _normalise_method(m) -> dict:
    if isinstance(m, str):
        m = {"name": m}
    m = dict(m)
    name = m.get("name")
    if name not in METHOD_NAMES:
        raise ConfigError(f"unknown method {name!r}; expected one of {METHOD_NAMES}")
    out = dict(_METHOD_DEFAULTS)
    out.update(m)
    out.setdefault("label", name)
    if name == "precomputed" and not ("a" in out and "b" in out):
        raise ConfigError("precomputed method needs 'a' and 'b' embedding files")
    if out["binary"] and name in ("ts",):
        raise ConfigError("the trivial solution cannot be binarized")
    return out


def _validate(cfg):
    if not isinstance(cfg["n_folds"], int) or cfg["n_folds"] < 1:
        raise ConfigError(f"n_folds must be a positive integer, got {cfg['n_folds']!r}")
    if not 0 < cfg["fraction_db"] < 1:
        raise ConfigError(f"fraction_db must lie in (0, 1), got {cfg['fraction_db']}")
    if not cfg["methods"]:
        raise ConfigError("at least one method is required")
    if not cfg["modes"] or any(m not in MODES for m in cfg["modes"]):
        raise ConfigError(f"modes must be a non-empty subset of {MODES}")
    if not cfg["directions"]:
        raise ConfigError("at least one direction is required")
    if cfg["metric"] not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}")
    if any((not isinstance(c, int)) or c < 1 for c in cfg["code_lengths"]):
        raise ConfigError("code_lengths must be positive integers")
    if cfg["binary_extension"] not in ("hyperplane", "refit"):
        raise ConfigError("binary_extension must be 'hyperplane' or 'refit'")
    labels = [lab for m in cfg["methods"] for lab in method_labels(m, cfg["code_lengths"])]
    if len(labels) != len(set(labels)):
        raise ConfigError(f"duplicate method labels {labels}; set distinct 'label' fields")
    for m in cfg["methods"]:
        if m["reg"] < 0 or m["l2"] < 0 or m["max_iter"] < 1:
            raise ConfigError(f"hyperparameters out of range in {m}")


def method_labels(method: dict, code_lengths) -> list:
    if method["binary"]:
        return [f"{method['label']}@{c}b" for c in code_lengths]
    return [method["label"]]


def cell_id(label, mode, direction, fold=None) -> str:
    base = f"{label}_{mode}_{direction}".replace("@", "-")
    return base if fold is None else f"{base}_f{fold}"


# --------------------------------------------------------------------------
# report containers
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    meta: dict
    folds: list
    cells: list
    aggregates: list
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"meta": self.meta, "folds": self.folds, "cells": self.cells,
                "aggregates": self.aggregates, "failures": self.failures}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def aggregate(self, method, mode, direction) -> dict:
        direction = _SHORT[canonical_direction(direction)]
        for a in self.aggregates:
            if (a["method"], a["mode"], a["direction"]) == (method, mode, direction):
                return a
        raise KeyError((method, mode, direction))

    def fold_cells(self, method, mode, direction) -> list:
        direction = _SHORT[canonical_direction(direction)]
        return sorted((c for c in self.cells if (c["method"], c["mode"], c["direction"]) == (method, mode, direction)),
                      key=lambda c: c["fold"])


@dataclass
class RunManifest:
    config_hash: str
    cache_key: str
    cells: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_dict(self):
        return {"config_hash": self.config_hash, "cache_key": self.cache_key, "cells": self.cells,
                "artifacts": sorted(self.artifacts), "timings": self.timings}


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------


def resolve_dataset(cfg: RunConfig) -> CrossModalDataset:
    ds = cfg["dataset"]
    if "synthetic" in ds:
        return generate_synthetic(SynthSpec.from_dict(ds["synthetic"]))
    return load_dataset(ds["path"])


def _train(method: dict, ds: CrossModalDataset, train_idx, classes):
    a, b = ds.modality_a[train_idx], ds.modality_b[train_idx]
    labels = [ds.labels[int(i)] for i in train_idx]
    k = len(classes)
    name = method["name"]
    if name == "cm":
        return learners.fit_cm(a, b, k, method["reg"])
    if name == "sm":
        return learners.fit_sm(a, b, labels, k, method["l2"], classes, method["max_iter"])
    if name == "scm":
        return learners.fit_scm(a, b, labels, k, method["reg"], method["l2"], classes, method["max_iter"])
    if name == "ts":
        return learners.fit_ts(a, b, labels, k, method["l2"], classes, method["max_iter"])
    return learners.load_precomputed(method["a"], method["b"], ds)


def _score_cell(model, ds, views, policy, metric):
    qm, gm = views.query_modality, views.gallery_modality
    if isinstance(model, learners.BinaryEncoder):
        batch = rank_hamming_many(model.encode_rows(ds, qm, views.query), model.encode_rows(ds, gm, views.gallery),
                                  policy)
    elif getattr(model, "kind", None) == "ts":
        batch = rank_ts_many(model.predict_rows(ds, qm, views.query), model.predict_rows(ds, gm, views.gallery),
                             policy)
    else:
        batch = rank_many(model.embed_rows(ds, qm, views.query), model.embed_rows(ds, gm, views.gallery), metric,
                          policy)
    rel = relevance_matrix(ds.labels.subset(views.query), ds.labels.subset(views.gallery))
    aps = batch_ap(batch, rel)
    mr = mean_average_precision(aps)
    curve = batch_cmc(batch, rel)
    result = {
        "map": mr.value,
        "num_queries": mr.num_queries,
        "excluded_queries": mr.num_excluded,
        "gallery_size": int(views.gallery.size),
        "rank1": curve.rank1(),
        "random_rank1": random_rank1(rel),
        "cmc": curve.values.tolist(),
        "fallback_queries": int(batch.fallback.sum()) if batch.fallback is not None else 0,
    }
    return result, batch


def _method_key(method: dict) -> str:
    blob = json.dumps(method, sort_keys=True)
    return f"{method['label']}-{hashlib.sha256(blob.encode()).hexdigest()[:8]}"


def _run_unit(cfg: RunConfig, ds, plan: FoldPlan, fold: int, method: dict, cache_dir: Path, out_dir: Path):
    """Train one method on one fold and score all of its cells."""
    cache_file = cache_dir / f"fold{fold}__{_method_key(method)}.json"
    t0 = time.perf_counter()
    if cache_file.is_file():
        with open(cache_file, encoding="utf-8") as fh:
            cached = json.load(fh)
        return cached["cells"], {"cached": True, "seconds": time.perf_counter() - t0, "status": "scored"}
    part = plan.folds[fold]
    asg = plan.assignments[fold]
    classes = tuple(sorted(part.train_classes))
    cells = []
    status = "failed"
    labels = method_labels(method, cfg["code_lengths"])

    def failed_all(msg):
        return [{"method": lab, "mode": mo, "direction": d, "fold": fold, "status": "failed", "error": msg}
                for lab in labels for mo in cfg["modes"] for d in cfg["directions"]]

    try:
        model = _train(method, ds, np.asarray(asg.train_db), classes)
        status = "trained"
    except XmbenchError as exc:
        log.warning("fold %d method %s failed to train: %s", fold, method["label"], exc)
        return failed_all(f"train: {exc}"), {"cached": False, "seconds": time.perf_counter() - t0, "status": status}
    variants = [(labels[0], model)]
    if method["binary"]:
        variants = []
        train = np.asarray(asg.train_db)
        for lab, bits in zip(labels, cfg["code_lengths"]):
            try:
                enc = learners.binarize(model, bits, ds.modality_a[train], ds.modality_b[train],
                                        cfg["binary_extension"], seed=cfg["seed"] + fold)
            except XmbenchError as exc:
                enc = exc
            variants.append((lab, enc))
    if cfg["save_models"]:
        mdir = out_dir / "models"
        mdir.mkdir(parents=True, exist_ok=True)
        for lab, m in variants:
            if isinstance(m, (learners.EmbeddingModel, learners.BinaryEncoder)):
                learners.save_model(m, mdir / f"{cell_id(lab, 'model', 'x', fold)}.xmbm")
    tp = cfg["tie_policy"]
    policy = TieOrderingPolicy(tp["kind"], tp["seed"] + 1000 * fold)
    for lab, m in variants:
        for mode in cfg["modes"]:
            for d in cfg["directions"]:
                entry = {"method": lab, "mode": mode, "direction": d, "fold": fold}
                try:
                    if isinstance(m, Exception):
                        raise m
                    views = build_task(plan, TaskSpec(mode, d, fold))
                    result, batch = _score_cell(m, ds, views, policy, cfg["metric"])
                    entry.update(result)
                    entry["dropped_straddlers"] = len(asg.dropped)
                    entry["status"] = "ok"
                    if cfg["save_runs"]:
                        rdir = out_dir / "runs"
                        rdir.mkdir(parents=True, exist_ok=True)
                        write_run(rdir / f"{cell_id(lab, mode, d, fold)}.xmbr", batch,
                                  [ds.sample_ids[i] for i in views.query],
                                  [ds.sample_ids[i] for i in views.gallery])
                except XmbenchError as exc:
                    entry.update({"status": "failed", "error": str(exc)})
                cells.append(entry)
    status = "scored"
    cache_dir.mkdir(parents=True, exist_ok=True)
    if all(c["status"] == "ok" for c in cells):
        tmp = cache_file.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"cells": cells}, fh, sort_keys=True)
        tmp.replace(cache_file)
    return cells, {"cached": False, "seconds": time.perf_counter() - t0, "status": status}


def run(config, out_dir=None, jobs: int = 1):
    """Execute a full benchmark grid; returns ``(EvalReport, RunManifest)``."""
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_dict(config)
    out = Path(out_dir or cfg["out_dir"])
    t_start = time.perf_counter()
    ds = resolve_dataset(cfg)
    fp = dataset_fingerprint(ds)
    chash = cfg.config_hash()
    cache_key = hashlib.sha256(f"{chash}:{fp}".encode()).hexdigest()[:16]
    cache_dir = out / "cache" / cache_key
    plan = make_fold_plan(ds, cfg["n_folds"], cfg["seed"], cfg["fraction_db"])
    t_plan = time.perf_counter()

    units = [(f, mi) for f in range(cfg["n_folds"]) for mi in range(len(cfg["methods"]))]
    results = {}

    def work(unit):
        f, mi = unit
        m = cfg["methods"][mi]
        try:
            return unit, _run_unit(cfg, ds, plan, f, m, cache_dir, out)
        except Exception as exc:  # noqa: BLE001 - isolate unexpected crashes per unit
            log.error("unit fold=%d method=%s crashed: %s", f, m["label"], traceback.format_exc())
            cells = [{"method": lab, "mode": mo, "direction": d, "fold": f, "status": "failed",
                      "error": f"{type(exc).__name__}: {exc}"}
                     for lab in method_labels(m, cfg["code_lengths"]) for mo in cfg["modes"]
                     for d in cfg["directions"]]
            return unit, (cells, {"cached": False, "seconds": 0.0, "status": "failed"})

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for unit, res in pool.map(work, units):
                results[unit] = res
    else:
        for unit in units:
            _, res = work(unit)
            results[unit] = res

    manifest = RunManifest(chash, cache_key)
    all_cells = []
    for (f, _), (cells, info) in sorted(results.items()):
        for c in cells:
            all_cells.append(c)
            manifest.cells[cell_id(c["method"], c["mode"], c["direction"], f)] = {
                "status": "scored" if c["status"] == "ok" else "failed",
                "cached": info["cached"],
                "unit_seconds": round(info["seconds"], 6),
            }
    manifest.timings = {"plan_seconds": round(t_plan - t_start, 6),
                        "total_seconds": round(time.perf_counter() - t_start, 6)}
    report = _assemble(cfg, ds, fp, plan, all_cells)
    return report, manifest


def _assemble(cfg: RunConfig, ds, fp, plan: FoldPlan, cells) -> EvalReport:
    key = lambda c: (c["method"], c["mode"], c["direction"], c["fold"])  # noqa: E731
    ok = sorted((c for c in cells if c["status"] == "ok"), key=key)
    failures = sorted(({k: c[k] for k in ("method", "mode", "direction", "fold", "error")}
                       for c in cells if c["status"] != "ok"), key=key)
    aggregates = []
    for label, mode, d in cfg.cells():
        group = [c for c in ok if (c["method"], c["mode"], c["direction"]) == (label, mode, d)]
        if len(group) != cfg["n_folds"]:
            continue
        agg = aggregate_folds([FoldEntry(c["fold"], c["map"], np.asarray(c["cmc"])) for c in group], cfg["n_folds"])
        aggregates.append({
            "method": label, "mode": mode, "direction": d,
            "map_mean": agg["map_mean"], "map_per_fold": agg["map_per_fold"],
            "rank1_mean": float(np.mean([c["rank1"] for c in group])),
            "random_rank1_mean": float(np.mean([c["random_rank1"] for c in group])),
            "cmc_mean": agg["cmc_mean"].tolist(), "cmc_length": agg["cmc_length"],
        })
    meta = {
        "config_hash": cfg.config_hash(),
        "config": {k: v for k, v in cfg.raw.items() if k != "out_dir"},
        "dataset": {"name": ds.name, "fingerprint": fp, "num_samples": len(ds), "num_classes": ds.num_classes},
        "n_folds": cfg["n_folds"],
        "seeds": {"split": cfg["seed"], "tie": cfg["tie_policy"]["seed"]},
        "expected_cells": len(cfg.cells()) * cfg["n_folds"],
    }
    folds = [{"fold": f, "train_classes": sorted(p.train_classes), "test_classes": sorted(p.test_classes),
              "dropped_straddlers": len(a.dropped)}
             for f, (p, a) in enumerate(zip(plan.folds, plan.assignments))]
    return EvalReport(meta, folds, ok, aggregates, failures)


# --------------------------------------------------------------------------
# output files
# --------------------------------------------------------------------------


def emit_report(report: EvalReport, manifest: RunManifest, out_dir) -> list:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    written = []

    def write_text(name, text):
        p = out / name
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(p)

    write_text("report.json", report.to_json())
    rows = ["method,mode,direction,map,rank1,n_folds"]
    for a in report.aggregates:
        rows.append(f"{a['method']},{a['mode']},{a['direction']},{a['map_mean']:.6f},{a['rank1_mean']:.6f},"
                    f"{len(a['map_per_fold'])}")
    write_text("summary.csv", "\n".join(rows) + "\n")
    for a in report.aggregates:
        lines = ["rank,value"] + [f"{i + 1},{v!r}" for i, v in enumerate(a["cmc_mean"])]
        write_text(f"cmc_{cell_id(a['method'], a['mode'], a['direction'])}.csv", "\n".join(lines) + "\n")
    manifest.artifacts = sorted(str(p.name) for p in written) + ["manifest.json"]
    write_text("manifest.json", json.dumps(manifest.to_dict(), sort_keys=True, indent=1) + "\n")
    return written


def write_summary_table(report: EvalReport) -> str:
    lines = [f"{'method':<12} {'mode':<8} {'dir':<4} {'MAP':>7} {'rank1':>7}"]
    for a in report.aggregates:
        lines.append(f"{a['method']:<12} {a['mode']:<8} {a['direction']:<4} {a['map_mean']:7.4f} {a['rank1_mean']:7.4f}")
    return "\n".join(lines)
