"""Command-line entry point: ``xmbench run|split|score|synth``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import LabelTable, SynthSpec, generate_synthetic, load_dataset, read_labels, write_dataset
from .errors import XmbenchError
from .metrics import batch_ap, batch_cmc, mean_average_precision
from .protocol import make_fold_plan, relevance_matrix
from .retrieval import POLICIES, STABLE, TieOrderingPolicy, rank_scores, read_run
from .runner import RunConfig, emit_report, run, write_summary_table

log = logging.getLogger("xmbench")


def _cmd_run(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out or cfg["out_dir"])
    report, manifest = run(cfg, out_dir=out, jobs=args.jobs)
    emit_report(report, manifest, out)
    print(write_summary_table(report))
    n_cached = sum(1 for c in manifest.cells.values() if c["cached"])
    print(f"\n{len(report.cells)} cells scored ({n_cached} from cache), {len(report.failures)} failed -> {out}")
    for f in report.failures:
        print(f"FAILED {f['method']} {f['mode']} {f['direction']} fold {f['fold']}: {f['error']}", file=sys.stderr)
    return 1 if report.failures else 0


def _cmd_split(args) -> int:
    ds = load_dataset(args.dataset)
    plan = make_fold_plan(ds, args.folds, args.seed, args.fraction_db)
    text = plan.to_json(ds)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _apply_policy(batch, kind, seed):
    """Re-resolve ties of a stored ranking; ``stored`` keeps the file's order."""
    if kind == "stored":
        return dataclasses.replace(batch, policy=STABLE)
    policy = TieOrderingPolicy(kind, seed)
    if policy.analytic:
        return dataclasses.replace(batch, policy=policy)
    gallery_scores = np.empty_like(batch.scores)
    np.put_along_axis(gallery_scores, batch.order, batch.scores, axis=1)
    return rank_scores(gallery_scores, policy)


def _cmd_score(args) -> int:
    qids, gids, batch = read_run(args.run)
    batch = _apply_policy(batch, args.tie_policy, args.tie_seed)
    ids, sets = read_labels(args.qrels)
    lookup = dict(zip(ids, sets))
    missing = [x for x in list(qids) + list(gids) if x not in lookup]
    if missing:
        raise XmbenchError(f"{len(missing)} run ids have no qrels entry, e.g. {missing[:3]}")
    n_cls = max(max(s) for s in sets) + 1
    n_cls = max(n_cls, 2)
    ql = LabelTable([lookup[x] for x in qids], n_cls)
    gl = LabelTable([lookup[x] for x in gids], n_cls)
    rel = relevance_matrix(ql, gl)
    mr = mean_average_precision(batch_ap(batch, rel))
    curve = batch_cmc(batch, rel)
    out = {
        "map": mr.value,
        "num_queries": mr.num_queries,
        "excluded_queries": mr.num_excluded,
        "rank1": curve.rank1(),
        "cmc": curve.values.tolist()[: args.cmc_ranks],
    }
    print(json.dumps(out, sort_keys=True, indent=1))
    return 0


def _cmd_synth(args) -> int:
    spec = SynthSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8"))) if args.spec else SynthSpec()
    ds = generate_synthetic(spec)
    root = write_dataset(ds, args.out, fmt=args.format)
    print(f"wrote {len(ds)} samples, {ds.num_classes} classes to {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmbench", description="Class-disjoint cross-modal retrieval benchmark.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="execute a benchmark config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (overrides config out_dir)")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("split", help="emit the fold plan for a dataset as JSON")
    s.add_argument("--dataset", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--fraction-db", type=float, default=0.8)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_split)

    c = sub.add_parser("score", help="score a run file against label qrels")
    c.add_argument("--run", required=True)
    c.add_argument("--qrels", required=True, help="labels CSV (sample_id,labels)")
    c.add_argument("--tie-policy", choices=POLICIES + ("stored",), default="expected_ap_analytic")
    c.add_argument("--tie-seed", type=int, default=0)
    c.add_argument("--cmc-ranks", type=int, default=50)
    c.set_defaults(func=_cmd_score)

    y = sub.add_parser("synth", help="write a synthetic dataset")
    y.add_argument("--spec", help="SynthSpec JSON (defaults when omitted)")
    y.add_argument("--out", required=True)
    y.add_argument("--format", choices=("xmbf", "csv"), default="xmbf")
    y.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (XmbenchError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
