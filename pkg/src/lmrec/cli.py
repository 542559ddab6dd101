"""Command-line entry point: ``lmrec <subcommand> [--config PATH] [--seed N] [--out PATH] ...``.

Every subcommand prints a tab-separated summary line to stdout; ``--report``
additionally writes one ``name=value`` metric per line. Exit status is 0 on
success and 2 on invalid input (bad config, malformed files, bad arguments).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config as kv
from .bench import benchmark_search, synthetic_database, synthetic_queries
from .clustering import ClusteringConfig, build_centroid_set, mean_centroid_set, read_centroids, write_centroids
from .data import (CodecError, Dataset, MetadataError, SyntheticSpec, draw_queries, generate_synthetic,
                   partition_by_region, read_embeddings, read_metadata, write_embeddings, write_metadata,
                   write_truth)
from .evaluation import UnreachableTarget, calibrate_threshold, sensitivity_specificity, summary_line, write_report
from .index import CellTable, CentroidIndex, build_exact_index, kmeans_cells
from .network import load_checkpoint, save_checkpoint
from .pipeline import (InferenceConfig, clean_dataset, format_result, group_references, infer, max_similarity,
                       parse_result)
from .training import TrainingConfig, curriculum_train, embed

log = logging.getLogger("lmrec")

EXIT_OK = 0
EXIT_INVALID = 2


class UsageError(ValueError):
    pass


@dataclass
class IndexConfig:
    n_cells: int = 0  # 0 = exact index
    n_probe: int = 10
    seed: int = 0


@dataclass
class BenchConfig:
    n_landmarks: int = 1000
    per_landmark: int = 200
    dim: int = 32
    n_queries: int = 200
    repetitions: int = 5
    k: int = 1
    noise: float = 0.3
    seed: int = 0


# ---------------------------------------------------------------------------
# helpers


def _emit(metrics: Dict[str, object], report: Optional[str]) -> None:
    print(summary_line(metrics))
    if report:
        write_report(report, metrics)


def _need(args, name: str) -> str:
    value = getattr(args, name)
    if value is None:
        raise UsageError(f"--{name.replace('_', '-')} is required")
    return value


def _features(path: str, model: Optional[str]) -> Tuple[np.ndarray, np.ndarray]:
    """Vectors of an embedding file, passed through the network when ``model`` is given."""
    X, y = read_embeddings(path)
    if model is None:
        return X.astype(np.float64), y
    net, _, _ = load_checkpoint(model)
    if X.shape[1] != net.d_in:
        raise UsageError(f"{path} has dim {X.shape[1]}, model expects {net.d_in}")
    return embed(net, X), y


def _landmark_count(args, labels: np.ndarray) -> int:
    if getattr(args, "n_landmarks", None):
        return int(args.n_landmarks)
    if getattr(args, "metadata", None):
        return len(read_metadata(args.metadata))
    raise UsageError("pass --n-landmarks or --metadata to fix the non-landmark label")


def _load_index(path: str) -> CentroidIndex:
    cset, cells = read_centroids(path)
    if cells is None:
        return build_exact_index(cset)
    centers, assignment, n_probe = cells
    return CentroidIndex(cset.vectors, cset.landmark_ids, cset.cluster_sizes, CellTable(centers, assignment, n_probe))


def _read_locations(path: str) -> List[Optional[Tuple[float, float]]]:
    out: List[Optional[Tuple[float, float]]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            cols = line.rstrip("\n").split("\t")
            if cols == [""] or cols[0].lower() in ("", "nan", "none"):
                out.append(None)
                continue
            try:
                lat, lon = float(cols[0]), float(cols[1])
            except (ValueError, IndexError):
                raise UsageError(f"{path}:{lineno}: expected 'lat<TAB>lon'") from None
            out.append(None if math.isnan(lat) or math.isnan(lon) else (lat, lon))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> Dict[str, object]:
    spec = kv.load(SyntheticSpec, args.config, seed=args.seed)
    out = _need(args, "out")
    os.makedirs(out, exist_ok=True)
    corpus = generate_synthetic(spec)
    ds = corpus.dataset
    write_embeddings(os.path.join(out, "train.lmeb"), ds.X, ds.y)
    write_metadata(os.path.join(out, "metadata.tsv"), corpus.metadata)
    write_truth(os.path.join(out, "truth.tsv"), corpus.truth)
    q = draw_queries(corpus, args.queries_per_class, args.clean_queries, spec.seed + 1)
    write_embeddings(os.path.join(out, "queries.lmeb"), q.X, q.y)
    # references: the first few inlier samples of each landmark
    refs = [np.flatnonzero((ds.y == c) & ~corpus.truth.is_outlier)[: args.references] for c in range(1, ds.n + 1)]
    refs = np.concatenate(refs)
    write_embeddings(os.path.join(out, "references.lmeb"), ds.X[refs], ds.y[refs])
    return {"command": "synth", "samples": len(ds), "landmarks": ds.n, "queries": len(q),
            "references": refs.size, "dim": ds.d_in, "out": out}


def cmd_train(args) -> Dict[str, object]:
    cfg = kv.load(TrainingConfig, args.config, seed=args.seed)
    X, y = read_embeddings(_need(args, "data"))
    meta = read_metadata(_need(args, "metadata"))
    data = Dataset(X.astype(np.float64), y, len(meta))
    start = time.perf_counter()
    result = curriculum_train(partition_by_region(data, meta), cfg)
    save_checkpoint(_need(args, "out"), result.net, result.centers, result.class_ids)
    metrics: Dict[str, object] = {"command": "train", "stages": len(result.reports),
                                  "classes": int(result.class_ids.size), "seconds": round(time.perf_counter() - start, 3)}
    for r in result.reports:
        metrics[f"stage{r.stage}.final_loss"] = r.epoch_loss[-1] if r.epoch_loss else float("nan")
    return metrics


def cmd_clean(args) -> Dict[str, object]:
    E, y = _features(_need(args, "data"), args.model)
    R, ry = _features(_need(args, "references"), args.model)
    refs = group_references(R, ry)
    keep = np.ones(len(y), dtype=bool)
    for lid, ref in refs.items():
        rows = np.flatnonzero(y == lid)
        keep[rows] = clean_dataset(E[rows], ref, args.gamma)
    X_raw, _ = read_embeddings(args.data)
    write_embeddings(_need(args, "out"), X_raw[keep], y[keep])
    checked = np.isin(y, list(refs))
    return {"command": "clean", "checked": int(checked.sum()), "rejected": int((~keep).sum()),
            "kept": int(keep.sum()), "gamma": args.gamma}


def cmd_centroids(args) -> Dict[str, object]:
    E, y = _features(_need(args, "data"), args.model)
    n = _landmark_count(args, y)
    lm = y <= n
    if args.single:
        cset = mean_centroid_set(E[lm], y[lm], n)
    else:
        cset = build_centroid_set(E[lm], y[lm], n, kv.load(ClusteringConfig, args.config))
    write_centroids(_need(args, "out"), cset)
    return {"command": "centroids", "landmarks": n, "centroids": len(cset),
            "multi_centroid_fraction": cset.multi_centroid_fraction()}


def cmd_index(args) -> Dict[str, object]:
    cfg = kv.load(IndexConfig, args.config, seed=args.seed)
    cset, _ = read_centroids(_need(args, "centroids"))
    cells = None
    if cfg.n_cells > 0:
        if not 1 <= cfg.n_cells <= len(cset) or not 1 <= cfg.n_probe <= cfg.n_cells:
            raise UsageError(f"need 1 <= n_probe <= n_cells <= {len(cset)}")
        centers, assignment = kmeans_cells(cset.vectors, cfg.n_cells, cfg.seed)
        cells = (centers, assignment, cfg.n_probe)
    write_centroids(_need(args, "out"), cset, cells)
    return {"command": "index", "centroids": len(cset), "kind": "cells" if cells else "exact",
            "n_cells": cfg.n_cells, "n_probe": cfg.n_probe if cells else 0}


def cmd_infer(args) -> Dict[str, object]:
    cfg = kv.load(InferenceConfig, args.config)
    index = _load_index(_need(args, "index"))
    Q, _ = _features(_need(args, "queries"), args.model)
    refs = {}
    if args.references:
        R, ry = _features(args.references, args.model)
        refs = group_references(R, ry)
    meta = {m.landmark_id: m for m in read_metadata(args.metadata)} if args.metadata else {}
    locs: Sequence[Optional[Tuple[float, float]]] = [None] * len(Q)
    if args.locations:
        locs = _read_locations(args.locations)
        if len(locs) != len(Q):
            raise UsageError(f"{len(locs)} locations for {len(Q)} queries")
    if cfg.verify != "never" and not refs:
        raise UsageError("reference verification is on; pass --references or set verify=never")
    n_landmark = 0
    with open(_need(args, "out"), "w", encoding="utf-8", newline="\n") as fh:
        for i, (q, loc) in enumerate(zip(Q, locs)):
            res = infer(q, index, refs, meta, cfg, loc)
            n_landmark += res.is_landmark
            fh.write(format_result(i, res) + "\n")
    return {"command": "infer", "queries": len(Q), "landmark_verdicts": n_landmark,
            "non_landmark_verdicts": len(Q) - n_landmark}


def cmd_eval(args) -> Dict[str, object]:
    _, y = read_embeddings(_need(args, "queries"))
    n = _landmark_count(args, y)
    truth = [{int(v)} if v <= n else set() for v in y]
    metrics: Dict[str, object] = {"command": "eval"}
    if args.results:
        preds: Dict[int, Optional[int]] = {}
        with open(args.results, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    qid, res = parse_result(line)
                    preds[int(qid)] = res.top
        missing = sorted(set(range(len(y))) - set(preds))
        if missing:
            raise UsageError(f"no result for queries {missing[:10]}")
        report = sensitivity_specificity([preds[i] for i in range(len(y))], truth)
        metrics.update(report.as_dict())
    if args.target_specificity is not None:
        index = _load_index(_need(args, "index"))
        Q, _ = _features(args.queries, args.model)
        clean = y > n
        if not clean.any():
            raise UsageError("calibration needs landmark-free queries")
        metrics["eta"] = calibrate_threshold(max_similarity(index, Q[clean]), args.target_specificity)
    if len(metrics) == 1:
        raise UsageError("nothing to evaluate: pass --results and/or --target-specificity")
    return metrics


def cmd_bench(args) -> Dict[str, object]:
    cfg = kv.load(BenchConfig, args.config, seed=args.seed)
    db, labels, cset = synthetic_database(cfg.n_landmarks, cfg.per_landmark, cfg.dim, cfg.noise, cfg.seed)
    queries = synthetic_queries(db, cfg.n_queries, cfg.noise, cfg.seed + 1)
    report = benchmark_search(queries, build_exact_index(cset), CentroidIndex(db, labels), cfg.repetitions, cfg.k)
    metrics: Dict[str, object] = {"command": "bench"}
    metrics.update(report.as_dict())
    return metrics


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file for this subcommand")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output file (or directory for synth)")
    common.add_argument("--report", help="write name=value metrics to this file")
    common.add_argument("--model", help="checkpoint; input vectors are embedded through it first")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lmrec", description="Landmark recognition toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--queries-per-class", type=int, default=10)
    p.add_argument("--clean-queries", type=int, default=2000)
    p.add_argument("--references", type=int, default=5, help="references per landmark")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="curriculum training")
    p.add_argument("--data", help="training embedding file")
    p.add_argument("--metadata", help="landmark metadata TSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("clean", parents=[common], help="reject samples dissimilar to their references")
    p.add_argument("--data")
    p.add_argument("--references")
    p.add_argument("--gamma", type=float, required=True)
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("centroids", parents=[common], help="cluster embeddings into landmark centroids")
    p.add_argument("--data")
    p.add_argument("--metadata")
    p.add_argument("--n-landmarks", type=int)
    p.add_argument("--single", action="store_true", help="one mean centroid per landmark")
    p.set_defaults(func=cmd_centroids)

    p = sub.add_parser("index", parents=[common], help="attach a coarse cell table to a centroid file")
    p.add_argument("--centroids")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("infer", parents=[common], help="recognise landmarks in query vectors")
    p.add_argument("--index")
    p.add_argument("--queries")
    p.add_argument("--references")
    p.add_argument("--metadata")
    p.add_argument("--locations", help="TSV of lat<TAB>lon per query; empty line = no location")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score results and/or calibrate eta")
    p.add_argument("--queries")
    p.add_argument("--results")
    p.add_argument("--index")
    p.add_argument("--metadata")
    p.add_argument("--n-landmarks", type=int)
    p.add_argument("--target-specificity", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="centroid vs full-database search timing")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        metrics = args.func(args)
    except (UnreachableTarget, kv.ConfigError, CodecError, MetadataError, ValueError, OSError) as exc:
        print(f"lmrec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    _emit(metrics, args.report)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
