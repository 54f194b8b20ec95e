"""End-to-end command-line pipeline.

Subcommands: validate, synth, weights, distmat, cluster, evaluate,
pipeline, sweep, localize. Exit codes: 0 success, 1 runtime error,
2 invalid input or configuration. Every run writes its fully resolved
configuration into its output report for reproducibility.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .bagstore import DataError, Dataset, load_dataset, load_masks, resize_mask_to_grid
from .clusterers import (
    METHODS,
    ClusterConfig,
    assignment_from_csv,
    assignment_to_csv,
    assignment_to_json,
    ClusterAssignment,
    cluster_distance_matrix,
)
from .distances import (
    NAMED_VARIANTS,
    DistanceMatrix,
    HausdorffVariant,
    aggregate,
    distance_matrix,
)
from .metrics import evaluate, localization_auc, purity_sweep
from .synth import synthesize_to_dir
from .weights import (
    WeightConfig,
    WeightVector,
    combined_topk_soft_weights,
    hard_topk_weights,
    mask_weights,
    semi_soft_weights,
    unsup_scores,
    unsup_soft_weights,
    uniform_weights,
    weights_from_json,
    weights_to_csv,
    weights_to_json,
)

WEIGHT_MODES = ("uniform", "unsup", "semi", "topk", "combined", "mask")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Invalid configuration or command-line usage."""


def parse_measure(text: str) -> tuple[str, HausdorffVariant | None]:
    if text == "wa":
        return "wa", None
    if text.startswith("hausdorff:"):
        name = text.split(":", 1)[1]
        if name in NAMED_VARIANTS:
            return "hausdorff", NAMED_VARIANTS[name]
        if "/" in name:
            inner, outer = name.split("/", 1)
            return "hausdorff", HausdorffVariant(inner, outer)
        return "hausdorff", HausdorffVariant(name, "none")
    raise UsageError(
        f"unknown measure {text!r}; expected 'wa', 'hausdorff:<name>' with name in "
        f"{sorted(NAMED_VARIANTS)}, or 'hausdorff:<inner>/<outer>'"
    )


def parse_k_range(text: str, n: int) -> list[int]:
    if not text or text == "full":
        return list(range(1, n + 1))
    if ":" in text:
        lo, hi = text.split(":", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(tok) for tok in text.split(",") if tok]


def parse_exclude(text: str | None) -> set[str]:
    if not text:
        return set()
    return {tok.strip() for tok in text.split(",") if tok.strip()}


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def resolve_options(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge precedence: flags > config file > defaults."""
    file_cfg = load_config_file(getattr(args, "config", None))
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    return resolved


COMMON_DEFAULTS = {
    "tau": 0.1,
    "k": None,
    "subsample": None,
    "seed": 0,
    "aggregator": "mean",
    "weights": "uniform",
    "measure": "wa",
    "clusterer": "ward",
    "K": None,
    "restarts": 10,
    "max_iter": 300,
    "tol": 1e-6,
    "gmm_reg": 1e-6,
    "spectral_sigma": "median",
    "exclude_labels": "",
    "masks": None,
    "nmi_average": "geometric",
    "f1_average": "macro",
}


def weight_config(opts: dict) -> WeightConfig:
    return WeightConfig(
        tau=float(opts["tau"]),
        k=None if opts["k"] is None else int(opts["k"]),
        subsample_size=None if opts["subsample"] is None else int(opts["subsample"]),
        seed=int(opts["seed"]),
    )


def cluster_config(opts: dict, K: int) -> ClusterConfig:
    sigma = opts["spectral_sigma"]
    if isinstance(sigma, str) and sigma != "median":
        sigma = float(sigma)
    return ClusterConfig(
        method=opts["clusterer"],
        K=K,
        seed=int(opts["seed"]),
        restarts=int(opts["restarts"]),
        max_iter=int(opts["max_iter"]),
        tol=float(opts["tol"]),
        gmm_reg=float(opts["gmm_reg"]),
        spectral_sigma=sigma,
    )


def compute_weights(dataset: Dataset, opts: dict) -> list[WeightVector]:
    mode = opts["weights"]
    cfg = weight_config(opts)
    aggregator = opts["aggregator"]
    if mode == "uniform":
        return [uniform_weights(bag) for bag in dataset.bags]
    if mode == "unsup":
        return unsup_soft_weights(dataset, cfg, aggregator)
    if mode == "semi":
        if not dataset.reference_bags:
            raise UsageError("weight mode 'semi' requires reference_bags in the manifest")
        return semi_soft_weights(dataset, cfg)
    if mode in ("topk", "combined"):
        if cfg.k is None:
            raise UsageError(f"weight mode {mode!r} requires --k")
        scores = unsup_scores(dataset, cfg, aggregator)
        if mode == "topk":
            return [
                hard_topk_weights(s, cfg.k, bag_id=b.id, grid=b.grid)
                for b, s in zip(dataset.bags, scores)
            ]
        return [
            combined_topk_soft_weights(s, cfg.tau, cfg.k, bag_id=b.id, grid=b.grid)
            for b, s in zip(dataset.bags, scores)
        ]
    if mode == "mask":
        if not opts.get("masks"):
            raise UsageError("weight mode 'mask' requires --masks DIR")
        masks = load_masks(opts["masks"])
        out = []
        for bag in dataset.bags:
            if bag.grid is None:
                raise DataError(f"bag {bag.id!r} has no grid; mask weights need one")
            if bag.id not in masks:
                raise DataError(f"no mask for bag {bag.id!r}")
            resized = resize_mask_to_grid(masks[bag.id], bag.grid)
            out.append(mask_weights(resized, bag_id=bag.id))
        return out
    raise UsageError(f"unknown weight mode {mode!r}; expected one of {WEIGHT_MODES}")


def weights_from_file(dataset: Dataset, path: Path) -> list[WeightVector]:
    table = weights_from_json(path)
    out = []
    for bag in dataset.bags:
        if bag.id not in table:
            raise DataError(f"weights file is missing bag {bag.id!r}")
        out.append(WeightVector(table[bag.id], bag_id=bag.id, grid=bag.grid))
    return out


def build_distmat(dataset: Dataset, opts: dict, weights: list[WeightVector] | None):
    measure, variant = parse_measure(opts["measure"])
    if measure == "wa":
        if weights is None:
            weights = compute_weights(dataset, opts)
        return distance_matrix(dataset, "wa", weights=weights), weights
    return distance_matrix(dataset, "hausdorff", variant=variant), None


def aggregated_vectors(dataset: Dataset, weights: list[WeightVector]) -> np.ndarray:
    return np.stack([aggregate(bag, w) for bag, w in zip(dataset.bags, weights)])


def write_report(path: Path, command: str, opts: dict, payload: dict) -> None:
    body = {
        "tool": "mibag",
        "version": __version__,
        "command": command,
        "config": {k: v for k, v in sorted(opts.items())},
        "seed": opts.get("seed", 0),
    }
    body.update(payload)
    path.write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands

def cmd_validate(args) -> int:
    dataset = load_dataset(args.manifest)
    ms = [bag.m for bag in dataset.bags]
    print(f"N={dataset.n} D={dataset.d}")
    print(f"M: min={min(ms)} max={max(ms)} mean={sum(ms) / len(ms):.1f}")
    print(f"reference_bags={len(dataset.reference_bags)} unit_norm={dataset.unit_norm}")
    labels = [bag.label for bag in dataset.bags]
    if any(lab is None for lab in labels):
        print("warning: unlabeled bags present")
    histogram = Counter(lab for lab in labels if lab is not None)
    for lab, count in sorted(histogram.items()):
        print(f"label {lab}: {count}")
    return EXIT_OK


def cmd_synth(args) -> int:
    params = {
        "n": args.n,
        "m": args.m,
        "d": args.d,
        "k_true": args.k_true,
        "defect_instances": args.defect_instances,
        "noise": args.noise,
        "seed": args.seed,
        "pool_size": args.pool_size,
        "bg_spread": args.bg_spread,
        "mask_scale": args.mask_scale,
    }
    manifest = synthesize_to_dir(out_dir=Path(args.out), **params)
    write_report(Path(args.out) / "synth_report.json", "synth", params, {"manifest": str(manifest)})
    print(manifest)
    return EXIT_OK


def cmd_weights(args) -> int:
    opts = resolve_options(args, COMMON_DEFAULTS)
    dataset = load_dataset(args.manifest)
    weights = compute_weights(dataset, opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weights_to_json(weights, out / "weights.json")
    weights_to_csv(weights, out / "weights.csv")
    write_report(out / "weights_report.json", "weights", opts, {"n_bags": dataset.n})
    print(out / "weights.json")
    return EXIT_OK


def cmd_distmat(args) -> int:
    opts = resolve_options(args, COMMON_DEFAULTS)
    dataset = load_dataset(args.manifest)
    preloaded = weights_from_file(dataset, Path(args.weights_json)) if args.weights_json else None
    matrix, _ = build_distmat(dataset, opts, preloaded)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    matrix.to_csv(out / "distmat.csv")
    write_report(
        out / "distmat_report.json", "distmat", opts,
        {"n_bags": dataset.n, "measure": matrix.measure},
    )
    print(out / "distmat.csv")
    return EXIT_OK


def cmd_cluster(args) -> int:
    opts = resolve_options(args, COMMON_DEFAULTS)
    if opts["K"] is None:
        raise UsageError("cluster requires --K")
    K = int(opts["K"])
    matrix = DistanceMatrix.from_csv(args.distmat)
    vectors = None
    if opts["clusterer"] in ("kmeans", "gmm"):
        if not args.vectors:
            raise UsageError("clusterer kmeans/gmm needs --vectors (aggregated embeddings CSV)")
        vectors = np.loadtxt(args.vectors, delimiter=",", ndmin=2)
    assignment = cluster_distance_matrix(
        matrix, opts["clusterer"], K, cluster_config(opts, K), vectors=vectors
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    assignment_to_csv(matrix.ids, assignment, out / "assignment.csv")
    assignment_to_json(matrix.ids, assignment, out / "assignment.json")
    write_report(
        out / "cluster_report.json", "cluster", opts,
        {"n_bags": matrix.n, "K": K, "empty_clusters": list(assignment.empty_clusters)},
    )
    print(out / "assignment.csv")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    opts = resolve_options(args, COMMON_DEFAULTS)
    dataset = load_dataset(args.manifest)
    table = assignment_from_csv(args.assignment)
    missing = [bag_id for bag_id in dataset.ids if bag_id not in table]
    if missing:
        raise DataError(f"assignment missing bags: {missing[:5]}")
    labels = np.array([table[bag_id] for bag_id in dataset.ids], dtype=np.int64)
    K = int(labels.max()) + 1 if labels.size else 1
    assignment = ClusterAssignment(labels=labels, K=K)
    report = evaluate(
        dataset.labels,
        assignment,
        exclude=parse_exclude(opts["exclude_labels"]),
        nmi_average=opts["nmi_average"],
        f1_average=opts["f1_average"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(
        out / "report.json", "evaluate", opts,
        {
            "n_bags": dataset.n,
            "metrics": {"nmi": report.nmi, "ari": report.ari, "f1": report.f1},
            "matching": [[t, c] for t, c in report.matching],
            "excluded_labels": list(report.excluded_labels),
            "n_evaluated": report.n_evaluated,
        },
    )
    print(out / "report.json")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    opts = resolve_options(args, COMMON_DEFAULTS)
    if opts["K"] is None:
        raise UsageError("pipeline requires --K")
    K = int(opts["K"])
    dataset = load_dataset(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    measure, _ = parse_measure(opts["measure"])
    weights = None
    if measure == "wa":
        weights = compute_weights(dataset, opts)
        wdir = out / "weights"
        wdir.mkdir(exist_ok=True)
        weights_to_json(weights, wdir / "weights.json")
        weights_to_csv(weights, wdir / "weights.csv")
    matrix, weights = build_distmat(dataset, opts, weights)
    matrix.to_csv(out / "distmat.csv")

    vectors = None
    if opts["clusterer"] in ("kmeans", "gmm"):
        if weights is None:
            raise UsageError("clusterer kmeans/gmm requires measure 'wa'")
        vectors = aggregated_vectors(dataset, weights)
        np.savetxt(out / "vectors.csv", vectors, delimiter=",")
    assignment = cluster_distance_matrix(
        matrix, opts["clusterer"], K, cluster_config(opts, K), vectors=vectors
    )
    assignment_to_csv(dataset.ids, assignment, out / "assignment.csv")
    assignment_to_json(dataset.ids, assignment, out / "assignment.json")

    payload = {
        "n_bags": dataset.n,
        "K": K,
        "measure": matrix.measure,
        "empty_clusters": list(assignment.empty_clusters),
    }
    if all(lab is not None for lab in dataset.labels):
        report = evaluate(
            dataset.labels,
            assignment,
            exclude=parse_exclude(opts["exclude_labels"]),
            nmi_average=opts["nmi_average"],
            f1_average=opts["f1_average"],
        )
        payload["metrics"] = {"nmi": report.nmi, "ari": report.ari, "f1": report.f1}
        payload["matching"] = [[t, c] for t, c in report.matching]
        payload["excluded_labels"] = list(report.excluded_labels)
        payload["n_evaluated"] = report.n_evaluated
    else:
        payload["metrics"] = None
    write_report(out / "report.json", "pipeline", opts, payload)
    print(out / "report.json")
    return EXIT_OK


def cmd_sweep(args) -> int:
    opts = resolve_options(args, COMMON_DEFAULTS)
    dataset = load_dataset(args.manifest)
    if args.k_range == "":
        raise UsageError("empty --k-range")
    k_range = parse_k_range(args.k_range, dataset.n)
    if not k_range:
        raise UsageError("empty --k-range")
    weights = None
    matrix, weights = build_distmat(dataset, opts, weights)
    vectors = None
    if opts["clusterer"] in ("kmeans", "gmm"):
        if weights is None:
            raise UsageError("clusterer kmeans/gmm requires measure 'wa'")
        vectors = aggregated_vectors(dataset, weights)
    curve = purity_sweep(
        matrix,
        dataset.labels,
        opts["clusterer"],
        k_range,
        cfg=cluster_config(opts, max(k_range)),
        exclude=parse_exclude(opts["exclude_labels"]),
        vectors=vectors,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curve.to_csv(out / "purity.csv")
    write_report(
        out / "curve.json", "sweep", opts,
        {
            "n_bags": dataset.n,
            "measure": matrix.measure,
            "mauc": curve.mauc,
            "r_at_p": {repr(t): v for t, v in curve.r_at_p.items()},
            "points": [[k, p] for k, p in curve.points],
        },
    )
    print(out / "curve.json")
    return EXIT_OK


def cmd_localize(args) -> int:
    opts = resolve_options(args, COMMON_DEFAULTS)
    if not opts.get("masks"):
        raise UsageError("localize requires --masks DIR")
    dataset = load_dataset(args.manifest)
    weights = compute_weights(dataset, opts)
    masks = load_masks(opts["masks"])
    masks.check_alignment(dataset)
    overall, per_image = localization_auc(weights, masks, per_image=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(
        out / "auc.json", "localize", opts,
        {"n_bags": dataset.n, "auc": overall, "per_image_auc": per_image},
    )
    print(out / "auc.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

def _add_weight_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weights", choices=WEIGHT_MODES, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--subsample", type=int, default=None)
    p.add_argument("--aggregator", choices=("mean", "max", "min"), default=None)
    p.add_argument("--masks", default=None)


def _add_cluster_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--clusterer", choices=METHODS, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--gmm-reg", dest="gmm_reg", type=float, default=None)
    p.add_argument("--spectral-sigma", dest="spectral_sigma", default=None)


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON config file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mibag", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mibag {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a dataset manifest and print statistics")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--k-true", dest="k_true", type=int, default=3)
    p.add_argument("--defect-instances", dest="defect_instances", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool-size", dest="pool_size", type=int, default=256)
    p.add_argument("--bg-spread", dest="bg_spread", type=float, default=0.1)
    p.add_argument("--mask-scale", dest="mask_scale", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("weights", help="compute per-bag instance weights")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_weight_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("distmat", help="build the pairwise bag distance matrix")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--measure", default=None)
    p.add_argument("--weights-json", dest="weights_json", default=None,
                   help="reuse weights emitted by the weights command")
    _add_weight_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_distmat)

    p = sub.add_parser("cluster", help="cluster a distance matrix CSV")
    p.add_argument("--distmat", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vectors", default=None,
                   help="aggregated embedding CSV, required for kmeans/gmm")
    _add_cluster_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("evaluate", help="score an assignment against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude-labels", dest="exclude_labels", default=None)
    p.add_argument("--nmi-average", dest="nmi_average",
                   choices=("geometric", "arithmetic"), default=None)
    p.add_argument("--f1-average", dest="f1_average",
                   choices=("macro", "micro"), default=None)
    _add_common_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="weights -> distances -> clustering -> evaluation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--measure", default=None)
    p.add_argument("--exclude-labels", dest="exclude_labels", default=None)
    p.add_argument("--nmi-average", dest="nmi_average",
                   choices=("geometric", "arithmetic"), default=None)
    p.add_argument("--f1-average", dest="f1_average",
                   choices=("macro", "micro"), default=None)
    _add_weight_flags(p)
    _add_cluster_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", help="purity over a range of cluster counts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--measure", default=None)
    p.add_argument("--k-range", dest="k_range", default="full",
                   help="'full', 'lo:hi', or comma-separated Ks")
    p.add_argument("--exclude-labels", dest="exclude_labels", default=None)
    _add_weight_flags(p)
    _add_cluster_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("localize", help="pixel-level AUC of weight maps against masks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_weight_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_localize)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
