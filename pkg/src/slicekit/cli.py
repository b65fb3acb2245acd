"""Command-line surface: fit, infer, discover, explain, improve, synth.

Exit codes: 0 success, 1 validation error, 2 protocol or trainer failure
(argparse keeps its conventional nonzero exit for usage errors). Every report
file embeds a format version and the resolved configuration, and reruns with
identical inputs and seed produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import (
    LabeledBundle,
    load_bundle,
    load_feature_table,
    save_bundle,
    save_feature_table,
)
from .discover import discover_report
from .errors import ProtocolError, SliceKitError, ValidationError
from .explain import (
    build_synthetic_feature_dataset,
    significant_features,
    synthetic_detection_scores,
)
from .improve import (
    DEFAULT_THRESHOLD_GRID,
    LoopConfig,
    active_learning,
    flip_predictions,
    selective_prediction,
    validate_flip_threshold,
)
from .mixture import EmConfig, WeightConfig
from .sdm import (
    DISCOVER_WEIGHTS,
    DOMINO_WEIGHTS,
    EXPLAIN_WEIGHTS,
    assign_labeled,
    fit_domino,
    fit_edisa,
    infer_slices,
    load_model,
    save_model,
    structure_variant,
)
from .synth import (
    PlantedSpec,
    generate_classifier_scenario,
    generate_planted,
    load_truth,
    save_truth,
)


def _f(v: float) -> str:
    return repr(float(v))


def _dump_json(payload: dict, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _csv_companion(out: str | Path) -> Path:
    return Path(out).with_suffix(".csv")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _weight_triple(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            "expected gamma,lambda_e,lambda_conf (three comma-separated numbers)"
        )
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(","))


def _int_list(text: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    return tuple(int(p) for p in text.split(","))


def _load_labeled(path: str) -> LabeledBundle:
    bundle = load_bundle(path)
    if not isinstance(bundle, LabeledBundle):
        raise ValidationError(f"{path}: bundle has no labels.csv; a labeled bundle is required")
    return bundle


def _truth_points(path: str | None, purpose: str) -> dict[str, dict]:
    if not path:
        raise ValidationError(f"{purpose} requires --truth, the ground-truth oracle sidecar")
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"ground-truth oracle sidecar not found at {path}")
    return load_truth(p)


def _truth_correct(path: str | None, purpose: str) -> dict[str, bool]:
    points = _truth_points(path, purpose)
    return {pid: bool(rec["correct"]) for pid, rec in points.items()}


def _truth_gold(path: str | None, purpose: str) -> dict[str, int]:
    points = _truth_points(path, purpose)
    return {pid: int(rec["gold"]) for pid, rec in points.items()}


def _resolve_weights(args: argparse.Namespace, default: WeightConfig) -> WeightConfig:
    if getattr(args, "structure", None):
        return structure_variant(args.structure)
    if getattr(args, "weights", None):
        g, le, lc = args.weights
        return WeightConfig(gamma=g, lambda_e=le, lambda_conf=lc, mode=default.mode)
    return default


def _weights_dict(w: WeightConfig) -> dict:
    return {
        "gamma": _f(w.gamma),
        "lambda_e": _f(w.lambda_e),
        "lambda_conf": _f(w.lambda_conf),
        "mode": w.mode,
    }


# ---------------------------------------------------------------------------
# Subcommand implementations


def _cmd_fit(args: argparse.Namespace) -> int:
    bundle = _load_labeled(args.train)
    default = DOMINO_WEIGHTS if args.mode == "domino" else DISCOVER_WEIGHTS
    weights = _resolve_weights(args, default)
    cfg = EmConfig(
        k=args.k,
        max_iters=args.max_iters,
        rel_tol=args.rel_tol,
        seed=args.seed,
        uniform_prior=args.uniform_prior,
    )
    fit = fit_domino if weights.mode == "domino" else fit_edisa
    model = fit(bundle, w=weights, cfg=cfg, delta=args.delta, pca_dim=args.pca_dim)
    config = {
        "subcommand": "fit",
        "train": args.train,
        "weights": _weights_dict(weights),
        "k": args.k,
        "pca_dim": args.pca_dim,
        "delta": _f(args.delta),
        "seed": args.seed,
        "max_iters": args.max_iters,
        "rel_tol": _f(args.rel_tol),
        "uniform_prior": args.uniform_prior,
    }
    save_model(model, args.out, extra={"config": config})
    populated = sum(1 for s in model.fit_report if s.size > 0)
    print(
        f"fit: wrote {args.out} ({model.mode}, {populated}/{model.k} slices "
        f"populated, {len(model.error_slices)} error slices)"
    )
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    bundle = load_bundle(args.bundle)
    labeled = isinstance(bundle, LabeledBundle)
    assignment = assign_labeled(model, bundle) if labeled else infer_slices(model, bundle)
    points = [
        {
            "id": pid,
            "slice": int(assignment.slices[r]),
            "error_probability": _f(assignment.error_probability[r]),
        }
        for r, pid in enumerate(assignment.ids)
    ]
    payload = {
        "format_version": 1,
        "kind": "slice-assignment",
        "config": {
            "subcommand": "infer",
            "model": args.model,
            "bundle": args.bundle,
            "labeled": labeled,
        },
        "mode": assignment.mode,
        "domino_inference_extension": assignment.mode == "domino" and not labeled,
        "points": points,
    }
    _dump_json(payload, args.out)
    _write_csv(
        _csv_companion(args.out),
        ["id", "slice", "error_probability"],
        [[p["id"], p["slice"], p["error_probability"]] for p in points],
    )
    n_err = int(np.isin(assignment.slices, sorted(model.error_slices)).sum())
    print(
        f"infer: wrote {args.out} ({len(points)} points, "
        f"{n_err} in error slices, {'labeled' if labeled else 'marginalized'})"
    )
    return 0


def _cmd_discover(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    bundle = load_bundle(args.bundle)
    if isinstance(bundle, LabeledBundle):
        bundle = bundle.without_labels()
    truth = _truth_correct(args.truth, "discover")
    domino_model = load_model(args.domino_model) if args.domino_model else None
    report = discover_report(model, bundle, truth, args.seed, domino_model=domino_model)
    rows_json = [
        {
            "method": method,
            "num_selected": num,
            "efficacy": None if eff is None else _f(eff),
        }
        for method, num, eff in report.rows
    ]
    payload = {
        "format_version": 1,
        "kind": "discover-report",
        "config": {
            "subcommand": "discover",
            "model": args.model,
            "bundle": args.bundle,
            "truth": args.truth,
            "seed": args.seed,
            "domino_model": args.domino_model,
        },
        "domino_inference_extension": report.domino_inference_extension,
        "rows": rows_json,
    }
    _dump_json(payload, args.out)
    _write_csv(
        _csv_companion(args.out),
        ["method", "num_selected", "efficacy"],
        [
            [r["method"], r["num_selected"], "N/A" if r["efficacy"] is None else r["efficacy"]]
            for r in rows_json
        ],
    )
    summary = ", ".join(
        f"{m}: n={n} eff={'N/A' if e is None else format(e, '.2f')}"
        for m, n, e in report.rows
    )
    print(f"discover: wrote {args.out} ({summary})")
    return 0


def _cmd_explain_significance(args: argparse.Namespace) -> int:
    bundle = _load_labeled(args.bundle)
    features = load_feature_table(args.features)
    if args.model:
        model = load_model(args.model)
    else:
        weights = _resolve_weights(args, EXPLAIN_WEIGHTS)
        model = fit_edisa(
            bundle,
            w=weights,
            cfg=EmConfig(k=args.k, seed=args.seed),
            delta=args.delta,
            pca_dim=args.pca_dim,
        )
    report = significant_features(
        model,
        bundle,
        features,
        alpha=args.alpha,
        n_perm=args.n_perm,
        seed=args.seed,
        homo_denom=args.homo_denom,
    )
    payload = {
        "format_version": 1,
        "kind": "feature-significance-report",
        "config": {
            "subcommand": "explain significance",
            "model": args.model,
            "bundle": args.bundle,
            "features": args.features,
            "alpha": _f(args.alpha),
            "n_perm": args.n_perm,
            "seed": args.seed,
            "homo_denom": args.homo_denom,
            "weights": _weights_dict(model.weights),
        },
        "pairs": [
            {
                "slice": p.slice,
                "feature": p.feature,
                "p_value": _f(p.p_value),
                "in_mean": _f(p.in_mean),
                "out_mean": _f(p.out_mean),
                "significant": p.significant,
                "homo": None if p.homo is None else _f(p.homo),
                "comp": None if p.comp is None else _f(p.comp),
                "v": None if p.v is None else _f(p.v),
            }
            for p in report.pairs
        ],
        "features": [
            {
                "feature": s.feature,
                "slices": list(s.slices),
                "homo": _f(s.homo),
                "comp": _f(s.comp),
                "v": _f(s.v),
            }
            for s in report.features
        ],
        "feature_prop": _f(report.feature_prop),
        "avg_homo": _f(report.avg_homo),
        "avg_comp": _f(report.avg_comp),
        "avg_v": _f(report.avg_v),
        "avg_weighted_v": _f(report.avg_weighted_v),
        "skipped_slices": list(report.skipped_slices),
        "num_features": report.num_features,
    }
    _dump_json(payload, args.out)
    _write_csv(
        _csv_companion(args.out),
        ["feature", "slices", "homo", "comp", "v"],
        [
            [s.feature, ";".join(str(j) for j in s.slices), _f(s.homo), _f(s.comp), _f(s.v)]
            for s in report.features
        ],
    )
    print(
        f"explain significance: wrote {args.out} "
        f"({len(report.features)}/{report.num_features} features significant, "
        f"feature_prop={report.feature_prop:.2f}, avg_v={report.avg_v:.2f}, "
        f"avg_weighted_v={report.avg_weighted_v:.2f})"
    )
    return 0


def _cmd_explain_synthetic(args: argparse.Namespace) -> int:
    bundle = _load_labeled(args.bundle)
    features = load_feature_table(args.features)
    synth_bundle, target_ids = build_synthetic_feature_dataset(
        bundle, args.feature, features, seed=args.seed
    )
    weights = _resolve_weights(args, EXPLAIN_WEIGHTS)
    model = fit_edisa(
        synth_bundle,
        w=weights,
        cfg=EmConfig(k=args.k, seed=args.seed),
        delta=args.delta,
        pca_dim=args.pca_dim,
    )
    result = synthetic_detection_scores(model, synth_bundle, target_ids, args.feature)
    payload = {
        "format_version": 1,
        "kind": "synthetic-detection-report",
        "config": {
            "subcommand": "explain synthetic",
            "bundle": args.bundle,
            "features": args.features,
            "feature": args.feature,
            "k": args.k,
            "pca_dim": args.pca_dim,
            "delta": _f(args.delta),
            "seed": args.seed,
            "weights": _weights_dict(weights),
        },
        "feature": result.feature,
        "target_count": result.target_count,
        "dataset_size": result.dataset_size,
        "predicted_count": result.predicted_count,
        "precision": None if result.precision is None else _f(result.precision),
        "recall": _f(result.recall),
        "f1": None if result.f1 is None else _f(result.f1),
    }
    _dump_json(payload, args.out)
    _write_csv(
        _csv_companion(args.out),
        ["metric", "value"],
        [
            ["precision", "N/A" if result.precision is None else _f(result.precision)],
            ["recall", _f(result.recall)],
            ["f1", "N/A" if result.f1 is None else _f(result.f1)],
        ],
    )
    prec = "N/A" if result.precision is None else f"{result.precision:.2f}"
    f1 = "N/A" if result.f1 is None else f"{result.f1:.2f}"
    print(
        f"explain synthetic: wrote {args.out} (feature {args.feature!r}: "
        f"precision={prec}, recall={result.recall:.2f}, f1={f1})"
    )
    return 0


def _curve_payload(report, config: dict, kind: str) -> dict:
    s = report.summary
    return {
        "format_version": 1,
        "kind": kind,
        "config": config,
        "metric": report.metric,
        "steps": [{"id": pid, "metric": _f(m)} for pid, m in report.steps],
        "baseline_steps": [
            {"id": pid, "metric": _f(m)} for pid, m in report.baseline_steps
        ],
        "summary": {
            "initial_metric": None if s.initial_metric is None else _f(s.initial_metric),
            "proportion": None if s.proportion is None else _f(s.proportion),
            "improvement": None if s.improvement is None else _f(s.improvement),
            "c_proportion": None if s.c_proportion is None else _f(s.c_proportion),
            "c_improvement": None if s.c_improvement is None else _f(s.c_improvement),
        },
    }


def _write_curve_csvs(report, out: str) -> None:
    # two-column (step, metric) companions; the baseline gets its own file
    _write_csv(
        _csv_companion(out),
        ["step", "metric"],
        [[i + 1, _f(m)] for i, (_, m) in enumerate(report.steps)],
    )
    base = Path(out).with_suffix(".baseline.csv")
    _write_csv(
        base,
        ["step", "metric"],
        [[i + 1, _f(m)] for i, (_, m) in enumerate(report.baseline_steps)],
    )


def _summary_line(report) -> str:
    s = report.summary

    def fmt(v: float | None) -> str:
        return "N/A" if v is None else f"{v:.2f}"

    return (
        f"initial={fmt(s.initial_metric)}, improvement={fmt(s.improvement)}, "
        f"proportion={fmt(s.proportion)}, c_proportion={fmt(s.c_proportion)}"
    )


def _cmd_improve_selective(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    bundle = load_bundle(args.bundle)
    if isinstance(bundle, LabeledBundle):
        bundle = bundle.without_labels()
    truth = _truth_correct(args.truth, "improve selective")
    report = selective_prediction(model, bundle, truth)
    config = {
        "subcommand": "improve selective",
        "model": args.model,
        "bundle": args.bundle,
        "truth": args.truth,
    }
    _dump_json(_curve_payload(report, config, "selective-prediction-report"), args.out)
    _write_curve_csvs(report, args.out)
    print(f"improve selective: wrote {args.out} ({_summary_line(report)})")
    return 0


def _cmd_improve_flip(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    bundle = load_bundle(args.bundle)
    if isinstance(bundle, LabeledBundle):
        bundle = bundle.without_labels()
    val = _load_labeled(args.val)
    truth = _truth_gold(args.truth, "improve flip")
    if args.validate_threshold:
        threshold = validate_flip_threshold(model, val, grid=args.grid, seed=args.seed)
    else:
        threshold = args.threshold
    preds_before = {
        pid: int(np.argmax(bundle.conf[r])) for r, pid in enumerate(bundle.ids)
    }
    new_preds, report = flip_predictions(model, bundle, val, threshold, truth)
    flipped = {
        pid: cls for pid, cls in sorted(new_preds.items()) if cls != preds_before[pid]
    }
    config = {
        "subcommand": "improve flip",
        "model": args.model,
        "bundle": args.bundle,
        "val": args.val,
        "truth": args.truth,
        "threshold": _f(threshold),
        "threshold_validated": args.validate_threshold,
        "seed": args.seed,
    }
    payload = _curve_payload(report, config, "flip-report")
    payload["flips"] = flipped
    _dump_json(payload, args.out)
    _write_curve_csvs(report, args.out)
    print(
        f"improve flip: wrote {args.out} (threshold={threshold:g}, "
        f"{len(flipped)} flips, {_summary_line(report)})"
    )
    return 0


def _cmd_improve_active(args: argparse.Namespace) -> int:
    scenario_path = Path(args.scenario) / "scenario.json"
    if not scenario_path.exists():
        raise ValidationError(f"no scenario.json under {args.scenario}")
    scenario = json.loads(scenario_path.read_text(encoding="utf-8"))
    try:
        trainer_cmd = list(scenario["trainer"]["command"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{scenario_path}: missing trainer command") from exc
    train_bundle = load_bundle(Path(args.scenario) / "train")
    cfg = LoopConfig(
        strategy=args.strategy,
        step_size=args.step_size,
        sdm_k=args.k,
        sdm_pca_dim=args.pca_dim,
        sdm_delta=args.delta,
        seed=args.seed,
        trainer_timeout=args.timeout,
        workdir=args.workdir,
    )
    result = active_learning(
        cfg,
        trainer_cmd,
        train_bundle.ids,
        seed_frac=args.seed_frac,
        budget=args.budget,
    )
    payload = {
        "format_version": 1,
        "kind": "active-learning-report",
        "config": {
            "subcommand": "improve active",
            "scenario": args.scenario,
            "strategy": args.strategy,
            "step_size": args.step_size,
            "budget": args.budget,
            "seed_frac": _f(args.seed_frac),
            "k": args.k,
            "pca_dim": args.pca_dim,
            "delta": _f(args.delta),
            "seed": args.seed,
            "timeout": _f(args.timeout),
        },
        "status": result.status,
        "detail": result.detail,
        "final_train_size": len(result.train_ids),
        "steps": [
            {
                "iteration": s.iteration,
                "num_train": s.num_train,
                "num_selected": s.num_selected,
                "val_accuracy": _f(s.val_accuracy),
            }
            for s in result.steps
        ],
    }
    _dump_json(payload, args.out)
    _write_csv(
        _csv_companion(args.out),
        ["iteration", "num_train", "num_selected", "val_accuracy"],
        [
            [s.iteration, s.num_train, s.num_selected, _f(s.val_accuracy)]
            for s in result.steps
        ],
    )
    last = result.steps[-1].val_accuracy if result.steps else float("nan")
    print(
        f"improve active: wrote {args.out} (status={result.status}, "
        f"{len(result.steps)} rounds, {len(result.train_ids)} labeled, "
        f"final accuracy={last:.4f})"
    )
    if result.status == "trainer-error":
        print(f"error: {result.detail}", file=sys.stderr)
        return 2
    return 0


def _cmd_synth_planted(args: argparse.Namespace) -> int:
    plan: dict[int, tuple[str, ...]] = {}
    if args.feature_plan:
        try:
            raw = json.loads(args.feature_plan)
            plan = {int(k): tuple(str(n) for n in v) for k, v in raw.items()}
        except (ValueError, TypeError, AttributeError) as exc:
            raise ValidationError(
                f"--feature-plan must be a JSON object of cluster -> names: {exc}"
            ) from exc
    spec = PlantedSpec(
        k_true=args.k_true,
        error_cluster_ids=args.error_clusters,
        dim=args.dim,
        num_classes=args.classes,
        separation=args.separation,
        error_rate=args.error_rate,
        sizes=args.sizes if args.sizes else tuple([args.size] * args.k_true),
        feature_plan=plan,
        feature_noise=args.feature_noise,
        seed=args.seed,
    )
    data = generate_planted(spec)
    out = Path(args.out)
    save_bundle(data.bundle, out)
    if data.features.rows:
        save_feature_table(data.features, out / "features.jsonl")
    truth = {
        pid: {
            "gold": int(data.bundle.labels[r]),
            "correct": not data.errors[pid],
            "cluster": data.clusters[pid],
        }
        for r, pid in enumerate(data.bundle.ids)
    }
    save_truth(truth, out / "truth.json")
    n_err = sum(data.errors.values())
    print(
        f"synth planted: wrote {args.out} ({data.bundle.n} points, "
        f"{spec.k_true} clusters, {n_err} mispredicted)"
    )
    return 0


def _cmd_synth_scenario(args: argparse.Namespace) -> int:
    scenario = generate_classifier_scenario(
        args.seed,
        args.out,
        train_size=args.train_size,
        test_size=args.test_size,
        val_size=args.val_size,
        frozen_frac=args.frozen_frac,
    )
    print(
        f"synth scenario: wrote {args.out} (train={scenario.train_bundle.n}, "
        f"val={scenario.val_bundle.n}, test={scenario.test_bundle.n}, "
        f"frozen on {len(scenario.seed_train_ids)} points)"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_fit_knobs(p: argparse.ArgumentParser, k: int, pca: int) -> None:
    p.add_argument("--k", type=_positive_int, default=k, help=f"slice count (default {k})")
    p.add_argument(
        "--pca-dim", type=int, default=pca, help=f"embedding PCA dimension (default {pca})"
    )
    p.add_argument(
        "--delta", type=float, default=0.5, help="error-slice accuracy threshold (default 0.5)"
    )
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")


def _add_weight_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group()
    group.add_argument(
        "--weights",
        type=_weight_triple,
        default=None,
        metavar="G,LE,LC",
        help="modality weights gamma,lambda_e,lambda_conf",
    )
    group.add_argument(
        "--structure",
        default=None,
        help="weight preset: edisa-y, edisa-ey, edisa-z, or edisa-e",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slicekit",
        description="Find, explain, and exploit error-prone slices of a classifier.",
    )
    parser.add_argument("--version", action="version", version=f"slicekit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a slice model on a labeled bundle")
    p.add_argument("--train", required=True, help="labeled bundle directory")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.add_argument(
        "--mode",
        choices=("edisa", "domino"),
        default="edisa",
        help="model family (default edisa: weights 0.15,0.1,1; domino: 1,10,40)",
    )
    _add_weight_flags(p)
    _add_fit_knobs(p, k=128, pca=128)
    p.add_argument("--max-iters", type=_positive_int, default=300, help="EM iteration cap (default 300)")
    p.add_argument("--rel-tol", type=float, default=1e-6, help="EM relative objective tolerance (default 1e-6)")
    p.add_argument(
        "--uniform-prior",
        action="store_true",
        help="freeze slice priors at 1/k instead of learning them",
    )
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("infer", help="assign slices and error probabilities")
    p.add_argument("--model", required=True, help="model JSON from fit")
    p.add_argument("--bundle", required=True, help="bundle directory (labeled or not)")
    p.add_argument("--out", required=True, help="output report JSON path")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("discover", help="efficacy of detection vs baselines")
    p.add_argument("--model", required=True, help="model JSON from fit")
    p.add_argument("--bundle", required=True, help="bundle directory to scan")
    p.add_argument("--truth", required=True, help="ground-truth sidecar JSON")
    p.add_argument("--out", required=True, help="output report JSON path")
    p.add_argument("--seed", type=int, default=0, help="random-baseline seed (default 0)")
    p.add_argument(
        "--domino-model", default=None, help="optional domino model for a comparison row"
    )
    p.set_defaults(func=_cmd_discover)

    p = sub.add_parser("explain", help="explain error slices through features")
    esub = p.add_subparsers(dest="explain_command", required=True)

    pe = esub.add_parser("significance", help="permutation-test feature significance")
    pe.add_argument("--model", default=None, help="model JSON; omitted = refit on the bundle")
    pe.add_argument("--bundle", required=True, help="labeled bundle directory")
    pe.add_argument("--features", required=True, help="NDJSON feature sidecar")
    pe.add_argument("--out", required=True, help="output report JSON path")
    pe.add_argument("--alpha", type=float, default=0.05, help="significance level (default 0.05)")
    pe.add_argument("--n-perm", type=_positive_int, default=1000, help="permutations (default 1000)")
    pe.add_argument(
        "--homo-denom",
        choices=("mispredicted", "slice"),
        default="mispredicted",
        help="homogeneity denominator (default mispredicted)",
    )
    _add_weight_flags(pe)
    _add_fit_knobs(pe, k=128, pca=128)
    pe.set_defaults(func=_cmd_explain_significance)

    pe = esub.add_parser("synthetic", help="single-feature synthetic detection task")
    pe.add_argument("--bundle", required=True, help="labeled bundle directory")
    pe.add_argument("--features", required=True, help="NDJSON feature sidecar")
    pe.add_argument("--feature", required=True, help="feature name to plant")
    pe.add_argument("--out", required=True, help="output report JSON path")
    _add_weight_flags(pe)
    _add_fit_knobs(pe, k=16, pca=8)
    pe.set_defaults(func=_cmd_explain_synthetic)

    p = sub.add_parser("improve", help="use detection to improve a frozen classifier")
    isub = p.add_subparsers(dest="improve_command", required=True)

    pi = isub.add_parser("selective", help="abstain on detected points")
    pi.add_argument("--model", required=True, help="model JSON from fit")
    pi.add_argument("--bundle", required=True, help="bundle directory to evaluate")
    pi.add_argument("--truth", required=True, help="ground-truth sidecar JSON")
    pi.add_argument("--out", required=True, help="output report JSON path")
    pi.set_defaults(func=_cmd_improve_selective)

    pi = isub.add_parser("flip", help="flip predictions of detected points")
    pi.add_argument("--model", required=True, help="model JSON from fit")
    pi.add_argument("--bundle", required=True, help="bundle directory to evaluate")
    pi.add_argument("--val", required=True, help="labeled validation bundle directory")
    pi.add_argument("--truth", required=True, help="ground-truth sidecar JSON")
    pi.add_argument("--out", required=True, help="output report JSON path")
    pi.add_argument(
        "--threshold", type=float, default=0.5, help="multi-class flip threshold (default 0.5)"
    )
    pi.add_argument(
        "--validate-threshold",
        action="store_true",
        help="pick the threshold on a held-out validation split instead",
    )
    pi.add_argument(
        "--grid",
        type=_float_list,
        default=DEFAULT_THRESHOLD_GRID,
        help="threshold grid for --validate-threshold (comma-separated)",
    )
    pi.add_argument("--seed", type=int, default=0, help="holdout-split seed (default 0)")
    pi.set_defaults(func=_cmd_improve_flip)

    pi = isub.add_parser("active", help="active-learning loop over a trainer")
    pi.add_argument("--scenario", required=True, help="scenario directory from synth scenario")
    pi.add_argument("--out", required=True, help="output report JSON path")
    pi.add_argument(
        "--strategy",
        choices=("edisa", "random", "confidence"),
        default="edisa",
        help="selection strategy (default edisa)",
    )
    pi.add_argument("--budget", type=_positive_int, default=1000, help="max labeled points (default 1000)")
    pi.add_argument(
        "--step-size",
        type=_positive_int,
        default=100,
        help="selection size for random/confidence strategies (default 100)",
    )
    pi.add_argument(
        "--seed-frac", type=float, default=0.02, help="initial labeled fraction (default 0.02)"
    )
    pi.add_argument("--k", type=_positive_int, default=16, help="per-round slice count (default 16)")
    pi.add_argument("--pca-dim", type=int, default=8, help="per-round PCA dimension (default 8)")
    pi.add_argument("--delta", type=float, default=0.5, help="error-slice threshold (default 0.5)")
    pi.add_argument("--seed", type=int, default=0, help="loop seed (default 0)")
    pi.add_argument("--timeout", type=float, default=300.0, help="trainer timeout seconds (default 300)")
    pi.add_argument("--workdir", default=None, help="directory for protocol files (default: temp)")
    pi.set_defaults(func=_cmd_improve_active)

    p = sub.add_parser("synth", help="generate synthetic data with ground truth")
    ssub = p.add_subparsers(dest="synth_command", required=True)

    ps = ssub.add_parser("planted", help="planted mixture with known error clusters")
    ps.add_argument("--out", required=True, help="output bundle directory")
    ps.add_argument("--k-true", type=_positive_int, default=5, help="planted cluster count (default 5)")
    ps.add_argument(
        "--error-clusters",
        type=_int_list,
        default=(0,),
        help="comma-separated error cluster ids (default 0)",
    )
    ps.add_argument("--dim", type=_positive_int, default=8, help="embedding dimension (default 8)")
    ps.add_argument("--classes", type=_positive_int, default=3, help="class count (default 3)")
    ps.add_argument("--separation", type=float, default=10.0, help="inter-mean distance in sigma (default 10)")
    ps.add_argument("--error-rate", type=float, default=0.9, help="per-point error rate (default 0.9)")
    ps.add_argument("--size", type=_positive_int, default=60, help="points per cluster (default 60)")
    ps.add_argument(
        "--sizes",
        type=_int_list,
        default=(),
        help="per-cluster sizes, comma-separated (overrides --size)",
    )
    ps.add_argument(
        "--feature-plan",
        default=None,
        help='JSON object mapping cluster id to feature names, e.g. {"0": ["noisy"]}',
    )
    ps.add_argument(
        "--feature-noise",
        type=float,
        default=0.0,
        help="probability of a background feature occurrence (default 0)",
    )
    ps.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    ps.set_defaults(func=_cmd_synth_planted)

    ps = ssub.add_parser("scenario", help="classifier scenario with a trainer")
    ps.add_argument("--out", required=True, help="output scenario directory")
    ps.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    ps.add_argument("--train-size", type=_positive_int, default=1200, help="training pool size (default 1200)")
    ps.add_argument("--test-size", type=_positive_int, default=420, help="test size (default 420)")
    ps.add_argument(
        "--val-size",
        type=_positive_int,
        default=None,
        help="validation size (default: twice the test size)",
    )
    ps.add_argument(
        "--frozen-frac",
        type=float,
        default=0.02,
        help="train fraction behind the frozen classifier (default 0.02)",
    )
    ps.set_defaults(func=_cmd_synth_scenario)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SliceKitError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
