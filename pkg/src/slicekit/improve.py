"""Improving a frozen classifier: abstain on, or flip, detected points.

The truth oracle (id -> correctness or id -> gold label) is an evaluation
harness input. Detection and flip decisions never read it; it is consulted
only to score the curves.
"""

from __future__ import annotations

import json
import logging
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bundle import LabeledBundle, UnlabeledBundle, load_bundle
from .discover import confidence_baseline
from .errors import (
    InsufficientDataError,
    ProtocolError,
    RangeError,
    ValidationError,
)
from .mixture import EmConfig, WeightConfig
from .sdm import (
    DISCOVER_WEIGHTS,
    SliceModel,
    assign_labeled,
    detect_error_prone,
    fit_edisa,
    infer_slices,
)

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD_GRID = (0.3, 0.35, 0.4, 0.5, 0.6, 0.7)


@dataclass(frozen=True)
class CurveSummary:
    initial_metric: float | None
    proportion: float | None
    improvement: float | None
    c_proportion: float | None
    c_improvement: float | None


@dataclass(frozen=True)
class CurveReport:
    """Stepwise metric after each removal or flip, plus baseline comparison."""

    steps: tuple[tuple[str, float], ...]
    baseline_steps: tuple[tuple[str, float], ...]
    summary: CurveSummary
    metric: str


def _summarize(
    initial: float,
    curve: Sequence[float],
    baseline: Sequence[float],
) -> CurveSummary:
    if not curve:
        return CurveSummary(
            initial_metric=initial,
            proportion=None,
            improvement=None,
            c_proportion=None,
            c_improvement=None,
        )
    wins_over_initial = sum(1 for m in curve if m > initial)
    wins_over_conf = sum(1 for m, b in zip(curve, baseline) if m > b)
    return CurveSummary(
        initial_metric=initial,
        proportion=100.0 * wins_over_initial / len(curve),
        improvement=curve[-1] - initial,
        c_proportion=100.0 * wins_over_conf / len(curve),
        c_improvement=curve[-1] - baseline[-1],
    )


def selective_prediction(
    model: SliceModel,
    bundle: UnlabeledBundle,
    truth: Mapping[str, bool],
) -> CurveReport:
    """Remove detected points one at a time; track retained accuracy.

    The baseline removes the same count in ascending-confidence order.
    """
    detected = detect_error_prone(model, bundle)
    missing = [i for i in bundle.ids if i not in truth]
    if missing:
        raise ValidationError(f"truth oracle missing ids: {missing[:5]}")
    total_correct = sum(1 for i in bundle.ids if truth[i])
    initial = 100.0 * total_correct / bundle.n

    def curve(order: Sequence[str]) -> list[float]:
        correct = total_correct
        remaining = bundle.n
        out = []
        for pid in order:
            correct -= int(truth[pid])
            remaining -= 1
            out.append(100.0 * correct / remaining if remaining else 0.0)
        return out

    sdm_curve = curve(detected)
    conf_order = confidence_baseline(bundle, len(detected))
    conf_curve = curve(conf_order)
    return CurveReport(
        steps=tuple(zip(detected, sdm_curve)),
        baseline_steps=tuple(zip(conf_order, conf_curve)),
        summary=_summarize(initial, sdm_curve, conf_curve),
        metric="retained-accuracy-percent",
    )


def _second_choice(conf_row: np.ndarray) -> int:
    """Index of the second-highest confidence; ties break to lower index."""
    order = np.argsort(-conf_row, kind="stable")
    return int(order[1])


def confidence_flip_baseline(bundle: UnlabeledBundle, n: int) -> dict[str, int]:
    """Flip the n least-confident points to their second-choice class."""
    if not 0 <= n <= bundle.n:
        raise RangeError(f"n must lie in [0, {bundle.n}], got {n}")
    conf = bundle.conf.astype(np.float64)
    preds = {pid: int(np.argmax(conf[r])) for r, pid in enumerate(bundle.ids)}
    for pid in confidence_baseline(bundle, n):
        preds[pid] = _second_choice(conf[bundle.row_of(pid)])
    return preds


def _slice_majorities(
    model: SliceModel, val_bundle: LabeledBundle
) -> dict[int, int | None]:
    """Majority gold label of each slice's validation members; None on a tie
    or an empty slice."""
    assignment = assign_labeled(model, val_bundle)
    majorities: dict[int, int | None] = {}
    for j in range(model.k):
        members = assignment.slices == j
        if not members.any():
            majorities[j] = None
            continue
        counts = np.bincount(
            val_bundle.labels[members], minlength=val_bundle.num_classes
        )
        top = counts.max()
        winners = np.flatnonzero(counts == top)
        majorities[j] = int(winners[0]) if winners.size == 1 else None
    return majorities


def flip_predictions(
    model: SliceModel,
    bundle: UnlabeledBundle,
    val_bundle: LabeledBundle,
    threshold: float,
    truth_labels: Mapping[str, int],
) -> tuple[dict[str, int], CurveReport]:
    """Flip detected points; binary tasks take the complement class.

    Multi-class points flip to the majority gold label of their slice's
    validation members when their confidence is below the threshold; on a
    majority tie or an empty slice the point's second-choice class is used
    (logged). The curve metric is whole-bundle accuracy after each flip; the
    baseline flips the same count of least-confident points to their
    second-choice class.
    """
    missing = [i for i in bundle.ids if i not in truth_labels]
    if missing:
        raise ValidationError(f"truth oracle missing ids: {missing[:5]}")
    conf = bundle.conf.astype(np.float64)
    preds = {pid: int(np.argmax(conf[r])) for r, pid in enumerate(bundle.ids)}
    binary = bundle.num_classes == 2

    detected = detect_error_prone(model, bundle)
    assignment = infer_slices(model, bundle)
    majorities = _slice_majorities(model, val_bundle) if not binary else {}

    correct = sum(1 for i in bundle.ids if preds[i] == truth_labels[i])
    initial = 100.0 * correct / bundle.n

    new_preds = dict(preds)
    sdm_curve: list[float] = []
    for pid in detected:
        row = bundle.row_of(pid)
        old = new_preds[pid]
        if binary:
            new = 1 - old
        elif conf[row].max() >= threshold:
            new = old
        else:
            maj = majorities.get(int(assignment.slices[row]))
            if maj is None:
                new = _second_choice(conf[row])
                log.info(
                    "flip fallback to second choice for %s (empty slice or tie)", pid
                )
            else:
                new = maj
        if new != old:
            correct += int(new == truth_labels[pid]) - int(old == truth_labels[pid])
            new_preds[pid] = new
        sdm_curve.append(100.0 * correct / bundle.n)

    base_preds = dict(preds)
    base_correct = sum(1 for i in bundle.ids if preds[i] == truth_labels[i])
    conf_order = confidence_baseline(bundle, len(detected))
    conf_curve: list[float] = []
    for pid in conf_order:
        row = bundle.row_of(pid)
        old = base_preds[pid]
        new = _second_choice(conf[row])
        if new != old:
            base_correct += int(new == truth_labels[pid]) - int(
                old == truth_labels[pid]
            )
            base_preds[pid] = new
        conf_curve.append(100.0 * base_correct / bundle.n)

    report = CurveReport(
        steps=tuple(zip(detected, sdm_curve)),
        baseline_steps=tuple(zip(conf_order, conf_curve)),
        summary=_summarize(initial, sdm_curve, conf_curve),
        metric="bundle-accuracy-percent",
    )
    return new_preds, report


def validate_flip_threshold(
    model: SliceModel,
    val_bundle: LabeledBundle,
    grid: Sequence[float] = DEFAULT_THRESHOLD_GRID,
    seed: int = 0,
) -> float:
    """Pick the grid threshold with the best flip improvement on a held-out
    10% split of the validation bundle; ties go to the smallest value."""
    if val_bundle.n < 10:
        raise InsufficientDataError(
            f"threshold validation needs >= 10 points, got {val_bundle.n}"
        )
    grid = sorted(set(float(t) for t in grid))
    if not grid:
        raise RangeError("threshold grid is empty")
    rng = np.random.default_rng(seed)
    n_holdout = max(1, int(round(0.1 * val_bundle.n)))
    holdout_rows = rng.choice(val_bundle.n, size=n_holdout, replace=False)
    holdout = val_bundle.take(holdout_rows)
    truth_labels = {pid: int(lab) for pid, lab in zip(holdout.ids, holdout.labels)}
    unlabeled = holdout.without_labels()

    best_t = grid[0]
    best_gain = -np.inf
    for t in grid:
        _, report = flip_predictions(model, unlabeled, val_bundle, t, truth_labels)
        gain = report.summary.improvement
        gain = -np.inf if gain is None else gain
        if gain > best_gain + 1e-12:
            best_gain = gain
            best_t = t
    if best_gain <= 0:
        log.warning(
            "no threshold improved held-out accuracy; defaulting to smallest (%g)",
            grid[0],
        )
        return grid[0]
    return best_t


# ---------------------------------------------------------------------------
# Active learning over an external trainer


@dataclass(frozen=True)
class LoopConfig:
    """Active-learning loop knobs; sdm_* configure the per-round fit."""

    strategy: str = "edisa"
    step_size: int = 500
    sdm_weights: WeightConfig = DISCOVER_WEIGHTS
    sdm_k: int = 16
    sdm_pca_dim: int = 8
    sdm_delta: float = 0.5
    seed: int = 0
    plateau_tol: float = 1e-4
    plateau_rounds: int = 3
    trainer_timeout: float = 300.0
    workdir: str | None = None

    def __post_init__(self) -> None:
        if self.strategy not in ("edisa", "random", "confidence"):
            raise ValidationError(f"unknown strategy {self.strategy!r}")
        if self.step_size < 1:
            raise RangeError("step_size must be >= 1")


@dataclass(frozen=True)
class LoopStep:
    iteration: int
    num_train: int
    num_selected: int
    val_accuracy: float


@dataclass(frozen=True)
class LoopResult:
    steps: tuple[LoopStep, ...]
    status: str
    train_ids: tuple[str, ...]
    strategy: str
    detail: str = ""


def _read_trainer_response(
    response_path: Path,
    iteration: int,
    expected_pool: set[str],
) -> tuple[float, LabeledBundle, UnlabeledBundle]:
    if not response_path.exists():
        raise ProtocolError(f"trainer wrote no response file at {response_path}")
    try:
        payload = json.loads(response_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"response: malformed JSON: {exc}") from exc
    for key in ("iteration", "val_accuracy", "val_bundle", "pool_bundle"):
        if key not in payload:
            raise ProtocolError(f"response: missing field {key!r}")
    if int(payload["iteration"]) != iteration:
        raise ProtocolError(
            f"response: iteration {payload['iteration']} does not match {iteration}"
        )
    acc = payload["val_accuracy"]
    if not isinstance(acc, (int, float)) or isinstance(acc, bool) or not (
        0.0 <= float(acc) <= 1.0
    ):
        raise ProtocolError(f"response: val_accuracy {acc!r} outside [0, 1]")
    val = load_bundle(payload["val_bundle"])
    if not isinstance(val, LabeledBundle):
        raise ProtocolError("response: val_bundle is not labeled")
    pool = load_bundle(payload["pool_bundle"])
    if isinstance(pool, LabeledBundle):
        raise ProtocolError("response: pool_bundle must be unlabeled")
    if set(pool.ids) != expected_pool:
        raise ProtocolError(
            "response: pool_bundle ids do not cover exactly the remaining pool"
        )
    return float(acc), val, pool


def _select(
    cfg: LoopConfig,
    iteration: int,
    val: LabeledBundle,
    pool: UnlabeledBundle,
    room: int,
) -> list[str]:
    if cfg.strategy == "edisa":
        model = fit_edisa(
            val,
            w=cfg.sdm_weights,
            cfg=EmConfig(
                k=min(cfg.sdm_k, val.n), seed=cfg.seed + iteration, max_iters=200
            ),
            delta=cfg.sdm_delta,
            pca_dim=cfg.sdm_pca_dim,
        )
        picked = detect_error_prone(model, pool)
    elif cfg.strategy == "confidence":
        picked = confidence_baseline(pool, min(cfg.step_size, pool.n))
    else:
        rng = np.random.default_rng((cfg.seed, iteration))
        rows = rng.choice(pool.n, size=min(cfg.step_size, pool.n), replace=False)
        picked = [pool.ids[r] for r in rows]
    return picked[:room]


def active_learning(
    cfg: LoopConfig,
    trainer_cmd: Sequence[str],
    train_ids: Sequence[str],
    seed_frac: float = 0.01,
    budget: int = 1000,
) -> LoopResult:
    """Grow the labeled set by moving selected pool points into training.

    Each round invokes the external trainer with the current train ids; the
    trainer answers with a labeled validation bundle, an unlabeled bundle of
    the remaining pool, and its validation accuracy. Stops at the budget, on
    an empty selection, or when accuracy moves less than plateau_tol for
    plateau_rounds consecutive rounds. A nonzero trainer exit or timeout
    aborts with the partial trajectory.
    """
    if not 0.0 < seed_frac <= 1.0:
        raise RangeError(f"seed_frac must lie in (0, 1], got {seed_frac}")
    all_ids = list(dict.fromkeys(str(i) for i in train_ids))
    if len(all_ids) != len(train_ids):
        raise ValidationError("duplicate ids in the training pool")
    if budget < 1:
        raise RangeError("budget must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    n_seed = max(1, int(round(seed_frac * len(all_ids))))
    seed_rows = rng.choice(len(all_ids), size=n_seed, replace=False)
    train = [all_ids[r] for r in sorted(seed_rows)]
    pool_left = [i for i in all_ids if i not in set(train)]

    workdir = Path(cfg.workdir) if cfg.workdir else Path(tempfile.mkdtemp(prefix="al-"))
    workdir.mkdir(parents=True, exist_ok=True)

    steps: list[LoopStep] = []
    accs: list[float] = []

    def invoke(iteration: int, selected: int) -> tuple[LabeledBundle, UnlabeledBundle] | str:
        itdir = workdir / f"iter{iteration:03d}"
        itdir.mkdir(parents=True, exist_ok=True)
        request = {
            "format_version": 1,
            "iteration": iteration,
            "train_ids": list(train),
            "pool_ids": list(pool_left),
            "val_bundle_path": str(itdir / "val"),
            "pool_bundle_path": str(itdir / "pool"),
            "response_path": str(itdir / "response.json"),
        }
        request_path = itdir / "request.json"
        request_path.write_text(
            json.dumps(request, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        try:
            proc = subprocess.run(
                [*trainer_cmd, str(request_path)],
                capture_output=True,
                text=True,
                timeout=cfg.trainer_timeout,
            )
        except subprocess.TimeoutExpired:
            return f"trainer timed out after {cfg.trainer_timeout}s"
        if proc.returncode != 0:
            tail = (proc.stderr or proc.stdout or "").strip().splitlines()[-3:]
            return f"trainer exited {proc.returncode}: {' / '.join(tail)}"
        acc, val, pool = _read_trainer_response(
            Path(request["response_path"]), iteration, set(pool_left)
        )
        accs.append(acc)
        steps.append(
            LoopStep(
                iteration=iteration,
                num_train=len(train),
                num_selected=selected,
                val_accuracy=acc,
            )
        )
        return val, pool

    out = invoke(0, len(train))
    if isinstance(out, str):
        return LoopResult(tuple(steps), "trainer-error", tuple(train), cfg.strategy, out)
    val, pool = out

    iteration = 0
    status = "max-iterations"
    max_rounds = 1000
    while iteration < max_rounds:
        iteration += 1
        if len(train) >= budget:
            status = "budget"
            break
        if len(accs) >= cfg.plateau_rounds + 1 and all(
            abs(accs[i] - accs[i - 1]) < cfg.plateau_tol
            for i in range(len(accs) - cfg.plateau_rounds, len(accs))
        ):
            status = "plateau"
            break
        if not pool_left:
            status = "empty-selection"
            break
        selected = _select(cfg, iteration, val, pool, budget - len(train))
        if not selected:
            status = "empty-selection"
            break
        chosen = set(selected)
        train = train + [i for i in pool_left if i in chosen]
        pool_left = [i for i in pool_left if i not in chosen]
        out = invoke(iteration, len(selected))
        if isinstance(out, str):
            return LoopResult(
                tuple(steps), "trainer-error", tuple(train), cfg.strategy, out
            )
        val, pool = out
    return LoopResult(tuple(steps), status, tuple(train), cfg.strategy)
