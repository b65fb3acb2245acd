"""Feature significance for error slices via one-sided permutation tests.

A feature explains a slice when its in-slice mean exceeds the out-of-slice
mean with a permutation p-value below alpha. Significant pairs are scored by
homogeneity (share of the slice's mispredictions carrying the feature),
completeness (share of all mispredictions carrying the feature that sit in
the slice), and their harmonic mean.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .bundle import FeatureTable, LabeledBundle
from .errors import (
    FeatureNotApplicableError,
    RangeError,
    ValidationError,
)
from .sdm import SliceModel, assign_labeled

log = logging.getLogger(__name__)

_PERM_CHUNK = 4_000_000  # cap on scratch elements per permutation block


def permutation_test(
    in_vals: Sequence[float],
    out_vals: Sequence[float],
    n_perm: int = 1000,
    seed: int = 0,
) -> float | None:
    """One-sided p-value for mean(in) > mean(out) under label shuffling.

    p = (1 + #{permuted statistic >= observed}) / (n_perm + 1). Returns None
    when either group has fewer than 2 values: the pair is not testable,
    which is a skip signal rather than an error.
    """
    a = np.asarray(in_vals, dtype=np.float64)
    b = np.asarray(out_vals, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ValidationError("value groups must be 1-D")
    if n_perm < 99:
        raise RangeError(f"n_perm must be >= 99, got {n_perm}")
    if a.size < 2 or b.size < 2:
        return None
    observed = a.mean() - b.mean()
    pool = np.concatenate([a, b])
    n = pool.size
    n_in = a.size
    rng = np.random.default_rng(seed)
    count = 0
    done = 0
    block = max(1, min(n_perm, _PERM_CHUNK // n))
    while done < n_perm:
        m = min(block, n_perm - done)
        order = np.argsort(rng.random((m, n)), axis=1)
        perm = pool[order]
        stats = perm[:, :n_in].mean(axis=1) - perm[:, n_in:].mean(axis=1)
        count += int(np.sum(stats >= observed))
        done += m
    return (1.0 + count) / (n_perm + 1.0)


def homo_comp(
    member_mask: np.ndarray,
    feature_values: np.ndarray,
    mispredicted_mask: np.ndarray,
    homo_denom: str = "mispredicted",
) -> tuple[float, float]:
    """Homogeneity and completeness of a feature on one slice.

    S_F is the slice's mispredicted points carrying the feature. Homogeneity
    divides |S_F| by the slice's mispredicted count (or by the slice size
    with homo_denom="slice"); completeness divides by the global count of
    mispredicted points carrying the feature.
    """
    if homo_denom not in ("mispredicted", "slice"):
        raise ValidationError(f"unknown homo_denom {homo_denom!r}")
    member = np.asarray(member_mask, dtype=bool)
    featured = np.asarray(feature_values, dtype=np.float64) != 0.0
    mis = np.asarray(mispredicted_mask, dtype=bool)
    s_f = int((member & mis & featured).sum())
    denom = int((member & mis).sum()) if homo_denom == "mispredicted" else int(member.sum())
    homo = s_f / denom if denom else 0.0
    global_f = int((mis & featured).sum())
    comp = s_f / global_f if global_f else 0.0
    return homo, comp


def _harmonic(h: float, c: float) -> float:
    return 2.0 * h * c / (h + c) if h + c > 0 else 0.0


def _pair_seed(seed: int, slice_idx: int, feature: str) -> int:
    # schedule-independent: depends only on (seed, slice, feature name)
    digest = hashlib.blake2b(
        f"{seed}:{slice_idx}:{feature}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class PairResult:
    slice: int
    feature: str
    p_value: float
    in_mean: float
    out_mean: float
    significant: bool
    homo: float | None
    comp: float | None
    v: float | None


@dataclass(frozen=True)
class FeatureSummary:
    feature: str
    slices: tuple[int, ...]
    homo: float
    comp: float
    v: float


@dataclass(frozen=True)
class SliceFeatureReport:
    pairs: tuple[PairResult, ...]
    features: tuple[FeatureSummary, ...]
    feature_prop: float
    avg_homo: float
    avg_comp: float
    avg_v: float
    avg_weighted_v: float
    skipped_slices: tuple[int, ...]
    num_features: int
    alpha: float
    n_perm: int


def significant_features(
    model: SliceModel,
    bundle: LabeledBundle,
    features: FeatureTable,
    alpha: float = 0.05,
    n_perm: int = 1000,
    seed: int = 0,
    homo_denom: str = "mispredicted",
) -> SliceFeatureReport:
    """Permutation-test every (error slice, feature) pair and score hits."""
    if not 0.0 < alpha < 1.0:
        raise RangeError(f"alpha must lie in (0, 1), got {alpha}")
    assignment = assign_labeled(model, bundle)
    preds = np.argmax(bundle.conf.astype(np.float64), axis=1)
    mis = preds != bundle.labels

    value_by_name = {
        name: features.vector(name, bundle.ids) for name in features.names
    }
    pairs: list[PairResult] = []
    skipped: list[int] = []
    for j in sorted(model.error_slices):
        member = assignment.slices == j
        if member.sum() < 2 or (~member).sum() < 2:
            skipped.append(j)
            continue
        for name in features.names:
            vals = value_by_name[name]
            p = permutation_test(
                vals[member],
                vals[~member],
                n_perm=n_perm,
                seed=_pair_seed(seed, j, name),
            )
            in_mean = float(vals[member].mean())
            out_mean = float(vals[~member].mean())
            sig = p is not None and p < alpha and in_mean > out_mean
            if sig:
                h, c = homo_comp(member, vals, mis, homo_denom)
                v = _harmonic(h, c)
            else:
                h = c = v = None
            pairs.append(
                PairResult(
                    slice=j,
                    feature=name,
                    p_value=float(p),
                    in_mean=in_mean,
                    out_mean=out_mean,
                    significant=sig,
                    homo=h,
                    comp=c,
                    v=v,
                )
            )

    summaries: list[FeatureSummary] = []
    for name in features.names:
        hits = [p for p in pairs if p.feature == name and p.significant]
        if not hits:
            continue
        summaries.append(
            FeatureSummary(
                feature=name,
                slices=tuple(p.slice for p in hits),
                homo=float(np.mean([p.homo for p in hits])),
                comp=float(np.mean([p.comp for p in hits])),
                v=float(np.mean([p.v for p in hits])),
            )
        )
    num_features = len(features.names)
    feature_prop = 100.0 * len(summaries) / num_features if num_features else 0.0
    avg_homo = float(np.mean([s.homo for s in summaries])) if summaries else 0.0
    avg_comp = float(np.mean([s.comp for s in summaries])) if summaries else 0.0
    avg_v = float(np.mean([s.v for s in summaries])) if summaries else 0.0
    return SliceFeatureReport(
        pairs=tuple(pairs),
        features=tuple(summaries),
        feature_prop=feature_prop,
        avg_homo=avg_homo,
        avg_comp=avg_comp,
        avg_v=avg_v,
        avg_weighted_v=(feature_prop / 100.0) * avg_v,
        skipped_slices=tuple(skipped),
        num_features=num_features,
        alpha=alpha,
        n_perm=n_perm,
    )


def average_weighted_v(reports: Iterable[SliceFeatureReport]) -> float:
    """Mean over reports of (significant-feature fraction * average V)."""
    reports = list(reports)
    if not reports:
        raise ValidationError("average_weighted_v needs at least one report")
    return float(
        np.mean([(r.feature_prop / 100.0) * r.avg_v for r in reports])
    )


# ---------------------------------------------------------------------------
# Synthetic feature-detection task


def build_synthetic_feature_dataset(
    bundle: LabeledBundle,
    feature_name: str,
    features: FeatureTable,
    seed: int = 0,
) -> tuple[LabeledBundle, frozenset[str]]:
    """Target points (mispredicted and carrying the feature) plus random fill.

    The fill is an equal-size uniform sample of the remaining points, so the
    synthetic dataset is half targets by construction. Row order is shuffled
    deterministically by seed.
    """
    vals = features.vector(feature_name, bundle.ids)
    preds = np.argmax(bundle.conf.astype(np.float64), axis=1)
    mis = preds != bundle.labels
    target = mis & (vals != 0.0)
    target_rows = np.flatnonzero(target)
    if target_rows.size == 0:
        raise FeatureNotApplicableError(
            f"no mispredicted point carries feature {feature_name!r}"
        )
    rest_rows = np.flatnonzero(~target)
    if rest_rows.size < target_rows.size:
        raise RangeError(
            f"need {target_rows.size} fill points but only {rest_rows.size} remain"
        )
    rng = np.random.default_rng(seed)
    fill = rng.choice(rest_rows, size=target_rows.size, replace=False)
    rows = np.concatenate([target_rows, fill])
    rows = rows[rng.permutation(rows.size)]
    synthetic = bundle.take(rows)
    target_ids = frozenset(bundle.ids[r] for r in target_rows)
    return synthetic, target_ids


@dataclass(frozen=True)
class SyntheticTaskResult:
    feature: str
    target_count: int
    dataset_size: int
    predicted_count: int
    precision: float | None
    recall: float
    f1: float | None


def synthetic_detection_scores(
    model: SliceModel,
    bundle: LabeledBundle,
    target_ids: frozenset[str],
    feature_name: str,
) -> SyntheticTaskResult:
    """Precision/recall/F1 (percent) of error-slice membership vs targets."""
    if not target_ids:
        raise ValidationError("target id set is empty")
    assignment = assign_labeled(model, bundle)
    in_error = np.isin(assignment.slices, sorted(model.error_slices))
    predicted = {bundle.ids[r] for r in np.flatnonzero(in_error)}
    tp = len(predicted & target_ids)
    recall = 100.0 * tp / len(target_ids)
    if not predicted:
        log.warning("no point landed in an error slice; precision undefined")
        return SyntheticTaskResult(
            feature=feature_name,
            target_count=len(target_ids),
            dataset_size=bundle.n,
            predicted_count=0,
            precision=None,
            recall=recall,
            f1=None,
        )
    precision = 100.0 * tp / len(predicted)
    f1 = _harmonic(precision, recall)
    return SyntheticTaskResult(
        feature=feature_name,
        target_count=len(target_ids),
        dataset_size=bundle.n,
        predicted_count=len(predicted),
        precision=precision,
        recall=recall,
        f1=f1,
    )
