"""Synthetic bundles with known ground truth.

Two generators: a planted Gaussian mixture whose error clusters are known
exactly, and a self-contained classifier scenario (latent regions, noisy
linear embeddings, a built-in ridge-logistic classifier) whose hard regions
give true error slices and whose trainer can be driven over the external
subprocess protocol.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bundle import (
    FeatureTable,
    LabeledBundle,
    UnlabeledBundle,
    save_bundle,
    save_feature_table,
)
from .errors import ConfigError, RangeError, ShapeError, ValidationError


@dataclass(frozen=True)
class PlantedSpec:
    """Recipe for a planted mixture with known error clusters."""

    k_true: int = 5
    error_cluster_ids: tuple[int, ...] = (0,)
    dim: int = 8
    num_classes: int = 3
    separation: float = 10.0
    error_rate: float = 0.9
    sizes: tuple[int, ...] = (60, 60, 60, 60, 60)
    feature_plan: Mapping[int, tuple[str, ...]] = field(default_factory=dict)
    feature_noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k_true < 1:
            raise RangeError("k_true must be >= 1")
        if self.k_true > self.dim:
            raise ConfigError(
                f"{self.k_true} cluster means exceed the lattice capacity of "
                f"dim={self.dim}"
            )
        if len(self.sizes) != self.k_true:
            raise ShapeError(f"need {self.k_true} sizes, got {len(self.sizes)}")
        if any(s < 2 for s in self.sizes):
            raise RangeError("cluster sizes must be >= 2")
        if self.num_classes < 2:
            raise RangeError("num_classes must be >= 2")
        if not 0.0 <= self.error_rate <= 1.0:
            raise RangeError("error_rate must lie in [0, 1]")
        if not 0.0 <= self.feature_noise < 1.0:
            raise RangeError("feature_noise must lie in [0, 1)")
        bad = [c for c in self.error_cluster_ids if not 0 <= c < self.k_true]
        if bad:
            raise RangeError(f"error cluster ids out of range: {bad}")
        if self.separation <= 0:
            raise RangeError("separation must be > 0")


@dataclass(frozen=True, eq=False)
class PlantedData:
    bundle: LabeledBundle
    features: FeatureTable
    clusters: Mapping[str, int]
    errors: Mapping[str, bool]


def generate_planted(spec: PlantedSpec) -> PlantedData:
    """Sample the planted mixture; a pure function of the spec (incl. seed).

    Cluster means sit on scaled standard-basis vectors, so every pair is
    exactly separation * sigma apart (sigma = 1). Points in error clusters
    are mispredicted with probability error_rate: their confidence row puts
    its maximum on a wrong class.
    """
    rng = np.random.default_rng(spec.seed)
    c = spec.num_classes
    scale = spec.separation / np.sqrt(2.0)
    ids: list[str] = []
    z_rows: list[np.ndarray] = []
    conf_rows: list[np.ndarray] = []
    labels: list[int] = []
    clusters: dict[str, int] = {}
    errors: dict[str, bool] = {}
    feature_rows: dict[str, dict[str, float]] = {}
    all_feature_names = sorted(
        {name for names in spec.feature_plan.values() for name in names}
    )

    counter = 0
    for cluster in range(spec.k_true):
        mean = np.zeros(spec.dim)
        mean[cluster] = scale
        gold = cluster % c
        is_error_cluster = cluster in spec.error_cluster_ids
        planted = tuple(spec.feature_plan.get(cluster, ()))
        for _ in range(spec.sizes[cluster]):
            pid = f"p{counter:05d}"
            counter += 1
            z_rows.append(mean + rng.standard_normal(spec.dim))
            mispredict = bool(is_error_cluster and rng.random() < spec.error_rate)
            p_top = float(rng.uniform(0.55, 0.95))
            if mispredict:
                others = [cc for cc in range(c) if cc != gold]
                top = int(others[int(rng.integers(len(others)))])
            else:
                top = gold
            row = np.full(c, (1.0 - p_top) / (c - 1))
            row[top] = p_top
            conf_rows.append(row)
            labels.append(gold)
            ids.append(pid)
            clusters[pid] = cluster
            errors[pid] = mispredict
            feats: dict[str, float] = {}
            for name in all_feature_names:
                if name in planted:
                    feats[name] = 1.0
                elif spec.feature_noise > 0 and rng.random() < spec.feature_noise:
                    feats[name] = 1.0
            if feats:
                feature_rows[pid] = feats

    bundle = LabeledBundle(
        ids=tuple(ids),
        z=np.asarray(z_rows),
        conf=np.asarray(conf_rows),
        labels=np.asarray(labels),
        num_classes=c,
    )
    return PlantedData(
        bundle=bundle,
        features=FeatureTable(rows=feature_rows),
        clusters=clusters,
        errors=errors,
    )


# ---------------------------------------------------------------------------
# Classifier scenario

# Six latent regions on a circle; the two on the x-axis extremes carry mostly
# reversed labels. Regions are tight (10 sigma apart) so slices stay pure in
# embedding space. The hard regions are rare (about 2% of the data each):
# uniform sampling meets them too seldom to override their units quickly,
# while targeted selection can hand the trainer every hard point at once.
_REGION_ANGLES = (0.0, 60.0, 120.0, 180.0, 240.0, 300.0)
_REGION_RADIUS = 3.0
_REGION_STD = 0.30
_HARD_REGIONS = (0, 3)
_REGION_WEIGHT = {0: 1, 1: 11, 2: 11, 3: 1, 4: 11, 5: 11}
_HARD_FLIP = 0.85
_EASY_FLIP = 0.01
_EMBED_DIM = 16
_EMBED_NOISE = 0.05
_RBF_WIDTH = 1.0
# Split penalty: the linear rule is nearly free to fit (global confidence
# emerges from a handful of points), while the local RBF units pay a ridge
# cost sized so overriding a region takes on the order of fifty local labels.
_RIDGE_RBF = 1.0
_RIDGE_LINEAR = 0.05
_IRLS_ITERS = 30


def region_centers() -> np.ndarray:
    ang = np.deg2rad(np.asarray(_REGION_ANGLES))
    return np.stack([_REGION_RADIUS * np.cos(ang), _REGION_RADIUS * np.sin(ang)], axis=1)


def featurize(x: np.ndarray, centers: np.ndarray, width: float = _RBF_WIDTH) -> np.ndarray:
    """[1, x, RBF activations] design matrix for the built-in classifier."""
    x = np.asarray(x, dtype=np.float64)
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    rbf = np.exp(-d2 / (2.0 * width * width))
    return np.concatenate([np.ones((x.shape[0], 1)), x, rbf], axis=1)


def fit_ridge_logistic(
    phi: np.ndarray,
    y: np.ndarray,
    ridge: float = _RIDGE_RBF,
    ridge_linear: float = _RIDGE_LINEAR,
    iters: int = _IRLS_ITERS,
) -> np.ndarray:
    """Binary logistic MAP fit by IRLS; sum-CE plus per-block ridge.

    The intercept is unpenalized, the two linear coordinates pay
    ridge_linear, every remaining column (the RBF units) pays ridge.
    """
    n, d = phi.shape
    w = np.zeros(d)
    pen = np.full(d, 2.0 * ridge)
    pen[0] = 0.0
    pen[1:3] = 2.0 * ridge_linear
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(phi @ w)))
        p = np.clip(p, 1e-9, 1.0 - 1e-9)
        g = phi.T @ (p - y) + pen * w
        r = p * (1.0 - p)
        h = (phi * r[:, None]).T @ phi + np.diag(pen)
        w = w - np.linalg.solve(h, g)
    return w


def classifier_conf(x: np.ndarray, w: np.ndarray, centers: np.ndarray) -> np.ndarray:
    p = 1.0 / (1.0 + np.exp(-(featurize(x, centers) @ w)))
    return np.stack([1.0 - p, p], axis=1)


def _sample_split(
    rng: np.random.Generator, prefix: str, size: int, centers: np.ndarray
) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    weights = np.array([_REGION_WEIGHT[g] for g in range(len(centers))], float)
    weights /= weights.sum()
    counts = np.floor(weights * size).astype(int)
    g = 0
    while counts.sum() < size:
        counts[g % len(centers)] += 1
        g += 1
    ids: list[str] = []
    xs: list[np.ndarray] = []
    regions: list[int] = []
    golds: list[int] = []
    counter = 0
    for region in range(len(centers)):
        flip = _HARD_FLIP if region in _HARD_REGIONS else _EASY_FLIP
        for _ in range(int(counts[region])):
            x = centers[region] + _REGION_STD * rng.standard_normal(2)
            rule = int(x[0] > 0.0)
            gold = 1 - rule if rng.random() < flip else rule
            ids.append(f"{prefix}{counter:05d}")
            counter += 1
            xs.append(x)
            regions.append(region)
            golds.append(gold)
    return ids, np.asarray(xs), np.asarray(regions), np.asarray(golds, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class ClassifierScenario:
    directory: Path
    train_bundle: LabeledBundle
    val_bundle: LabeledBundle
    test_bundle: UnlabeledBundle
    trainer_command: tuple[str, ...]
    seed_train_ids: tuple[str, ...]
    val_truth: Mapping[str, dict]
    test_truth: Mapping[str, dict]


def generate_classifier_scenario(
    seed: int,
    out_dir: str | Path,
    train_size: int = 1200,
    test_size: int = 420,
    val_size: int | None = None,
    frozen_frac: float = 0.02,
) -> ClassifierScenario:
    """Build the scenario directory: bundles, truth sidecars, trainer config.

    The validation split defaults to twice the test size. Confidence rows in
    the emitted bundles come from the built-in classifier fitted on a small
    frozen subset of the training split, which is also where active learning
    starts.
    """
    if val_size is None:
        val_size = 2 * test_size
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    centers = region_centers()

    tr_ids, tr_x, tr_region, tr_gold = _sample_split(rng, "t", train_size, centers)
    va_ids, va_x, va_region, va_gold = _sample_split(rng, "v", val_size, centers)
    te_ids, te_x, te_region, te_gold = _sample_split(rng, "s", test_size, centers)

    embed = rng.standard_normal((2, _EMBED_DIM)) / np.sqrt(2.0)
    tr_z = tr_x @ embed + _EMBED_NOISE * rng.standard_normal((train_size, _EMBED_DIM))
    va_z = va_x @ embed + _EMBED_NOISE * rng.standard_normal((val_size, _EMBED_DIM))
    te_z = te_x @ embed + _EMBED_NOISE * rng.standard_normal((test_size, _EMBED_DIM))

    # stratified per region: the frozen subset mirrors the region mix exactly,
    # so no draw over- or under-represents the hard regions
    frozen_parts = []
    for region in range(len(centers)):
        region_rows = np.flatnonzero(tr_region == region)
        take = min(len(region_rows), max(1, int(round(frozen_frac * len(region_rows)))))
        frozen_parts.append(rng.choice(region_rows, size=take, replace=False))
    frozen_rows = np.sort(np.concatenate(frozen_parts))
    w = fit_ridge_logistic(
        featurize(tr_x[frozen_rows], centers), tr_gold[frozen_rows].astype(float)
    )
    tr_conf = classifier_conf(tr_x, w, centers)
    va_conf = classifier_conf(va_x, w, centers)
    te_conf = classifier_conf(te_x, w, centers)

    train_bundle = LabeledBundle(
        ids=tuple(tr_ids), z=tr_z, conf=tr_conf, labels=tr_gold, num_classes=2
    )
    val_bundle = LabeledBundle(
        ids=tuple(va_ids), z=va_z, conf=va_conf, labels=va_gold, num_classes=2
    )
    test_bundle = UnlabeledBundle(
        ids=tuple(te_ids), z=te_z, conf=te_conf, num_classes=2
    )

    def truth(ids, gold, region, conf) -> dict[str, dict]:
        preds = np.argmax(conf, axis=1)
        return {
            pid: {
                "gold": int(g),
                "correct": bool(p == g),
                "region": int(r),
                "hard": bool(r in _HARD_REGIONS),
            }
            for pid, g, r, p in zip(ids, gold, region, preds)
        }

    val_truth = truth(va_ids, va_gold, va_region, va_conf)
    test_truth = truth(te_ids, te_gold, te_region, te_conf)

    save_bundle(train_bundle, out_dir / "train")
    save_bundle(val_bundle, out_dir / "val")
    save_bundle(test_bundle, out_dir / "test")
    save_truth(truth(tr_ids, tr_gold, tr_region, tr_conf), out_dir / "train_truth.json")
    save_truth(val_truth, out_dir / "val_truth.json")
    save_truth(test_truth, out_dir / "test_truth.json")

    np.savez(
        out_dir / "data.npz",
        train_ids=np.asarray(tr_ids),
        train_x=tr_x,
        train_gold=tr_gold,
        train_region=tr_region,
        train_z=tr_z,
        val_ids=np.asarray(va_ids),
        val_x=va_x,
        val_gold=va_gold,
        val_z=va_z,
        centers=centers,
        rbf_width=np.float64(_RBF_WIDTH),
        ridge=np.float64(_RIDGE_RBF),
        ridge_linear=np.float64(_RIDGE_LINEAR),
        irls_iters=np.int64(_IRLS_ITERS),
    )
    command = (sys.executable, "-m", "slicekit.trainer_sim", str(out_dir))
    scenario = {
        "format_version": 1,
        "kind": "classifier-scenario",
        "seed": seed,
        "num_classes": 2,
        "latent_dim": 2,
        "embed_dim": _EMBED_DIM,
        "train_size": train_size,
        "val_size": val_size,
        "test_size": test_size,
        "frozen_train_ids": [tr_ids[r] for r in frozen_rows],
        "trainer": {"command": list(command)},
    }
    (out_dir / "scenario.json").write_text(
        json.dumps(scenario, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return ClassifierScenario(
        directory=out_dir,
        train_bundle=train_bundle,
        val_bundle=val_bundle,
        test_bundle=test_bundle,
        trainer_command=command,
        seed_train_ids=tuple(tr_ids[r] for r in frozen_rows),
        val_truth=val_truth,
        test_truth=test_truth,
    )


def save_truth(truth: Mapping[str, dict], path: str | Path) -> None:
    """Write a ground-truth sidecar; consumed only by evaluation harnesses."""
    payload = {
        "format_version": 1,
        "kind": "truth-sidecar",
        "points": {pid: truth[pid] for pid in sorted(truth)},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", "utf-8")


def load_truth(path: str | Path) -> dict[str, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("kind") != "truth-sidecar":
        raise ValidationError(f"{path}: not a truth sidecar")
    return dict(payload["points"])
