"""Slice models: fitted mixtures plus the error-slice set and inference paths.

A fitted model owns the PCA transform, the mixture components, the accuracy
threshold delta, and the set of slices whose fit accuracy fell below delta.
Unlabeled inference marginalizes the error-distance term over all candidate
labels; the error probability of a point is the normalized likelihood mass of
the error slices.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bundle import (
    LabeledBundle,
    PcaTransform,
    UnlabeledBundle,
    apply_pca,
    error_distances,
    fit_pca,
)
from .errors import ConfigError, UnsupportedModeError, ValidationError
from .mixture import (
    ComponentParams,
    EmConfig,
    Observations,
    WeightConfig,
    em_fit,
    gauss_ll_matrix,
    joint_loglik_matrix,
    logsumexp,
    stack_components,
)

log = logging.getLogger(__name__)

DISCOVER_WEIGHTS = WeightConfig(gamma=0.15, lambda_e=0.1, lambda_conf=1.0, mode="edisa")
EXPLAIN_WEIGHTS = WeightConfig(gamma=0.15, lambda_e=1.0, lambda_conf=0.1, mode="edisa")
DOMINO_WEIGHTS = WeightConfig(gamma=1.0, lambda_e=10.0, lambda_conf=40.0, mode="domino")

_VARIANTS = {
    "edisa-y": (0.0, 0.0, 1.0),
    "edisa-ey": (0.0, 0.1, 1.0),
    "edisa-z": (0.15, 0.0, 0.0),
    "edisa-e": (0.0, 0.1, 0.0),
}


def structure_variant(kind: str) -> WeightConfig:
    """Weight presets for the ablated model structures."""
    key = kind.strip().lower().replace("e,y", "ey")
    if key not in _VARIANTS:
        raise ConfigError(
            f"unknown structure variant {kind!r}; expected one of "
            f"{sorted(_VARIANTS)}"
        )
    gamma, lambda_e, lambda_conf = _VARIANTS[key]
    return WeightConfig(gamma=gamma, lambda_e=lambda_e, lambda_conf=lambda_conf)


@dataclass(frozen=True)
class SliceStat:
    slice: int
    size: int
    accuracy: float | None


@dataclass(frozen=True, eq=False)
class SliceModel:
    components: tuple[ComponentParams, ...]
    weights: WeightConfig
    pca: PcaTransform
    delta: float
    error_slices: frozenset[int]
    fit_report: tuple[SliceStat, ...]

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def mode(self) -> str:
        return self.weights.mode


@dataclass(frozen=True, eq=False)
class SliceAssignment:
    """Per-point slice index, per-slice log-likelihoods, error probability."""

    ids: tuple[str, ...]
    slices: np.ndarray
    logliks: np.ndarray
    error_probability: np.ndarray
    mode: str

    def row_of(self, point_id: str) -> int:
        try:
            return self._index[point_id]
        except AttributeError:
            object.__setattr__(self, "_index", {i: r for r, i in enumerate(self.ids)})
            return self._index[point_id]


def _error_mass(ll: np.ndarray, error_slices: frozenset[int]) -> np.ndarray:
    """Normalized likelihood mass of the error slices, per row of ll."""
    if not error_slices:
        return np.zeros(ll.shape[0])
    total = logsumexp(ll, axis=1)
    err_cols = sorted(error_slices)
    err = logsumexp(ll[:, err_cols], axis=1)
    return np.exp(err - total)


def _labeled_loglik_matrix(model: SliceModel, bundle: LabeledBundle) -> np.ndarray:
    z = apply_pca(model.pca, bundle.z)
    conf = bundle.conf.astype(np.float64)
    stacked = stack_components(model.components)
    if model.mode == "edisa":
        e = error_distances(bundle.labels, conf)
        return joint_loglik_matrix(z, e, conf, None, stacked, model.weights)
    return joint_loglik_matrix(z, None, conf, bundle.labels, stacked, model.weights)


def assign_labeled(model: SliceModel, bundle: LabeledBundle) -> SliceAssignment:
    """Argmax slice assignment using the full labeled joint likelihood."""
    ll = _labeled_loglik_matrix(model, bundle)
    return SliceAssignment(
        ids=bundle.ids,
        slices=np.argmax(ll, axis=1),
        logliks=ll,
        error_probability=_error_mass(ll, model.error_slices),
        mode=model.mode,
    )


def _marginal_matrix(
    model: SliceModel, z: np.ndarray, conf: np.ndarray
) -> np.ndarray:
    """Label-marginalized (N, k) log-likelihoods for an edisa model."""
    stacked = stack_components(model.components)
    w = model.weights
    n, c = conf.shape
    k = len(model.components)
    ll = np.broadcast_to(stacked.log_prior, (n, k)).copy()
    if w.gamma != 0.0:
        ll += w.gamma * gauss_ll_matrix(z, stacked.z_mean, stacked.z_var)
    if w.lambda_e != 0.0:
        terms = np.empty((c, n, k))
        for cand in range(c):
            e_cand = -conf
            e_cand[:, cand] += 1.0
            terms[cand] = w.lambda_e * gauss_ll_matrix(
                e_cand, stacked.e_mean, stacked.e_var
            )
        ll += logsumexp(terms, axis=0)
    else:
        ll += np.log(float(c))
    if w.lambda_conf != 0.0:
        ll += w.lambda_conf * gauss_ll_matrix(
            conf, stacked.conf_mean, stacked.conf_var
        )
    return ll


def _domino_marginal_matrix(
    model: SliceModel, z: np.ndarray, conf: np.ndarray
) -> np.ndarray:
    """Marginalized categorical gold-label term; inference-side extension."""
    stacked = stack_components(model.components)
    w = model.weights
    n = z.shape[0]
    k = len(model.components)
    ll = np.broadcast_to(stacked.log_prior, (n, k)).copy()
    if w.gamma != 0.0:
        ll += w.gamma * gauss_ll_matrix(z, stacked.z_mean, stacked.z_var)
    if w.lambda_e != 0.0:
        # sum over classes of P(Y=c|slice)^lambda, a per-slice constant
        ll += logsumexp(w.lambda_e * stacked.log_cat_y, axis=1)[None, :]
    else:
        ll += np.log(float(conf.shape[1]))
    if w.lambda_conf != 0.0:
        preds = np.argmax(conf, axis=1)
        ll += w.lambda_conf * stacked.log_cat_conf[:, preds].T
    return ll


def marginal_loglik(
    model: SliceModel, z_row: np.ndarray, conf_row: np.ndarray
) -> np.ndarray:
    """Per-slice label-marginalized log-likelihood of one unlabeled point."""
    if model.mode != "edisa":
        raise UnsupportedModeError(
            "label-marginalized inference is defined for edisa models only"
        )
    z_row = np.asarray(z_row, dtype=np.float64)
    conf_row = np.asarray(conf_row, dtype=np.float64)
    z = apply_pca(model.pca, z_row[None, :])
    return _marginal_matrix(model, z, conf_row[None, :])[0]


def infer_slices(model: SliceModel, bundle: UnlabeledBundle) -> SliceAssignment:
    """Slice assignment for unlabeled points via label marginalization.

    For domino models the categorical gold-label term is marginalized as a
    per-slice constant; reports flag this path as an extension.
    """
    z = apply_pca(model.pca, bundle.z)
    conf = bundle.conf.astype(np.float64)
    if model.mode == "edisa":
        ll = _marginal_matrix(model, z, conf)
    else:
        ll = _domino_marginal_matrix(model, z, conf)
    return SliceAssignment(
        ids=bundle.ids,
        slices=np.argmax(ll, axis=1),
        logliks=ll,
        error_probability=_error_mass(ll, model.error_slices),
        mode=model.mode,
    )


def detect_error_prone(model: SliceModel, bundle: UnlabeledBundle) -> list[str]:
    """Ids assigned to error slices, descending error probability, ties by id."""
    if not model.error_slices:
        log.warning("model has no error slices; nothing to detect")
        return []
    assignment = infer_slices(model, bundle)
    err = np.isin(assignment.slices, sorted(model.error_slices))
    rows = np.flatnonzero(err)
    ordered = sorted(
        rows, key=lambda r: (-assignment.error_probability[r], assignment.ids[r])
    )
    return [assignment.ids[r] for r in ordered]


def _fit(
    bundle: LabeledBundle,
    w: WeightConfig,
    cfg: EmConfig,
    delta: float,
    pca_dim: int,
) -> SliceModel:
    # delta > 1 flags every populated slice; delta = 0 flags none
    pca = fit_pca(bundle.z, pca_dim)
    z = apply_pca(pca, bundle.z)
    conf = bundle.conf.astype(np.float64)
    e = error_distances(bundle.labels, conf)
    obs = Observations(z=z, e=e, conf=conf, labels=bundle.labels)
    result = em_fit(obs, w, cfg)
    for event in result.events:
        log.info("em: %s", event)

    stacked = stack_components(result.components)
    if w.mode == "edisa":
        ll = joint_loglik_matrix(z, e, conf, None, stacked, w)
    else:
        ll = joint_loglik_matrix(z, None, conf, bundle.labels, stacked, w)
    slices = np.argmax(ll, axis=1)
    preds = np.argmax(conf, axis=1)
    correct = preds == bundle.labels

    stats: list[SliceStat] = []
    error_slices: set[int] = set()
    for j in range(cfg.k):
        members = slices == j
        size = int(members.sum())
        if size == 0:
            stats.append(SliceStat(slice=j, size=0, accuracy=None))
            continue
        acc = float(correct[members].mean())
        stats.append(SliceStat(slice=j, size=size, accuracy=acc))
        if acc < delta:
            error_slices.add(j)
    return SliceModel(
        components=result.components,
        weights=w,
        pca=pca,
        delta=float(delta),
        error_slices=frozenset(error_slices),
        fit_report=tuple(stats),
    )


def fit_edisa(
    bundle: LabeledBundle,
    w: WeightConfig | None = None,
    cfg: EmConfig | None = None,
    delta: float = 0.5,
    pca_dim: int = 128,
) -> SliceModel:
    """Fit the error-distance-aware mixture on a labeled bundle."""
    w = DISCOVER_WEIGHTS if w is None else w
    if w.mode != "edisa":
        raise ConfigError("fit_edisa requires edisa-mode weights")
    cfg = EmConfig() if cfg is None else cfg
    return _fit(bundle, w, cfg, delta, pca_dim)


def fit_domino(
    bundle: LabeledBundle,
    w: WeightConfig | None = None,
    cfg: EmConfig | None = None,
    delta: float = 0.5,
    pca_dim: int = 128,
) -> SliceModel:
    """Fit the categorical-label mixture used as the comparison baseline."""
    w = DOMINO_WEIGHTS if w is None else w
    if w.mode != "domino":
        raise ConfigError("fit_domino requires domino-mode weights")
    cfg = EmConfig() if cfg is None else cfg
    return _fit(bundle, w, cfg, delta, pca_dim)


# ---------------------------------------------------------------------------
# Serialization: floats become shortest-repr decimal strings, which parse back
# to bit-identical float64 values.


def _f2s(v: float) -> str:
    return repr(float(v))


def _vec(a: np.ndarray) -> list[str]:
    return [_f2s(v) for v in np.asarray(a, dtype=np.float64)]


def _mat(a: np.ndarray) -> list[list[str]]:
    return [_vec(row) for row in np.asarray(a, dtype=np.float64)]


def _s2v(xs: Sequence[str]) -> np.ndarray:
    return np.array([float(x) for x in xs], dtype=np.float64)


def _s2m(xs: Sequence[Sequence[str]], cols: int) -> np.ndarray:
    if not xs:
        return np.empty((0, cols), dtype=np.float64)
    return np.array([[float(v) for v in row] for row in xs], dtype=np.float64)


def model_to_dict(model: SliceModel) -> dict:
    comps = []
    for c in model.components:
        comps.append(
            {
                "prior": _f2s(c.prior),
                "z_mean": _vec(c.z_mean),
                "z_var": _vec(c.z_var),
                "e_mean": _vec(c.e_mean),
                "e_var": _vec(c.e_var),
                "conf_mean": _vec(c.conf_mean),
                "conf_var": _vec(c.conf_var),
                "cat_y": None if c.cat_y is None else _vec(c.cat_y),
                "cat_conf": None if c.cat_conf is None else _vec(c.cat_conf),
            }
        )
    return {
        "format_version": 1,
        "kind": "slice-model",
        "mode": model.mode,
        "weights": {
            "gamma": _f2s(model.weights.gamma),
            "lambda_e": _f2s(model.weights.lambda_e),
            "lambda_conf": _f2s(model.weights.lambda_conf),
        },
        "delta": _f2s(model.delta),
        "k": model.k,
        "pca": {
            "mean": _vec(model.pca.mean),
            "basis": _mat(model.pca.basis),
            "d": model.pca.d,
        },
        "components": comps,
        "error_slices": sorted(model.error_slices),
        "fit_report": [
            {
                "slice": s.slice,
                "size": s.size,
                "accuracy": None if s.accuracy is None else _f2s(s.accuracy),
            }
            for s in model.fit_report
        ],
    }


def model_from_dict(payload: dict) -> SliceModel:
    try:
        if payload.get("kind") != "slice-model":
            raise ValidationError("not a slice-model file")
        wd = payload["weights"]
        weights = WeightConfig(
            gamma=float(wd["gamma"]),
            lambda_e=float(wd["lambda_e"]),
            lambda_conf=float(wd["lambda_conf"]),
            mode=payload["mode"],
        )
        pca_d = payload["pca"]
        mean = _s2v(pca_d["mean"])
        basis = _s2m(pca_d["basis"], int(pca_d["d"]))
        if basis.size == 0:
            basis = np.empty((mean.shape[0], 0))
        pca = PcaTransform(mean=mean, basis=basis)
        comps = []
        for cd in payload["components"]:
            comps.append(
                ComponentParams(
                    prior=float(cd["prior"]),
                    z_mean=_s2v(cd["z_mean"]),
                    z_var=_s2v(cd["z_var"]),
                    e_mean=_s2v(cd["e_mean"]),
                    e_var=_s2v(cd["e_var"]),
                    conf_mean=_s2v(cd["conf_mean"]),
                    conf_var=_s2v(cd["conf_var"]),
                    cat_y=None if cd["cat_y"] is None else _s2v(cd["cat_y"]),
                    cat_conf=None if cd["cat_conf"] is None else _s2v(cd["cat_conf"]),
                )
            )
        stats = tuple(
            SliceStat(
                slice=int(sd["slice"]),
                size=int(sd["size"]),
                accuracy=None if sd["accuracy"] is None else float(sd["accuracy"]),
            )
            for sd in payload["fit_report"]
        )
        return SliceModel(
            components=tuple(comps),
            weights=weights,
            pca=pca,
            delta=float(payload["delta"]),
            error_slices=frozenset(int(j) for j in payload["error_slices"]),
            fit_report=stats,
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model payload: {exc}") from exc


def save_model(model: SliceModel, path: str | Path, extra: dict | None = None) -> None:
    payload = model_to_dict(model)
    if extra:
        payload.update(extra)
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_model(path: str | Path) -> SliceModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON: {exc}") from exc
    return model_from_dict(payload)
