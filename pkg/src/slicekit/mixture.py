"""Weighted Gaussian mixture over embeddings, error distances, and confidences.

Each component carries a diagonal Gaussian per modality; the joint likelihood
raises each modality's density to a per-modality exponent before multiplying.
In "domino" mode the error-distance and confidence modalities are categorical
over the gold label and the argmax-predicted label instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    InsufficientDataError,
    RangeError,
    ShapeError,
    ValidationError,
)

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
PRIOR_FLOOR = 1e-8
CAT_FLOOR = 1e-12
_LOG_2PI = float(np.log(2.0 * np.pi))


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable log(sum(exp(a))) along an axis."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


@dataclass(frozen=True)
class WeightConfig:
    """Per-modality exponents; mode selects the modality distributions."""

    gamma: float = 0.15
    lambda_e: float = 0.1
    lambda_conf: float = 1.0
    mode: str = "edisa"

    def __post_init__(self) -> None:
        for name in ("gamma", "lambda_e", "lambda_conf"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise RangeError(f"{name} must be finite and >= 0, got {v}")
        if self.mode not in ("edisa", "domino"):
            raise ConfigError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class EmConfig:
    k: int = 128
    max_iters: int = 300
    rel_tol: float = 1e-6
    seed: int = 0
    init: str = "kmeans++"
    uniform_prior: bool = False

    def __post_init__(self) -> None:
        if self.k < 1:
            raise RangeError(f"k must be >= 1, got {self.k}")
        if self.max_iters < 1:
            raise RangeError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.rel_tol <= 0:
            raise RangeError(f"rel_tol must be > 0, got {self.rel_tol}")
        if self.init not in ("kmeans++", "random-responsibility"):
            raise ConfigError(f"unknown init {self.init!r}")


@dataclass(frozen=True, eq=False)
class Observations:
    """Labeled fit inputs: reduced embeddings, error distances, confidences."""

    z: np.ndarray
    e: np.ndarray
    conf: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        z = np.ascontiguousarray(self.z, dtype=np.float64)
        e = np.ascontiguousarray(self.e, dtype=np.float64)
        conf = np.ascontiguousarray(self.conf, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        n = z.shape[0]
        if z.ndim != 2 or e.ndim != 2 or conf.ndim != 2:
            raise ShapeError("z, e, conf must be 2-D")
        if e.shape[0] != n or conf.shape[0] != n or labels.shape != (n,):
            raise ShapeError("observation arrays disagree on row count")
        if e.shape[1] != conf.shape[1]:
            raise ShapeError("e and conf must share the class dimension")
        c = conf.shape[1]
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise ValidationError(f"labels outside [0, {c})")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "conf", conf)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def num_classes(self) -> int:
        return self.conf.shape[1]


@dataclass(frozen=True, eq=False)
class ComponentParams:
    """One mixture component: prior plus per-modality parameters."""

    prior: float
    z_mean: np.ndarray
    z_var: np.ndarray
    e_mean: np.ndarray
    e_var: np.ndarray
    conf_mean: np.ndarray
    conf_var: np.ndarray
    cat_y: np.ndarray | None = None
    cat_conf: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.prior <= 1.0):
            raise ValidationError(f"prior must lie in (0, 1], got {self.prior}")
        for name in ("z_var", "e_var", "conf_var"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.size and v.min() < VAR_FLOOR * (1 - 1e-12):
                raise ValidationError(f"{name} below the {VAR_FLOOR:g} floor")
        for name in ("cat_y", "cat_conf"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if abs(float(v.sum()) - 1.0) > 1e-9 or v.min() < 0:
                    raise ValidationError(f"{name} is not on the simplex within 1e-9")


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> float:
    """Diagonal-Gaussian log density; an empty vector scores 0."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if x.shape != mean.shape or x.shape != var.shape:
        raise ShapeError("x, mean, var must share a shape")
    if x.size and var.min() <= 0:
        raise ValidationError("variance entries must be positive")
    return float(
        -0.5 * np.sum(np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)
    )


def categorical_logpmf(c: int, p: np.ndarray) -> float:
    """log p[c] with probabilities floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= int(c) < p.shape[0]:
        raise RangeError(f"class {c} outside [0, {p.shape[0]})")
    return float(np.log(max(float(p[int(c)]), CAT_FLOOR)))


def joint_loglik(
    z: np.ndarray,
    e: np.ndarray | int,
    conf: np.ndarray,
    comp: ComponentParams,
    w: WeightConfig,
) -> float:
    """Log of the weighted joint likelihood of one point under one component.

    `e` is the error-distance row in edisa mode and the gold class index in
    domino mode; zero-weight terms are skipped entirely.
    """
    conf = np.asarray(conf, dtype=np.float64)
    total = float(np.log(comp.prior))
    if w.gamma != 0.0:
        total += w.gamma * gaussian_logpdf(z, comp.z_mean, comp.z_var)
    if w.mode == "edisa":
        if w.lambda_e != 0.0:
            total += w.lambda_e * gaussian_logpdf(e, comp.e_mean, comp.e_var)
        if w.lambda_conf != 0.0:
            total += w.lambda_conf * gaussian_logpdf(
                conf, comp.conf_mean, comp.conf_var
            )
    else:
        if comp.cat_y is None or comp.cat_conf is None:
            raise ConfigError("domino mode needs categorical component parameters")
        if w.lambda_e != 0.0:
            total += w.lambda_e * categorical_logpmf(int(e), comp.cat_y)
        if w.lambda_conf != 0.0:
            pred = int(np.argmax(conf))
            total += w.lambda_conf * categorical_logpmf(pred, comp.cat_conf)
    return total


def responsibilities(
    z: np.ndarray,
    e: np.ndarray | int,
    conf: np.ndarray,
    components: Sequence[ComponentParams],
    w: WeightConfig,
) -> np.ndarray:
    """Posterior over components for one point, a k-simplex vector."""
    ll = np.array([joint_loglik(z, e, conf, comp, w) for comp in components])
    ll -= logsumexp(ll)
    return np.exp(ll)


# ---------------------------------------------------------------------------
# Vectorized likelihood plumbing


@dataclass(frozen=True, eq=False)
class _Stacked:
    log_prior: np.ndarray
    z_mean: np.ndarray
    z_var: np.ndarray
    e_mean: np.ndarray
    e_var: np.ndarray
    conf_mean: np.ndarray
    conf_var: np.ndarray
    log_cat_y: np.ndarray | None
    log_cat_conf: np.ndarray | None


def stack_components(components: Sequence[ComponentParams]) -> _Stacked:
    cat = components[0].cat_y is not None
    return _Stacked(
        log_prior=np.log(np.array([c.prior for c in components])),
        z_mean=np.stack([np.asarray(c.z_mean, float) for c in components]),
        z_var=np.stack([np.asarray(c.z_var, float) for c in components]),
        e_mean=np.stack([np.asarray(c.e_mean, float) for c in components]),
        e_var=np.stack([np.asarray(c.e_var, float) for c in components]),
        conf_mean=np.stack([np.asarray(c.conf_mean, float) for c in components]),
        conf_var=np.stack([np.asarray(c.conf_var, float) for c in components]),
        log_cat_y=(
            np.log(np.maximum(np.stack([c.cat_y for c in components]), CAT_FLOOR))
            if cat
            else None
        ),
        log_cat_conf=(
            np.log(np.maximum(np.stack([c.cat_conf for c in components]), CAT_FLOOR))
            if cat
            else None
        ),
    )


def gauss_ll_matrix(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """(N, k) log densities of rows of x under k diagonal Gaussians."""
    inv = 1.0 / variances
    const = -0.5 * np.sum(np.log(2.0 * np.pi * variances), axis=1)
    quad = (
        (x * x) @ inv.T
        - 2.0 * (x @ (means * inv).T)
        + np.sum(means * means * inv, axis=1)[None, :]
    )
    return const[None, :] - 0.5 * quad


def joint_loglik_matrix(
    obs_z: np.ndarray,
    obs_e: np.ndarray | None,
    obs_conf: np.ndarray,
    labels: np.ndarray | None,
    stacked: _Stacked,
    w: WeightConfig,
) -> np.ndarray:
    """(N, k) weighted joint log-likelihoods for labeled points."""
    n = obs_z.shape[0]
    k = stacked.log_prior.shape[0]
    ll = np.broadcast_to(stacked.log_prior, (n, k)).copy()
    if w.gamma != 0.0:
        ll += w.gamma * gauss_ll_matrix(obs_z, stacked.z_mean, stacked.z_var)
    if w.mode == "edisa":
        if w.lambda_e != 0.0:
            ll += w.lambda_e * gauss_ll_matrix(obs_e, stacked.e_mean, stacked.e_var)
        if w.lambda_conf != 0.0:
            ll += w.lambda_conf * gauss_ll_matrix(
                obs_conf, stacked.conf_mean, stacked.conf_var
            )
    else:
        if w.lambda_e != 0.0:
            ll += w.lambda_e * stacked.log_cat_y[:, labels].T
        if w.lambda_conf != 0.0:
            preds = np.argmax(obs_conf, axis=1)
            ll += w.lambda_conf * stacked.log_cat_conf[:, preds].T
    return ll


# ---------------------------------------------------------------------------
# EM


@dataclass(frozen=True, eq=False)
class EmResult:
    components: tuple[ComponentParams, ...]
    trajectory: tuple[float, ...]
    events: tuple[str, ...] = field(default_factory=tuple)


def _init_features(obs: Observations, w: WeightConfig) -> np.ndarray:
    parts = []
    if w.gamma > 0:
        parts.append(np.sqrt(w.gamma) * obs.z)
    if w.lambda_e > 0:
        parts.append(np.sqrt(w.lambda_e) * obs.e)
    if w.lambda_conf > 0:
        parts.append(np.sqrt(w.lambda_conf) * obs.conf)
    if not parts:
        return np.empty((obs.n, 0))
    return np.concatenate(parts, axis=1)


def _kmeanspp_assign(feats: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Hard initial assignment from k-means++ seeded centers."""
    n = feats.shape[0]
    centers = np.empty((k, feats.shape[1]))
    centers[0] = feats[int(rng.integers(n))]
    d2 = np.sum((feats - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            r = float(rng.random()) * total
            pick = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            pick = min(pick, n - 1)
        centers[j] = feats[pick]
        d2 = np.minimum(d2, np.sum((feats - centers[j]) ** 2, axis=1))
    dists = (
        np.sum(feats * feats, axis=1)[:, None]
        - 2.0 * feats @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    assign = np.argmin(dists, axis=1)
    # steal the farthest point for any center left empty, so every component
    # starts populated
    counts = np.bincount(assign, minlength=k)
    own = dists[np.arange(n), assign].copy()
    for j in np.flatnonzero(counts == 0):
        movable = counts[assign] > 1
        if not np.any(movable):
            break
        src = int(np.argmax(np.where(movable, own, -np.inf)))
        counts[assign[src]] -= 1
        assign[src] = j
        counts[j] += 1
        own[src] = 0.0
    return assign


def _m_step(
    resp: np.ndarray, obs: Observations, w: WeightConfig, uniform_prior: bool
) -> _Stacked:
    n, k = resp.shape
    nj = resp.sum(axis=0)
    nj_safe = np.maximum(nj, PRIOR_FLOOR)
    if uniform_prior:
        priors = np.full(k, 1.0 / k)
    else:
        priors = np.maximum(nj / n, PRIOR_FLOOR)
        priors = priors / priors.sum()

    def fit_gauss(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        means = (resp.T @ x) / nj_safe[:, None]
        variances = np.empty_like(means)
        for j in range(k):
            d = x - means[j]
            variances[j] = (resp[:, j] @ (d * d)) / nj_safe[j]
        return means, np.maximum(variances, VAR_FLOOR)

    z_mean, z_var = fit_gauss(obs.z)
    e_mean, e_var = fit_gauss(obs.e)
    conf_mean, conf_var = fit_gauss(obs.conf)
    log_cat_y = log_cat_conf = None
    if w.mode == "domino":
        c = obs.num_classes
        onehot_y = np.zeros((n, c))
        onehot_y[np.arange(n), obs.labels] = 1.0
        preds = np.argmax(obs.conf, axis=1)
        onehot_p = np.zeros((n, c))
        onehot_p[np.arange(n), preds] = 1.0
        cat_y = (resp.T @ onehot_y) / nj_safe[:, None]
        cat_conf = (resp.T @ onehot_p) / nj_safe[:, None]
        log_cat_y = np.log(np.maximum(cat_y, CAT_FLOOR))
        log_cat_conf = np.log(np.maximum(cat_conf, CAT_FLOOR))
    return _Stacked(
        log_prior=np.log(priors),
        z_mean=z_mean,
        z_var=z_var,
        e_mean=e_mean,
        e_var=e_var,
        conf_mean=conf_mean,
        conf_var=conf_var,
        log_cat_y=log_cat_y,
        log_cat_conf=log_cat_conf,
    )


def _unstack(stacked: _Stacked) -> tuple[ComponentParams, ...]:
    k = stacked.log_prior.shape[0]
    comps = []
    for j in range(k):
        comps.append(
            ComponentParams(
                prior=float(np.exp(stacked.log_prior[j])),
                z_mean=stacked.z_mean[j].copy(),
                z_var=stacked.z_var[j].copy(),
                e_mean=stacked.e_mean[j].copy(),
                e_var=stacked.e_var[j].copy(),
                conf_mean=stacked.conf_mean[j].copy(),
                conf_var=stacked.conf_var[j].copy(),
                cat_y=(
                    np.exp(stacked.log_cat_y[j]) if stacked.log_cat_y is not None else None
                ),
                cat_conf=(
                    np.exp(stacked.log_cat_conf[j])
                    if stacked.log_cat_conf is not None
                    else None
                ),
            )
        )
    return tuple(comps)


def _reseed(
    stacked: _Stacked,
    empties: np.ndarray,
    row_ll: np.ndarray,
    obs: Observations,
    w: WeightConfig,
) -> _Stacked:
    """Replace dead components with ones centered on low-likelihood points."""
    z_var_glob = np.maximum(obs.z.var(axis=0), VAR_FLOOR)
    e_var_glob = np.maximum(obs.e.var(axis=0), VAR_FLOOR)
    conf_var_glob = np.maximum(obs.conf.var(axis=0), VAR_FLOOR)
    order = np.argsort(row_ll, kind="stable")
    new = replace(stacked)
    log_prior = new.log_prior.copy()
    z_mean, z_var = new.z_mean.copy(), new.z_var.copy()
    e_mean, e_var = new.e_mean.copy(), new.e_var.copy()
    conf_mean, conf_var = new.conf_mean.copy(), new.conf_var.copy()
    log_cat_y = None if new.log_cat_y is None else new.log_cat_y.copy()
    log_cat_conf = None if new.log_cat_conf is None else new.log_cat_conf.copy()
    c = obs.num_classes
    for slot, j in enumerate(np.flatnonzero(empties)):
        i = int(order[slot % obs.n])
        z_mean[j], z_var[j] = obs.z[i], z_var_glob
        e_mean[j], e_var[j] = obs.e[i], e_var_glob
        conf_mean[j], conf_var[j] = obs.conf[i], conf_var_glob
        log_prior[j] = np.log(1.0 / max(obs.n, 1))
        if log_cat_y is not None:
            near_y = np.full(c, CAT_FLOOR)
            near_y[obs.labels[i]] = 1.0
            log_cat_y[j] = np.log(near_y / near_y.sum())
            near_p = np.full(c, CAT_FLOOR)
            near_p[int(np.argmax(obs.conf[i]))] = 1.0
            log_cat_conf[j] = np.log(near_p / near_p.sum())
    # renormalize priors after the overwrite
    priors = np.exp(log_prior)
    log_prior = np.log(priors / priors.sum())
    return _Stacked(
        log_prior=log_prior,
        z_mean=z_mean,
        z_var=z_var,
        e_mean=e_mean,
        e_var=e_var,
        conf_mean=conf_mean,
        conf_var=conf_var,
        log_cat_y=log_cat_y,
        log_cat_conf=log_cat_conf,
    )


def em_fit(obs: Observations, w: WeightConfig, cfg: EmConfig) -> EmResult:
    """Fit k components by EM; returns components, objective trajectory, events.

    The objective is the sum over points of the log of the summed weighted
    joint likelihoods. The trajectory is non-decreasing within 1e-8 per step
    except across an empty-component reseed, which is recorded in events.
    """
    if obs.n < cfg.k:
        raise InsufficientDataError(
            f"need at least k={cfg.k} points, got {obs.n}"
        )
    rng = np.random.default_rng(cfg.seed)
    events: list[str] = []

    feats = _init_features(obs, w)
    if cfg.init == "kmeans++" and feats.shape[1] > 0:
        assign = _kmeanspp_assign(feats, cfg.k, rng)
        resp = np.zeros((obs.n, cfg.k))
        resp[np.arange(obs.n), assign] = 1.0
    else:
        if cfg.init == "kmeans++":
            events.append("init: all weights zero, fell back to random responsibilities")
        resp = rng.random((obs.n, cfg.k)) + 0.05
        resp /= resp.sum(axis=1, keepdims=True)

    stacked = _m_step(resp, obs, w, cfg.uniform_prior)
    trajectory: list[float] = []
    prev = -np.inf
    for it in range(cfg.max_iters):
        ll = joint_loglik_matrix(obs.z, obs.e, obs.conf, obs.labels, stacked, w)
        row_ll = logsumexp(ll, axis=1)
        obj = float(row_ll.sum())
        trajectory.append(obj)
        resp = np.exp(ll - row_ll[:, None])
        empties = resp.sum(axis=0) < PRIOR_FLOOR
        if np.any(empties):
            which = np.flatnonzero(empties).tolist()
            events.append(f"iteration {it}: reseeded empty components {which}")
            log.warning("reseeding empty components %s at iteration %d", which, it)
            stacked = _reseed(stacked, empties, row_ll, obs, w)
            ll = joint_loglik_matrix(obs.z, obs.e, obs.conf, obs.labels, stacked, w)
            row_ll = logsumexp(ll, axis=1)
            resp = np.exp(ll - row_ll[:, None])
        stacked = _m_step(resp, obs, w, cfg.uniform_prior)
        if it > 0 and abs(obj - prev) < cfg.rel_tol * max(1.0, abs(prev)):
            break
        prev = obj
    return EmResult(
        components=_unstack(stacked),
        trajectory=tuple(trajectory),
        events=tuple(events),
    )
