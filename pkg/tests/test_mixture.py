"""Densities, the weighted joint likelihood, and the EM fit itself."""

import numpy as np
import pytest
from scipy import stats

from slicekit.bundle import error_distances
from slicekit.errors import (
    ConfigError,
    InsufficientDataError,
    RangeError,
    ShapeError,
    ValidationError,
)
from slicekit.mixture import (
    VAR_FLOOR,
    ComponentParams,
    EmConfig,
    Observations,
    WeightConfig,
    categorical_logpmf,
    em_fit,
    gauss_ll_matrix,
    gaussian_logpdf,
    joint_loglik,
    joint_loglik_matrix,
    logsumexp,
    responsibilities,
    stack_components,
)


def _simplex_rows(rng, n, c):
    raw = rng.random((n, c)) + 0.05
    return raw / raw.sum(axis=1, keepdims=True)


def _observations(seed=0, n=120, dim=5, c=3):
    rng = np.random.default_rng(seed)
    conf = _simplex_rows(rng, n, c)
    labels = rng.integers(0, c, size=n)
    return Observations(
        z=rng.normal(size=(n, dim)),
        e=error_distances(labels, conf),
        conf=conf,
        labels=labels,
    )


def _component(rng, dim, c):
    return ComponentParams(
        prior=1.0,
        z_mean=rng.normal(size=dim),
        z_var=rng.random(dim) + 0.5,
        e_mean=rng.normal(size=c) * 0.1,
        e_var=rng.random(c) + 0.5,
        conf_mean=np.full(c, 1.0 / c),
        conf_var=rng.random(c) + 0.5,
    )


class TestGaussianLogpdf:
    def test_standard_normal_values(self):
        """Frozen closed-form values of the standard normal log density."""
        one = np.ones(1)
        zero = np.zeros(1)
        assert gaussian_logpdf(zero, zero, one) == pytest.approx(
            -0.9189385332046727, abs=1e-15
        )
        assert gaussian_logpdf(one, zero, one) == pytest.approx(
            -1.4189385332046727, abs=1e-15
        )
        assert gaussian_logpdf(np.zeros(2), np.zeros(2), np.ones(2)) == pytest.approx(
            -1.8378770664093453, abs=1e-15
        )

    def test_shifted_scaled_value(self):
        """N(x=3; mean=1, var=4): -0.5 * (log(8 pi) + 1)."""
        got = gaussian_logpdf(np.array([3.0]), np.array([1.0]), np.array([4.0]))
        assert got == pytest.approx(-2.112085713764618, abs=1e-15)

    def test_matches_scipy_norm(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            x, m = rng.normal(size=2) * 3
            v = rng.random() * 4 + 0.1
            got = gaussian_logpdf(np.array([x]), np.array([m]), np.array([v]))
            np.testing.assert_allclose(got, stats.norm.logpdf(x, m, np.sqrt(v)))

    def test_diagonal_factorizes(self):
        """A diagonal Gaussian is the sum of per-coordinate log densities."""
        rng = np.random.default_rng(43)
        x, m = rng.normal(size=(2, 6))
        v = rng.random(6) + 0.2
        per_dim = sum(
            gaussian_logpdf(x[d : d + 1], m[d : d + 1], v[d : d + 1]) for d in range(6)
        )
        np.testing.assert_allclose(gaussian_logpdf(x, m, v), per_dim, rtol=1e-12)

    def test_empty_vector_scores_zero(self):
        assert gaussian_logpdf(np.zeros(0), np.zeros(0), np.zeros(0)) == 0.0

    def test_errors(self):
        with pytest.raises(ShapeError):
            gaussian_logpdf(np.zeros(2), np.zeros(3), np.ones(3))
        with pytest.raises(ValidationError):
            gaussian_logpdf(np.zeros(1), np.zeros(1), np.zeros(1))


class TestCategoricalLogpmf:
    def test_plain_value(self):
        np.testing.assert_allclose(
            categorical_logpmf(1, np.array([0.25, 0.75])), np.log(0.75)
        )

    def test_zero_probability_floored(self):
        assert categorical_logpmf(0, np.array([0.0, 1.0])) == pytest.approx(
            np.log(1e-12)
        )

    def test_out_of_range(self):
        with pytest.raises(RangeError):
            categorical_logpmf(2, np.array([0.5, 0.5]))


class TestLogsumexp:
    def test_two_zeros(self):
        assert logsumexp(np.zeros(2)) == pytest.approx(np.log(2.0), abs=1e-15)

    def test_matches_logaddexp_reduce(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = rng.normal(size=rng.integers(2, 9)) * 50
            np.testing.assert_allclose(
                logsumexp(a), np.logaddexp.reduce(a), rtol=1e-12
            )

    def test_extreme_values_stable(self):
        a = np.array([-1e4, -1e4 + 1.0])
        np.testing.assert_allclose(logsumexp(a), -1e4 + np.logaddexp(0.0, 1.0))

    def test_all_neg_inf(self):
        with np.errstate(divide="ignore"):
            assert logsumexp(np.array([-np.inf, -np.inf])) == -np.inf


class TestConfigValidation:
    def test_weight_bounds(self):
        with pytest.raises(RangeError):
            WeightConfig(gamma=-0.1)
        with pytest.raises(ConfigError):
            WeightConfig(mode="other")

    def test_em_config_bounds(self):
        with pytest.raises(RangeError):
            EmConfig(k=0)
        with pytest.raises(RangeError):
            EmConfig(max_iters=0)
        with pytest.raises(RangeError):
            EmConfig(rel_tol=0.0)
        with pytest.raises(ConfigError):
            EmConfig(init="grid")

    def test_observation_shapes(self):
        obs = _observations()
        assert obs.z.dtype == np.float64 and obs.z.flags["C_CONTIGUOUS"]
        with pytest.raises(ShapeError):
            Observations(
                z=np.zeros((3, 2)),
                e=np.zeros((2, 2)),
                conf=np.full((3, 2), 0.5),
                labels=np.zeros(3, dtype=int),
            )
        with pytest.raises(ShapeError):
            Observations(
                z=np.zeros((3, 2)),
                e=np.zeros((3, 4)),
                conf=np.full((3, 2), 0.5),
                labels=np.zeros(3, dtype=int),
            )
        with pytest.raises(ValidationError):
            Observations(
                z=np.zeros((3, 2)),
                e=np.zeros((3, 2)),
                conf=np.full((3, 2), 0.5),
                labels=np.array([0, 1, 2]),
            )

    def test_component_floors(self):
        with pytest.raises(ValidationError):
            ComponentParams(
                prior=0.0,
                z_mean=np.zeros(1),
                z_var=np.ones(1),
                e_mean=np.zeros(1),
                e_var=np.ones(1),
                conf_mean=np.zeros(1),
                conf_var=np.ones(1),
            )
        with pytest.raises(ValidationError, match="floor"):
            ComponentParams(
                prior=0.5,
                z_mean=np.zeros(1),
                z_var=np.full(1, 1e-9),
                e_mean=np.zeros(1),
                e_var=np.ones(1),
                conf_mean=np.zeros(1),
                conf_var=np.ones(1),
            )


class TestJointLoglik:
    def test_composition(self):
        """The joint is log prior plus each modality's weighted log density."""
        rng = np.random.default_rng(7)
        comp = _component(rng, dim=4, c=3)
        w = WeightConfig(gamma=0.15, lambda_e=0.1, lambda_conf=1.0)
        z = rng.normal(size=4)
        conf = np.array([0.2, 0.5, 0.3])
        e = np.array([-0.2, 0.5, -0.3])
        expected = (
            np.log(comp.prior)
            + w.gamma * gaussian_logpdf(z, comp.z_mean, comp.z_var)
            + w.lambda_e * gaussian_logpdf(e, comp.e_mean, comp.e_var)
            + w.lambda_conf * gaussian_logpdf(conf, comp.conf_mean, comp.conf_var)
        )
        np.testing.assert_allclose(joint_loglik(z, e, conf, comp, w), expected)

    def test_zero_weight_term_skipped_entirely(self):
        """A zero-weight modality contributes nothing even with absurd data."""
        rng = np.random.default_rng(8)
        comp = _component(rng, dim=3, c=2)
        w = WeightConfig(gamma=1.0, lambda_e=0.0, lambda_conf=0.0)
        z = rng.normal(size=3)
        conf = np.array([0.5, 0.5])
        wild_e = np.array([1e300, -1e300])
        got = joint_loglik(z, wild_e, conf, comp, w)
        expected = np.log(comp.prior) + gaussian_logpdf(z, comp.z_mean, comp.z_var)
        np.testing.assert_allclose(got, expected)
        assert np.isfinite(got)

    def test_domino_requires_categoricals(self):
        rng = np.random.default_rng(9)
        comp = _component(rng, dim=2, c=2)
        w = WeightConfig(1.0, 1.0, 1.0, mode="domino")
        with pytest.raises(ConfigError):
            joint_loglik(np.zeros(2), 0, np.array([0.6, 0.4]), comp, w)

    def test_domino_composition(self):
        rng = np.random.default_rng(10)
        base = _component(rng, dim=2, c=3)
        comp = ComponentParams(
            prior=base.prior,
            z_mean=base.z_mean,
            z_var=base.z_var,
            e_mean=base.e_mean,
            e_var=base.e_var,
            conf_mean=base.conf_mean,
            conf_var=base.conf_var,
            cat_y=np.array([0.2, 0.3, 0.5]),
            cat_conf=np.array([0.6, 0.3, 0.1]),
        )
        w = WeightConfig(0.5, 2.0, 3.0, mode="domino")
        z = rng.normal(size=2)
        conf = np.array([0.1, 0.7, 0.2])
        expected = (
            np.log(comp.prior)
            + 0.5 * gaussian_logpdf(z, comp.z_mean, comp.z_var)
            + 2.0 * np.log(0.3)  # gold label 1
            + 3.0 * np.log(0.3)  # argmax prediction 1
        )
        np.testing.assert_allclose(joint_loglik(z, 1, conf, comp, w), expected)

    def test_responsibilities_simplex_and_softmax(self):
        rng = np.random.default_rng(11)
        comps = [_component(rng, 3, 2) for _ in range(4)]
        comps = [
            ComponentParams(
                prior=0.25,
                z_mean=c.z_mean,
                z_var=c.z_var,
                e_mean=c.e_mean,
                e_var=c.e_var,
                conf_mean=c.conf_mean,
                conf_var=c.conf_var,
            )
            for c in comps
        ]
        w = WeightConfig(0.15, 0.1, 1.0)
        z, conf, e = rng.normal(size=3), np.array([0.4, 0.6]), np.array([0.6, -0.6])
        r = responsibilities(z, e, conf, comps, w)
        assert r.sum() == pytest.approx(1.0, abs=1e-12)
        ll = np.array([joint_loglik(z, e, conf, c, w) for c in comps])
        np.testing.assert_allclose(r, np.exp(ll - logsumexp(ll)), rtol=1e-12)


class TestVectorizedPaths:
    def test_gauss_ll_matrix_matches_scalar(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(25, 4))
        means = rng.normal(size=(6, 4))
        variances = rng.random((6, 4)) + 0.3
        got = gauss_ll_matrix(x, means, variances)
        for i in range(25):
            for j in range(6):
                np.testing.assert_allclose(
                    got[i, j],
                    gaussian_logpdf(x[i], means[j], variances[j]),
                    rtol=1e-9,
                    atol=1e-9,
                )

    @pytest.mark.parametrize("mode", ["edisa", "domino"])
    def test_joint_matrix_matches_scalar(self, mode):
        rng = np.random.default_rng(13)
        obs = _observations(seed=13, n=20, dim=3, c=3)
        fit = em_fit(
            obs,
            WeightConfig(0.5, 0.3, 0.7, mode=mode),
            EmConfig(k=3, seed=1, max_iters=5),
        )
        w = WeightConfig(0.5, 0.3, 0.7, mode=mode)
        stacked = stack_components(fit.components)
        if mode == "edisa":
            full = joint_loglik_matrix(obs.z, obs.e, obs.conf, None, stacked, w)
        else:
            full = joint_loglik_matrix(obs.z, None, obs.conf, obs.labels, stacked, w)
        for i in range(obs.n):
            e_arg = obs.e[i] if mode == "edisa" else int(obs.labels[i])
            for j in range(3):
                np.testing.assert_allclose(
                    full[i, j],
                    joint_loglik(obs.z[i], e_arg, obs.conf[i], fit.components[j], w),
                    rtol=1e-9,
                    atol=1e-9,
                )


class TestEmFit:
    def test_objective_non_decreasing(self):
        """The log-likelihood objective never drops along the trajectory."""
        for seed in range(10):
            obs = _observations(seed=seed)
            fit = em_fit(obs, WeightConfig(0.15, 0.1, 1.0), EmConfig(k=5, seed=seed))
            tr = np.array(fit.trajectory)
            assert np.all(np.diff(tr) >= -1e-8), f"seed {seed} dipped"

    def test_deterministic(self):
        obs = _observations(seed=3)
        a = em_fit(obs, WeightConfig(0.15, 0.1, 1.0), EmConfig(k=4, seed=7))
        b = em_fit(obs, WeightConfig(0.15, 0.1, 1.0), EmConfig(k=4, seed=7))
        assert a.trajectory == b.trajectory
        for ca, cb in zip(a.components, b.components):
            assert ca.prior == cb.prior
            np.testing.assert_array_equal(ca.z_mean, cb.z_mean)
            np.testing.assert_array_equal(ca.z_var, cb.z_var)
            np.testing.assert_array_equal(ca.e_mean, cb.e_mean)
            np.testing.assert_array_equal(ca.conf_var, cb.conf_var)

    def test_variance_floor_everywhere(self):
        obs = _observations(seed=4, n=60)
        fit = em_fit(obs, WeightConfig(1.0, 1.0, 1.0), EmConfig(k=6, seed=0))
        for c in fit.components:
            assert c.z_var.min() >= VAR_FLOOR * (1 - 1e-12)
            assert c.e_var.min() >= VAR_FLOOR * (1 - 1e-12)
            assert c.conf_var.min() >= VAR_FLOOR * (1 - 1e-12)

    def test_priors_sum_to_one(self):
        obs = _observations(seed=5)
        fit = em_fit(obs, WeightConfig(0.15, 0.1, 1.0), EmConfig(k=5, seed=2))
        total = sum(c.prior for c in fit.components)
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_uniform_prior_frozen(self):
        obs = _observations(seed=6)
        fit = em_fit(
            obs,
            WeightConfig(0.15, 0.1, 1.0),
            EmConfig(k=4, seed=0, uniform_prior=True),
        )
        for c in fit.components:
            assert c.prior == pytest.approx(0.25, abs=1e-12)

    def test_converges_before_iteration_cap(self):
        obs = _observations(seed=7, n=80)
        fit = em_fit(obs, WeightConfig(0.15, 0.1, 1.0), EmConfig(k=3, seed=0))
        assert len(fit.trajectory) < 300

    def test_too_few_points(self):
        obs = _observations(seed=8, n=4)
        with pytest.raises(InsufficientDataError):
            em_fit(obs, WeightConfig(), EmConfig(k=5))

    def test_all_zero_weights_fall_back(self):
        """Zero weights leave no kmeans++ features; the fit must still run."""
        obs = _observations(seed=9, n=30)
        fit = em_fit(obs, WeightConfig(0.0, 0.0, 0.0), EmConfig(k=3, seed=0))
        assert len(fit.components) == 3
        assert any("fell back" in ev for ev in fit.events)
        assert np.all(np.diff(np.array(fit.trajectory)) >= -1e-8)

    def test_domino_components_carry_categoricals(self):
        obs = _observations(seed=10, n=40)
        fit = em_fit(
            obs, WeightConfig(1.0, 10.0, 40.0, mode="domino"), EmConfig(k=3, seed=0)
        )
        for c in fit.components:
            assert c.cat_y is not None and c.cat_conf is not None
            assert c.cat_y.sum() == pytest.approx(1.0, abs=1e-9)
            assert c.cat_conf.sum() == pytest.approx(1.0, abs=1e-9)
