"""Slice models: fitting, labeled and marginalized inference, serialization."""

import numpy as np
import pytest

from slicekit.bundle import (
    LabeledBundle,
    PcaTransform,
    UnlabeledBundle,
    apply_pca,
    error_distances,
)
from slicekit.errors import ConfigError, UnsupportedModeError, ValidationError
from slicekit.mixture import ComponentParams, EmConfig, WeightConfig, stack_components
from slicekit.sdm import (
    DISCOVER_WEIGHTS,
    DOMINO_WEIGHTS,
    EXPLAIN_WEIGHTS,
    SliceModel,
    assign_labeled,
    detect_error_prone,
    fit_domino,
    fit_edisa,
    infer_slices,
    load_model,
    marginal_loglik,
    model_from_dict,
    model_to_dict,
    save_model,
    structure_variant,
)
from slicekit.synth import PlantedSpec, generate_planted


def _gauss_component(prior, center, dim, c):
    return ComponentParams(
        prior=prior,
        z_mean=np.asarray(center, dtype=np.float64),
        z_var=np.ones(dim),
        e_mean=np.zeros(c),
        e_var=np.ones(c),
        conf_mean=np.full(c, 1.0 / c),
        conf_var=np.ones(c),
    )


def _z_only_model(centers, priors, error_slices, dim=2, c=2):
    comps = tuple(
        _gauss_component(p, ctr, dim, c) for p, ctr in zip(priors, centers)
    )
    return SliceModel(
        components=comps,
        weights=WeightConfig(1.0, 0.0, 0.0),
        pca=PcaTransform(mean=np.zeros(dim), basis=np.eye(dim)),
        delta=0.5,
        error_slices=frozenset(error_slices),
        fit_report=(),
    )


class TestDefaults:
    def test_weight_presets(self):
        assert (DISCOVER_WEIGHTS.gamma, DISCOVER_WEIGHTS.lambda_e) == (0.15, 0.1)
        assert DISCOVER_WEIGHTS.lambda_conf == 1.0
        assert (EXPLAIN_WEIGHTS.lambda_e, EXPLAIN_WEIGHTS.lambda_conf) == (1.0, 0.1)
        assert DOMINO_WEIGHTS.mode == "domino"
        assert (DOMINO_WEIGHTS.gamma, DOMINO_WEIGHTS.lambda_e, DOMINO_WEIGHTS.lambda_conf) == (
            1.0,
            10.0,
            40.0,
        )

    def test_structure_variants(self):
        expect = {
            "edisa-y": (0.0, 0.0, 1.0),
            "edisa-ey": (0.0, 0.1, 1.0),
            "edisa-z": (0.15, 0.0, 0.0),
            "edisa-e": (0.0, 0.1, 0.0),
        }
        for name, (g, le, lc) in expect.items():
            w = structure_variant(name)
            assert (w.gamma, w.lambda_e, w.lambda_conf, w.mode) == (g, le, lc, "edisa")
        with pytest.raises(ConfigError):
            structure_variant("edisa-unknown")

    def test_fit_mode_guards(self):
        data = generate_planted(PlantedSpec(sizes=(20, 20, 20, 20, 20)))
        with pytest.raises(ConfigError):
            fit_edisa(data.bundle, w=DOMINO_WEIGHTS, cfg=EmConfig(k=4), pca_dim=4)
        with pytest.raises(ConfigError):
            fit_domino(data.bundle, w=DISCOVER_WEIGHTS, cfg=EmConfig(k=4), pca_dim=4)


class TestErrorProbability:
    def test_equidistant_four_slices(self):
        """Four equal slices, one marked: the error mass is exactly 1/4."""
        centers = [(5, 0), (-5, 0), (0, 5), (0, -5)]
        model = _z_only_model(centers, [0.25] * 4, {0})
        b = UnlabeledBundle(("a",), np.zeros((1, 2)), np.array([[0.5, 0.5]]), 2)
        out = infer_slices(model, b)
        assert out.error_probability[0] == pytest.approx(0.25, abs=1e-12)

    def test_prior_weighted_mass(self):
        """At an equidistant point the mass reduces to the slice priors."""
        model = _z_only_model([(5, 0), (-5, 0)], [0.75, 0.25], {1})
        b = UnlabeledBundle(("a",), np.zeros((1, 2)), np.array([[0.5, 0.5]]), 2)
        out = infer_slices(model, b)
        assert out.error_probability[0] == pytest.approx(0.25, abs=1e-12)

    def test_no_error_slices_means_zero_mass(self):
        model = _z_only_model([(5, 0), (-5, 0)], [0.5, 0.5], set())
        b = UnlabeledBundle(("a",), np.zeros((1, 2)), np.array([[0.5, 0.5]]), 2)
        np.testing.assert_array_equal(infer_slices(model, b).error_probability, [0.0])


class TestInference:
    def test_z_only_assign_matches_infer(self):
        """Without E and conf terms, labeled and marginalized paths agree."""
        rng = np.random.default_rng(0)
        n = 40
        z = np.concatenate([rng.normal(size=(20, 2)) + (4, 0), rng.normal(size=(20, 2)) - (4, 0)])
        conf = np.tile([0.7, 0.3], (n, 1))
        labels = rng.integers(0, 2, size=n)
        lb = LabeledBundle(tuple(f"x{i}" for i in range(n)), z, conf, labels, 2)
        model = _z_only_model([(4, 0), (-4, 0)], [0.5, 0.5], {1})
        a = assign_labeled(model, lb)
        m = infer_slices(model, lb.without_labels())
        np.testing.assert_array_equal(a.slices, m.slices)

    def test_marginal_identity_small(self):
        """exp(E-term) equals the sum over candidate labels of the E density."""
        data = generate_planted(
            PlantedSpec(k_true=3, sizes=(30, 30, 30), dim=6, seed=2)
        )
        model = fit_edisa(
            data.bundle,
            w=WeightConfig(0.15, 1.0, 0.1),
            cfg=EmConfig(k=3, seed=2),
            pca_dim=6,
        )
        st = stack_components(model.components)
        w = model.weights
        rng = np.random.default_rng(8)
        c = data.bundle.num_classes
        for _ in range(50):
            z_row = rng.normal(size=6) * 2
            raw = rng.random(c) + 1e-3
            conf = raw / raw.sum()
            ll = marginal_loglik(model, z_row, conf)
            zr = apply_pca(model.pca, z_row[None, :])[0]
            for j in range(model.k):
                zterm = w.gamma * np.sum(
                    -0.5 * np.log(2 * np.pi * st.z_var[j])
                    - 0.5 * (zr - st.z_mean[j]) ** 2 / st.z_var[j]
                )
                cterm = w.lambda_conf * np.sum(
                    -0.5 * np.log(2 * np.pi * st.conf_var[j])
                    - 0.5 * (conf - st.conf_mean[j]) ** 2 / st.conf_var[j]
                )
                direct = 0.0
                for cand in range(c):
                    e = -conf.copy()
                    e[cand] += 1.0
                    lp = np.sum(
                        -0.5 * np.log(2 * np.pi * st.e_var[j])
                        - 0.5 * (e - st.e_mean[j]) ** 2 / st.e_var[j]
                    )
                    direct += np.exp(lp)
                e_term = ll[j] - st.log_prior[j] - zterm - cterm
                assert abs(np.exp(e_term) - direct) < 1e-10

    def test_marginal_requires_edisa(self):
        data = generate_planted(PlantedSpec(k_true=2, sizes=(20, 20), seed=1))
        model = fit_domino(data.bundle, cfg=EmConfig(k=2, seed=1), pca_dim=4)
        with pytest.raises(UnsupportedModeError):
            marginal_loglik(model, np.zeros(8), np.full(3, 1 / 3))
        # the bundle-level path marginalizes the categorical term instead
        out = infer_slices(model, data.bundle.without_labels())
        assert out.mode == "domino" and len(out.slices) == 40


class TestDetection:
    def test_ordering_and_ties(self):
        model = _z_only_model([(-4, 0), (4, 0)], [0.5, 0.5], {1})
        z = np.array([[4.0, 0.0], [3.0, 0.0], [2.2, 0.0], [2.2, 0.0], [-4.0, 0.0]])
        conf = np.tile([0.5, 0.5], (5, 1))
        b = UnlabeledBundle(("deep", "mid", "tie_b", "tie_a", "easy"), z, conf, 2)
        got = detect_error_prone(model, b)
        assert got == ["deep", "mid", "tie_a", "tie_b"]

    def test_empty_without_error_slices(self):
        model = _z_only_model([(-4, 0), (4, 0)], [0.5, 0.5], set())
        b = UnlabeledBundle(("a",), np.zeros((1, 2)), np.array([[0.5, 0.5]]), 2)
        assert detect_error_prone(model, b) == []


class TestFitReport:
    def test_error_slices_follow_delta(self):
        data = generate_planted(
            PlantedSpec(k_true=4, sizes=(40, 40, 40, 40), error_rate=0.9, seed=5)
        )
        model = fit_edisa(data.bundle, cfg=EmConfig(k=6, seed=5), pca_dim=8)
        assert sum(s.size for s in model.fit_report) == data.bundle.n
        expected = {
            s.slice
            for s in model.fit_report
            if s.accuracy is not None and s.accuracy < model.delta
        }
        assert model.error_slices == frozenset(expected)

    def test_delta_extremes(self):
        data = generate_planted(
            PlantedSpec(k_true=3, sizes=(30, 30, 30), error_rate=0.8, seed=6)
        )
        none = fit_edisa(data.bundle, cfg=EmConfig(k=4, seed=6), delta=0.0, pca_dim=6)
        assert none.error_slices == frozenset()
        every = fit_edisa(data.bundle, cfg=EmConfig(k=4, seed=6), delta=1.01, pca_dim=6)
        populated = {s.slice for s in every.fit_report if s.size > 0}
        assert every.error_slices == frozenset(populated)


class TestSerialization:
    @pytest.mark.parametrize("mode", ["edisa", "domino"])
    def test_round_trip_bit_exact(self, tmp_path, mode):
        """Floats survive save -> load exactly via shortest-repr decimals."""
        data = generate_planted(PlantedSpec(k_true=3, sizes=(25, 25, 25), seed=7))
        if mode == "edisa":
            model = fit_edisa(data.bundle, cfg=EmConfig(k=3, seed=7), pca_dim=5)
        else:
            model = fit_domino(data.bundle, cfg=EmConfig(k=3, seed=7), pca_dim=5)
        path = tmp_path / "model.json"
        save_model(model, path)
        back = load_model(path)
        assert back.mode == model.mode
        assert back.delta == model.delta
        assert back.error_slices == model.error_slices
        assert back.fit_report == model.fit_report
        np.testing.assert_array_equal(back.pca.mean, model.pca.mean)
        np.testing.assert_array_equal(back.pca.basis, model.pca.basis)
        for ca, cb in zip(model.components, back.components):
            assert ca.prior == cb.prior
            np.testing.assert_array_equal(ca.z_mean, cb.z_mean)
            np.testing.assert_array_equal(ca.z_var, cb.z_var)
            np.testing.assert_array_equal(ca.e_mean, cb.e_mean)
            np.testing.assert_array_equal(ca.e_var, cb.e_var)
            np.testing.assert_array_equal(ca.conf_mean, cb.conf_mean)
            np.testing.assert_array_equal(ca.conf_var, cb.conf_var)
            if mode == "domino":
                np.testing.assert_array_equal(ca.cat_y, cb.cat_y)
                np.testing.assert_array_equal(ca.cat_conf, cb.cat_conf)
        save_model(back, tmp_path / "again.json")
        assert path.read_bytes() == (tmp_path / "again.json").read_bytes()

    def test_round_trip_preserves_behavior(self, tmp_path):
        data = generate_planted(PlantedSpec(k_true=3, sizes=(25, 25, 25), seed=8))
        model = fit_edisa(data.bundle, cfg=EmConfig(k=4, seed=8), pca_dim=5)
        save_model(model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        unlabeled = data.bundle.without_labels()
        np.testing.assert_array_equal(
            infer_slices(model, unlabeled).slices,
            infer_slices(back, unlabeled).slices,
        )

    def test_dict_round_trip(self):
        data = generate_planted(PlantedSpec(k_true=2, sizes=(20, 20), seed=9))
        model = fit_edisa(data.bundle, cfg=EmConfig(k=2, seed=9), pca_dim=4)
        clone = model_from_dict(model_to_dict(model))
        assert model_to_dict(clone) == model_to_dict(model)

    def test_malformed_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_model(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ValidationError, match="malformed JSON"):
            load_model(bad)
        bad.write_text('{"kind": "something-else"}')
        with pytest.raises(ValidationError, match="not a slice-model"):
            load_model(bad)
        bad.write_text('{"kind": "slice-model", "mode": "edisa"}')
        with pytest.raises(ValidationError, match="malformed model payload"):
            load_model(bad)

    def test_extra_metadata_ignored_on_load(self, tmp_path):
        data = generate_planted(PlantedSpec(k_true=2, sizes=(20, 20), seed=10))
        model = fit_edisa(data.bundle, cfg=EmConfig(k=2, seed=10), pca_dim=4)
        save_model(model, tmp_path / "m.json", extra={"config": {"note": "hi"}})
        back = load_model(tmp_path / "m.json")
        assert back.k == model.k
