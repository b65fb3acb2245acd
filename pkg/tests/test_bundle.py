"""Bundle construction, error distances, PCA, and the on-disk formats."""

import numpy as np
import pytest

from slicekit.bundle import (
    FeatureTable,
    LabeledBundle,
    UnlabeledBundle,
    apply_pca,
    error_distance,
    error_distances,
    fit_pca,
    load_bundle,
    load_feature_table,
    save_bundle,
    save_feature_table,
)
from slicekit.errors import (
    InsufficientDataError,
    InvalidLabelError,
    RangeError,
    ShapeError,
    ValidationError,
)


def _simplex_rows(rng, n, c):
    raw = rng.random((n, c)) + 0.05
    return raw / raw.sum(axis=1, keepdims=True)


def _labeled(seed=0, n=30, dim=5, c=3):
    rng = np.random.default_rng(seed)
    return LabeledBundle(
        ids=tuple(f"p{i:03d}" for i in range(n)),
        z=rng.normal(size=(n, dim)),
        conf=_simplex_rows(rng, n, c),
        labels=rng.integers(0, c, size=n),
        num_classes=c,
    )


class TestErrorDistance:
    def test_hand_vector(self):
        """one_hot(1) - (0.2, 0.7, 0.1) = (-0.2, 0.3, -0.1)."""
        e = error_distance(1, np.array([0.2, 0.7, 0.1]))
        np.testing.assert_allclose(e, [-0.2, 0.3, -0.1], atol=1e-15)

    def test_matrix_matches_row_loop(self):
        rng = np.random.default_rng(3)
        conf = _simplex_rows(rng, 40, 4)
        labels = rng.integers(0, 4, size=40)
        full = error_distances(labels, conf)
        for r in range(40):
            np.testing.assert_array_equal(full[r], error_distance(labels[r], conf[r]))

    def test_rows_sum_to_zero(self):
        """Both one_hot and conf sum to 1, so their difference sums to 0."""
        rng = np.random.default_rng(4)
        conf = _simplex_rows(rng, 200, 5)
        labels = rng.integers(0, 5, size=200)
        sums = error_distances(labels, conf).sum(axis=1)
        np.testing.assert_allclose(sums, 0.0, atol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(InvalidLabelError):
            error_distance(3, np.array([0.5, 0.5]))

    def test_conf_row_must_be_1d(self):
        with pytest.raises(ShapeError):
            error_distance(0, np.ones((2, 2)))


class TestBundleValidation:
    def test_roundtrip_fields(self):
        b = _labeled()
        assert b.n == 30 and b.dim == 5 and b.num_classes == 3
        assert b.z.dtype == np.float32 and b.conf.dtype == np.float32
        assert b.labels.dtype == np.int64

    def test_duplicate_ids(self):
        with pytest.raises(ValidationError, match="duplicate id"):
            UnlabeledBundle(("a", "a"), np.zeros((2, 2)), np.full((2, 2), 0.5), 2)

    def test_bad_id_characters(self):
        with pytest.raises(ValidationError):
            UnlabeledBundle(("a\nb",), np.zeros((1, 2)), np.full((1, 2), 0.5), 2)

    def test_conf_shape_mismatch(self):
        with pytest.raises(ShapeError):
            UnlabeledBundle(("a",), np.zeros((1, 2)), np.full((1, 3), 1 / 3), 2)

    def test_nonfinite_z(self):
        z = np.array([[np.inf, 0.0]])
        with pytest.raises(ValidationError, match="non-finite"):
            UnlabeledBundle(("a",), z, np.full((1, 2), 0.5), 2)

    def test_label_out_of_range(self):
        with pytest.raises(InvalidLabelError):
            LabeledBundle(
                ("a",), np.zeros((1, 2)), np.full((1, 2), 0.5), np.array([2]), 2
            )

    def test_labels_shape(self):
        with pytest.raises(ShapeError):
            LabeledBundle(
                ("a",), np.zeros((1, 2)), np.full((1, 2), 0.5), np.array([[0]]), 2
            )

    def test_conf_near_one_kept_bit_for_bit(self):
        """Rows already within the acceptance tolerance are not touched."""
        row = np.array([0.5, np.float32(0.5000003)], dtype=np.float32)
        b = UnlabeledBundle(("a",), np.zeros((1, 2)), row[None, :], 2)
        np.testing.assert_array_equal(b.conf[0], row)

    def test_conf_slightly_off_renormalized(self):
        row = np.array([0.5, 0.5000008], dtype=np.float32)
        assert abs(float(row.astype(np.float64).sum()) - 1.0) > 5e-7
        b = UnlabeledBundle(("a",), np.zeros((1, 2)), row[None, :], 2)
        assert abs(float(b.conf[0].astype(np.float64).sum()) - 1.0) <= 5e-7

    def test_conf_far_off_rejected(self):
        row = np.array([[0.5, 0.500002]], dtype=np.float32)
        with pytest.raises(ValidationError, match="simplex"):
            UnlabeledBundle(("a",), np.zeros((1, 2)), row, 2)

    def test_conf_negative_rejected(self):
        with pytest.raises(ValidationError):
            UnlabeledBundle(("a",), np.zeros((1, 2)), np.array([[-0.1, 1.1]]), 2)

    def test_take_and_row_of(self):
        b = _labeled(seed=1)
        sub = b.take([4, 2, 9])
        assert sub.ids == (b.ids[4], b.ids[2], b.ids[9])
        np.testing.assert_array_equal(sub.z[1], b.z[2])
        np.testing.assert_array_equal(sub.labels, b.labels[[4, 2, 9]])
        assert b.row_of(b.ids[7]) == 7

    def test_without_labels(self):
        b = _labeled(seed=2)
        u = b.without_labels()
        assert isinstance(u, UnlabeledBundle) and not hasattr(u, "labels")
        np.testing.assert_array_equal(u.conf, b.conf)


class TestPca:
    def test_basis_orthonormal(self):
        rng = np.random.default_rng(11)
        t = fit_pca(rng.normal(size=(60, 8)), 3)
        np.testing.assert_allclose(t.basis.T @ t.basis, np.eye(3), atol=1e-10)

    def test_projected_variance_descending(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(200, 6)) * np.array([5.0, 3.0, 2.0, 1.0, 0.5, 0.2])
        proj = apply_pca(fit_pca(x, 4), x)
        var = proj.var(axis=0)
        assert np.all(np.diff(var) <= 1e-9)

    def test_sign_convention(self):
        """Each basis column's largest-magnitude entry is positive."""
        rng = np.random.default_rng(13)
        t = fit_pca(rng.normal(size=(50, 7)), 5)
        for j in range(t.basis.shape[1]):
            col = t.basis[:, j]
            assert col[int(np.argmax(np.abs(col)))] > 0

    def test_full_rank_projection_preserves_distances(self):
        """With d = dim the transform is orthogonal, so distances survive."""
        rng = np.random.default_rng(14)
        x = rng.normal(size=(40, 6))
        proj = apply_pca(fit_pca(x, 6), x)
        for _ in range(20):
            i, j = rng.integers(0, 40, size=2)
            np.testing.assert_allclose(
                np.linalg.norm(proj[i] - proj[j]),
                np.linalg.norm(x[i] - x[j]),
                rtol=1e-9,
            )

    def test_rank_deficient_truncates(self):
        rng = np.random.default_rng(15)
        factors = rng.normal(size=(30, 2))
        x = factors @ rng.normal(size=(2, 9))
        t = fit_pca(x, 5)
        assert t.basis.shape == (9, 2)

    def test_determinism(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(25, 4))
        a, b = fit_pca(x, 3), fit_pca(x, 3)
        np.testing.assert_array_equal(a.basis, b.basis)
        np.testing.assert_array_equal(a.mean, b.mean)

    def test_errors(self):
        with pytest.raises(InsufficientDataError):
            fit_pca(np.zeros((1, 3)), 1)
        with pytest.raises(RangeError):
            fit_pca(np.zeros((5, 3)), -1)
        t = fit_pca(np.random.default_rng(0).normal(size=(10, 3)), 2)
        with pytest.raises(ShapeError):
            apply_pca(t, np.zeros((4, 5)))


class TestBundleIo:
    @pytest.mark.parametrize("fmt", ["f32le", "csv"])
    def test_round_trip_exact(self, tmp_path, fmt):
        """Save -> load reproduces every array bit-for-bit in both formats."""
        b = _labeled(seed=21)
        save_bundle(b, tmp_path / "b", fmt=fmt)
        back = load_bundle(tmp_path / "b")
        assert isinstance(back, LabeledBundle)
        assert back.ids == b.ids
        np.testing.assert_array_equal(back.z, b.z)
        np.testing.assert_array_equal(back.conf, b.conf)
        np.testing.assert_array_equal(back.labels, b.labels)

    def test_save_load_save_byte_stable(self, tmp_path):
        b = _labeled(seed=22)
        save_bundle(b, tmp_path / "one")
        save_bundle(load_bundle(tmp_path / "one"), tmp_path / "two")
        for name in ("meta.json", "ids.txt", "Z.bin", "conf.bin", "labels.csv"):
            assert (tmp_path / "one" / name).read_bytes() == (
                tmp_path / "two" / name
            ).read_bytes()

    def test_unlabeled_round_trip(self, tmp_path):
        u = _labeled(seed=23).without_labels()
        save_bundle(u, tmp_path / "u")
        back = load_bundle(tmp_path / "u")
        assert isinstance(back, UnlabeledBundle)
        assert not (tmp_path / "u" / "labels.csv").exists()

    def test_missing_meta(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_bundle(tmp_path / "nope")

    def test_truncated_matrix(self, tmp_path):
        save_bundle(_labeled(seed=24), tmp_path / "b")
        blob = (tmp_path / "b" / "Z.bin").read_bytes()
        (tmp_path / "b" / "Z.bin").write_bytes(blob[:-4])
        with pytest.raises(ValidationError, match="float32 values"):
            load_bundle(tmp_path / "b")

    def test_id_count_mismatch(self, tmp_path):
        save_bundle(_labeled(seed=25), tmp_path / "b")
        ids = (tmp_path / "b" / "ids.txt").read_text().splitlines()
        (tmp_path / "b" / "ids.txt").write_text("".join(i + "\n" for i in ids[:-1]))
        with pytest.raises(ValidationError, match="ids"):
            load_bundle(tmp_path / "b")

    def test_bad_labels_header(self, tmp_path):
        save_bundle(_labeled(seed=26), tmp_path / "b")
        body = (tmp_path / "b" / "labels.csv").read_text().splitlines()[1:]
        (tmp_path / "b" / "labels.csv").write_text(
            "point,cls\n" + "".join(line + "\n" for line in body)
        )
        with pytest.raises(ValidationError, match="header"):
            load_bundle(tmp_path / "b")


class TestFeatureTable:
    def test_missing_reads_as_zero(self):
        t = FeatureTable(rows={"a": {"f": 2.0}})
        assert t.value("a", "f") == 2.0
        assert t.value("a", "g") == 0.0
        assert t.value("zzz", "f") == 0.0
        np.testing.assert_array_equal(t.vector("f", ["a", "zzz"]), [2.0, 0.0])

    def test_names_sorted_union(self):
        t = FeatureTable(rows={"a": {"late": 1.0}, "b": {"early": 1.0}})
        assert t.names == ("early", "late")

    def test_round_trip(self, tmp_path):
        t = FeatureTable(rows={"a": {"f": 1.0, "g": 0.5}, "b": {"f": 0.0}})
        save_feature_table(t, tmp_path / "f.jsonl")
        back = load_feature_table(tmp_path / "f.jsonl")
        assert back.names == t.names
        assert back.value("a", "g") == 0.5
        save_feature_table(back, tmp_path / "f2.jsonl")
        assert (tmp_path / "f.jsonl").read_bytes() == (tmp_path / "f2.jsonl").read_bytes()

    def test_rejects_duplicate_and_non_numeric(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"id": "a", "features": {"f": 1}}\n{"id": "a", "features": {}}\n')
        with pytest.raises(ValidationError, match="duplicate"):
            load_feature_table(p)
        p.write_text('{"id": "a", "features": {"f": true}}\n')
        with pytest.raises(ValidationError, match="non-numeric"):
            load_feature_table(p)
        p.write_text('{"id": "a"}\n')
        with pytest.raises(ValidationError, match="features"):
            load_feature_table(p)
