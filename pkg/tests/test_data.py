import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sideshill.data import (
    DataFormatError, DataValidationError, EmptyDatasetWarning, ProfileBatch, RatingMatrix,
    SideFeatureTable, TemplateSet, cap_row, encode_item_side_features, encode_user_side_features,
    friendliness_from_labels, cluster_friendliness, inject, load_dataset, sample_templates,
)

from conftest import make_dataset


def _batch(R, dim=3, target=None, budget=None):
    R = np.asarray(R)
    return ProfileBatch(RatingMatrix.from_dense(R), SideFeatureTable(np.zeros((len(R), dim))),
                        np.arange(len(R)), target, budget)


class TestLoading:
    def test_ml100k_counts(self, ml100k):
        assert (ml100k.n_users, ml100k.n_items, ml100k.ratings.nnz) == (943, 1682, 100000)
        assert ml100k.user_features.dim == 24
        assert ml100k.item_features.dim == 20

    def test_row_counts_sum_to_nnz(self, ml100k):
        assert ml100k.ratings.row_nnz().sum() == ml100k.ratings.nnz

    def test_source_ids_map_to_indices(self, ml100k):
        assert ml100k.item_index(1) == 0
        assert ml100k.item_index(1419) == 1418
        with pytest.raises(KeyError):
            ml100k.item_index(99999)

    def test_triples(self, tmp_path):
        p = tmp_path / "r.txt"
        p.write_text("u0 i0 5\nu0,i1,3\nu1 i0 4\n")
        ds = load_dataset(p, "rating_triples")
        assert (ds.n_users, ds.n_items, ds.ratings.nnz) == (2, 2, 3)
        assert ds.user_features.dim == 0 and ds.item_features.dim == 0

    def test_empty_file_is_flagged(self, tmp_path):
        p = tmp_path / "r.txt"
        p.write_text("")
        with pytest.warns(EmptyDatasetWarning):
            ds = load_dataset(p, "rating_triples")
        assert ds.ratings.nnz == 0

    def test_malformed_line_reports_line_number(self, tmp_path):
        p = tmp_path / "r.txt"
        p.write_text("1 1 5\n1 2\n")
        with pytest.raises(DataFormatError, match=":2:"):
            load_dataset(p, "rating_triples")

    @pytest.mark.parametrize("bad", ["0", "6", "3.5"])
    def test_rating_out_of_range(self, tmp_path, bad):
        p = tmp_path / "r.txt"
        p.write_text(f"1 1 {bad}\n")
        with pytest.raises(DataValidationError):
            load_dataset(p, "rating_triples")

    def test_duplicates_keep_last(self, tmp_path):
        p = tmp_path / "r.txt"
        p.write_text("1 1 2\n1 1 4\n2 1 3\n")
        with pytest.warns(UserWarning, match="1 duplicate"):
            ds = load_dataset(p, "rating_triples")
        assert ds.ratings.toarray()[0, 0] == 4
        assert ds.ratings.nnz == 2

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            load_dataset(tmp_path, "netflix")


class TestSideFeatures:
    def test_user_encoding(self):
        t = encode_user_side_features([{"age": 25, "gender": "M", "occupation": "technician"}])
        row = t.values[0]
        assert len(row) == 24
        assert row[0] == pytest.approx(0.25)
        assert list(row[1:3]) == [1, 0]
        assert row[3:].sum() == 1

    def test_identical_users_identical_rows(self):
        rec = {"age": 40, "gender": "F", "occupation": "writer"}
        t = encode_user_side_features([rec, dict(rec)])
        np.testing.assert_array_equal(t.values[0], t.values[1])

    def test_age_boundary(self):
        t = encode_user_side_features([{"age": 100, "gender": "F", "occupation": "none"}])
        assert t.values[0, 0] == 1.0

    def test_unknown_occupation_goes_to_other(self):
        a = encode_user_side_features([{"age": 30, "gender": "M", "occupation": "astronaut"}])
        b = encode_user_side_features([{"age": 30, "gender": "M", "occupation": "other"}])
        np.testing.assert_array_equal(a.values, b.values)

    def test_missing_field(self):
        with pytest.raises(DataValidationError):
            encode_user_side_features([{"age": 30, "gender": "M"}])

    def test_item_encoding(self):
        genres = [0] * 19
        t = encode_item_side_features([{"genres": genres, "year": 1950}])
        np.testing.assert_allclose(t.values[0], [0] * 19 + [0.5])
        two = list(genres)
        two[3] = two[7] = 1
        t = encode_item_side_features([{"genres": two, "year": 1995}])
        assert t.values[0, :19].sum() == 2
        assert t.values[0, 19] == pytest.approx(0.95)

    def test_missing_year_defaults(self):
        with pytest.warns(UserWarning, match="release year"):
            t = encode_item_side_features([{"genres": [0] * 19, "year": None}])
        assert t.values[0, 19] == 0.5


class TestTemplates:
    def test_ml100k_budget(self, ml100k):
        t = sample_templates(ml100k, 50, cap=36, seed=3)
        assert len(np.unique(t.users)) == 50
        assert (t.rows > 0).sum(axis=1).max() <= 36

    def test_cap_not_binding(self):
        row = np.zeros(50)
        row[:10] = 3
        np.testing.assert_array_equal(cap_row(row, 36, np.random.default_rng(0)), row)

    def test_same_seed_same_templates(self, toy):
        a = sample_templates(toy, 8, cap=3, seed=11)
        b = sample_templates(toy, 8, cap=3, seed=11)
        np.testing.assert_array_equal(a.users, b.users)
        np.testing.assert_array_equal(a.rows, b.rows)

    def test_too_many(self, toy):
        with pytest.raises(ValueError):
            sample_templates(toy, 21)

    def test_bad_cap(self, toy):
        with pytest.raises(ValueError):
            sample_templates(toy, 2, cap=0)

    def test_template_set_checks(self):
        with pytest.raises(DataValidationError):
            TemplateSet(np.array([1, 1]), np.zeros((2, 3)), 2)
        with pytest.raises(DataValidationError):
            TemplateSet(np.array([0]), np.ones((1, 3)), 2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_truncation_never_creates_ratings(self, seed, cap):
        rng = np.random.default_rng(seed)
        row = rng.integers(0, 6, size=15) * (rng.random(15) < 0.6)
        out = cap_row(row, cap, np.random.default_rng(seed))
        assert set(np.flatnonzero(out)) <= set(np.flatnonzero(row))
        assert np.all(out[out > 0] == row[out > 0])
        assert (out > 0).sum() == min(cap, (row > 0).sum())


class TestFriendliness:
    def test_extreme_separation(self):
        R = np.zeros((6, 3))
        R[:3, 0] = 5
        labels = np.array([0, 0, 0, 1, 1, 1])
        f = friendliness_from_labels(R, labels, 0)
        np.testing.assert_allclose(f.scores, [1.0, 0.0])
        np.testing.assert_array_equal(f.pool, [0, 1, 2])

    def test_tie_selects_all(self):
        R = np.zeros((4, 2))
        R[[0, 2], 0] = 4
        f = friendliness_from_labels(R, np.array([0, 0, 1, 1]), 0)
        np.testing.assert_array_equal(f.pool, np.arange(4))

    def test_hand_oracle_three_clusters(self):
        target = 0
        col = np.array([5, 4, 0, 0,   3, 3, 2, 0,   5, 5, 5, 4])
        labels = np.repeat([0, 1, 2], 4)
        R = np.zeros((12, 2))
        R[:, target] = col
        f = friendliness_from_labels(R, labels, target)
        # top 10% of 4 members -> the single highest rater
        top = np.array([5.0, 3.0, 5.0])
        frac = np.array([2 / 4, 0 / 4, 4 / 4])
        mm = lambda v: (v - v.min()) / (v.max() - v.min())
        expect = (mm(top) + mm(frac)) / 2
        np.testing.assert_allclose(f.top_rating, top)
        np.testing.assert_allclose(f.high_fraction, frac)
        np.testing.assert_allclose(f.scores, expect)
        chosen = np.flatnonzero(expect >= expect.mean())
        np.testing.assert_array_equal(f.pool, np.flatnonzero(np.isin(labels, chosen)))

    def test_unrated_target(self):
        R = np.random.default_rng(0).integers(1, 6, size=(10, 5))
        R[:, 2] = 0
        with pytest.warns(UserWarning, match="unrated"):
            f = cluster_friendliness(make_dataset(R), 2, k=3, svd_rank=2)
        assert len(f.pool) == 10
        assert np.all(f.scores == 0)

    def test_scores_in_unit_interval(self, ml100k):
        f = cluster_friendliness(ml100k, ml100k.item_index(62), k=10, seed=0)
        assert np.all((f.scores >= 0) & (f.scores <= 1))
        assert 0 < len(f.pool) < ml100k.n_users

    def test_kmeans_sampling_draws_from_pool(self, ml100k):
        t62 = ml100k.item_index(62)
        f = cluster_friendliness(ml100k, t62, seed=0)
        t = sample_templates(ml100k, 50, "kmeans_friendly", 36, t62, seed=0)
        assert set(t.users) <= set(f.pool)


class TestInject:
    def test_shapes(self, ml100k):
        b = ProfileBatch(RatingMatrix.from_dense(np.eye(50, ml100k.n_items) * 5),
                         SideFeatureTable(np.zeros((50, 24))), np.arange(50))
        out = inject(ml100k, b)
        assert out.n_users == 993
        assert out.ratings.nnz == ml100k.ratings.nnz + 50
        assert out.item_features is ml100k.item_features

    def test_empty_batch_is_identity(self, toy):
        assert inject(toy, ProfileBatch.empty(toy.n_items, 3)) is toy

    def test_dimension_mismatch(self, toy):
        with pytest.raises(DataValidationError):
            inject(toy, _batch(np.ones((2, 5))))
        with pytest.raises(DataValidationError):
            inject(toy, _batch(np.ones((2, 12)), dim=4))

    def test_associative(self, toy):
        b1 = _batch(np.eye(2, 12, dtype=int) * 3)
        b2 = _batch(np.eye(3, 12, k=2, dtype=int) * 4)
        two = inject(inject(toy, b1), b2)
        stacked = _batch(np.vstack([np.eye(2, 12, dtype=int) * 3, np.eye(3, 12, k=2, dtype=int) * 4]))
        one = inject(toy, stacked)
        assert (two.ratings.csr != one.ratings.csr).nnz == 0


class TestProfileBatch:
    def test_target_must_be_five(self):
        R = np.zeros((2, 4))
        R[:, 1] = [5, 4]
        with pytest.raises(DataValidationError, match="target"):
            _batch(R, target=1)

    def test_budget(self):
        R = np.zeros((1, 6))
        R[0, :4] = 3
        R[0, 0] = 5
        _batch(R, target=0, budget=3)
        with pytest.raises(DataValidationError, match="budget"):
            _batch(R, target=0, budget=2)

    def test_json_round_trip(self, tmp_path):
        R = np.array([[5, 0, 3], [5, 1, 0]])
        b = ProfileBatch(RatingMatrix.from_dense(R), SideFeatureTable(np.array([[0.5, 1.0], [0.25, 0.0]])),
                         np.array([4, 9]), 0, 2)
        b.save(tmp_path / "b.json")
        c = ProfileBatch.load(tmp_path / "b.json")
        assert c.fingerprint == b.fingerprint
        assert (c.target, c.budget) == (0, 2)

    def test_rating_matrix_rejects_bad_values(self):
        with pytest.raises(DataValidationError):
            RatingMatrix.from_dense([[0, 6]])
        with pytest.raises(DataValidationError):
            RatingMatrix.from_triples([0], [3], [4], (1, 2))
