import json
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import assume, given, settings, strategies as st
from scipy.stats import skew

from sideshill.data import RatingMatrix
from sideshill.evaluation import (
    EvaluationError, MetricsReport, append_ndjson, auroc, distribution_divergences, ecod_auroc,
    ecod_features, ecod_scores, eligible_users, fap_detect, fap_propagate, hit_ratio_at_k,
    rating_divergences, rating_histogram, read_ndjson, write_csv,
)
from sideshill.victims import VictimModel

from conftest import make_dataset


def _victim(scores, observed):
    return VictimModel("test", np.asarray(scores, float), RatingMatrix.from_dense(observed), "x")


class TestHitRatio:
    def test_target_everywhere(self):
        s = np.zeros((3, 6))
        s[:, 4] = 10
        assert hit_ratio_at_k(_victim(s, np.zeros((3, 6))), 4, 2, [0, 1, 2]) == 1.0

    def test_one_of_three(self):
        s = np.tile(np.arange(6, 0, -1, dtype=float), (3, 1))
        s[1, 5] = 100
        assert hit_ratio_at_k(_victim(s, np.zeros((3, 6))), 5, 2, [0, 1, 2]) == pytest.approx(1 / 3)

    def test_empty_eligible(self):
        with pytest.raises(EvaluationError):
            hit_ratio_at_k(_victim(np.zeros((1, 2)), np.zeros((1, 2))), 0, 1, [])

    def test_eligible_users_excludes_fakes(self):
        obs = sp.csr_matrix(np.array([[0, 1], [3, 0], [0, 0], [5, 0]]))
        np.testing.assert_array_equal(eligible_users(obs, 0), [0, 2])
        np.testing.assert_array_equal(eligible_users(obs, 0, n_real=2), [0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8))
    def test_monotone_in_k(self, seed, k):
        rng = np.random.default_rng(seed)
        s = rng.random((6, 10))
        obs = rng.integers(1, 6, (6, 10)) * (rng.random((6, 10)) < 0.3)
        obs[:, 3] = 0
        v = _victim(s, obs)
        users = np.arange(6)
        assert hit_ratio_at_k(v, 3, k, users) <= hit_ratio_at_k(v, 3, k + 1, users)


def _fap_oracle(edges, n_users, n_items, seeds, iters):
    """Plain-Python run of the propagation recurrence."""
    p = [1.0 if u in seeds else 0.0 for u in range(n_users)]
    raters = {i: [u for u, j in edges if j == i] for i in range(n_items)}
    rated = {u: [j for v, j in edges if v == u] for u in range(n_users)}
    for _ in range(iters):
        q = [sum(p[u] for u in raters[i]) / len(raters[i]) if raters[i] else 0.0 for i in range(n_items)]
        p = [sum(q[j] for j in rated[u]) / len(rated[u]) if rated[u] else 0.0 for u in range(n_users)]
        for s in seeds:
            p[s] = 1.0
    return np.array(p)


class TestFap:
    def test_disconnected_spam_component(self):
        R = np.zeros((25, 10))
        R[:5, 0] = 5
        R[5:, 1:] = np.random.default_rng(0).integers(1, 6, (20, 9))
        res = fap_detect(R, np.arange(5), seeds=[0], n_flag=4)
        np.testing.assert_array_equal(res.flagged, [1, 2, 3, 4])
        assert res.precision == 1.0 and res.recall == 1.0

    def test_default_flag_count_is_fake_count(self):
        R = np.zeros((25, 10))
        R[:5, 0] = 5
        R[5:, 1:] = 3
        res = fap_detect(R, np.arange(5), seeds=[0])
        assert res.precision == pytest.approx(1.0)
        assert res.recall == pytest.approx(1.0)

    def test_no_iterations(self):
        R = np.zeros((25, 10))
        R[:5, 0] = 5
        R[5:, 1:] = 3
        res = fap_detect(R, np.arange(5), seeds=[0], iters=0)
        assert len(res.flagged) == 0
        assert (res.precision, res.recall) == (0.0, 0.0)

    def test_hand_propagation(self):
        edges = [(0, 0), (0, 1), (1, 0), (2, 1), (2, 2), (3, 2), (4, 3), (5, 3), (5, 2), (6, 0), (7, 3)]
        R = np.zeros((8, 4))
        for u, i in edges:
            R[u, i] = 3
        for iters in (1, 2):
            got = fap_propagate(R, [0, 4], iters)
            np.testing.assert_allclose(got, _fap_oracle(edges, 8, 4, {0, 4}, iters), atol=1e-12)
        # frozen two-iteration values from the recurrence above
        np.testing.assert_allclose(fap_propagate(R, [0, 4], 2)[[1, 2, 6, 7]],
                                   [5 / 9, 55 / 144, 5 / 9, 1 / 2], atol=1e-12)

    def test_needs_fakes(self):
        with pytest.raises(EvaluationError):
            fap_detect(np.ones((3, 3)), [])


def _ecod_oracle(X):
    """ECOD by direct ECDF enumeration."""
    n, d = X.shape
    scores = []
    for i in range(n):
        left = right = auto = 0.0
        for j in range(d):
            col = X[:, j]
            fl = sum(1 for v in col if v <= X[i, j]) / n
            fr = sum(1 for v in col if v >= X[i, j]) / n
            mu = col.mean()
            m2 = ((col - mu) ** 2).mean()
            sk = ((col - mu) ** 3).mean() / m2 ** 1.5 if m2 > 0 else 0.0
            left -= math.log(fl)
            right -= math.log(fr)
            auto -= math.log(fl if sk < 0 else fr)
        scores.append(max(left, right, auto))
    return np.array(scores)


class TestEcod:
    def test_six_point_oracle(self):
        X = np.array([[0.0, 1.0], [0.2, 1.1], [0.1, 0.9], [0.3, 1.0], [2.5, 0.8], [0.15, 5.0]])
        np.testing.assert_allclose(ecod_scores(X), _ecod_oracle(X), rtol=1e-12)

    def test_constant_column_contributes_nothing(self):
        X = np.array([[1.0, 7.0], [2.0, 7.0], [3.0, 7.0]])
        np.testing.assert_allclose(ecod_scores(X), ecod_scores(X[:, :1]))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_invariant_to_monotone_transforms(self, seed):
        # tail probabilities depend only on ranks; the skew-directed sum also
        # needs each column's skew sign preserved
        X = np.random.default_rng(seed).normal(size=(30, 3))
        Y = np.column_stack([np.exp(X[:, 0]), X[:, 1] ** 3, 2 * X[:, 2] + 7])
        assume(np.all(np.sign(skew(X)) == np.sign(skew(Y))))
        np.testing.assert_allclose(ecod_scores(X), ecod_scores(Y), rtol=1e-12)

    def test_empty(self):
        with pytest.raises(EvaluationError):
            ecod_scores(np.zeros((0, 2)))

    def test_feature_layout(self, toy):
        F = ecod_features(toy, r_svd=4)
        assert F.shape == (toy.n_users, 4 + 3 + toy.user_features.dim)
        R = toy.ratings.toarray()
        row = R[1][R[1] > 0]
        assert F[1, 4] == len(row)
        assert F[1, 5] == pytest.approx(row.mean())
        assert F[1, 6] == pytest.approx(row.std(ddof=1) if len(row) > 1 else 0.0)

    def test_single_rating_std_zero(self):
        R = np.zeros((4, 5), dtype=int)
        R[0, 0] = 4
        R[1:, :3] = 3
        assert ecod_features(make_dataset(R), r_svd=2)[0, 2:5].tolist() == [1.0, 4.0, 0.0]

    def test_auroc_needs_both_classes(self, toy):
        with pytest.raises(EvaluationError):
            ecod_auroc(toy, [])


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0

    def test_all_tied(self):
        assert auroc([1.0] * 5, [0, 1, 0, 1, 1]) == 0.5

    def test_partial_tie(self):
        # pairs: (0.5 vs 0.5) tie, (0.5 vs 0.1) win -> (0.5 + 1) / 2
        assert auroc([0.5, 0.5, 0.1], [1, 0, 0]) == pytest.approx(0.75)

    def test_needs_both(self):
        with pytest.raises(EvaluationError):
            auroc([1, 2], [1, 1])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=4, max_size=30), st.integers(0, 1000))
    def test_negation(self, scores, seed):
        labels = np.random.default_rng(seed).integers(0, 2, len(scores))
        labels[0], labels[1] = 0, 1
        s = np.asarray(scores, float)
        assert auroc(s, labels) + auroc(-s, labels) == pytest.approx(1.0)


class TestDivergences:
    def test_identical(self):
        p = np.array([0.1, 0.2, 0.3, 0.2, 0.2])
        assert distribution_divergences(p, p) == (0.0, 0.0)

    def test_disjoint(self):
        tvd, js = rating_divergences(np.ones(10), np.full(4, 2))
        assert tvd == 1.0
        assert js == pytest.approx(math.log(2))

    def test_hand_values(self):
        p = [0.5, 0.5, 0, 0, 0]
        q = [0.25, 0.25, 0.25, 0.25, 0]
        m = [0.375, 0.375, 0.125, 0.125]
        js = 0.5 * (2 * 0.5 * math.log(0.5 / 0.375)) + 0.5 * (
            2 * 0.25 * math.log(0.25 / 0.375) + 2 * 0.25 * math.log(0.25 / 0.125))
        tvd, got = distribution_divergences(p, q)
        assert tvd == pytest.approx(0.5)
        assert got == pytest.approx(js, rel=1e-12)
        assert got == pytest.approx(0.215762, abs=1e-6)

    def test_histogram_ignores_zeros(self):
        np.testing.assert_allclose(rating_histogram([0, 1, 1, 5, 0]), [2 / 3, 0, 0, 0, 1 / 3])
        with pytest.raises(EvaluationError):
            rating_histogram([0, 0])

    def test_accepts_sparse(self):
        a = sp.csr_matrix(np.array([[1, 0, 5], [3, 0, 0]]))
        assert rating_divergences(a, a.copy()) == (0.0, 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 1), min_size=5, max_size=5),
           st.lists(st.floats(0.01, 1), min_size=5, max_size=5))
    def test_symmetric_and_bounded(self, a, b):
        p = np.array(a) / sum(a)
        q = np.array(b) / sum(b)
        t1, j1 = distribution_divergences(p, q)
        t2, j2 = distribution_divergences(q, p)
        assert t1 == pytest.approx(t2) and j1 == pytest.approx(j2)
        assert 0 <= t1 <= 1 and 0 <= j1 <= math.log(2) + 1e-12


class TestReports:
    def _report(self, **kw):
        base = dict(round=0, seed=1, hr_at_k={1419: 0.5}, fap_precision=0.2, fap_recall=0.1,
                    ecod_auroc=0.3, tvd=0.05, js=0.01)
        base.update(kw)
        return MetricsReport(**base)

    @pytest.mark.parametrize("kw", [dict(ecod_auroc=1.5), dict(tvd=-0.1), dict(hr_at_k={1: 2.0}),
                                    dict(js=float("nan"))])
    def test_validation(self, kw):
        with pytest.raises(EvaluationError):
            self._report(**kw)

    def test_ndjson_round_trip(self, tmp_path):
        r = self._report()
        path = tmp_path / "m.jsonl"
        append_ndjson(path, [r.to_dict()])
        append_ndjson(path, [self._report(round=1).to_dict()])
        back = [MetricsReport.from_dict(d) for d in read_ndjson(path)]
        assert back[0] == r and back[1].round == 1
        json.loads(path.read_text().splitlines()[0])

    def test_csv(self, tmp_path):
        write_csv(tmp_path / "s.csv", [{"a": 1, "b": 0.5}, {"a": 2, "b": 1 / 3}])
        assert (tmp_path / "s.csv").read_text() == "a,b\n1,0.500000\n2,0.333333\n"
