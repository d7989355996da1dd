"""Attack effectiveness and stealth metrics.

Effectiveness is the hit ratio of the target item in top-k lists. Stealth
is measured three ways: a graph propagation detector seeded with a few known
fakes (FAP), an unsupervised ECOD outlier score over rating and side-feature
summaries, and divergences between fake and real rating-value histograms.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.stats import rankdata, skew

from .data import Dataset
from .victims import VictimModel, topk_matrix


class EvaluationError(ValueError):
    """Raised when a metric is undefined for the given inputs."""


# ---------------------------------------------------------------------------
# hit ratio


def eligible_users(observed, target: int, n_real: int | None = None) -> np.ndarray:
    """Real users (index < n_real) who have not rated the target."""
    col = np.asarray(observed[:, target].todense()).ravel() if sp.issparse(observed) \
        else np.asarray(observed)[:, target]
    users = np.flatnonzero(col == 0)
    if n_real is not None:
        users = users[users < n_real]
    return users


def hit_ratio_at_k(model: VictimModel, target: int, k: int, eligible: Sequence[int]) -> float:
    """Fraction of ``eligible`` users whose top-k list contains ``target``."""
    eligible = np.asarray(eligible, dtype=np.int64)
    if eligible.size == 0:
        raise EvaluationError("no eligible users")
    observed = model.observed.csr[eligible].toarray()
    top = topk_matrix(model.score_matrix(eligible), observed, k)
    return float((top == target).any(axis=1).mean())


# ---------------------------------------------------------------------------
# FAP


@dataclass
class FapResult:
    scores: np.ndarray
    seeds: np.ndarray
    flagged: np.ndarray
    precision: float
    recall: float


def fap_propagate(R, seeds: Sequence[int], iters: int) -> np.ndarray:
    """Spam-probability diffusion on the user-item graph.

    Each iteration sets item scores to the mean of their raters' scores,
    then user scores to the mean of their items' scores, and resets the
    seeds to 1. Weights are degree-normalised binary edges.
    """
    A = sp.csr_matrix(R, dtype=np.float64)
    A.data[:] = 1.0
    A.eliminate_zeros()
    du = np.asarray(A.sum(axis=1)).ravel()
    di = np.asarray(A.sum(axis=0)).ravel()
    user_to_item = sp.diags(1.0 / np.maximum(di, 1)) @ A.T.tocsr()
    item_to_user = sp.diags(1.0 / np.maximum(du, 1)) @ A
    p = np.zeros(A.shape[0])
    seeds = np.asarray(seeds, dtype=np.int64)
    p[seeds] = 1.0
    for _ in range(iters):
        q = user_to_item @ p
        p = item_to_user @ q
        p[seeds] = 1.0
    return p


def fap_detect(R, fakes: Sequence[int], seed_fraction: float = 0.1, iters: int = 10,
               n_flag: int | None = None, seed: int = 0, seeds: Sequence[int] | None = None) -> FapResult:
    """Flag the top-scoring non-seed users and score against the known fakes.

    Seeds are ``seed_fraction`` of the fakes (at least one) unless given.
    ``n_flag`` defaults to the number of fakes. Only users with a positive
    score can be flagged; precision and recall exclude the seeds.
    """
    fakes = np.unique(np.asarray(fakes, dtype=np.int64))
    if fakes.size == 0:
        raise EvaluationError("FAP needs at least one known fake")
    if seeds is None:
        n_seed = max(1, int(round(seed_fraction * fakes.size)))
        seeds = np.random.default_rng(seed).choice(fakes, size=n_seed, replace=False)
    seeds = np.sort(np.asarray(seeds, dtype=np.int64))
    n_flag = fakes.size if n_flag is None else int(n_flag)
    scores = fap_propagate(R, seeds, iters)
    cand = np.setdiff1d(np.flatnonzero(scores > 0), seeds)
    order = np.argsort(-scores[cand], kind="stable")
    flagged = np.sort(cand[order[:n_flag]])
    hidden = np.setdiff1d(fakes, seeds)
    hits = np.intersect1d(flagged, hidden).size
    precision = hits / flagged.size if flagged.size else 0.0
    recall = hits / hidden.size if hidden.size else 0.0
    return FapResult(scores, seeds, flagged, float(precision), float(recall))


# ---------------------------------------------------------------------------
# ECOD


def ecod_scores(X: np.ndarray) -> np.ndarray:
    """ECOD outlier scores: max of left-tail, right-tail and skew-directed sums.

    Tail probabilities are the empirical fractions of points at or below
    (left) and at or above (right) each value, so constant columns add 0.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EvaluationError("ECOD needs a non-empty 2-d array")
    n = X.shape[0]
    left = rankdata(X, method="max", axis=0) / n
    right = rankdata(-X, method="max", axis=0) / n
    nl = -np.log(left)
    nr = -np.log(right)
    with np.errstate(invalid="ignore", divide="ignore"):
        sk = skew(X, axis=0)
    sk = np.nan_to_num(sk)
    auto = np.where(sk < 0, nl, nr)
    return np.maximum.reduce([nl.sum(axis=1), nr.sum(axis=1), auto.sum(axis=1)])


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under ROC from the rank statistic; tied pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUROC needs both positives and negatives")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def ecod_features(dataset: Dataset, r_svd: int = 16, seed: int = 0) -> np.ndarray:
    """Per-user [SVD embedding; count; mean; sample std; side features]."""
    from sklearn.decomposition import TruncatedSVD

    R = sp.csr_matrix(dataset.ratings.csr, dtype=np.float64)
    rank = min(r_svd, min(R.shape) - 1)
    emb = TruncatedSVD(n_components=rank, random_state=seed).fit_transform(R)
    if rank < r_svd:
        emb = np.hstack([emb, np.zeros((R.shape[0], r_svd - rank))])
    n = np.diff(R.indptr).astype(np.float64)
    s1 = np.asarray(R.sum(axis=1)).ravel()
    s2 = np.asarray(R.multiply(R).sum(axis=1)).ravel()
    mean = np.divide(s1, n, out=np.zeros_like(s1), where=n > 0)
    var = np.divide(s2 - n * mean ** 2, n - 1, out=np.zeros_like(s1), where=n > 1)
    std = np.sqrt(np.maximum(var, 0.0))
    return np.hstack([emb, n[:, None], mean[:, None], std[:, None],
                      np.asarray(dataset.user_features.values, dtype=np.float64)])


def ecod_auroc(dataset: Dataset, fakes: Sequence[int], r_svd: int = 16, seed: int = 0) -> float:
    """AUROC of ECOD scores with the fakes as positives (lower = stealthier)."""
    labels = np.zeros(dataset.n_users, dtype=bool)
    labels[np.asarray(fakes, dtype=np.int64)] = True
    if labels.all() or not labels.any():
        raise EvaluationError("need at least one fake and one real user")
    return auroc(ecod_scores(ecod_features(dataset, r_svd, seed)), labels)


# ---------------------------------------------------------------------------
# divergences


def rating_histogram(values) -> np.ndarray:
    v = np.asarray(values)
    v = v[v > 0].astype(np.int64)
    if v.size == 0:
        raise EvaluationError("empty rating pool")
    return np.bincount(v, minlength=6)[1:6] / v.size


def _kl(p, q):
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def distribution_divergences(p, q) -> tuple[float, float]:
    """(TVD, JS) between two distributions; JS in nats."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    return 0.5 * float(np.abs(p - q).sum()), 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def rating_divergences(real, fake) -> tuple[float, float]:
    """TVD and JS between rating-value histograms of two pools (nonzero entries)."""
    if sp.issparse(real):
        real = real.data
    if sp.issparse(fake):
        fake = fake.data
    return distribution_divergences(rating_histogram(real), rating_histogram(fake))


# ---------------------------------------------------------------------------
# reporting


@dataclass
class MetricsReport:
    round: int
    seed: int
    hr_at_k: dict[int, float]
    fap_precision: float
    fap_recall: float
    ecod_auroc: float
    tvd: float
    js: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = list(self.hr_at_k.values()) + [self.fap_precision, self.fap_recall,
                                              self.ecod_auroc, self.tvd, self.js]
        if not all(math.isfinite(v) for v in vals):
            raise EvaluationError("non-finite metric")
        for name, v in [("auroc", self.ecod_auroc), ("tvd", self.tvd)] + \
                [(f"hr[{t}]", h) for t, h in self.hr_at_k.items()]:
            if not 0.0 <= v <= 1.0:
                raise EvaluationError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hr_at_k"] = {str(k): v for k, v in self.hr_at_k.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["hr_at_k"] = {int(k): v for k, v in d["hr_at_k"].items()}
        return cls(**d)


def append_ndjson(path, records: Iterable[dict]) -> None:
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_ndjson(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else []))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c, "")) for c in columns})


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def evaluate_round(victim: VictimModel, clean: Dataset, poisoned: Dataset, fakes: np.ndarray,
                   targets: Sequence[int], k: int = 5, round_index: int = 0, seed: int = 0,
                   r_svd: int = 16, fap_iters: int = 10, seed_fraction: float = 0.1,
                   target_ids: Sequence[int] | None = None) -> MetricsReport:
    """All metrics for one injected batch against a retrained victim.

    Hit ratios are keyed by ``target_ids`` (source ids) when given, else by index.
    """
    hr = {}
    ids = list(targets) if target_ids is None else list(target_ids)
    for t, tid in zip(targets, ids):
        hr[int(tid)] = hit_ratio_at_k(victim, t, k, eligible_users(clean.ratings.csr, t))
    if len(fakes):
        fap = fap_detect(poisoned.ratings.csr, fakes, seed_fraction, fap_iters, seed=seed)
        auc = ecod_auroc(poisoned, fakes, r_svd, seed)
        tvd, js = rating_divergences(clean.ratings.csr, poisoned.ratings.csr[fakes])
        prec, rec = fap.precision, fap.recall
    else:
        prec = rec = tvd = js = 0.0
        auc = 0.5
    return MetricsReport(round_index, seed, hr, prec, rec, auc, tvd, js)
