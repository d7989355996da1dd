"""Rating data, side features, template sampling and fake-profile injection."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.cluster import KMeans
from sklearn.decomposition import TruncatedSVD

log = logging.getLogger(__name__)

OCCUPATIONS = (
    "administrator", "artist", "doctor", "educator", "engineer", "entertainment",
    "executive", "healthcare", "homemaker", "lawyer", "librarian", "marketing",
    "none", "other", "programmer", "retired", "salesman", "scientist", "student",
    "technician", "writer",
)
GENDERS = ("M", "F")
N_GENRES = 19
USER_FEATURE_DIM = 1 + len(GENDERS) + len(OCCUPATIONS)
ITEM_FEATURE_DIM = N_GENRES + 1


class DataFormatError(ValueError):
    """A source file line could not be parsed."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class DataValidationError(ValueError):
    pass


class EmptyDatasetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RatingMatrix:
    """Sparse users x items matrix of integer ratings in 1..5 (0 = unobserved)."""

    csr: sp.csr_matrix

    def __post_init__(self):
        m = sp.csr_matrix(self.csr, dtype=np.int8)
        m.eliminate_zeros()
        m.sort_indices()
        if m.nnz and (m.data.min() < 1 or m.data.max() > 5):
            raise DataValidationError("stored ratings must be integers in [1, 5]")
        object.__setattr__(self, "csr", m)

    @classmethod
    def from_triples(cls, users, items, ratings, shape) -> "RatingMatrix":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ratings = np.asarray(ratings)
        if len(users) and (users.min() < 0 or users.max() >= shape[0]
                           or items.min() < 0 or items.max() >= shape[1]):
            raise DataValidationError("rating index out of range")
        if len(ratings) and not np.all(np.isin(ratings, [1, 2, 3, 4, 5])):
            raise DataValidationError("stored ratings must be integers in [1, 5]")
        m = sp.coo_matrix((ratings.astype(np.int8), (users, items)), shape=shape).tocsr()
        return cls(m)

    @classmethod
    def from_dense(cls, array) -> "RatingMatrix":
        array = np.asarray(array)
        if np.any((array != np.round(array)) | (array < 0) | (array > 5)):
            raise DataValidationError("dense ratings must be integers in [0, 5]")
        return cls(sp.csr_matrix(array.astype(np.int8)))

    @property
    def shape(self):
        return self.csr.shape

    @property
    def n_users(self) -> int:
        return self.csr.shape[0]

    @property
    def n_items(self) -> int:
        return self.csr.shape[1]

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    def toarray(self, dtype=np.float32) -> np.ndarray:
        return self.csr.toarray().astype(dtype)

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.csr.indptr)

    def col_nnz(self) -> np.ndarray:
        return np.bincount(self.csr.indices, minlength=self.n_items)

    def triples(self):
        coo = self.csr.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data.astype(np.int64)

    def column(self, item: int) -> np.ndarray:
        return self.csr[:, item].toarray().ravel()


@dataclass(frozen=True)
class SideFeatureTable:
    values: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise DataValidationError("side features must be a 2-d table")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def empty(cls, n_rows: int) -> "SideFeatureTable":
        return cls(np.zeros((n_rows, 0), dtype=np.float32))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class Dataset:
    ratings: RatingMatrix
    user_features: SideFeatureTable
    item_features: SideFeatureTable
    name: str = "dataset"
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None

    def __post_init__(self):
        if len(self.user_features) != self.ratings.n_users:
            raise DataValidationError("user feature rows must equal n_users")
        if len(self.item_features) != self.ratings.n_items:
            raise DataValidationError("item feature rows must equal n_items")
        if self.user_ids is None:
            object.__setattr__(self, "user_ids", np.arange(self.n_users))
        if self.item_ids is None:
            object.__setattr__(self, "item_ids", np.arange(self.n_items))

    @property
    def n_users(self) -> int:
        return self.ratings.n_users

    @property
    def n_items(self) -> int:
        return self.ratings.n_items

    def item_index(self, raw_id) -> int:
        """Contiguous index of an item given its source id."""
        hits = np.flatnonzero(self.item_ids == raw_id)
        if not len(hits):
            raise KeyError(f"item id {raw_id!r} not in {self.name}")
        return int(hits[0])

    def without_side_features(self) -> "Dataset":
        return Dataset(self.ratings, SideFeatureTable.empty(self.n_users),
                       SideFeatureTable.empty(self.n_items), self.name + "-ratings-only",
                       self.user_ids, self.item_ids)


@dataclass(frozen=True)
class ProfileBatch:
    """Fake users' ratings plus the real side-feature rows attached to them."""

    ratings: RatingMatrix
    user_features: SideFeatureTable
    provenance: np.ndarray
    target: int | None = None
    budget: int | None = None

    def __post_init__(self):
        prov = np.asarray(self.provenance, dtype=np.int64)
        object.__setattr__(self, "provenance", prov)
        n = self.ratings.n_users
        if len(self.user_features) != n or len(prov) != n:
            raise DataValidationError("ratings, features and provenance must have one row per fake user")
        if self.target is not None and n:
            col = self.ratings.column(self.target)
            if np.any(col != 5):
                raise DataValidationError("every fake profile must rate the target item 5")
        if self.budget is not None and n:
            limit = self.budget + (1 if self.target is not None else 0)
            if self.ratings.row_nnz().max() > limit:
                raise DataValidationError(f"fake profile exceeds the {self.budget}-rating budget")

    def __len__(self):
        return self.ratings.n_users

    @classmethod
    def empty(cls, n_items: int, feature_dim: int) -> "ProfileBatch":
        return cls(RatingMatrix(sp.csr_matrix((0, n_items), dtype=np.int8)),
                   SideFeatureTable(np.zeros((0, feature_dim))), np.zeros(0, dtype=np.int64))

    @property
    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.ratings.toarray(np.int8).tobytes())
        h.update(np.ascontiguousarray(self.user_features.values).tobytes())
        h.update(self.provenance.tobytes())
        return h.hexdigest()[:16]

    def to_json(self) -> str:
        u, i, r = self.ratings.triples()
        doc = {
            "n_fakes": len(self),
            "n_items": self.ratings.n_items,
            "target": self.target,
            "budget": self.budget,
            "ratings": [[int(a), int(b), int(c)] for a, b, c in zip(u, i, r)],
            "user_features": self.user_features.values.tolist(),
            "provenance": self.provenance.tolist(),
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ProfileBatch":
        doc = json.loads(text)
        trip = np.asarray(doc["ratings"], dtype=np.int64).reshape(-1, 3)
        ratings = RatingMatrix.from_triples(trip[:, 0], trip[:, 1], trip[:, 2],
                                            (doc["n_fakes"], doc["n_items"]))
        feats = np.asarray(doc["user_features"], dtype=np.float32).reshape(doc["n_fakes"], -1)
        return cls(ratings, SideFeatureTable(feats), np.asarray(doc["provenance"]),
                   doc.get("target"), doc.get("budget"))

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ProfileBatch":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class TemplateSet:
    users: np.ndarray
    rows: np.ndarray
    cap: int

    def __post_init__(self):
        if len(np.unique(self.users)) != len(self.users):
            raise DataValidationError("template users must be distinct")
        if len(self.rows) and (self.rows > 0).sum(axis=1).max() > self.cap:
            raise DataValidationError("template row exceeds cap")

    def __len__(self):
        return len(self.users)

    @property
    def mask(self) -> np.ndarray:
        return self.rows > 0


# --------------------------------------------------------------------------- loading

def _numeric_or_str(tokens):
    try:
        return np.array([int(t) for t in tokens])
    except ValueError:
        return np.array(tokens, dtype=object)


def _parse_rating(path, lineno, token):
    try:
        value = float(token)
    except ValueError:
        raise DataFormatError(path, lineno, f"rating {token!r} is not a number") from None
    if value != int(value) or not 1 <= value <= 5:
        raise DataValidationError(f"{path}:{lineno}: rating {token} outside [1, 5]")
    return int(value)


def _read_triples(path, sep=None):
    users, items, ratings = [], [], []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(sep) if sep else line.replace(",", " ").split()
            if len(parts) < 3:
                raise DataFormatError(path, lineno, "expected user, item, rating")
            users.append(parts[0].strip())
            items.append(parts[1].strip())
            ratings.append(_parse_rating(path, lineno, parts[2].strip()))
    return users, items, ratings


def _index(tokens, universe=None):
    ids = _numeric_or_str(list(tokens))
    if universe is None:
        universe = np.unique(ids) if len(ids) else ids
    lookup = {v: k for k, v in enumerate(universe.tolist())}
    return np.array([lookup[v] for v in ids.tolist()], dtype=np.int64), universe


def _build_ratings(u, i, r, shape):
    """Keep the last occurrence of duplicated (user, item) pairs."""
    if len(u):
        key = u * shape[1] + i
        _, last_rev = np.unique(key[::-1], return_index=True)
        keep = np.sort(len(key) - 1 - last_rev)
        n_dup = len(key) - len(keep)
        if n_dup:
            warnings.warn(f"{n_dup} duplicate (user, item) ratings; kept the last occurrence")
        u, i, r = u[keep], i[keep], np.asarray(r)[keep]
    return RatingMatrix.from_triples(u, i, r, shape)


def load_dataset(path, format: str = "ml100k") -> Dataset:
    """Load ML-100K (directory with u.data/u.user/u.item) or a generic triples file."""
    path = Path(path)
    if format == "ml100k":
        return _load_ml100k(path)
    if format == "rating_triples":
        users, items, ratings = _read_triples(path)
        u, user_ids = _index(users)
        i, item_ids = _index(items)
        shape = (len(user_ids), len(item_ids))
        rm = _build_ratings(u, i, ratings, shape)
        if rm.nnz == 0:
            warnings.warn(f"{path} contains no ratings", EmptyDatasetWarning)
        return Dataset(rm, SideFeatureTable.empty(shape[0]), SideFeatureTable.empty(shape[1]),
                       path.stem, user_ids, item_ids)
    raise ValueError(f"unknown dataset format {format!r}")


def _load_ml100k(root: Path) -> Dataset:
    user_records = []
    with open(root / "u.user", encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("|")
            if len(parts) != 5:
                raise DataFormatError(root / "u.user", lineno, "expected 5 pipe-separated fields")
            try:
                age = int(parts[1])
            except ValueError:
                raise DataFormatError(root / "u.user", lineno, f"bad age {parts[1]!r}") from None
            user_records.append({"id": int(parts[0]), "age": age, "gender": parts[2],
                                 "occupation": parts[3]})
    item_records = []
    with open(root / "u.item", encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("|")
            if len(parts) < 5 + N_GENRES:
                raise DataFormatError(root / "u.item", lineno, "expected 24 pipe-separated fields")
            date = parts[2].strip()
            year = int(date[-4:]) if len(date) >= 4 and date[-4:].isdigit() else None
            try:
                genres = [int(g) for g in parts[-N_GENRES:]]
            except ValueError:
                raise DataFormatError(root / "u.item", lineno, "genre flags must be 0/1") from None
            item_records.append({"id": int(parts[0]), "year": year, "genres": genres})

    users, items, ratings = [], [], []
    with open(root / "u.data", encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise DataFormatError(root / "u.data", lineno, "expected tab-separated user, item, rating")
            try:
                users.append(int(parts[0]))
                items.append(int(parts[1]))
            except ValueError:
                raise DataFormatError(root / "u.data", lineno, "ids must be integers") from None
            ratings.append(_parse_rating(root / "u.data", lineno, parts[2]))

    user_ids = np.array(sorted({r["id"] for r in user_records} | set(users)))
    item_ids = np.array(sorted({r["id"] for r in item_records} | set(items)))
    u, _ = _index(users, user_ids)
    i, _ = _index(items, item_ids)
    rm = _build_ratings(u, i, ratings, (len(user_ids), len(item_ids)))
    if rm.nnz == 0:
        warnings.warn(f"{root} contains no ratings", EmptyDatasetWarning)

    by_user = {r["id"]: r for r in user_records}
    by_item = {r["id"]: r for r in item_records}
    missing = [uid for uid in user_ids if uid not in by_user]
    if missing:
        raise DataValidationError(f"{len(missing)} rated users missing from u.user")
    ufeat = encode_user_side_features([by_user[uid] for uid in user_ids])
    ifeat = encode_item_side_features([by_item.get(iid, {"genres": [0] * N_GENRES, "year": None})
                                       for iid in item_ids])
    return Dataset(rm, ufeat, ifeat, root.name, user_ids, item_ids)


# --------------------------------------------------------------------------- side features

def encode_user_side_features(records: Sequence[dict]) -> SideFeatureTable:
    """``[age/100] ++ onehot(gender) ++ onehot(occupation)``; 24 columns."""
    out = np.zeros((len(records), USER_FEATURE_DIM), dtype=np.float32)
    for k, rec in enumerate(records):
        for key in ("age", "gender", "occupation"):
            if rec.get(key) is None:
                raise DataValidationError(f"user record {k} is missing {key!r}")
        gender = str(rec["gender"]).upper()
        if gender not in GENDERS:
            raise DataValidationError(f"user record {k}: gender must be M or F, got {gender!r}")
        occ = str(rec["occupation"]).strip().lower()
        if occ not in OCCUPATIONS:
            occ = "other"
        out[k, 0] = min(max(float(rec["age"]) / 100.0, 0.0), 1.0)
        out[k, 1 + GENDERS.index(gender)] = 1.0
        out[k, 1 + len(GENDERS) + OCCUPATIONS.index(occ)] = 1.0
    names = ("age",) + tuple(f"gender={g}" for g in GENDERS) + tuple(f"occ={o}" for o in OCCUPATIONS)
    return SideFeatureTable(out, names)


def encode_item_side_features(records: Sequence[dict]) -> SideFeatureTable:
    """19 genre flags followed by ``(year - 1900) / 100`` clipped to [0, 1]."""
    out = np.zeros((len(records), ITEM_FEATURE_DIM), dtype=np.float32)
    n_missing = 0
    for k, rec in enumerate(records):
        genres = np.asarray(rec["genres"], dtype=np.float32)
        if genres.shape != (N_GENRES,):
            raise DataValidationError(f"item record {k}: expected {N_GENRES} genre flags")
        out[k, :N_GENRES] = genres
        year = rec.get("year")
        if year is None:
            n_missing += 1
            out[k, N_GENRES] = 0.5
        else:
            out[k, N_GENRES] = min(max((year - 1900) / 100.0, 0.0), 1.0)
    if n_missing:
        warnings.warn(f"{n_missing} items without a release year; using 0.5")
    return SideFeatureTable(out, tuple(f"genre{g}" for g in range(N_GENRES)) + ("year",))


# --------------------------------------------------------------------------- templates

@dataclass(frozen=True)
class Friendliness:
    labels: np.ndarray
    scores: np.ndarray
    top_rating: np.ndarray
    high_fraction: np.ndarray
    pool: np.ndarray = field(repr=False)


def _minmax(v):
    span = v.max() - v.min()
    return np.zeros_like(v) if span <= 0 else (v - v.min()) / span


def friendliness_from_labels(R: np.ndarray, labels: np.ndarray, target: int,
                             top_fraction: float = 0.1, high: int = 4) -> Friendliness:
    """Score clusters by how much their members like ``target``.

    Per cluster: (i) mean target rating of the top ``top_fraction`` of members
    ranked by their target rating (unrated counts as 0), (ii) fraction of members
    rating the target ``>= high``.  Both are min-max normalised across clusters and
    averaged; the pool is every cluster scoring at least the cross-cluster mean.
    """
    col = R[:, target]
    clusters = np.unique(labels)
    top = np.zeros(len(clusters))
    frac = np.zeros(len(clusters))
    for c_idx, c in enumerate(clusters):
        member_ratings = np.sort(col[labels == c])[::-1]
        if not np.any(member_ratings > 0):
            continue
        n_top = max(1, math.ceil(top_fraction * len(member_ratings)))
        top[c_idx] = member_ratings[:n_top].mean()
        frac[c_idx] = np.mean(member_ratings >= high)
    scores = (_minmax(top) + _minmax(frac)) / 2.0
    chosen = clusters[scores >= scores.mean() - 1e-12]
    pool = np.flatnonzero(np.isin(labels, chosen))
    return Friendliness(labels, scores, top, frac, pool)


def cluster_friendliness(dataset: Dataset, target: int, k: int = 10, svd_rank: int = 16,
                         seed: int = 0) -> Friendliness:
    if k < 2 or svd_rank < 1:
        raise ValueError("need k >= 2 and svd_rank >= 1")
    R = dataset.ratings.toarray()
    if not np.any(R[:, target] > 0):
        warnings.warn(f"target {target} is unrated; friendliness pool is every user")
        labels = np.zeros(dataset.n_users, dtype=np.int64)
        return Friendliness(labels, np.zeros(k), np.zeros(k), np.zeros(k), np.arange(dataset.n_users))
    rank = min(svd_rank, R.shape[1] - 1, R.shape[0] - 1)
    emb = TruncatedSVD(n_components=max(rank, 1), random_state=seed).fit_transform(R)
    labels = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(emb)
    return friendliness_from_labels(R, labels, target)


def cap_row(row: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    nz = np.flatnonzero(row)
    if len(nz) <= cap:
        return row.copy()
    keep = rng.choice(nz, size=cap, replace=False)
    out = np.zeros_like(row)
    out[keep] = row[keep]
    return out


def sample_templates(dataset: Dataset, n: int, strategy: str = "uniform", cap: int = 36,
                     target: int | None = None, seed: int = 0, k: int = 10,
                     svd_rank: int = 16) -> TemplateSet:
    """Draw ``n`` distinct template users and cap each row at ``cap`` ratings."""
    if n > dataset.n_users:
        raise ValueError(f"cannot draw {n} templates from {dataset.n_users} users")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    rng = np.random.default_rng(seed)
    candidates = np.arange(dataset.n_users)
    if strategy == "kmeans_friendly":
        if target is None:
            raise ValueError("kmeans_friendly sampling needs a target item")
        pool = cluster_friendliness(dataset, target, k=k, svd_rank=svd_rank, seed=seed).pool
        if len(pool) < n:
            warnings.warn("friendliness pool smaller than the template count; sampling uniformly")
        else:
            candidates = pool
    elif strategy != "uniform":
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    users = np.sort(rng.choice(candidates, size=n, replace=False))
    R = dataset.ratings.csr
    rows = np.stack([cap_row(R[u].toarray().ravel(), cap, rng) for u in users]) if n else \
        np.zeros((0, dataset.n_items), dtype=np.int8)
    return TemplateSet(users, rows.astype(np.int8), cap)


# --------------------------------------------------------------------------- augmentation

def inject(dataset: Dataset, batch: ProfileBatch) -> Dataset:
    """Stack fake users under the real ones; fake rows take indices ``[N, N + len(batch))``."""
    if batch.ratings.n_items != dataset.n_items:
        raise DataValidationError("profile batch item dimension does not match the dataset")
    if batch.user_features.dim != dataset.user_features.dim:
        raise DataValidationError("profile batch feature dimension does not match the dataset")
    if len(batch) == 0:
        return dataset
    ratings = RatingMatrix(sp.vstack([dataset.ratings.csr, batch.ratings.csr]).tocsr())
    feats = SideFeatureTable(np.vstack([dataset.user_features.values, batch.user_features.values]),
                             dataset.user_features.names)
    if dataset.user_ids.dtype.kind in "iu":
        next_id = int(np.max(dataset.user_ids)) + 1 if dataset.n_users else 0
        fake_ids = next_id + np.arange(len(batch))
    else:
        fake_ids = np.array([f"fake{k}" for k in range(len(batch))], dtype=object)
    user_ids = np.concatenate([dataset.user_ids, fake_ids])
    return Dataset(ratings, feats, dataset.item_features, dataset.name, user_ids, dataset.item_ids)
