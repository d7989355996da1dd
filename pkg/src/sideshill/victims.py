"""Victim recommenders retrained on poisoned data.

Three families are provided: an attention-augmented autoencoder with a
supervised regression head (``rsattae``), biased matrix factorisation
(``svd_mf``) and neural matrix factorisation (``neumf``). All share the
:class:`VictimModel` interface so evaluation code only needs ``score_matrix``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset, RatingMatrix

log = logging.getLogger(__name__)

SCORE_CHUNK = 128


class VictimDivergedError(RuntimeError):
    """Raised when victim training produces a non-finite loss."""


# ---------------------------------------------------------------------------
# attention fusion


def dot_attention(q, k, v):
    """Scaled dot-product attention with one query per row.

    ``q`` is (B, d), ``k`` and ``v`` are (B, T, d). Returns (B, d) and the
    (B, T) attention weights.
    """
    d = q.shape[-1]
    logits = torch.einsum("bd,btd->bt", q, k) / math.sqrt(d)
    w = torch.softmax(logits, dim=-1)
    return torch.einsum("bt,btd->bd", w, v), w


class AttentionFusion(nn.Module):
    """Gated attention over the tokens {side features, latent}.

    The query comes from the side features; keys and values come from
    projections of both tokens. With no side features only the latent token
    remains and the attention collapses to its value projection.
    """

    def __init__(self, latent_dim: int, feature_dim: int, gate_init: float = 0.5):
        super().__init__()
        self.latent_dim = latent_dim
        self.feature_dim = feature_dim
        d = latent_dim
        self.k_h = nn.Linear(latent_dim, d)
        self.v_h = nn.Linear(latent_dim, d)
        if feature_dim > 0:
            self.q_x = nn.Linear(feature_dim, d)
            self.k_x = nn.Linear(feature_dim, d)
            self.v_x = nn.Linear(feature_dim, d)
        else:
            self.q_h = nn.Linear(latent_dim, d)
        self.gate = nn.Parameter(torch.tensor(float(gate_init)))

    @property
    def alpha(self) -> torch.Tensor:
        return self.gate.clamp(0.0, 1.0)

    def attend(self, h, x=None):
        if self.feature_dim > 0:
            if x is None or x.shape[-1] != self.feature_dim:
                raise ValueError("side feature dimension does not match the fusion layer")
            q = self.q_x(x)
            k = torch.stack([self.k_x(x), self.k_h(h)], dim=1)
            v = torch.stack([self.v_x(x), self.v_h(h)], dim=1)
        else:
            q = self.q_h(h)
            k = self.k_h(h).unsqueeze(1)
            v = self.v_h(h).unsqueeze(1)
        return dot_attention(q, k, v)

    def forward(self, h, x=None, alpha=None):
        m, _ = self.attend(h, x)
        a = self.alpha if alpha is None else torch.as_tensor(alpha, dtype=h.dtype).clamp(0.0, 1.0)
        return a * m + (1 - a) * h


def attention_fuse(h, x, params: AttentionFusion, alpha=None):
    """Fuse latent ``h`` with side features ``x``: alpha * m + (1 - alpha) * h."""
    if h.shape[-1] != params.latent_dim:
        raise ValueError(f"latent dim {h.shape[-1]} != {params.latent_dim}")
    return params(h, x, alpha=alpha)


class AttentionAE(nn.Module):
    """One side of the two-module autoencoder: rating vector to latent to reconstruction."""

    def __init__(self, n_in: int, feature_dim: int, hidden: int = 256, latent_dim: int = 64):
        super().__init__()
        self.enc1 = nn.Linear(n_in, hidden)
        self.enc2 = nn.Linear(hidden, latent_dim)
        self.fusion = AttentionFusion(latent_dim, feature_dim)
        self.dec1 = nn.Linear(latent_dim, hidden)
        self.dec2 = nn.Linear(hidden, n_in)
        nn.init.constant_(self.dec2.bias, 3.5)

    def encode(self, r):
        return self.enc2(torch.tanh(self.enc1(r / 5.0)))

    def embed(self, r, x=None, alpha=None):
        return self.fusion(self.encode(r), x, alpha=alpha)

    def decode(self, z):
        return self.dec2(torch.tanh(self.dec1(z)))

    def forward(self, r, x=None, alpha=None):
        return self.decode(self.embed(r, x, alpha=alpha))


def masked_rmse(pred, target, mask=None):
    """Root mean squared error over observed (nonzero) entries."""
    pred = torch.as_tensor(pred, dtype=torch.float64) if not torch.is_tensor(pred) else pred
    target = torch.as_tensor(target, dtype=pred.dtype) if not torch.is_tensor(target) else target
    if mask is None:
        mask = target > 0
    n = mask.sum()
    if n == 0:
        raise ValueError("no observed entries")
    return torch.sqrt(((pred - target) ** 2 * mask).sum() / n)


# ---------------------------------------------------------------------------
# heads


class FeedForwardHead(nn.Module):
    """MLP on x_ui = [z_u; z_i; x_u; x_i] whose first layer splits by side."""

    def __init__(self, user_dim: int, item_dim: int, hidden: int = 128, bias_init: float = 3.5):
        super().__init__()
        self.user_part = nn.Linear(user_dim, hidden)
        self.item_part = nn.Linear(item_dim, hidden, bias=False)
        self.out = nn.Linear(hidden, 1)
        nn.init.constant_(self.out.bias, bias_init)

    def forward(self, fu, fi):
        return self.out(F.relu(self.user_part(fu) + self.item_part(fi))).squeeze(-1)

    def score_matrix(self, fu, fi):
        a = self.user_part(fu)
        b = self.item_part(fi)
        return self.out(F.relu(a[:, None, :] + b[None, :, :])).squeeze(-1)


class BoostedTreeHead:
    """Narrow train/predict adapter around a gradient-boosted tree regressor."""

    def __init__(self, seed: int = 0, max_iter: int = 200):
        from sklearn.ensemble import HistGradientBoostingRegressor

        self.model = HistGradientBoostingRegressor(max_iter=max_iter, random_state=seed)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "BoostedTreeHead":
        self.model.fit(X, y)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.model.predict(X)


def _boosted_head_or_none(seed: int):
    try:
        return BoostedTreeHead(seed=seed)
    except ImportError:
        warnings.warn("boosted-tree engine unavailable; using the feedforward head")
        return None


# ---------------------------------------------------------------------------
# models


@dataclass
class VictimModel:
    """A trained recommender with a full predicted-rating matrix.

    ``scores`` holds raw predictions for every (user, item) pair and
    ``observed`` the training ratings, which ``recommend_topk`` excludes.
    Ranking uses the raw scores: clipping first would create artificial ties
    at 5 that the index tie-break then resolves in favour of low item ids.
    """

    kind: str
    scores: np.ndarray
    observed: RatingMatrix
    trained_on: str
    head: str | None = None
    losses: list[float] = field(default_factory=list)
    module: nn.Module | None = None

    def predict(self, users, items) -> np.ndarray:
        """Rating predictions, clipped to [1, 5]."""
        return np.clip(self.scores[np.asarray(users), np.asarray(items)], 1.0, 5.0)

    def score_matrix(self, users=None) -> np.ndarray:
        return self.scores if users is None else self.scores[np.asarray(users)]


def dataset_fingerprint(dataset: Dataset) -> str:
    import hashlib

    R = dataset.ratings.csr
    h = hashlib.sha256()
    for a in (R.indptr, R.indices, R.data):
        h.update(np.ascontiguousarray(a).tobytes())
    h.update(np.ascontiguousarray(dataset.user_features.values, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def _check(loss: torch.Tensor, what: str):
    if not torch.isfinite(loss):
        raise VictimDivergedError(f"{what}: non-finite loss")


def _observed_triples(R: RatingMatrix):
    u, i, r = R.triples()
    return (torch.as_tensor(u, dtype=torch.long), torch.as_tensor(i, dtype=torch.long),
            torch.as_tensor(r, dtype=torch.float32))


def _train_autoencoder(ae: AttentionAE, R: torch.Tensor, X, epochs: int, lr: float,
                       batch_size: int, gen: torch.Generator, weight_decay: float = 0.0) -> list[float]:
    opt = torch.optim.Adam(ae.parameters(), lr=lr, weight_decay=weight_decay)
    losses = []
    n = R.shape[0]
    for ep in range(epochs):
        perm = torch.randperm(n, generator=gen)
        tot, cnt = 0.0, 0
        for s in range(0, n, batch_size):
            b = perm[s:s + batch_size]
            mask = R[b] > 0
            if not mask.any():
                continue
            out = ae(R[b], None if X is None else X[b])
            loss = masked_rmse(out, R[b], mask)
            _check(loss, "autoencoder")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                ae.fusion.gate.clamp_(0.0, 1.0)
            tot += loss.item() ** 2 * int(mask.sum())
            cnt += int(mask.sum())
        losses.append(math.sqrt(tot / max(cnt, 1)))
    return losses


def _train_ff_head(head: FeedForwardHead, fu, fi, users, items, ratings, epochs, lr,
                   batch_size, gen, weight_decay: float = 0.0) -> list[float]:
    opt = torch.optim.Adam(head.parameters(), lr=lr, weight_decay=weight_decay)
    n = len(ratings)
    losses = []
    for ep in range(epochs):
        perm = torch.randperm(n, generator=gen)
        tot = 0.0
        for s in range(0, n, batch_size):
            b = perm[s:s + batch_size]
            pred = head(fu[users[b]], fi[items[b]])
            loss = F.mse_loss(pred, ratings[b])
            _check(loss, "feedforward head")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(b)
        losses.append(math.sqrt(tot / n))
    return losses


@torch.no_grad()
def _ff_scores(head: FeedForwardHead, fu, fi) -> np.ndarray:
    out = np.empty((fu.shape[0], fi.shape[0]), dtype=np.float32)
    for s in range(0, fu.shape[0], SCORE_CHUNK):
        out[s:s + SCORE_CHUNK] = head.score_matrix(fu[s:s + SCORE_CHUNK], fi).numpy()
    return out


class RSAttAE(nn.Module):
    """User-side and item-side attention autoencoders plus a regression head."""

    def __init__(self, n_users, n_items, user_dim, item_dim, hidden=256, latent_dim=64, head_hidden=128):
        super().__init__()
        self.user_ae = AttentionAE(n_items, user_dim, hidden, latent_dim)
        self.item_ae = AttentionAE(n_users, item_dim, hidden, latent_dim)
        self.head = FeedForwardHead(latent_dim + user_dim, latent_dim + item_dim, head_hidden)


def train_rsattae(dataset: Dataset, epochs: int = 30, head_kind: str = "feedforward",
                  head_epochs: int = 5, lr: float = 1e-3, head_lr: float = 1e-3,
                  batch_size: int = 64, head_batch: int = 512, hidden: int = 256,
                  latent_dim: int = 64, weight_decay: float = 0.0,
                  head_weight_decay: float = 1e-4, seed: int = 0) -> VictimModel:
    """Two-stage training: reconstruct R and R^T, then regress ratings on x_ui."""
    if head_kind not in ("feedforward", "boosted_trees"):
        raise ValueError(f"unknown head kind {head_kind!r}")
    R_np = dataset.ratings.toarray().astype(np.float32)
    Xu = torch.tensor(dataset.user_features.values, dtype=torch.float32)
    Xi = torch.tensor(dataset.item_features.values, dtype=torch.float32)
    n_users, n_items = R_np.shape
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        model = RSAttAE(n_users, n_items, Xu.shape[1], Xi.shape[1], hidden, latent_dim)
        R = torch.as_tensor(R_np)
        lu = _train_autoencoder(model.user_ae, R, Xu if Xu.shape[1] else None, epochs, lr, batch_size, gen,
                                weight_decay)
        li = _train_autoencoder(model.item_ae, R.T.contiguous(), Xi if Xi.shape[1] else None,
                                epochs, lr, batch_size, gen, weight_decay)
        with torch.no_grad():
            zu = model.user_ae.embed(R, Xu if Xu.shape[1] else None)
            zi = model.item_ae.embed(R.T, Xi if Xi.shape[1] else None)
        fu = torch.cat([zu, Xu], dim=1)
        fi = torch.cat([zi, Xi], dim=1)
        users, items, ratings = _observed_triples(dataset.ratings)
        booster = _boosted_head_or_none(seed) if head_kind == "boosted_trees" else None
        if booster is not None:
            Xtr = torch.cat([fu[users], fi[items]], dim=1).numpy()
            booster.fit(Xtr, ratings.numpy())
            scores = np.empty((n_users, n_items), dtype=np.float32)
            fi_np = fi.numpy()
            for u in range(n_users):
                row = np.hstack([np.repeat(fu[u:u + 1].numpy(), n_items, 0), fi_np])
                scores[u] = booster.predict(row)
            lh, used = [], "boosted_trees"
        else:
            lh = _train_ff_head(model.head, fu, fi, users, items, ratings, head_epochs, head_lr,
                                head_batch, gen, head_weight_decay)
            scores = _ff_scores(model.head, fu, fi)
            used = "feedforward"
    log.debug("rsattae user %.4f item %.4f head %s", lu[-1], li[-1], lh[-1:] or "-")
    return VictimModel("rsattae", scores, dataset.ratings,
                       dataset_fingerprint(dataset), used, lu + li + lh, model)


class BiasedMF(nn.Module):
    def __init__(self, n_users, n_items, rank, mean):
        super().__init__()
        self.P = nn.Parameter(0.1 * torch.randn(n_users, rank))
        self.Q = nn.Parameter(0.1 * torch.randn(n_items, rank))
        self.bu = nn.Parameter(torch.zeros(n_users))
        self.bi = nn.Parameter(torch.zeros(n_items))
        self.mu = float(mean)

    def forward(self, u, i):
        return self.mu + self.bu[u] + self.bi[i] + (self.P[u] * self.Q[i]).sum(-1)

    @torch.no_grad()
    def matrix(self):
        return self.mu + self.bu[:, None] + self.bi[None, :] + self.P @ self.Q.T


def train_mf_victim(dataset: Dataset, rank: int = 16, epochs: int = 200, lr: float = 0.02,
                    reg: float = 0.02, seed: int = 0) -> VictimModel:
    """Biased MF fitted by full-batch Adam on observed squared error (features ignored)."""
    users, items, ratings = _observed_triples(dataset.ratings)
    if len(ratings) == 0:
        raise ValueError("no observed ratings")
    n_users, n_items = dataset.ratings.shape
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        mf = BiasedMF(n_users, n_items, rank, ratings.mean())
        opt = torch.optim.Adam(mf.parameters(), lr=lr)
        losses = []
        for ep in range(epochs):
            pred = mf(users, items)
            mse = F.mse_loss(pred, ratings)
            loss = mse + reg * (mf.P[users].pow(2).sum(-1) + mf.Q[items].pow(2).sum(-1)).mean()
            _check(loss, "svd_mf")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(mse.item())
        scores = mf.matrix().numpy()
    return VictimModel("svd_mf", scores, dataset.ratings,
                       dataset_fingerprint(dataset), None, losses, mf)


class NeuMF(nn.Module):
    """GMF branch and MLP branch over separate embeddings, fused by a linear layer."""

    def __init__(self, n_users, n_items, gmf_dim=16, mlp_dims=(32, 16), bias_init=3.5):
        super().__init__()
        e = mlp_dims[0] // 2
        self.gu = nn.Embedding(n_users, gmf_dim)
        self.gi = nn.Embedding(n_items, gmf_dim)
        self.mu_ = nn.Embedding(n_users, e)
        self.mi = nn.Embedding(n_items, e)
        for emb in (self.gu, self.gi, self.mu_, self.mi):
            nn.init.normal_(emb.weight, std=0.1)
        layers, d = [], 2 * e
        for width in mlp_dims[1:]:
            layers += [nn.Linear(d, width), nn.ReLU()]
            d = width
        self.mlp = nn.Sequential(*layers)
        self.out = nn.Linear(gmf_dim + d, 1)
        nn.init.constant_(self.out.bias, bias_init)

    def forward(self, u, i):
        g = self.gu(u) * self.gi(i)
        m = self.mlp(torch.cat([self.mu_(u), self.mi(i)], dim=-1))
        return self.out(torch.cat([g, m], dim=-1)).squeeze(-1)

    @torch.no_grad()
    def matrix(self):
        n_users, n_items = self.gu.num_embeddings, self.gi.num_embeddings
        out = torch.empty(n_users, n_items)
        items = torch.arange(n_items)
        for s in range(0, n_users, SCORE_CHUNK):
            u = torch.arange(s, min(s + SCORE_CHUNK, n_users))
            uu = u.repeat_interleave(n_items)
            ii = items.repeat(len(u))
            out[s:s + len(u)] = self(uu, ii).view(len(u), n_items)
        return out


def train_neumf_victim(dataset: Dataset, dims: tuple = (16, 32, 16), epochs: int = 10,
                       lr: float = 1e-3, batch_size: int = 512, weight_decay: float = 1e-5,
                       seed: int = 0) -> VictimModel:
    """NeuMF regressor on explicit ratings; ``dims`` = (gmf_dim, *mlp_dims)."""
    users, items, ratings = _observed_triples(dataset.ratings)
    if len(ratings) == 0:
        raise ValueError("no observed ratings")
    n_users, n_items = dataset.ratings.shape
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        net = NeuMF(n_users, n_items, dims[0], tuple(dims[1:]), float(ratings.mean()))
        opt = torch.optim.Adam(net.parameters(), lr=lr, weight_decay=weight_decay)
        losses = []
        n = len(ratings)
        for ep in range(epochs):
            perm = torch.randperm(n, generator=gen)
            tot = 0.0
            for s in range(0, n, batch_size):
                b = perm[s:s + batch_size]
                loss = F.mse_loss(net(users[b], items[b]), ratings[b])
                _check(loss, "neumf")
                opt.zero_grad()
                loss.backward()
                opt.step()
                tot += loss.item() * len(b)
            losses.append(tot / n)
        scores = net.matrix().numpy()
    return VictimModel("neumf", scores, dataset.ratings,
                       dataset_fingerprint(dataset), None, losses, net)


VICTIMS = {"rsattae": train_rsattae, "svd_mf": train_mf_victim, "neumf": train_neumf_victim}


def train_victim(kind: str, dataset: Dataset, seed: int = 0, **kwargs) -> VictimModel:
    try:
        fn = VICTIMS[kind]
    except KeyError:
        raise ValueError(f"unknown victim kind {kind!r}") from None
    return fn(dataset, seed=seed, **kwargs)


# ---------------------------------------------------------------------------
# ranking


class TopK(NamedTuple):
    items: np.ndarray
    complete: bool


def rank_unobserved(scores: np.ndarray, observed_row: np.ndarray, k: int) -> TopK:
    """Top ``k`` unobserved indices by score, ties broken by ascending index."""
    cand = np.flatnonzero(observed_row == 0)
    order = np.argsort(-scores[cand], kind="stable")[:k]
    items = cand[order]
    return TopK(items, len(items) == k)


def recommend_topk(model: VictimModel, user: int, k: int) -> TopK:
    n_users = model.scores.shape[0]
    if not 0 <= user < n_users:
        raise IndexError(f"user {user} out of range [0, {n_users})")
    row = model.observed.csr[user].toarray().ravel()
    topk = rank_unobserved(model.scores[user], row, k)
    if not topk.complete:
        log.info("user %d has only %d unobserved items", user, len(topk.items))
    return topk


def topk_matrix(scores: np.ndarray, observed: np.ndarray, k: int) -> np.ndarray:
    """Batch variant: (n, k) item indices, -1 where a user runs out of items."""
    s = np.where(observed > 0, -np.inf, scores.astype(np.float64))
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(s, order, axis=1)
    return np.where(np.isneginf(picked), -1, order)
