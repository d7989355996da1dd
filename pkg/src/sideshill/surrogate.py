"""Differentiable surrogate recommender and the promotion attack objective.

The surrogate mirrors the side-feature-aware victim: a user encoder over rating
rows, an item encoder over rating columns and a feedforward scorer on
``[z_u; z_i; x_u; x_i]``.  The attack copies the fitted weights into a
functional inner model, takes one or more gradient steps on the poisoned data
while keeping the dependence on the fake ratings, and backpropagates the
push loss through those steps into the generator.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .data import Dataset, TemplateSet
from .generator import Generator, TrainingDivergedError

log = logging.getLogger(__name__)


class DetachedGraphError(RuntimeError):
    """The attack loss does not reach the generator parameters."""


class Surrogate(nn.Module):
    """User encoder over rows, item encoder over columns, MLP scorer.

    ``item_encoder="aggregate"`` (default) reads a column through its raters:
    the encoder input is the rating-weighted mean of the raters' row
    embeddings, so the first-layer weight attached to each user is a function
    of that user's row rather than a free parameter. A fake profile's ratings
    on other items therefore shape how the target's column is encoded, just
    as retraining would. ``"column"`` is the plain dense encoder with one free
    weight per user, whose weights for fake rows stay at their offline fit.
    """

    def __init__(self, n_users, n_items, user_dim, item_dim, hidden=128, latent=64, scorer_hidden=64,
                 item_encoder="aggregate"):
        super().__init__()
        if item_encoder not in ("aggregate", "column"):
            raise ValueError(f"unknown item encoder {item_encoder!r}")
        self.item_encoder = item_encoder
        self.user_enc = nn.Sequential(nn.Linear(n_items, hidden), nn.Tanh(), nn.Linear(hidden, latent))
        item_in = latent if item_encoder == "aggregate" else n_users
        self.item_enc = nn.Sequential(nn.Linear(item_in, hidden), nn.Tanh(), nn.Linear(hidden, latent))
        # first scorer layer acting on [z_u; z_i; x_u; x_i], split by side so that
        # all-pairs scoring is an outer sum rather than a users*items*features tensor
        self.score_user = nn.Linear(latent + user_dim, scorer_hidden)
        self.score_item = nn.Linear(latent + item_dim, scorer_hidden, bias=False)
        self.score_out = nn.Linear(scorer_hidden, 1)
        with torch.no_grad():
            self.score_out.bias.fill_(3.5)

    def embed(self, R, Xu, Xi):
        zu = self.user_enc(R / 5.0)
        if self.item_encoder == "aggregate":
            counts = (R > 0).sum(0).clamp(min=1).unsqueeze(1).to(R.dtype)
            zi = self.item_enc((R.t() / 5.0) @ zu / counts)
        else:
            zi = self.item_enc(R.t() / 5.0)
        return self.score_user(torch.cat([zu, Xu], -1)), self.score_item(torch.cat([zi, Xi], -1))

    def score_pairs(self, a, b, users, items):
        return self.score_out(torch.relu(a[users] + b[items])).squeeze(-1)

    def score_matrix(self, a, b, users=None):
        a = a if users is None else a[users]
        return self.score_out(torch.relu(a.unsqueeze(1) + b.unsqueeze(0))).squeeze(-1)

    def forward(self, R, Xu, Xi, users=None, items=None, score_users=None, objective=False):
        """Scores at ``(users, items)`` pairs, or the full matrix for ``score_users``.

        With ``objective=True`` returns the training loss at the pairs instead.
        """
        a, b = self.embed(R, Xu, Xi)
        if objective:
            return ((self.score_pairs(a, b, users, items) - R[users, items]) ** 2).mean()
        if users is not None:
            return self.score_pairs(a, b, users, items)
        return self.score_matrix(a, b, score_users)


class AttentionSurrogate(Surrogate):
    """Same layout as the attention-autoencoder victim, with its feedforward head.

    Both encoders are autoencoders whose reconstruction error is part of the
    training objective, so an inner gradient step moves the item encoder's
    weights for the fake users the way retraining the victim would.
    """

    def __init__(self, n_users, n_items, user_dim, item_dim, hidden=128, latent=64, scorer_hidden=64):
        nn.Module.__init__(self)
        from .victims import AttentionAE, FeedForwardHead

        self.item_encoder = "attention"
        self.user_ae = AttentionAE(n_items, user_dim, hidden, latent)
        self.item_ae = AttentionAE(n_users, item_dim, hidden, latent)
        self.head = FeedForwardHead(latent + user_dim, latent + item_dim, scorer_hidden)

    def score_pairs(self, a, b, users, items):
        return self.head.out(torch.relu(a[users] + b[items])).squeeze(-1)

    def score_matrix(self, a, b, users=None):
        a = a if users is None else a[users]
        return self.head.out(torch.relu(a.unsqueeze(1) + b.unsqueeze(0))).squeeze(-1)

    def _latents(self, R, Xu, Xi):
        zu = self.user_ae.embed(R, Xu if Xu.shape[1] else None)
        zi = self.item_ae.embed(R.t(), Xi if Xi.shape[1] else None)
        return zu, zi

    def _side(self, zu, zi, Xu, Xi):
        return (self.head.user_part(torch.cat([zu, Xu], -1)),
                self.head.item_part(torch.cat([zi, Xi], -1)))

    def embed(self, R, Xu, Xi):
        return self._side(*self._latents(R, Xu, Xi), Xu, Xi)

    def forward(self, R, Xu, Xi, users=None, items=None, score_users=None, objective=False):
        zu, zi = self._latents(R, Xu, Xi)
        a, b = self._side(zu, zi, Xu, Xi)
        if not objective:
            if users is not None:
                return self.score_pairs(a, b, users, items)
            return self.score_matrix(a, b, score_users)
        obs = R[users, items]
        head = ((self.score_pairs(a, b, users, items) - obs) ** 2).mean()
        rec_u = ((self.user_ae.decode(zu)[users, items] - obs) ** 2).mean()
        rec_i = ((self.item_ae.decode(zi)[items, users] - obs) ** 2).mean()
        return head + rec_u + rec_i


def masked_mse(model, R, Xu, Xi, users, items, params=None):
    """Training loss of the surrogate over the observed entries ``(users, items)``."""
    if params is None:
        return model(R, Xu, Xi, users, items, objective=True)
    return functional_call(model, params, (R, Xu, Xi, users, items), {"objective": True})


@dataclass
class SurrogateFit:
    model: Surrogate
    loss: float
    initial_loss: float
    seconds: float


def _tensors(dataset: Dataset):
    R = torch.as_tensor(dataset.ratings.toarray(), dtype=torch.float32)
    Xu = torch.tensor(dataset.user_features.values, dtype=torch.float32)
    Xi = torch.tensor(dataset.item_features.values, dtype=torch.float32)
    return R, Xu, Xi


def build_surrogate(n_users, n_items, user_dim, item_dim, item_encoder="aggregate", **arch) -> Surrogate:
    """``item_encoder`` is ``aggregate``, ``column`` or ``attention`` (autoencoder layout)."""
    if item_encoder == "attention":
        return AttentionSurrogate(n_users, n_items, user_dim, item_dim, **arch)
    return Surrogate(n_users, n_items, user_dim, item_dim, item_encoder=item_encoder, **arch)


def fit_surrogate_offline(dataset: Dataset, epochs: int = 100, lr: float = 1e-2, seed: int = 0,
                          model: Surrogate | None = None, **arch) -> SurrogateFit:
    """Fit (or keep fitting) the surrogate on the observed entries of ``dataset``."""
    R, Xu, Xi = _tensors(dataset)
    return fit_surrogate_tensors(R, Xu, Xi, epochs, lr, seed, model, **arch)


def fit_surrogate_tensors(R, Xu, Xi, epochs=100, lr=1e-2, seed=0, model=None, **arch) -> SurrogateFit:
    start = time.perf_counter()
    torch.manual_seed(seed)
    if model is None:
        model = build_surrogate(R.shape[0], R.shape[1], Xu.shape[1], Xi.shape[1], **arch)
    users, items = torch.nonzero(R > 0, as_tuple=True)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    with torch.no_grad():
        initial = masked_mse(model, R, Xu, Xi, users, items).item()
    loss = torch.tensor(initial)
    for epoch in range(epochs):
        loss = masked_mse(model, R, Xu, Xi, users, items)
        if not torch.isfinite(loss) or loss.item() > 1e6:
            raise TrainingDivergedError(f"surrogate loss diverged at epoch {epoch}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        final = masked_mse(model, R, Xu, Xi, users, items).item()
    return SurrogateFit(model, final, initial, time.perf_counter() - start)


def push_loss(scores, target: int, users=None):
    """``-sum_u log softmax(scores[u])[target]`` over the given (eligible) rows."""
    if users is not None:
        scores = scores[users]
    if scores.shape[0] == 0:
        raise ValueError("no eligible users: the promotion objective is undefined")
    return -torch.log_softmax(scores, dim=-1)[:, target].sum()


def eligible_users(R: np.ndarray, target: int, n_real: int | None = None) -> np.ndarray:
    """Real users that have not rated the target."""
    n_real = R.shape[0] if n_real is None else n_real
    return np.flatnonzero(R[:n_real, target] == 0)


@dataclass
class AttackConfig:
    target: int
    unroll_steps: int = 1
    inner_lr: float = 1e-2
    mode: str = "persistent"
    refit_epochs: int = 10
    refit_lr: float = 1e-2
    push_users: int | None = 256
    lr: float = 5e-5

    def __post_init__(self):
        if self.mode not in ("persistent", "full_retrain"):
            raise ValueError(f"unknown surrogate mode {self.mode!r}")
        if not 1 <= self.unroll_steps <= 5:
            raise ValueError("unroll_steps must be in [1, 5]")


@dataclass
class AttackState:
    """Objects reused across attack steps: the fitted surrogate and the optimiser."""

    surrogate: Surrogate
    optimizer: torch.optim.Optimizer
    eligible: np.ndarray
    rng: np.random.Generator
    torch_gen: torch.Generator
    losses: list = field(default_factory=list)
    refit_seconds: float = 0.0


def _fake_block(gen, templates, feature_rows, target, noise):
    rows = torch.as_tensor(templates.rows, dtype=torch.float32)
    x = torch.as_tensor(feature_rows, dtype=torch.float32)
    return gen.fake_ratings(rows, x, torch.as_tensor(templates.users), target=target, noise=noise)


def unrolled_scores(surrogate: Surrogate, R_bar, Xu_bar, Xi, users, items, score_users,
                    unroll_steps=1, inner_lr=1e-2):
    """Scores of ``score_users`` after ``unroll_steps`` differentiable GD steps."""
    params = {k: v.detach().clone().requires_grad_(True) for k, v in surrogate.named_parameters()}
    for _ in range(unroll_steps):
        inner = masked_mse(surrogate, R_bar, Xu_bar, Xi, users, items, params)
        grads = torch.autograd.grad(inner, list(params.values()), create_graph=True)
        params = {k: p - inner_lr * g for (k, p), g in zip(params.items(), grads)}
    return functional_call(surrogate, params, (R_bar, Xu_bar, Xi), {"score_users": score_users})


def make_attack_state(gen: Generator, surrogate: Surrogate, R_real: np.ndarray, config: AttackConfig,
                      seed=0) -> AttackState:
    eligible = eligible_users(R_real, config.target)
    opt = torch.optim.Adam(gen.parameters(), lr=config.lr)
    return AttackState(surrogate, opt, eligible, np.random.default_rng(seed),
                       torch.Generator().manual_seed(seed))


def unrolled_attack_step(gen: Generator, dataset: Dataset, templates: TemplateSet,
                         feature_pool: np.ndarray, config: AttackConfig, state: AttackState,
                         update=True, aligned: bool = False):
    """One attack update of the generator through the unrolled surrogate.

    Returns the push-loss value.  ``full_retrain`` first refits the surrogate on
    the current poisoned data (warm-started, ``refit_epochs`` epochs).
    """
    R, Xu, Xi = _tensors(dataset)
    n_real = R.shape[0]
    rng = state.rng
    if not feature_pool.shape[1]:
        feats = np.zeros((len(templates), 0), dtype=np.float32)
    elif aligned:
        feats = np.asarray(feature_pool, dtype=np.float32)
    else:
        feats = feature_pool[rng.integers(0, len(feature_pool), size=len(templates))]
    noise = torch.randn(len(templates), gen.enc_mu.out_features, generator=state.torch_gen)
    gen.train()
    fake = _fake_block(gen, templates, feats, config.target, noise)
    R_bar = torch.cat([R, fake], 0)
    Xu_bar = torch.cat([Xu, torch.as_tensor(feats, dtype=torch.float32)], 0)
    users, items = torch.nonzero(R_bar.detach() > 0, as_tuple=True)

    if config.mode == "full_retrain":
        fit = fit_surrogate_tensors(R_bar.detach(), Xu_bar, Xi, config.refit_epochs,
                                    config.refit_lr, int(rng.integers(1 << 30)), state.surrogate)
        state.refit_seconds += fit.seconds

    eligible = state.eligible
    if config.push_users is not None and len(eligible) > config.push_users:
        eligible = np.sort(rng.choice(eligible, config.push_users, replace=False))
    scores = unrolled_scores(state.surrogate, R_bar, Xu_bar, Xi, users, items,
                             torch.as_tensor(eligible), config.unroll_steps, config.inner_lr)
    loss = push_loss(scores, config.target)
    if update:
        state.optimizer.zero_grad()
        loss.backward()
        grad_norm = sum(float(p.grad.norm()) ** 2 for p in gen.parameters() if p.grad is not None) ** 0.5
        if grad_norm == 0.0:
            raise DetachedGraphError("push loss has zero gradient w.r.t. the generator")
        state.optimizer.step()
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError("attack loss is not finite")
    state.losses.append(value)
    return value


# --------------------------------------------------------------------------- WRMF

@dataclass
class WrmfFactors:
    user: np.ndarray
    item: np.ndarray
    weight: float
    reg: float
    objective: list = field(default_factory=list)

    @property
    def rank(self):
        return self.user.shape[1]

    def predict(self):
        return self.user @ self.item.T


def _confidence(R, weight):
    return 1.0 + weight * (R > 0)


def wrmf_objective(R, U, V, weight, reg):
    C = _confidence(R, weight)
    return float((C * (R - U @ V.T) ** 2).sum() + reg * ((U ** 2).sum() + (V ** 2).sum()))


def _solve_side(R, C, other, reg):
    """Rows of the factor minimising ``sum_j C_ij (R_ij - f_i . o_j)^2 + reg |f_i|^2``."""
    k = other.shape[1]
    gram = other.T @ other
    out = np.empty((R.shape[0], k))
    eye = np.eye(k)
    jitter_used = False
    for i in range(R.shape[0]):
        obs = np.flatnonzero(C[i] != 1.0)
        o = other[obs]
        A = gram + (o.T * (C[i, obs] - 1.0)) @ o + reg * eye
        b = other.T @ R[i] + (o.T * (C[i, obs] - 1.0)) @ R[i, obs]
        try:
            out[i] = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            jitter_used = True
            out[i] = np.linalg.solve(A + 1e-6 * eye, b)
    if jitter_used:
        warnings.warn("singular ALS normal equations; added 1e-6 ridge jitter")
    return out


def fit_wrmf(R, rank=16, weight=10.0, reg=0.1, sweeps=10, seed=0) -> WrmfFactors:
    """Alternating least squares on confidence-weighted squared error.

    Observed entries get confidence ``1 + weight``; unobserved entries are fitted
    towards 0 with confidence 1.
    """
    R = np.asarray(R, dtype=np.float64)
    if rank > min(R.shape):
        raise ValueError("rank must not exceed min(n_users, n_items)")
    rng = np.random.default_rng(seed)
    U = rng.normal(scale=0.1, size=(R.shape[0], rank))
    V = rng.normal(scale=0.1, size=(R.shape[1], rank))
    C = _confidence(R, weight)
    trace = []
    for _ in range(sweeps):
        U = _solve_side(R, C, V, reg)
        V = _solve_side(R.T, C.T, U, reg)
        trace.append(wrmf_objective(R, U, V, weight, reg))
    return WrmfFactors(U, V, weight, reg, trace)


class WrmfSurrogate:
    """Fixed WRMF fit on poisoned data plus a differentiable last ALS sweep.

    The fake users' factors and then all item factors are re-solved in torch so
    the resulting real-user scores depend on the fake ratings.
    """

    def __init__(self, factors: WrmfFactors, R_real: np.ndarray):
        self.factors = factors
        self.weight = factors.weight
        self.reg = factors.reg
        self.n_real = R_real.shape[0]
        U = torch.as_tensor(factors.user[: self.n_real])
        V = torch.as_tensor(factors.item)
        R = torch.as_tensor(R_real, dtype=torch.float64)
        C = 1.0 + self.weight * (R > 0).to(torch.float64)
        k = U.shape[1]
        self.U_real = U
        self.V = V
        # real-user contribution to every item's normal equations
        self.A_real = torch.einsum("ui,uk,ul->ikl", C, U, U)
        self.b_real = torch.einsum("ui,ui,uk->ik", C, R, U)
        self.eye = torch.eye(k, dtype=torch.float64)

    def scores(self, fake):
        fake = fake.to(torch.float64)
        w = self.weight
        Cf = 1.0 + w * (fake > 0).to(fake.dtype)
        V = self.V
        A_u = torch.einsum("fi,ik,il->fkl", Cf, V, V) + self.reg * self.eye
        b_u = torch.einsum("fi,fi,ik->fk", Cf, fake, V)
        Uf = torch.linalg.solve(A_u, b_u)
        A_i = self.A_real + torch.einsum("fi,fk,fl->ikl", Cf, Uf, Uf) + self.reg * self.eye
        b_i = self.b_real + torch.einsum("fi,fi,fk->ik", Cf, fake, Uf)
        V_new = torch.linalg.solve(A_i, b_i)
        return self.U_real @ V_new.T


def wrmf_attack_step(gen: Generator, surrogate: WrmfSurrogate, templates: TemplateSet,
                     config: AttackConfig, state: AttackState, update=True) -> float:
    noise = torch.randn(len(templates), gen.enc_mu.out_features, generator=state.torch_gen)
    gen.train()
    fake = _fake_block(gen, templates, np.zeros((len(templates), gen.feature_dim), np.float32),
                       config.target, noise)
    scores = surrogate.scores(fake)
    loss = push_loss(scores, config.target, torch.as_tensor(state.eligible))
    if update:
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
    state.losses.append(loss.item())
    return loss.item()
