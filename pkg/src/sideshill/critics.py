"""Conditional critics (BCE discriminator, WGAN-GP projection critic, spectrally
normalised cosine-mix critic) and the adversarial training round."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset, TemplateSet, cap_row
from .generator import Generator, TrainingDivergedError

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
VARIANTS = ("bce", "wgan_gp", "wgan_sn")


class PowerIterationState:
    """Persistent left singular vector estimate for one weight matrix."""

    def __init__(self, n_rows, generator=None):
        u = torch.randn(n_rows, generator=generator)
        self.u = u / u.norm().clamp_min(1e-12)


def spectral_normalize(weight, power_iters=1, state=None):
    """Return ``weight / sigma_hat`` with ``sigma_hat`` from power iteration.

    ``state`` carries the left vector between calls and is updated in place.
    The iteration itself is not differentiated; ``sigma_hat = u^T W v`` is.
    """
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    w2 = weight.reshape(weight.shape[0], -1)
    if state is None:
        state = PowerIterationState(w2.shape[0])
    with torch.no_grad():
        if not torch.any(w2 != 0):
            return weight
        u = state.u.to(w2.dtype)
        for _ in range(power_iters):
            v = F.normalize(w2.t() @ u, dim=0, eps=1e-12)
            u = F.normalize(w2 @ v, dim=0, eps=1e-12)
        state.u = u
    sigma = u @ w2 @ v
    return weight / sigma


class SNLinear(nn.Linear):
    """Linear layer whose weight is spectrally normalised on every forward."""

    def __init__(self, in_features, out_features, bias=True, train_iters=1, eval_iters=50):
        super().__init__(in_features, out_features, bias=bias)
        self.train_iters = train_iters
        self.eval_iters = eval_iters
        self.sn_state = PowerIterationState(out_features)

    def normalized_weight(self):
        iters = self.train_iters if self.training else self.eval_iters
        return spectral_normalize(self.weight, iters, self.sn_state)

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


def _mlp(sizes, spectral=False, final_act=False):
    layers = []
    lin = SNLinear if spectral else nn.Linear
    for k in range(len(sizes) - 1):
        layers.append(lin(sizes[k], sizes[k + 1]))
        if k < len(sizes) - 2 or final_act:
            layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


def _cosine(a, b, eps=1e-12):
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    dot = (a * b).sum(-1)
    ok = (na > eps) & (nb > eps)
    return torch.where(ok, dot / (na * nb).clamp_min(eps), torch.zeros_like(dot))


class Critic(nn.Module):
    """Scores a (ratings, side features) pair.

    ``bce``: sigmoid MLP on ``[r; x]``.
    ``wgan_gp``: ``u(h(r)) + <h(r), V e(x)>``.
    ``wgan_sn``: ``(1 - w) g([h(r), e(x)]) + w s cos(h(r), e(x))`` with every
    linear layer spectrally normalised (``sn_form="projection"`` swaps in the
    GP-style head instead).
    """

    def __init__(self, n_items, feature_dim, variant="wgan_gp", hidden=128, embed_dim=128,
                 cond_dim=32, conditional=True, spectral=None, sn_form="cosine"):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown critic variant {variant!r}")
        self.variant = variant
        self.conditional = conditional and feature_dim > 0
        self.spectral = (variant == "wgan_sn") if spectral is None else spectral
        self.sn_form = sn_form
        sn = self.spectral
        lin = SNLinear if sn else nn.Linear
        if variant == "bce":
            in_dim = n_items + (feature_dim if self.conditional else 0)
            self.net = _mlp([in_dim, hidden, hidden, 1], spectral=sn)
            return
        self.h = _mlp([n_items, hidden, hidden, embed_dim], spectral=sn)
        if variant == "wgan_gp" or sn_form == "projection":
            self.u = lin(embed_dim, 1)
            if self.conditional:
                self.e = _mlp([feature_dim, hidden, cond_dim], spectral=sn)
                self.V = lin(cond_dim, embed_dim, bias=False)
        else:
            if self.conditional:
                self.e = _mlp([feature_dim, hidden, embed_dim], spectral=sn)
                self.g = lin(2 * embed_dim, 1, bias=False)
                self.w_logit = nn.Parameter(torch.tensor(0.0))
                self.s_raw = nn.Parameter(torch.tensor(math.log(math.expm1(1.0))))
            else:
                self.g = lin(embed_dim, 1, bias=False)

    @property
    def mix(self):
        return torch.sigmoid(self.w_logit)

    @property
    def scale(self):
        return F.softplus(self.s_raw)

    def forward(self, r, x=None):
        if self.variant == "bce":
            inp = torch.cat([r, x], -1) if self.conditional else r
            return torch.sigmoid(self.net(inp)).squeeze(-1)
        hr = self.h(r)
        if self.variant == "wgan_gp" or self.sn_form == "projection":
            score = self.u(hr).squeeze(-1)
            if self.conditional:
                proj = self.V(self.e(x))
                score = score + (hr * proj).sum(-1)
            return score
        if not self.conditional:
            return self.g(hr).squeeze(-1)
        ex = self.e(x)
        w = self.mix
        return (1 - w) * self.g(torch.cat([hr, ex], -1)).squeeze(-1) + w * self.scale * _cosine(hr, ex)


def critic_score(r, x, critic: Critic):
    return critic(r, x)


def gradient_penalty(critic, r_real, r_fake, x, lam=10.0, generator=None):
    """``lam * mean((||grad_r D(r_hat, x)||_2 - 1)^2)`` at ``r_hat = e r + (1 - e) r_fake``.

    One interpolation weight per row; ``x`` is held fixed.  The graph is kept so
    the penalty can be backpropagated into the critic parameters.
    """
    eps = torch.rand(r_real.shape[0], 1, generator=generator, dtype=r_real.dtype)
    r_hat = (eps * r_real + (1 - eps) * r_fake).detach().requires_grad_(True)
    scores = critic(r_hat, x)
    if not scores.requires_grad:
        grads = torch.zeros_like(r_hat)
    else:
        (grads,) = torch.autograd.grad(scores.sum(), r_hat, create_graph=True, allow_unused=True)
        if grads is None:
            grads = torch.zeros_like(r_hat)
    norms = grads.norm(2, dim=-1)
    return lam * ((norms - 1.0) ** 2).mean()


def wasserstein_critic_loss(d_real, d_fake):
    return d_fake.mean() - d_real.mean()


def bce_discriminator_loss(d_real, d_fake, eps=1e-7):
    d_real = d_real.clamp(eps, 1 - eps)
    d_fake = d_fake.clamp(eps, 1 - eps)
    return (-torch.log(d_real) - torch.log(1 - d_fake)).mean()


def generator_adversarial_loss(variant, d_fake, eps=1e-7):
    if variant == "bce":
        return -torch.log(d_fake.clamp(eps, 1 - eps)).mean()
    return -d_fake.mean()


# Table-1 style learning rates per critic variant.
DEFAULT_RATES = {
    "bce": {"critic_lr": 1e-2, "gen_adv_lr": 1e-2, "betas": (0.9, 0.999)},
    "wgan_gp": {"critic_lr": 1e-4, "gen_adv_lr": 1e-4, "betas": (0.5, 0.9)},
    "wgan_sn": {"critic_lr": 1e-5, "gen_adv_lr": 1e-4, "betas": (0.5, 0.9)},
}


@dataclass
class AdversarialConfig:
    variant: str = "wgan_gp"
    critic_lr: float | None = None
    gen_adv_lr: float | None = None
    betas: tuple | None = None
    gp_lambda: float = 10.0
    batch_size: int = 64
    cap_real: int | None = 36
    critic_steps: int = 100
    generator_steps: int = 3
    feature_source: str = "template"

    def resolved(self):
        rates = DEFAULT_RATES[self.variant]
        return (self.critic_lr if self.critic_lr is not None else rates["critic_lr"],
                self.gen_adv_lr if self.gen_adv_lr is not None else rates["gen_adv_lr"],
                tuple(self.betas) if self.betas is not None else rates["betas"])


@dataclass
class AdversarialState:
    """Optimisers and the side-feature pool that persist across rounds."""

    critic_opt: torch.optim.Optimizer
    gen_opt: torch.optim.Optimizer
    feature_pool: np.ndarray
    rng: np.random.Generator
    torch_gen: torch.Generator
    critic_losses: list = field(default_factory=list)
    generator_losses: list = field(default_factory=list)
    real_rows: np.ndarray | None = None


def make_adversarial_state(gen: Generator, critic: Critic, config: AdversarialConfig,
                           feature_pool_users, seed=0) -> AdversarialState:
    c_lr, g_lr, betas = config.resolved()
    return AdversarialState(
        torch.optim.Adam(critic.parameters(), lr=c_lr, betas=betas),
        torch.optim.Adam(gen.parameters(), lr=g_lr, betas=betas),
        np.asarray(feature_pool_users),
        np.random.default_rng(seed),
        torch.Generator().manual_seed(seed),
    )


def _check(loss, what):
    value = float(loss.detach()) if torch.is_tensor(loss) else float(loss)
    if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise TrainingDivergedError(f"{what} loss diverged ({value:.4g})")


def capped_real_rows(R: np.ndarray, cap: int | None, templates: TemplateSet, seed: int = 0) -> np.ndarray:
    """Real profiles capped once to ``cap`` ratings, template users given their template rows.

    Capping is fixed rather than redrawn each epoch. Otherwise the 50 fixed
    template patterns are the only recurring item sets, and the critic can
    separate fakes by which items are rated instead of by rating values.
    """
    R = np.asarray(R, dtype=np.float32)
    if cap is None:
        out = R.copy()
    else:
        rng = np.random.default_rng(seed)
        out = np.stack([cap_row(r, cap, rng) for r in R])
    out[templates.users] = templates.rows
    return out


def critic_epoch(gen: Generator, critic: Critic, R: np.ndarray, X: np.ndarray,
                 templates: TemplateSet, config: AdversarialConfig, state: AdversarialState,
                 real_users=None) -> float:
    """One sweep over the real profiles, updating only the critic.

    By default the real side is the template users' own capped rows, so real
    and fake profiles share their rated items. With unrelated real rows the
    transport direction at a fake's rated items points toward zero, which the
    generator can only approach by lowering every rating.
    """
    rng = state.rng
    if state.real_rows is None:
        state.real_rows = capped_real_rows(R, config.cap_real, templates, int(rng.integers(1 << 30)))
    real_users = templates.users if real_users is None else np.asarray(real_users)
    order = rng.permutation(real_users)
    t_rows = torch.as_tensor(templates.rows, dtype=torch.float32)
    t_users = torch.as_tensor(templates.users)
    n_t = len(templates)
    critic.train()
    gen.eval()
    losses = []
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        r_real = torch.as_tensor(state.real_rows[idx])
        x = torch.as_tensor(X[idx], dtype=torch.float32)
        pick = torch.as_tensor((start + np.arange(len(idx))) % n_t)
        x_fake = torch.as_tensor(X[templates.users[pick.numpy()]], dtype=torch.float32) \
            if config.feature_source == "template" else x
        with torch.no_grad():
            r_fake = gen.fake_ratings(t_rows[pick], x_fake, t_users[pick])
        d_real = critic(r_real, x)
        d_fake = critic(r_fake, x_fake)
        if config.variant == "bce":
            loss = bce_discriminator_loss(d_real, d_fake)
        else:
            loss = wasserstein_critic_loss(d_real, d_fake)
            if config.variant == "wgan_gp":
                loss = loss + gradient_penalty(critic, r_real, r_fake, x, config.gp_lambda,
                                               state.torch_gen)
        _check(loss, "critic")
        state.critic_opt.zero_grad()
        loss.backward()
        state.critic_opt.step()
        losses.append(loss.item())
    mean = float(np.mean(losses)) if losses else 0.0
    state.critic_losses.append(mean)
    return mean


def generator_adversarial_epoch(gen: Generator, critic: Critic, X: np.ndarray,
                                templates: TemplateSet, config: AdversarialConfig,
                                state: AdversarialState) -> float:
    """Update the generator against the critic using side features from the pool."""
    pool = state.rng.permutation(state.feature_pool)
    n_t = len(templates)
    t_rows = torch.as_tensor(templates.rows, dtype=torch.float32)
    t_users = torch.as_tensor(templates.users)
    gen.train()
    critic.eval()
    losses = []
    for start in range(0, max(len(pool), 1), n_t):
        chunk = pool[start:start + n_t]
        if len(chunk) < n_t:
            chunk = np.concatenate([chunk, state.rng.choice(state.feature_pool, n_t - len(chunk))])
        if config.feature_source == "template":
            chunk = templates.users
        x = torch.as_tensor(X[chunk], dtype=torch.float32)
        noise = torch.randn(n_t, gen.enc_mu.out_features, generator=state.torch_gen)
        fake = gen.fake_ratings(t_rows, x, t_users, noise=noise)
        loss = generator_adversarial_loss(config.variant, critic(fake, x))
        _check(loss, "generator")
        state.gen_opt.zero_grad()
        loss.backward()
        state.gen_opt.step()
        losses.append(loss.item())
    critic.train()
    mean = float(np.mean(losses)) if losses else 0.0
    state.generator_losses.append(mean)
    return mean


def adversarial_round(gen: Generator, critic: Critic, dataset: Dataset, templates: TemplateSet,
                      config: AdversarialConfig, state: AdversarialState, real_users=None):
    """Alternate critic and generator sweeps (``critic_steps`` : ``generator_steps``)."""
    R = dataset.ratings.toarray()
    X = dataset.user_features.values
    c_loss = g_loss = float("nan")
    for _ in range(config.critic_steps):
        c_loss = critic_epoch(gen, critic, R, X, templates, config, state, real_users)
    for _ in range(config.generator_steps):
        g_loss = generator_adversarial_epoch(gen, critic, X, templates, config, state)
    log.debug("adversarial round: critic %.4f generator %.4f", c_loss, g_loss)
    return c_loss, g_loss
