"""Conditional fake-rating generator.

A (variational) autoencoder over rating rows whose last decoder layers are
modulated by the user's side features through a gated residual FiLM, followed
by a per-user cutpoint discretiser with a straight-through gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset, ProfileBatch, RatingMatrix, SideFeatureTable, TemplateSet

log = logging.getLogger(__name__)

GAMMA_SCALE = 0.3
BETA_SCALE = 0.05
LOGVAR_CLAMP = 10.0
RATING_LO, RATING_HI = 0.5, 5.5
MIN_GAP = 1e-3


class TrainingDivergedError(RuntimeError):
    pass


def film_modulate(h, c, w_gamma, b_gamma, w_beta, b_beta, alpha):
    """``h + alpha * (gamma(c) * h + beta(c))`` with tanh-bounded gamma/beta."""
    if h.shape[-1] != w_gamma.shape[-1] or c.shape[-1] != w_gamma.shape[0]:
        raise ValueError(f"FiLM dims mismatch: h {tuple(h.shape)}, c {tuple(c.shape)}, "
                         f"W {tuple(w_gamma.shape)}")
    gamma = 1.0 + GAMMA_SCALE * torch.tanh(c @ w_gamma + b_gamma)
    beta = BETA_SCALE * torch.tanh(c @ w_beta + b_beta)
    return h + alpha * (gamma * h + beta)


class FiLMLayer(nn.Module):
    def __init__(self, cond_dim, width):
        super().__init__()
        self.w_gamma = nn.Parameter(torch.empty(cond_dim, width))
        self.b_gamma = nn.Parameter(torch.zeros(width))
        self.w_beta = nn.Parameter(torch.empty(cond_dim, width))
        self.b_beta = nn.Parameter(torch.zeros(width))
        bound = 1.0 / math.sqrt(cond_dim)
        nn.init.uniform_(self.w_gamma, -bound, bound)
        nn.init.uniform_(self.w_beta, -bound, bound)

    def forward(self, h, c, alpha):
        return film_modulate(h, c, self.w_gamma, self.b_gamma, self.w_beta, self.b_beta, alpha)


class FiLMNetwork(nn.Module):
    """Side-feature projection plus one FiLM layer per modulated decoder layer."""

    def __init__(self, feature_dim, widths, cond_dim=32, alpha_init=0.1):
        super().__init__()
        self.cond_proj = nn.Sequential(
            nn.Linear(feature_dim, 64), nn.ReLU(), nn.Linear(64, cond_dim))
        self.layers = nn.ModuleList(FiLMLayer(cond_dim, w) for w in widths)
        # sigmoid parameterisation keeps the gate strictly inside (0, 1)
        self.alpha_logit = nn.Parameter(torch.tensor(math.log(alpha_init / (1 - alpha_init))))

    @property
    def alpha(self):
        return torch.sigmoid(self.alpha_logit)

    def condition(self, x):
        return self.cond_proj(x)


class Cutpoints(nn.Module):
    """Per-user ordered cutpoints ``c1 < c2 < c3 < c4`` as base + softplus gaps."""

    def __init__(self, n_users, lo=RATING_LO, hi=RATING_HI):
        super().__init__()
        width = (hi - lo) / 5.0
        self.base = nn.Parameter(torch.full((n_users, 1), lo + width))
        gap = math.log(math.expm1(width - MIN_GAP))
        self.raw_gaps = nn.Parameter(torch.full((n_users, 3), gap))

    def forward(self, users):
        base = self.base[users]
        gaps = F.softplus(self.raw_gaps[users]) + MIN_GAP
        return torch.cat([base, base + torch.cumsum(gaps, dim=-1)], dim=-1)


class _StraightThroughBins(torch.autograd.Function):
    @staticmethod
    def forward(ctx, values, cutpoints, lo, hi):
        ctx.save_for_backward(values)
        ctx.bounds = (lo, hi)
        return 1.0 + (values.unsqueeze(-1) > cutpoints.unsqueeze(-2)).sum(-1).to(values.dtype)

    @staticmethod
    def backward(ctx, grad):
        (values,) = ctx.saved_tensors
        lo, hi = ctx.bounds
        inside = ((values >= lo) & (values <= hi)).to(grad.dtype)
        return grad * inside, None, None, None


def discretize(values, cutpoints, template_mask, lo=RATING_LO, hi=RATING_HI):
    """Bin continuous outputs into 1..5 and zero everything off the template.

    ``cutpoints`` is ``(batch, 4)``.  Backward treats the binning as the identity
    between ``lo`` and ``hi`` (slope 0 outside).
    """
    binned = _StraightThroughBins.apply(values, cutpoints, lo, hi)
    return binned * template_mask.to(binned.dtype)


def soft_bin_log_probs(values, cutpoints, temperature=1.0):
    """Ordinal log-probabilities of the 5 rating bins induced by the cutpoints."""
    cdf = torch.sigmoid((cutpoints.unsqueeze(-2) - values.unsqueeze(-1)) / temperature)
    zeros = torch.zeros_like(cdf[..., :1])
    ones = torch.ones_like(cdf[..., :1])
    probs = torch.cat([cdf, ones], -1) - torch.cat([zeros, cdf], -1)
    return torch.log(probs.clamp_min(1e-8))


def gaussian_kl(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    return 0.5 * torch.sum(mu.pow(2) + logvar.exp() - 1.0 - logvar, dim=-1)


class Generator(nn.Module):
    """Rating autoencoder (``vae`` or deterministic ``ae_baseline``) with FiLM conditioning."""

    def __init__(self, n_items, n_users, feature_dim, variant="vae", latent_dim=64,
                 hidden=256, cond_dim=32, n_film=2, alpha_init=0.1):
        super().__init__()
        if variant not in ("vae", "ae_baseline"):
            raise ValueError(f"unknown generator variant {variant!r}")
        if n_film not in (0, 1, 2):
            raise ValueError("FiLM can modulate the last one or two decoder layers")
        self.variant = variant
        self.n_items = n_items
        self.feature_dim = feature_dim
        self.encoder = nn.Sequential(nn.Linear(n_items, hidden), nn.Tanh())
        self.enc_mu = nn.Linear(hidden, latent_dim)
        self.enc_logvar = nn.Linear(hidden, latent_dim) if variant == "vae" else None
        self.dec_hidden = nn.Linear(latent_dim, hidden)
        self.dec_out = nn.Linear(hidden, n_items)
        self.n_film = n_film if feature_dim > 0 else 0
        widths = [hidden, n_items][2 - self.n_film:]
        self.film = FiLMNetwork(feature_dim, widths, cond_dim, alpha_init) if self.n_film else None
        self.cutpoints = Cutpoints(n_users)

    @property
    def is_variational(self):
        return self.variant == "vae"

    def encode(self, rows):
        hid = self.encoder(rows / 5.0)
        mu = self.enc_mu(hid)
        if self.enc_logvar is None:
            return mu, None
        return mu, self.enc_logvar(hid).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)

    def decode(self, z, x):
        film = self.film
        c = film.condition(x) if film is not None else None
        mods = list(film.layers) if film is not None else []
        first = 2 - len(mods)
        h = self.dec_hidden(z)
        if first == 0:
            h = mods[0](h, c, film.alpha)
        h = torch.tanh(h)
        out = self.dec_out(h)
        if mods:
            out = mods[-1](out, c, film.alpha)
        return RATING_LO + (RATING_HI - RATING_LO) * torch.sigmoid(out)

    def forward(self, rows, x, noise=None):
        """Continuous per-item outputs plus posterior ``(mu, logvar)``.

        ``noise`` fixes the reparameterisation draw; ``None`` samples fresh noise
        for the VAE variant.  The AE baseline ignores it.
        """
        mu, logvar = self.encode(rows)
        if logvar is None:
            z = mu
        else:
            eps = torch.randn_like(mu) if noise is None else noise
            z = mu + torch.exp(0.5 * logvar) * eps
        values = self.decode(z, x)
        if not torch.isfinite(values).all():
            raise TrainingDivergedError("non-finite generator activations")
        return values, (mu, logvar)

    def fake_ratings(self, rows, x, users, target=None, noise=None):
        """Discrete masked fake rows (differentiable via straight-through)."""
        values, _ = self(rows, x, noise)
        mask = rows > 0
        fake = discretize(values, self.cutpoints(users), mask)
        if target is not None:
            forced = torch.zeros_like(fake)
            forced[:, target] = 1.0
            fake = fake * (1 - forced) + 5.0 * forced
        return fake


def vae_forward(gen: Generator, rows, x, noise=None):
    """Decode ``rows`` conditioned on ``x``; returns ``(values, (mu, sigma))``."""
    values, (mu, logvar) = gen(rows, x, noise)
    sigma = torch.zeros_like(mu) if logvar is None else torch.exp(0.5 * logvar)
    return values, (mu, sigma)


@dataclass
class PretrainResult:
    generator: Generator
    losses: list


def pretrain_loss(gen: Generator, rows, x, users, noise=None):
    """Per-user pretraining loss summed over observed entries, averaged over the batch."""
    observed = rows > 0
    values, (mu, logvar) = gen(rows, x, noise)
    cuts = gen.cutpoints(users)
    if gen.is_variational:
        logp = soft_bin_log_probs(values, cuts)
        labels = (rows.long() - 1).clamp_min(0)
        nll = -torch.gather(logp, -1, labels.unsqueeze(-1)).squeeze(-1)
        per_user = (nll * observed).sum(-1) + gaussian_kl(mu, logvar)
    else:
        fake = discretize(values, cuts, observed)
        per_user = ((fake - rows) ** 2 * observed).sum(-1)
    return per_user.mean()


def pretrain(gen: Generator, dataset: Dataset, templates: TemplateSet | None = None,
             epochs: int = 15, lr: float = 1e-2, batch_size: int = 64, seed: int = 0,
             users=None) -> PretrainResult:
    """Fit the generator to real users' rows (negative ELBO, or squared error for the AE)."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    g = torch.Generator().manual_seed(seed)
    R = torch.as_tensor(dataset.ratings.toarray(), dtype=torch.float32)
    X = torch.tensor(dataset.user_features.values, dtype=torch.float32)
    users = torch.arange(dataset.n_users) if users is None else torch.as_tensor(users)
    opt = torch.optim.Adam(gen.parameters(), lr=lr)
    losses = []
    gen.train()
    for epoch in range(epochs):
        order = users[torch.randperm(len(users), generator=g)]
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            noise = torch.randn(len(idx), gen.enc_mu.out_features, generator=g)
            loss = pretrain_loss(gen, R[idx], X[idx], idx, noise)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"pretraining loss is {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        log.debug("pretrain epoch %d loss %.4f", epoch, losses[-1])
    return PretrainResult(gen, losses)


def generate(gen: Generator, templates: TemplateSet, feature_pool: np.ndarray, target: int,
             seed: int = 0, budget: int | None = None, aligned: bool = False) -> ProfileBatch:
    """Decode every template conditioned on a real feature row.

    Rows are drawn at random from ``feature_pool`` unless ``aligned``, in which
    case row ``j`` of the pool conditions template ``j``.
    """
    rng = np.random.default_rng(seed)
    n = len(templates)
    feature_pool = np.asarray(feature_pool, dtype=np.float32)
    if feature_pool.ndim != 2 or feature_pool.shape[1] != gen.feature_dim:
        raise ValueError(f"feature pool must have {gen.feature_dim} columns")
    if aligned and len(feature_pool) != n:
        raise ValueError("aligned features need one row per template")
    if gen.feature_dim:
        feats = feature_pool.copy() if aligned else feature_pool[rng.integers(0, len(feature_pool), size=n)]
    else:
        feats = np.zeros((n, 0), dtype=np.float32)
    noise = torch.as_tensor(rng.standard_normal((n, gen.enc_mu.out_features)), dtype=torch.float32)
    rows = torch.as_tensor(templates.rows, dtype=torch.float32)
    with torch.no_grad():
        fake = gen.fake_ratings(rows, torch.as_tensor(feats), torch.as_tensor(templates.users),
                                target=target, noise=noise)
    ratings = RatingMatrix.from_dense(fake.numpy().astype(np.int8))
    return ProfileBatch(ratings, SideFeatureTable(feats), templates.users.copy(), target,
                        budget if budget is not None else templates.cap)
