"""Bayesian Flow Network decoder over coordinates (Gaussian) and atom types (categorical).

Coordinates use the accuracy schedule ``gamma(t) = 1 - sigma1**(2t)`` so that
``beta(t) = sigma1**(-2t) - 1``; atom types use ``beta'(t) = beta1 * t**2``.
All samplers take an explicit :class:`torch.Generator`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .egnn import Backbone, BackboneConfig
from .encoder import LatentCode


@dataclass(frozen=True)
class NoiseSchedule:
    sigma1: float = 0.001
    beta1: float = 1.0
    n_steps: int = 1000

    def __post_init__(self):
        if not 0.0 < self.sigma1 < 1.0:
            raise ValueError("sigma1 must lie in (0, 1)")
        if self.beta1 <= 0 or self.n_steps < 1:
            raise ValueError("beta1 must be positive and n_steps >= 1")

    # continuous
    def gamma(self, t):
        return 1.0 - self.sigma1 ** (2.0 * t)

    def beta(self, t):
        return self.sigma1 ** (-2.0 * t) - 1.0

    def alpha(self, i, n: int | None = None):
        """Accuracy of step ``i`` (1-based) out of ``n``: ``beta(i/n) - beta((i-1)/n)``."""
        n = n or self.n_steps
        return self.sigma1 ** (-2.0 * i / n) * (1.0 - self.sigma1 ** (2.0 / n))

    # discrete
    def beta_v(self, t):
        return self.beta1 * t**2

    def alpha_v(self, i, n: int | None = None):
        n = n or self.n_steps
        return self.beta1 * (2 * i - 1) / n**2


@dataclass
class BFNState:
    mu: torch.Tensor  # (..., N, 3)
    rho: float | torch.Tensor
    theta_v: torch.Tensor  # (..., N, K)

    @classmethod
    def prior(cls, shape_prefix, n_atoms: int, num_types: int, dtype=None) -> "BFNState":
        dtype = dtype or torch.get_default_dtype()
        mu = torch.zeros(*shape_prefix, n_atoms, 3, dtype=dtype)
        theta = torch.full((*shape_prefix, n_atoms, num_types), 1.0 / num_types, dtype=dtype)
        return cls(mu, 1.0, theta)


@dataclass
class NetworkOutput:
    x_hat: torch.Tensor
    v_logits: torch.Tensor


def _randn(shape, like: torch.Tensor, generator):
    return torch.randn(shape, generator=generator, dtype=like.dtype)


def sender_continuous(x: torch.Tensor, alpha, generator=None) -> torch.Tensor:
    """Draw ``y ~ N(x, alpha^-1 I)``."""
    alpha = torch.as_tensor(alpha, dtype=x.dtype)
    if (alpha <= 0).any():
        raise ValueError("accuracy alpha must be positive")
    return x + _randn(x.shape, x, generator) / torch.sqrt(alpha)


def sender_discrete(e_v: torch.Tensor, alpha, generator=None) -> torch.Tensor:
    """Draw ``y ~ N(alpha (K e - 1), alpha K I)`` for one-hot (or probability) rows ``e_v``."""
    alpha = torch.as_tensor(alpha, dtype=e_v.dtype)
    if (alpha <= 0).any():
        raise ValueError("accuracy alpha must be positive")
    if (e_v < 0).any() or not torch.allclose(e_v.sum(-1), torch.ones((), dtype=e_v.dtype)):
        raise ValueError("rows of e_v must lie on the probability simplex")
    k = e_v.shape[-1]
    mean = alpha * (k * e_v - 1.0)
    return mean + torch.sqrt(alpha * k) * _randn(e_v.shape, e_v, generator)


def bayes_update_continuous(mu, rho, y, alpha):
    rho_new = rho + alpha
    return (rho * mu + alpha * y) / rho_new, rho_new


def bayes_update_discrete(theta: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # computed in log space: exp(y) overflows for large accuracies
    logits = y + torch.log(theta)
    norm = torch.logsumexp(logits, dim=-1, keepdim=True)
    if torch.isinf(norm).any():
        raise ZeroDivisionError("Bayesian update has a zero normaliser")
    return torch.exp(logits - norm)


def flow_sample_continuous(x: torch.Tensor, t, schedule: NoiseSchedule, generator=None):
    """Sample ``mu ~ N(gamma x, gamma (1-gamma) I)`` and return ``(mu, rho)``."""
    t = torch.as_tensor(t, dtype=x.dtype)
    if (t < 0).any() or (t >= 1).any():
        raise ValueError("t must lie in [0, 1)")
    gamma = schedule.gamma(t)
    gamma_b = gamma.reshape(gamma.shape + (1,) * (x.dim() - gamma.dim()))
    mu = gamma_b * x + torch.sqrt(gamma_b * (1 - gamma_b)) * _randn(x.shape, x, generator)
    return mu, 1.0 / (1.0 - gamma)


def flow_sample_discrete(e_v: torch.Tensor, t, schedule: NoiseSchedule, generator=None) -> torch.Tensor:
    """Single Monte-Carlo draw of the categorical Bayesian flow: ``softmax(y)``."""
    t = torch.as_tensor(t, dtype=e_v.dtype)
    if (t < 0).any() or (t >= 1).any():
        raise ValueError("t must lie in [0, 1)")
    beta = schedule.beta_v(t)
    beta = beta.reshape(beta.shape + (1,) * (e_v.dim() - beta.dim()))
    k = e_v.shape[-1]
    y = beta * (k * e_v - 1.0) + torch.sqrt(beta * k) * _randn(e_v.shape, e_v, generator)
    return torch.softmax(y, dim=-1)


def loss_x_n(x: torch.Tensor, x_hat: torch.Tensor, alpha, mask=None) -> torch.Tensor:
    """``alpha/2 |x - x_hat|^2`` summed over atoms and axes (per leading batch entry)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    sq = ((x - x_hat) ** 2).sum(-1)
    if mask is not None:
        sq = sq * mask.to(sq.dtype)
    alpha = torch.as_tensor(alpha, dtype=x.dtype)
    return 0.5 * alpha * sq.sum(-1)


def _log_normal(y, mean, var):
    return -0.5 * (math.log(2 * math.pi) + torch.log(var) + (y - mean) ** 2 / var)


def discrete_kl_sample(y: torch.Tensor, e_v: torch.Tensor, p_out: torch.Tensor, alpha, mask=None) -> torch.Tensor:
    """``ln p_S(y) - ln p_R(y)`` for given sender draws ``y`` (per leading batch entry)."""
    k = e_v.shape[-1]
    alpha = torch.as_tensor(alpha, dtype=y.dtype)
    alpha = alpha.reshape(alpha.shape + (1,) * (y.dim() - alpha.dim()))
    var = alpha * k
    log_send = _log_normal(y, alpha * (k * e_v - 1.0), var).sum(-1)
    # component c of the receiver mixture has mean alpha (K e_c - 1)
    eye = torch.eye(k, dtype=y.dtype)
    means = alpha[..., None] * (k * eye - 1.0)  # (..., 1, K, K) row c = component mean
    comp = _log_normal(y[..., None, :], means, var[..., None]).sum(-1)  # (..., N, K)
    # clamp at the dtype's smallest normal; a float literal like 1e-300 rounds to 0 in float32
    log_p = torch.log(p_out.clamp_min(torch.finfo(p_out.dtype).tiny))
    log_recv = torch.logsumexp(log_p + comp, dim=-1)
    if torch.isinf(log_recv).any():
        raise FloatingPointError("receiver mixture log-density underflowed to -inf")
    diff = log_send - log_recv
    if mask is not None:
        diff = diff * mask.to(diff.dtype)
    return diff.sum(-1)


def loss_v_n(e_v: torch.Tensor, p_out: torch.Tensor, alpha, generator=None, mask=None) -> torch.Tensor:
    """Single-sample Monte-Carlo estimate of the discrete-time type loss."""
    y = sender_discrete(e_v, _expand_alpha(alpha, e_v), generator)
    return discrete_kl_sample(y, e_v, p_out, alpha, mask)


def _expand_alpha(alpha, like):
    alpha = torch.as_tensor(alpha, dtype=like.dtype)
    return alpha.reshape(alpha.shape + (1,) * (like.dim() - alpha.dim()))


class Decoder(nn.Module):
    """Output network: molecule beliefs are update nodes, latent nodes are condition nodes."""

    def __init__(self, num_types: int, latent_dim: int = 32, backbone: BackboneConfig | None = None):
        super().__init__()
        cfg = backbone or BackboneConfig()
        cfg = BackboneConfig(**{**cfg.__dict__, "time_conditioned": True})
        self.num_types = num_types
        self.type_embed = nn.Parameter(torch.randn(num_types, cfg.hidden) / math.sqrt(num_types))
        self.latent_embed = nn.Linear(latent_dim, cfg.hidden)
        self.backbone = Backbone(cfg)
        self.type_head = nn.Linear(cfg.hidden, num_types)
        # start as the identity denoiser, x_hat = mu; unbounded gates summed over
        # k neighbours otherwise move atoms by ~1 A per layer at initialisation
        for layer in self.backbone.layers:
            nn.init.zeros_(layer.gate[-1].weight)
            nn.init.zeros_(layer.gate[-1].bias)

    def forward(self, mu, theta_v, z: LatentCode, t, atom_mask=None) -> NetworkOutput:
        """``mu`` (B,N,3), ``theta_v`` (B,N,K), ``z`` with centred ``z_x``, ``t`` (B,)."""
        h_atoms = theta_v @ self.type_embed.to(theta_v.dtype)
        h_lat = self.latent_embed(z.z_h)
        x_hat, h_out, _ = self.backbone(mu, h_atoms, z.z_x, h_lat, mask_u=atom_mask, t=t)
        logits = self.type_head(h_out)
        if not (torch.isfinite(x_hat).all() and torch.isfinite(logits).all()):
            raise FloatingPointError("decoder produced non-finite output")
        return NetworkOutput(x_hat, logits)


def center_latent(z: LatentCode) -> tuple[LatentCode, torch.Tensor]:
    """Shift ``z_x`` to zero mean; returns the shifted code and the removed offset (B,1,3)."""
    offset = z.z_x.mean(dim=1, keepdim=True)
    return LatentCode(z.z_x - offset, z.z_h), offset


def output_distribution(decoder: Decoder, state: BFNState, z: LatentCode, t, atom_mask=None) -> NetworkOutput:
    b = state.mu.shape[0]
    t = torch.as_tensor(t, dtype=state.mu.dtype)
    if t.dim() == 0:
        t = t.expand(b)
    return decoder(state.mu, state.theta_v, z, t, atom_mask)


@torch.no_grad()
def decode(decoder: Decoder, z: LatentCode, n_atoms: int, schedule: NoiseSchedule, steps: int, generator=None, return_trajectory=False):
    """Parameter-space sampling loop conditioned on a batch of latent codes.

    Returns ``(coords (B,N,3), types (B,N))`` in the latent frame (the latent
    centroid offset is added back).
    """
    if n_atoms < 1:
        raise ValueError("need at least one atom")
    if steps < 1:
        raise ValueError("need at least one sampling step")
    zc, offset = center_latent(z)
    b = z.z_x.shape[0]
    k = decoder.num_types
    state = BFNState.prior((b,), n_atoms, k, dtype=z.z_x.dtype)
    traj = []
    for i in range(1, steps + 1):
        t = (i - 1) / steps
        out = output_distribution(decoder, state, zc, t)
        # beliefs advance to the end of the step, t_i = i / steps
        t_next = torch.tensor(i / steps, dtype=z.z_x.dtype)
        gamma = schedule.gamma(t_next)
        mu = gamma * out.x_hat + torch.sqrt(gamma * (1 - gamma)) * _randn(out.x_hat.shape, out.x_hat, generator)
        p = torch.softmax(out.v_logits, dim=-1)
        beta = schedule.beta_v(t_next)
        y = beta * (k * p - 1.0) + torch.sqrt(beta * k) * _randn(p.shape, p, generator)
        state = BFNState(mu, 1.0 / (1.0 - gamma), torch.softmax(y, dim=-1))
        if not (torch.isfinite(state.mu).all() and torch.isfinite(state.theta_v).all()):
            raise FloatingPointError(f"non-finite decoder state at step {i}")
        if return_trajectory:
            traj.append(out)
    final = output_distribution(decoder, state, zc, 1.0)
    coords = final.x_hat + offset
    types = final.v_logits.argmax(-1)
    if return_trajectory:
        return coords, types, traj
    return coords, types
