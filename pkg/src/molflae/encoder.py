"""Virtual-node encoder, Gaussian latent posterior and its KL regulariser."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .egnn import Backbone, BackboneConfig

VARIANCE_FLOOR = 1e-6
# posterior variance at initialisation; with softplus(0) ~ 0.7 the sampling noise
# swamps the initial means and the decoder learns to ignore the latent
INIT_VARIANCE = 1e-2


@dataclass
class LatentCode:
    z_x: torch.Tensor  # (B, N_Z, 3)
    z_h: torch.Tensor  # (B, N_Z, D_Z)

    def __getitem__(self, idx) -> "LatentCode":
        return LatentCode(self.z_x[idx], self.z_h[idx])


@dataclass
class LatentPosterior:
    mu_x: torch.Tensor  # (B, N_Z, 3)
    sigma2_x: torch.Tensor  # (B, N_Z), one isotropic variance per node
    mu_h: torch.Tensor  # (B, N_Z, D_Z)
    sigma2_h: torch.Tensor  # (B, N_Z, D_Z)

    def mean(self) -> LatentCode:
        return LatentCode(self.mu_x, self.mu_h)


class Encoder(nn.Module):
    """Append ``n_latent`` learnable virtual nodes to the molecule and read them out.

    The molecule atoms are condition nodes (fixed coordinates), the virtual
    nodes are update nodes starting at the origin.
    """

    def __init__(self, num_types: int, n_latent: int = 10, latent_dim: int = 32, backbone: BackboneConfig | None = None):
        super().__init__()
        if n_latent < 4:
            raise ValueError("need at least 4 virtual nodes to span a non-degenerate simplex")
        cfg = backbone or BackboneConfig()
        self.n_latent = n_latent
        self.latent_dim = latent_dim
        self.atom_embed = nn.Linear(num_types, cfg.hidden)
        self.virtual = nn.Parameter(torch.randn(n_latent, cfg.hidden))
        self.backbone = Backbone(cfg)
        # input: per-node |z_x| (rotation invariant) and z_h
        self.head = nn.Linear(1 + cfg.hidden, 1 + 2 * latent_dim)
        inv_softplus = math.log(math.expm1(INIT_VARIANCE))
        with torch.no_grad():
            self.head.bias[0] = inv_softplus
            self.head.bias[1 + latent_dim :] = inv_softplus

    def forward(self, x: torch.Tensor, onehot: torch.Tensor, mask: torch.Tensor | None = None) -> LatentPosterior:
        b = x.shape[0]
        h_atoms = self.atom_embed(onehot)
        x_v = x.new_zeros(b, self.n_latent, 3)
        h_v = self.virtual.to(x.dtype)[None].expand(b, -1, -1)
        z_x, z_h, _ = self.backbone(x_v, h_v, x, h_atoms, mask_c=mask)
        radius = torch.sqrt((z_x**2).sum(-1, keepdim=True) + 1e-12)
        out = self.head(torch.cat([radius, z_h], dim=-1))
        d = self.latent_dim
        sigma2_x = F.softplus(out[..., 0]) + VARIANCE_FLOOR
        mu_h = out[..., 1 : 1 + d]
        sigma2_h = F.softplus(out[..., 1 + d :]) + VARIANCE_FLOOR
        return LatentPosterior(z_x, sigma2_x, mu_h, sigma2_h)


def _kl_terms(mu, s2, var):
    return 0.5 * ((mu**2 + s2) / var - torch.log(s2) - 1.0)


def kl_loss(post: LatentPosterior, var_x: float = 100.0, var_h: float = 1.0, reduce: bool = True):
    """KL of the diagonal posterior against ``N(0, diag(var_x, var_h))``.

    Each node's scalar ``sigma2_x`` is counted once per spatial axis.  Returns a
    scalar (sum over the batch) or, with ``reduce=False``, one value per
    molecule.

    The prior-variance normaliser ``log var`` is omitted, so the value is the
    exact KL only for ``var = 1``; it differs from the true KL by a constant.
    """
    if var_x <= 0 or var_h <= 0:
        raise ValueError("prior variances must be positive")
    if (post.sigma2_x <= 0).any() or (post.sigma2_h <= 0).any():
        raise ValueError("posterior variances must be positive")
    s2x = post.sigma2_x[..., None].expand_as(post.mu_x)
    lx = _kl_terms(post.mu_x, s2x, var_x).flatten(1).sum(1)
    lh = _kl_terms(post.mu_h, post.sigma2_h, var_h).flatten(1).sum(1)
    per_mol = lx + lh
    return per_mol.sum() if reduce else per_mol


def sample_latent(post: LatentPosterior, generator: torch.Generator | None = None) -> LatentCode:
    """Reparameterised draw ``mu + sigma * eps``."""
    eps_x = torch.randn(post.mu_x.shape, generator=generator, dtype=post.mu_x.dtype)
    eps_h = torch.randn(post.mu_h.shape, generator=generator, dtype=post.mu_h.dtype)
    z_x = post.mu_x + torch.sqrt(post.sigma2_x)[..., None] * eps_x
    z_h = post.mu_h + torch.sqrt(post.sigma2_h) * eps_h
    return LatentCode(z_x, z_h)
