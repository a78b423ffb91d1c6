"""SE(3)-equivariant message passing over update and condition nodes.

Nodes are held in dense, padded tensors of shape ``(B, N, ...)``.  The first
``N_u`` node slots of every graph are update nodes (their coordinates move),
the remaining ``N_c`` slots are condition nodes (coordinates frozen).  A
boolean ``node_mask`` marks real nodes; padded slots never send or receive
messages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

# (receiver role, sender role) -> edge class
EDGE_CLASSES = ("update-update", "update-condition", "condition-update", "condition-condition")


@dataclass
class BackboneConfig:
    hidden: int = 128
    layers: int = 9
    heads: int = 16
    k: int = 32
    n_rbf: int = 16
    rbf_max: float = 10.0
    attention: bool = True
    layer_norm: bool = True
    time_conditioned: bool = False

    def __post_init__(self):
        if self.layers < 0 or self.k < 1:
            raise ValueError("need layers >= 0 and k >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide hidden width ({self.hidden})")


def pair_distances(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    diff = x[:, :, None, :] - x[:, None, :, :]
    # eps keeps the gradient finite for coincident nodes (virtual nodes start at the origin)
    return torch.sqrt((diff**2).sum(-1) + eps)


def knn_mask(x: torch.Tensor, node_mask: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean ``(B, N, N)`` mask; entry ``[b, i, j]`` is True when ``j`` sends to ``i``.

    Each real node receives from its ``min(k, n_real - 1)`` nearest other real
    nodes.  Ties are broken by node index.
    """
    b, n, _ = x.shape
    with torch.no_grad():
        d2 = ((x[:, :, None, :] - x[:, None, :, :]) ** 2).sum(-1)
        valid = node_mask[:, :, None] & node_mask[:, None, :]
        valid = valid & ~torch.eye(n, dtype=torch.bool, device=x.device)[None]
        d2 = d2.masked_fill(~valid, float("inf"))
        order = torch.sort(d2, dim=-1, stable=True).indices
        kk = min(k, max(n - 1, 0))
        sel = torch.zeros_like(valid)
        if kk > 0:
            sel.scatter_(-1, order[..., :kk], True)
        return sel & valid


def knn_graph(x, is_update, k: int):
    """Directed kNN edge list for a single graph.

    Returns a list of ``(src, dst, tag)`` tuples where ``tag`` is one of
    :data:`EDGE_CLASSES` (receiver role first).
    """
    x = torch.as_tensor(x, dtype=torch.float64)
    is_update = torch.as_tensor(is_update, dtype=torch.bool)
    if len(x) < 2:
        raise ValueError("kNN graph needs at least two nodes")
    mask = knn_mask(x[None], torch.ones(1, len(x), dtype=torch.bool), k)[0]
    dst, src = torch.nonzero(mask, as_tuple=True)
    edges = []
    for i, j in zip(dst.tolist(), src.tolist()):
        edges.append((j, i, _edge_tag(bool(is_update[i]), bool(is_update[j]))))
    return edges


def _edge_tag(recv_update: bool, send_update: bool) -> str:
    return EDGE_CLASSES[(0 if recv_update else 2) + (0 if send_update else 1)]


def edge_class_onehot(is_update: torch.Tensor) -> torch.Tensor:
    """``(B, N) -> (B, N, N, 4)`` one-hot of the receiver/sender role pair."""
    recv = (~is_update).long()[:, :, None] * 2
    send = (~is_update).long()[:, None, :]
    return nn.functional.one_hot(recv + send, len(EDGE_CLASSES)).to(torch.get_default_dtype())


class GaussianRBF(nn.Module):
    def __init__(self, n: int, stop: float):
        super().__init__()
        self.register_buffer("centers", torch.linspace(0.0, stop, n))
        self.gamma = 0.5 / (stop / (n - 1)) ** 2

    def forward(self, d):
        return torch.exp(-self.gamma * (d[..., None] - self.centers) ** 2)


class SinusoidalTime(nn.Module):
    def __init__(self, dim: int, n_freq: int = 16):
        super().__init__()
        self.register_buffer("freqs", torch.exp(torch.linspace(0.0, math.log(1000.0), n_freq)))
        self.proj = nn.Linear(2 * n_freq, dim)

    def forward(self, t):
        arg = t[:, None] * self.freqs * math.pi
        return self.proj(torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1))


class EquivariantLayer(nn.Module):
    """One round of feature messages followed by a gated coordinate update."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.hidden
        pair = 2 * d + cfg.n_rbf + len(EDGE_CLASSES)
        self.cfg = cfg
        self.norm_h = nn.LayerNorm(d) if cfg.layer_norm else nn.Identity()
        self.norm_x = nn.LayerNorm(d) if cfg.layer_norm else nn.Identity()
        self.msg = nn.Sequential(nn.Linear(pair, d), nn.ReLU(), nn.Linear(d, d))
        self.att = nn.Linear(pair, cfg.heads) if cfg.attention else None
        self.out = nn.Linear(d, d)
        self.gate = nn.Sequential(nn.Linear(pair, d), nn.ReLU(), nn.Linear(d, 1))

    def _pairs(self, h, rbf, edge):
        n = h.shape[1]
        hi = h[:, :, None, :].expand(-1, -1, n, -1)
        hj = h[:, None, :, :].expand(-1, n, -1, -1)
        return torch.cat([hi, hj, rbf, edge], dim=-1)

    def forward(self, x, h, is_update, nbr, rbf, edge, dist, time_embed=None):
        if time_embed is not None:
            h = h + time_embed[:, None, :]
        pairs = self._pairs(self.norm_h(h), rbf, edge)
        m = self.msg(pairs)
        nbr_f = nbr.to(h.dtype)
        if self.att is not None:
            b, n, _, d = m.shape
            heads = self.cfg.heads
            # finite fill keeps receivers without neighbours (padding) NaN-free
            logits = self.att(pairs).masked_fill(~nbr[..., None], -1e9)
            w = torch.softmax(logits, dim=2) * nbr_f[..., None]
            agg = (m.view(b, n, n, heads, d // heads) * w[..., None]).sum(2).reshape(b, n, d)
        else:
            agg = (m * nbr_f[..., None]).sum(2)
        h = h + self.out(agg)

        gate = self.gate(self._pairs(self.norm_x(h), rbf, edge)).squeeze(-1) * nbr_f
        rel = (x[:, :, None, :] - x[:, None, :, :]) / (dist[..., None] + 1.0)
        dx = (rel * gate[..., None]).sum(2)
        x = x + dx * is_update[..., None].to(x.dtype)
        return x, h


class Backbone(nn.Module):
    """Stack of :class:`EquivariantLayer` with the kNN graph rebuilt per layer."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.embed = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        self.rbf = GaussianRBF(cfg.n_rbf, cfg.rbf_max)
        self.time = SinusoidalTime(d) if cfg.time_conditioned else None
        self.layers = nn.ModuleList(EquivariantLayer(cfg) for _ in range(cfg.layers))

    def forward(self, x_u, h_u, x_c, h_c, mask_u=None, mask_c=None, t=None, check_centered=True):
        """Run all layers.

        Parameters
        ----------
        x_u, h_u : (B, N_u, 3), (B, N_u, D_f)
            Update nodes.
        x_c, h_c : (B, N_c, 3), (B, N_c, D_f)
            Condition nodes; their masked mean position must be zero.
        mask_u, mask_c : (B, N_u), (B, N_c) bool, optional
        t : (B,) tensor, optional
            Time, required iff the backbone is time conditioned.

        Returns
        -------
        x_u, h_u, h_c after the final layer.
        """
        b, nu, _ = x_u.shape
        nc = x_c.shape[1]
        if mask_u is None:
            mask_u = torch.ones(b, nu, dtype=torch.bool, device=x_u.device)
        if mask_c is None:
            mask_c = torch.ones(b, nc, dtype=torch.bool, device=x_u.device)
        if check_centered:
            assert_centered(x_c, mask_c)
        x = torch.cat([x_u, x_c], dim=1)
        h = self.embed(torch.cat([h_u, h_c], dim=1))
        node_mask = torch.cat([mask_u, mask_c], dim=1)
        is_update = torch.zeros_like(node_mask)
        is_update[:, :nu] = True
        is_update = is_update & node_mask
        edge = edge_class_onehot(torch.cat([torch.ones_like(mask_u), torch.zeros_like(mask_c)], dim=1)).to(x.dtype)

        temb = None
        if self.time is not None:
            if t is None:
                raise ValueError("time-conditioned backbone needs t")
            temb = self.time(t.to(x.dtype))

        for idx, layer in enumerate(self.layers):
            nbr = knn_mask(x, node_mask, self.cfg.k)
            dist = pair_distances(x)
            x, h = layer(x, h, is_update, nbr, self.rbf(dist), edge, dist, temb)
            if not (torch.isfinite(x).all() and torch.isfinite(h).all()):
                raise FloatingPointError(f"non-finite activations after layer {idx}")
        h = h * node_mask[..., None].to(h.dtype)
        return x[:, :nu], h[:, :nu], h[:, nu:]


def assert_centered(x, mask, tol: float = 1e-6):
    m = mask[..., None].to(x.dtype)
    mean = ((x.detach() * m).sum(1) / m.sum(1).clamp(min=1))
    scale = float(x.detach().abs().max()) if x.numel() else 0.0
    # allow for float32 round-off on large coordinates
    limit = max(tol, 64 * torch.finfo(x.dtype).eps * max(scale, 1.0))
    if float(mean.abs().max()) > limit:
        raise ValueError(f"condition nodes must be centered (max |mean| = {float(mean.abs().max()):.3g})")
