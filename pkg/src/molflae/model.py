"""The full autoencoder: encoder, latent posterior and BFN decoder, plus batching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .bfn import Decoder, NoiseSchedule
from .egnn import BackboneConfig
from .encoder import Encoder
from .moldata import AtomVocabulary, Molecule, center


@dataclass
class MolBatch:
    x: torch.Tensor  # (B, N, 3), every molecule centred
    onehot: torch.Tensor  # (B, N, K)
    mask: torch.Tensor  # (B, N) bool
    n_atoms: torch.Tensor  # (B,)


def collate(mols: Sequence[Molecule], num_types: int, dtype=None) -> MolBatch:
    dtype = dtype or torch.get_default_dtype()
    n_max = max(m.num_atoms for m in mols)
    b = len(mols)
    x = np.zeros((b, n_max, 3))
    oh = np.zeros((b, n_max, num_types))
    mask = np.zeros((b, n_max), dtype=bool)
    for i, m in enumerate(mols):
        if np.any(m.types >= num_types):
            raise ValueError("atom type outside vocabulary")
        c = center(m)
        n = m.num_atoms
        x[i, :n] = c.coords
        oh[i, np.arange(n), c.types] = 1.0
        mask[i, :n] = True
    return MolBatch(
        torch.tensor(x, dtype=dtype),
        torch.tensor(oh, dtype=dtype),
        torch.from_numpy(mask),
        torch.tensor([m.num_atoms for m in mols]),
    )


class MolFLAE(nn.Module):
    def __init__(
        self,
        vocab: AtomVocabulary,
        n_latent: int = 10,
        latent_dim: int = 32,
        hidden: int = 128,
        layers: int = 9,
        heads: int = 16,
        k: int = 32,
        attention: bool = True,
    ):
        super().__init__()
        self.vocab = vocab
        cfg = BackboneConfig(hidden=hidden, layers=layers, heads=heads, k=k, attention=attention)
        self.encoder = Encoder(vocab.size, n_latent, latent_dim, cfg)
        self.decoder = Decoder(vocab.size, latent_dim, cfg)

    @property
    def num_types(self) -> int:
        return self.vocab.size

    @property
    def n_latent(self) -> int:
        return self.encoder.n_latent

    @property
    def latent_dim(self) -> int:
        return self.encoder.latent_dim

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encode(self, batch: MolBatch):
        return self.encoder(batch.x, batch.onehot, batch.mask)

    def encode_molecules(self, mols: Sequence[Molecule]):
        return self.encode(collate(mols, self.num_types, self.dtype))


def build_model(vocab: AtomVocabulary, cfg) -> MolFLAE:
    """Construct a model from a :class:`~molflae.training.TrainConfig`."""
    torch.manual_seed(cfg.seed)
    return MolFLAE(
        vocab,
        n_latent=cfg.n_latent,
        latent_dim=cfg.latent_dim,
        hidden=cfg.hidden,
        layers=cfg.layers,
        heads=cfg.heads,
        k=cfg.k,
        attention=cfg.attention,
    )


def schedule_from(cfg) -> NoiseSchedule:
    return NoiseSchedule(sigma1=cfg.sigma1, beta1=cfg.beta1, n_steps=cfg.n_steps)
