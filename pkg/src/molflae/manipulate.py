"""Zero-shot latent operations on a trained checkpoint.

All operations encode with posterior means and decode with an explicit
``torch.Generator`` so that results are reproducible.  Molecules are decoded
one at a time from a single generator stream; two calls that consume the same
stream in the same order produce identical molecules.

Encoders see centred molecules, so decoded coordinates live in the centred
frame of the spatial-latent donor.  Outputs are shifted back by that donor's
centroid, which keeps in-situ comparisons with the inputs meaningful.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .bfn import NoiseSchedule, decode
from .geom import RigidTransform, weighted_kabsch
from .encoder import LatentCode
from .model import MolFLAE, collate, schedule_from
from .moldata import AtomCountPrior, AtomVocabulary, Molecule
from .training import Checkpoint, load_checkpoint


@dataclass
class LoadedModel:
    checkpoint: Checkpoint
    model: MolFLAE
    schedule: NoiseSchedule
    checkpoint_hash: str = ""

    @property
    def vocab(self) -> AtomVocabulary:
        return self.checkpoint.vocab

    @property
    def prior(self) -> AtomCountPrior:
        return self.checkpoint.prior

    @property
    def dtype(self):
        return self.model.dtype


def from_checkpoint(ck: Checkpoint, checkpoint_hash: str = "") -> LoadedModel:
    return LoadedModel(ck, ck.build_model(), schedule_from(ck.config), checkpoint_hash)


def load_model(path) -> LoadedModel:
    data = Path(path).read_bytes()
    return from_checkpoint(load_checkpoint(path), hashlib.sha256(data).hexdigest())


@dataclass
class HybridLatent:
    z_x_source: str
    z_h_source: str
    latent: LatentCode  # single latent, shapes (N_Z, 3) and (N_Z, D_Z)

    def __post_init__(self):
        lm = self.latent
        if lm.z_x.ndim != 2 or lm.z_x.shape[1] != 3 or lm.z_h.ndim != 2 or lm.z_h.shape[0] != lm.z_x.shape[0]:
            raise ValueError("hybrid latent components have incompatible shapes")


def latent_checksum(z: LatentCode) -> str:
    h = hashlib.sha256()
    h.update(z.z_x.detach().to(torch.float64).numpy().tobytes())
    h.update(z.z_h.detach().to(torch.float64).numpy().tobytes())
    return h.hexdigest()[:16]


@torch.no_grad()
def encode_mean(lm: LoadedModel, mol: Molecule) -> tuple[LatentCode, np.ndarray]:
    """Posterior-mean latent of one molecule (unbatched) and the molecule's centroid."""
    post = lm.model.encode(collate([mol], lm.model.num_types, lm.dtype))
    return LatentCode(post.mu_x[0], post.mu_h[0]), mol.coords.mean(axis=0)


def _check_latent(lm: LoadedModel, z: LatentCode):
    want = (lm.model.n_latent, lm.model.latent_dim)
    if tuple(z.z_x.shape) != (want[0], 3) or tuple(z.z_h.shape) != want:
        raise ValueError(f"latent shapes {tuple(z.z_x.shape)}, {tuple(z.z_h.shape)} do not match checkpoint {want}")


@torch.no_grad()
def decode_latent(
    lm: LoadedModel,
    z: LatentCode,
    n_atoms: int,
    steps: int,
    generator: torch.Generator | None = None,
    shift=None,
    name: str = "",
) -> Molecule:
    _check_latent(lm, z)
    zb = LatentCode(z.z_x[None].to(lm.dtype), z.z_h[None].to(lm.dtype))
    coords, types = decode(lm.model.decoder, zb, int(n_atoms), lm.schedule, steps, generator)
    xyz = coords[0].to(torch.float64).numpy()
    if shift is not None:
        xyz = xyz + np.asarray(shift, dtype=np.float64)
    return Molecule(xyz, types[0].numpy().astype(np.int64), name)


def sample_prior_latents(lm: LoadedModel, count: int, generator: torch.Generator | None = None) -> LatentCode:
    """Draws from the latent prior: z_x ~ N(0, var_x I), z_h ~ N(0, var_h I)."""
    cfg = lm.checkpoint.config
    nz, dz = lm.model.n_latent, lm.model.latent_dim
    z_x = torch.randn((count, nz, 3), generator=generator, dtype=torch.float64) * np.sqrt(cfg.var_x)
    z_h = torch.randn((count, nz, dz), generator=generator, dtype=torch.float64) * np.sqrt(cfg.var_h)
    return LatentCode(z_x, z_h)


def generate(lm: LoadedModel, count: int, steps: int, generator: torch.Generator | None = None) -> list[Molecule]:
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return []
    z = sample_prior_latents(lm, count, generator)
    support = list(lm.prior.counts)
    probs = torch.tensor(list(lm.prior.counts.values()), dtype=torch.float64)
    sizes = [support[i] for i in torch.multinomial(probs, count, replacement=True, generator=generator).tolist()]
    return [decode_latent(lm, z[i], sizes[i], steps, generator, name=f"sample_{i}") for i in range(count)]


def analog(lm: LoadedModel, mol: Molecule, delta: int, steps: int, generator: torch.Generator | None = None) -> Molecule:
    """Decode the molecule's own latent with ``num_atoms + delta`` atoms."""
    n = mol.num_atoms + int(delta)
    if n < 1:
        raise ValueError(f"analog would have {n} atoms")
    z, c = encode_mean(lm, mol)
    return decode_latent(lm, z, n, steps, generator, shift=c, name=f"{mol.name}_analog{delta:+d}")


def hybrid(z_x_from: LatentCode, z_h_from: LatentCode, z_x_source: str = "", z_h_source: str = "") -> HybridLatent:
    return HybridLatent(z_x_source, z_h_source, LatentCode(z_x_from.z_x, z_h_from.z_h))


def swap(
    lm: LoadedModel, mol_a: Molecule, mol_b: Molecule, steps: int, generator: torch.Generator | None = None
) -> tuple[Molecule, Molecule]:
    """Decode (z_h of B, z_x of A) and (z_h of A, z_x of B).

    Each hybrid uses the atom count of its z_h donor and is placed at the
    centroid of its z_x donor.
    """
    za, ca = encode_mean(lm, mol_a)
    zb, cb = encode_mean(lm, mol_b)
    keep_xa = hybrid(za, zb, mol_a.name, mol_b.name)
    keep_xb = hybrid(zb, za, mol_b.name, mol_a.name)
    out1 = decode_latent(lm, keep_xa.latent, mol_b.num_atoms, steps, generator, shift=ca, name=f"x:{mol_a.name}|h:{mol_b.name}")
    out2 = decode_latent(lm, keep_xb.latent, mol_a.num_atoms, steps, generator, shift=cb, name=f"x:{mol_b.name}|h:{mol_a.name}")
    return out1, out2


def interpolation_weights(num_points: int) -> list[tuple[float, float]]:
    """Pairs (w_a, w_b) with w_b = j / (num_points - 1); swapping endpoints mirrors the list exactly."""
    if num_points < 2:
        raise ValueError("interpolation needs at least two points")
    d = num_points - 1
    return [((d - j) / d, j / d) for j in range(num_points)]


def interpolated_count(n_a: int, n_b: int, j: int, num_points: int) -> int:
    """round(lerp(n_a, n_b)) with ties rounded up, in exact integer arithmetic."""
    d = num_points - 1
    num = n_a * (d - j) + n_b * j
    return (2 * num + d) // (2 * d)


def interpolation_latents(z_a: LatentCode, z_b: LatentCode, num_points: int) -> list[LatentCode]:
    out = []
    last = num_points - 1
    for j, (wa, wb) in enumerate(interpolation_weights(num_points)):
        if j == 0:
            out.append(z_a)
        elif j == last:
            out.append(z_b)
        else:
            out.append(LatentCode(wa * z_a.z_x + wb * z_b.z_x, wa * z_a.z_h + wb * z_b.z_h))
    return out


def interpolate(
    lm: LoadedModel,
    mol_a: Molecule,
    mol_b: Molecule,
    num_points: int,
    steps: int,
    generator: torch.Generator | None = None,
) -> list[Molecule]:
    """Decode linear blends of both latent halves; frame j has weight j/(num_points-1) on B."""
    za, ca = encode_mean(lm, mol_a)
    zb, cb = encode_mean(lm, mol_b)
    weights = interpolation_weights(num_points)
    frames = []
    for j, z in enumerate(interpolation_latents(za, zb, num_points)):
        wa, wb = weights[j]
        n = interpolated_count(mol_a.num_atoms, mol_b.num_atoms, j, num_points)
        shift = ca if j == 0 else cb if j == num_points - 1 else wa * ca + wb * cb
        frames.append(decode_latent(lm, z, n, steps, generator, shift=shift, name=f"frame_{j}"))
    return frames


@torch.no_grad()
def latent_align(lm: LoadedModel, mol_a: Molecule, mol_b: Molecule) -> RigidTransform:
    """Rigid motion taking A's frame onto B's, from a uniform-weight fit of the spatial latents."""
    za, ca = encode_mean(lm, mol_a)
    zb, cb = encode_mean(lm, mol_b)
    src = za.z_x.to(torch.float64).numpy() + ca
    dst = zb.z_x.to(torch.float64).numpy() + cb
    return weighted_kabsch(src, dst)


def write_sidecar(path, op: str, seed: int | None, z: LatentCode | None = None, lam: float | None = None, **extra) -> None:
    record = {"op": op, "lambda": lam, "seed": seed, "latent_checksum": None if z is None else latent_checksum(z)}
    record.update(extra)
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def latent_to_json(z: LatentCode, sigma2_x=None, sigma2_h=None, checkpoint_hash: str = "") -> dict:
    rec = {
        "z_x": z.z_x.detach().to(torch.float64).tolist(),
        "mu_h": z.z_h.detach().to(torch.float64).tolist(),
        "checkpoint_hash": checkpoint_hash,
    }
    if sigma2_x is not None:
        rec["sigma2_x"] = sigma2_x.detach().to(torch.float64).tolist()
    if sigma2_h is not None:
        rec["sigma2_h"] = sigma2_h.detach().to(torch.float64).tolist()
    return rec


def latent_from_json(rec: dict) -> LatentCode:
    try:
        z_x = torch.tensor(rec["z_x"], dtype=torch.float64)
        z_h = torch.tensor(rec["mu_h"], dtype=torch.float64)
    except KeyError as exc:
        raise ValueError(f"latent record lacks {exc}") from None
    if z_x.ndim != 2 or z_x.shape[1] != 3 or z_h.ndim != 2 or z_h.shape[0] != z_x.shape[0]:
        raise ValueError("latent record has malformed shapes")
    return LatentCode(z_x, z_h)


def encode_record(lm: LoadedModel, mol: Molecule) -> dict:
    """JSON-ready posterior of one molecule, centroid included for placing decodes."""
    with torch.no_grad():
        post = lm.model.encode(collate([mol], lm.model.num_types, lm.dtype))
    rec = latent_to_json(LatentCode(post.mu_x[0], post.mu_h[0]), post.sigma2_x[0], post.sigma2_h[0], lm.checkpoint_hash)
    rec["n_atoms"] = mol.num_atoms
    rec["centroid"] = mol.coords.mean(axis=0).tolist()
    rec["name"] = mol.name
    return rec


def decode_records(lm: LoadedModel, records: Sequence[dict], steps: int, generator=None, n_atoms: int | None = None) -> list[Molecule]:
    out = []
    for i, rec in enumerate(records):
        n = n_atoms if n_atoms is not None else rec.get("n_atoms")
        if n is None:
            raise ValueError("latent record has no atom count; pass one explicitly")
        out.append(decode_latent(lm, latent_from_json(rec), int(n), steps, generator, shift=rec.get("centroid"), name=rec.get("name", f"decoded_{i}")))
    return out
