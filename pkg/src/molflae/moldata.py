"""Molecules, atom vocabularies, XYZ I/O and the atom-count prior."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CHEMISTRY_FORMAT_VERSION = 1


class XYZFormatError(ValueError):
    pass


@dataclass
class AtomVocabulary:
    symbols: list[str]
    valence_table: dict[str, list[int]]
    bond_length_table: dict[tuple[str, str, int], float] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError(f"duplicate symbols in vocabulary: {self.symbols}")
        if len(self.symbols) < 2:
            raise ValueError("vocabulary needs at least two atom types")
        for s in self.symbols:
            if not self.valence_table.get(s):
                raise ValueError(f"no allowed valence for {s}")
        for (a, b, order), length in list(self.bond_length_table.items()):
            other = self.bond_length_table.setdefault((b, a, order), length)
            if other != length:
                raise ValueError(f"asymmetric bond table entry {a}-{b} order {order}")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    @property
    def size(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        return self._index[symbol]

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def bond_length(self, a: str, b: str, order: int) -> float | None:
        return self.bond_length_table.get((a, b, order))

    def to_dict(self) -> dict:
        return {
            "symbols": list(self.symbols),
            "valence": {k: list(v) for k, v in self.valence_table.items()},
            "bonds": [[a, b, o, v] for (a, b, o), v in sorted(self.bond_length_table.items()) if a <= b],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AtomVocabulary":
        bonds = {(a, b, int(o)): float(v) for a, b, o, v in d["bonds"]}
        return cls(list(d["symbols"]), {k: list(v) for k, v in d["valence"].items()}, bonds)


def _parse_chemistry(text: str) -> tuple[dict[str, list[str]], dict[str, list[int]], dict]:
    vocabs: dict[str, list[str]] = {}
    valence: dict[str, list[int]] = {}
    bonds: dict[tuple[str, str, int], float] = {}
    section = None
    version = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("format-version"):
            version = int(line.split()[1])
            continue
        if line.startswith("["):
            section = line.strip("[]").split()
            continue
        parts = line.split()
        if section is None:
            raise ValueError(f"entry outside a section: {raw!r}")
        if section[0] == "vocab":
            vocabs[section[1]] = parts
        elif section[0] == "valence":
            valence[parts[0]] = [int(p) for p in parts[1:]]
        elif section[0].startswith("bond"):
            order = int(section[0][4:])
            bonds[(parts[0], parts[1], order)] = float(parts[2])
        else:
            raise ValueError(f"unknown section {section}")
    if version != CHEMISTRY_FORMAT_VERSION:
        raise ValueError(f"unsupported chemistry table version {version}")
    return vocabs, valence, bonds


def load_vocabulary(name: str = "qm9", path: str | Path | None = None) -> AtomVocabulary:
    """Load a named vocabulary and its valence / bond-length tables."""
    if path is None:
        text = resources.files("molflae.data").joinpath("chemistry.txt").read_text()
    else:
        text = Path(path).read_text()
    vocabs, valence, bonds = _parse_chemistry(text)
    if name not in vocabs:
        raise KeyError(f"unknown vocabulary {name!r}; have {sorted(vocabs)}")
    return AtomVocabulary(vocabs[name], valence, bonds)


@dataclass
class Molecule:
    coords: np.ndarray
    types: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.types = np.asarray(self.types, dtype=np.int64).reshape(-1)
        if len(self.types) < 1:
            raise ValueError("molecule needs at least one atom")
        if len(self.types) != len(self.coords):
            raise ValueError("coords and types disagree on atom count")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("non-finite coordinates")
        if np.any(self.types < 0):
            raise ValueError("negative atom type index")

    @property
    def num_atoms(self) -> int:
        return len(self.types)

    def symbols(self, vocab: AtomVocabulary) -> list[str]:
        return [vocab.symbols[t] for t in self.types]

    def translated(self, t) -> "Molecule":
        return Molecule(self.coords + np.asarray(t, dtype=np.float64), self.types.copy(), self.name)

    def permuted(self, perm) -> "Molecule":
        perm = np.asarray(perm)
        return Molecule(self.coords[perm], self.types[perm], self.name)


def load_xyz(path: str | Path, vocab: AtomVocabulary) -> list[Molecule]:
    """Read every block of a (multi-)XYZ file."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    mols = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i].strip())
        except ValueError:
            raise XYZFormatError(f"line {i + 1}: malformed atom count {lines[i]!r}") from None
        if n < 1:
            raise XYZFormatError(f"line {i + 1}: atom count must be positive")
        if i + 2 + n > len(lines):
            raise XYZFormatError(f"line {i + 1}: block truncated, expected {n} atoms")
        name = lines[i + 1].strip()
        coords = np.empty((n, 3))
        types = np.empty(n, dtype=np.int64)
        for a in range(n):
            lineno = i + 3 + a
            parts = lines[i + 2 + a].split()
            if len(parts) < 4:
                raise XYZFormatError(f"line {lineno}: expected 'element x y z'")
            sym = parts[0]
            if sym not in vocab:
                raise XYZFormatError(f"line {lineno}: unknown element {sym!r}")
            types[a] = vocab.index(sym)
            try:
                coords[a] = [float(p) for p in parts[1:4]]
            except ValueError:
                raise XYZFormatError(f"line {lineno}: non-numeric coordinate in {parts[1:4]}") from None
        mols.append(Molecule(coords, types, name))
        i += 2 + n
    return mols


def format_xyz(mols: Iterable[Molecule], vocab: AtomVocabulary, precision: int = 6) -> str:
    out = []
    for m in mols:
        out.append(f"{m.num_atoms}\n{m.name}\n")
        for sym, (x, y, z) in zip(m.symbols(vocab), m.coords):
            out.append(f"{sym} {x:.{precision}f} {y:.{precision}f} {z:.{precision}f}\n")
    return "".join(out)


def write_xyz(path: str | Path, mols: Iterable[Molecule], vocab: AtomVocabulary, precision: int = 6):
    Path(path).write_text(format_xyz(mols, vocab, precision), encoding="utf-8")


def center(mol: Molecule) -> Molecule:
    # unweighted mean: the model has no notion of atomic mass
    return Molecule(mol.coords - mol.coords.mean(axis=0), mol.types.copy(), mol.name)


def one_hot(mol: Molecule, vocab: AtomVocabulary) -> np.ndarray:
    if np.any(mol.types >= vocab.size):
        raise ValueError("type index outside vocabulary")
    out = np.zeros((mol.num_atoms, vocab.size))
    out[np.arange(mol.num_atoms), mol.types] = 1.0
    return out


@dataclass
class AtomCountPrior:
    counts: dict[int, float]

    def __post_init__(self):
        self.counts = {int(k): float(v) for k, v in sorted(self.counts.items())}
        if not self.counts:
            raise ValueError("empty atom-count prior")
        if any(k < 1 for k in self.counts):
            raise ValueError("atom counts must be >= 1")
        if abs(sum(self.counts.values()) - 1.0) > 1e-9:
            raise ValueError("atom-count probabilities must sum to 1")

    def to_dict(self) -> dict:
        return {str(k): v for k, v in self.counts.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AtomCountPrior":
        return cls({int(k): float(v) for k, v in d.items()})


def fit_atom_count_prior(dataset: Sequence[Molecule]) -> AtomCountPrior:
    if not dataset:
        raise ValueError("cannot fit an atom-count prior to an empty dataset")
    freq = Counter(m.num_atoms for m in dataset)
    total = sum(freq.values())
    return AtomCountPrior({n: c / total for n, c in freq.items()})


def sample_atom_count(prior: AtomCountPrior, rng: np.random.Generator, size=None):
    support = np.fromiter(prior.counts.keys(), dtype=np.int64)
    probs = np.fromiter(prior.counts.values(), dtype=np.float64)
    draw = rng.choice(support, size=size, p=probs / probs.sum())
    return int(draw) if size is None else draw
