"""Evaluation: bond perception, stability/validity, shape overlap, descriptors, trend tests.

Bond orders come from a reference-length lookup with per-order margins, the
same convention commonly used for QM9 stability numbers.  Everything here is
plain numpy/scipy and operates on :class:`~molflae.moldata.Molecule`.
"""

from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components
from scipy.special import betainc

from .moldata import AtomVocabulary, Molecule

# Margins in pm added to the reference length of each bond order.
BOND_MARGINS = {1: 10.0, 2: 5.0, 3: 3.0}
MAX_NEG_LOG_P = 300.0
HASH_ROUNDS = 8


class DegenerateInputError(ValueError):
    pass


@dataclass
class BondGraph:
    orders: np.ndarray  # (N, N) integer bond orders 0..3

    def __post_init__(self):
        o = np.asarray(self.orders, dtype=np.int64)
        if o.ndim != 2 or o.shape[0] != o.shape[1]:
            raise ValueError("bond orders must be a square matrix")
        if not np.array_equal(o, o.T):
            raise ValueError("bond orders must be symmetric")
        if np.any(np.diag(o) != 0):
            raise ValueError("bond orders must have a zero diagonal")
        if o.size and (o.min() < 0 or o.max() > 3):
            raise ValueError("bond orders must lie in 0..3")
        self.orders = o

    @property
    def valences(self) -> np.ndarray:
        return self.orders.sum(axis=1)

    def neighbors(self, i: int) -> np.ndarray:
        return np.nonzero(self.orders[i])[0]


def _bond_order(vocab: AtomVocabulary, a: str, b: str, dist_pm: float) -> int:
    ref1 = vocab.bond_length(a, b, 1)
    if ref1 is None:
        warnings.warn(f"no reference bond length for {a}-{b}; treated as unbonded", stacklevel=3)
        return 0
    if dist_pm >= ref1 + BOND_MARGINS[1]:
        return 0
    order = 1
    for o in (2, 3):
        ref = vocab.bond_length(a, b, o)
        if ref is None or dist_pm >= ref + BOND_MARGINS[o]:
            break
        order = o
    return order


def infer_bonds(mol: Molecule, vocab: AtomVocabulary) -> BondGraph:
    """Assign each pair the highest order whose reference length + margin exceeds the distance."""
    n = mol.num_atoms
    sym = mol.symbols(vocab)
    diff = mol.coords[:, None, :] - mol.coords[None, :, :]
    dist = 100.0 * np.sqrt((diff**2).sum(-1))
    orders = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            o = _bond_order(vocab, sym[i], sym[j], dist[i, j])
            orders[i, j] = orders[j, i] = o
    return BondGraph(orders)


def stable_atoms(mol: Molecule, vocab: AtomVocabulary, bonds: BondGraph | None = None) -> np.ndarray:
    bonds = bonds or infer_bonds(mol, vocab)
    val = bonds.valences
    return np.array([int(v) in vocab.valence_table[s] for s, v in zip(mol.symbols(vocab), val)], dtype=bool)


def atom_stability(mol: Molecule, vocab: AtomVocabulary, bonds: BondGraph | None = None) -> float:
    return float(stable_atoms(mol, vocab, bonds).mean())


def mol_stability(mol: Molecule, vocab: AtomVocabulary, bonds: BondGraph | None = None) -> bool:
    return bool(stable_atoms(mol, vocab, bonds).all())


@dataclass
class StabilityReport:
    atom_stability: float  # fraction of all atoms in the set
    mol_stability: float
    n_molecules: int
    n_atoms: int


def stability(mols: Sequence[Molecule], vocab: AtomVocabulary) -> StabilityReport:
    """Dataset-level stability; atom stability pools all atoms of all molecules."""
    if not mols:
        raise DegenerateInputError("no molecules to evaluate")
    n_stable = n_total = n_mol = 0
    for m in mols:
        s = stable_atoms(m, vocab)
        n_stable += int(s.sum())
        n_total += s.size
        n_mol += int(s.all())
    return StabilityReport(n_stable / n_total, n_mol / len(mols), len(mols), n_total)


def is_connected(bonds: BondGraph) -> bool:
    if bonds.orders.shape[0] <= 1:
        return True
    n_comp, _ = connected_components(bonds.orders > 0, directed=False)
    return n_comp == 1


def validity(mol: Molecule, vocab: AtomVocabulary, bonds: BondGraph | None = None) -> bool:
    """Connected bond graph and every atom at an allowed valence."""
    bonds = bonds or infer_bonds(mol, vocab)
    return is_connected(bonds) and bool(stable_atoms(mol, vocab, bonds).all())


def _digest(*parts) -> str:
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x1f")
    return h.hexdigest()


def _refine(labels: list[str], bonds: BondGraph) -> list[str]:
    new = []
    for i, lab in enumerate(labels):
        nb = sorted((int(bonds.orders[i, j]), labels[j]) for j in bonds.neighbors(i))
        new.append(_digest(lab, nb))
    return new


def _initial_labels(mol: Molecule, vocab: AtomVocabulary, bonds: BondGraph) -> list[str]:
    sym = mol.symbols(vocab)
    return [_digest(sym[i], sorted(bonds.orders[i][bonds.orders[i] > 0].tolist())) for i in range(mol.num_atoms)]


def canonical_hash(mol: Molecule, vocab: AtomVocabulary, bonds: BondGraph | None = None, rounds: int = HASH_ROUNDS) -> str:
    """Order-independent graph hash by iterated neighbourhood refinement."""
    bonds = bonds or infer_bonds(mol, vocab)
    labels = _initial_labels(mol, vocab, bonds)
    for _ in range(rounds):
        labels = _refine(labels, bonds)
    return _digest(sorted(labels))


def uniqueness(mols: Sequence[Molecule], vocab: AtomVocabulary) -> float:
    """Distinct canonical hashes over the number of valid molecules (0 if none valid)."""
    hashes = [canonical_hash(m, vocab) for m in mols if validity(m, vocab)]
    if not hashes:
        return 0.0
    return len(set(hashes)) / len(hashes)


def novelty(mols: Sequence[Molecule], vocab: AtomVocabulary, train_hashes: Iterable[str]) -> float:
    """Fraction of the distinct valid hashes that do not occur in ``train_hashes``."""
    seen = set(train_hashes)
    uniq = {canonical_hash(m, vocab) for m in mols if validity(m, vocab)}
    if not uniq:
        return 0.0
    return len(uniq - seen) / len(uniq)


@dataclass
class GenerationReport:
    valid: float
    valid_unique: float
    novelty: float | None
    atom_stability: float
    mol_stability: float


def generation_report(mols: Sequence[Molecule], vocab: AtomVocabulary, train_hashes=None) -> GenerationReport:
    st = stability(mols, vocab)
    valid = [m for m in mols if validity(m, vocab)]
    frac_valid = len(valid) / len(mols)
    u = uniqueness(valid, vocab)
    nov = None if train_hashes is None else novelty(valid, vocab, train_hashes)
    return GenerationReport(frac_valid, frac_valid * u, nov, st.atom_stability, st.mol_stability)


def heavy_atom_mask(mol: Molecule, vocab: AtomVocabulary) -> np.ndarray:
    return np.array([s != "H" for s in mol.symbols(vocab)], dtype=bool)


def heavy_atom_count(mol: Molecule, vocab: AtomVocabulary) -> int:
    return int(heavy_atom_mask(mol, vocab).sum())


def _overlap(a: np.ndarray, b: np.ndarray, sigma: float) -> float:
    # Integral of two unit-height Gaussians exp(-r^2 / 2 sigma^2) is
    # (pi sigma^2)^{3/2} exp(-d^2 / 4 sigma^2); the prefactor cancels in the ratio.
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(np.exp(-d2 / (4.0 * sigma**2)).sum())


def shape_similarity(mol_a: Molecule, mol_b: Molecule, vocab: AtomVocabulary, sigma: float = 1.0) -> float:
    """Gaussian-volume Tanimoto on heavy atoms, in the given frames (no alignment)."""
    a = mol_a.coords[heavy_atom_mask(mol_a, vocab)]
    b = mol_b.coords[heavy_atom_mask(mol_b, vocab)]
    if len(a) == 0 or len(b) == 0:
        raise DegenerateInputError("shape similarity needs at least one heavy atom per molecule")
    v_ab = _overlap(a, b, sigma)
    v_aa = _overlap(a, a, sigma)
    v_bb = _overlap(b, b, sigma)
    return float(np.clip(v_ab / (v_aa + v_bb - v_ab), 0.0, 1.0))


@dataclass(frozen=True)
class Reconstruction:
    type_accuracy: float
    mean_distance: float  # angstrom, over assigned atom pairs


def reconstruction(reference: Molecule, decoded: Molecule) -> Reconstruction:
    """Match atoms by minimum total squared distance, then compare types and positions.

    Both molecules must be in the same frame; no alignment is performed.
    """
    if reference.num_atoms != decoded.num_atoms:
        raise ValueError(f"atom counts differ: {reference.num_atoms} vs {decoded.num_atoms}")
    cost = ((reference.coords[:, None, :] - decoded.coords[None, :, :]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(cost)
    acc = float((reference.types[rows] == decoded.types[cols]).mean())
    return Reconstruction(acc, float(np.sqrt(cost[rows, cols]).mean()))


def fingerprint(mol: Molecule, vocab: AtomVocabulary, radius: int = 2, bonds: BondGraph | None = None) -> frozenset[str]:
    """Set of atom-environment hashes up to ``radius`` bonds (circular fingerprint)."""
    bonds = bonds or infer_bonds(mol, vocab)
    labels = _initial_labels(mol, vocab, bonds)
    bits = set(labels)
    for _ in range(radius):
        labels = _refine(labels, bonds)
        bits.update(labels)
    return frozenset(bits)


def tanimoto(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 1.0


def fingerprint_similarity(mol_a: Molecule, mol_b: Molecule, vocab: AtomVocabulary) -> float:
    return tanimoto(fingerprint(mol_a, vocab), fingerprint(mol_b, vocab))


def similarity_preference(s_t: float, s_s: float) -> float:
    """(s_t - s_s) / (s_t + s_s): +1 means all similarity to the target, -1 to the source."""
    den = s_t + s_s
    if den == 0:
        raise ZeroDivisionError("similarity preference undefined when both similarities are zero")
    return (s_t - s_s) / den


def preference_sequence(
    frames: Sequence[Molecule],
    source: Molecule,
    target: Molecule,
    similarity: Callable[[Molecule, Molecule], float],
) -> list[float]:
    return [similarity_preference(similarity(f, target), similarity(f, source)) for f in frames]


def sp3_fraction(mol: Molecule, vocab: AtomVocabulary, bonds: BondGraph | None = None) -> float:
    """Carbons with exactly four single bonds over all carbons."""
    bonds = bonds or infer_bonds(mol, vocab)
    carbons = [i for i, s in enumerate(mol.symbols(vocab)) if s == "C"]
    if not carbons:
        warnings.warn("no carbon atoms; sp3 fraction set to 0", stacklevel=2)
        return 0.0
    row = bonds.orders
    n_sp3 = sum(1 for i in carbons if (row[i] == 1).sum() == 4 and (row[i] > 1).sum() == 0)
    return n_sp3 / len(carbons)


def radius_of_gyration(mol: Molecule) -> float:
    c = mol.coords - mol.coords.mean(axis=0)
    return float(np.sqrt((c**2).sum(-1).mean()))


@dataclass(frozen=True)
class TrendReport:
    pearson_r: float
    neg_log_p: float

    def significant(self, alpha: float = 0.05) -> bool:
        return self.neg_log_p > -math.log10(alpha)


def pearson_trend(values: Sequence[float], sign: int = 1, max_neg_log_p: float = MAX_NEG_LOG_P) -> TrendReport:
    """Correlation of ``values`` with ``sign * index`` and its two-sided t-test p-value."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    y = np.asarray(values, dtype=np.float64)
    n = y.size
    if n < 3:
        raise DegenerateInputError("need at least three points for a trend test")
    if np.all(y == y[0]):
        raise DegenerateInputError("constant sequence has no defined correlation")
    x = sign * np.arange(n, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    r = float(np.clip((xc @ yc) / math.sqrt((xc @ xc) * (yc @ yc)), -1.0, 1.0))
    df = n - 2
    one_minus = max(1.0 - r * r, 0.0)
    if one_minus == 0.0:
        return TrendReport(r, max_neg_log_p)
    t2 = r * r * df / one_minus
    # two-sided tail of Student's t: I_{df/(df+t^2)}(df/2, 1/2)
    p = float(betainc(0.5 * df, 0.5, df / (df + t2)))
    nlp = max_neg_log_p if p <= 0 else min(-math.log10(p), max_neg_log_p)
    return TrendReport(r, max(nlp, 0.0))


def write_report_csv(path, rows: Sequence[dict]) -> None:
    """Write a list of flat dicts as CSV, columns in first-seen order."""
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def format_table(rows: Sequence[dict], floatfmt: str = ".4f") -> str:
    if not rows:
        return ""
    cols = list(rows[0])

    def fmt(v):
        return format(v, floatfmt) if isinstance(v, float) else str(v)

    cells = [[fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)
    return "\n".join(lines)


def load_similarity_csv(path) -> dict[tuple[str, str], float]:
    """Read externally computed similarities with columns ``id_a, id_b, value``."""
    out = {}
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id_a", "id_b", "value"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"similarity CSV lacks columns {sorted(missing)}")
        for row in reader:
            out[(row["id_a"], row["id_b"])] = float(row["value"])
    return out


def table_similarity(table: dict[tuple[str, str], float]) -> Callable[[Molecule, Molecule], float]:
    """Adapter turning an imported table into a similarity function keyed on molecule names."""

    def sim(a: Molecule, b: Molecule) -> float:
        if (a.name, b.name) in table:
            return table[(a.name, b.name)]
        return table[(b.name, a.name)]

    return sim
