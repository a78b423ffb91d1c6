"""Build a QM9-like XYZ corpus from the SMILES that ship with RDKit.

QM9 itself cannot be downloaded in every environment, so this script
produces a stand-in: small neutral molecules (<= 9 heavy atoms, elements
C/N/O/F, explicit hydrogens) harvested from RDKit's NCI and WEHI sample sets and
from BRICS fragments of them, embedded with ETKDG and relaxed with MMFF94.

Requires ``rdkit`` (not a runtime dependency of the package).

    python scripts/make_proxy_corpus.py --out data/qm9_like.xyz --max 1500
"""

import argparse
import os
import random

from rdkit import Chem, RDConfig, RDLogger
from rdkit.Chem import AllChem, BRICS

RDLogger.DisableLog("rdApp.*")

ALLOWED = set("CNOF")


def keep(mol):
    if mol is None or len(Chem.GetMolFrags(mol)) != 1:
        return False
    if not 1 <= mol.GetNumHeavyAtoms() <= 9:
        return False
    for atom in mol.GetAtoms():
        if atom.GetSymbol() not in ALLOWED or atom.GetFormalCharge() != 0:
            return False
        if atom.GetNumRadicalElectrons():
            return False
    return True


def cap_dummies(smi):
    # BRICS fragments carry [n*] attachment points; replace them by hydrogen
    mol = Chem.MolFromSmiles(smi)
    if mol is None:
        return None
    rw = Chem.RWMol(mol)
    for atom in rw.GetAtoms():
        if atom.GetAtomicNum() == 0:
            atom.SetAtomicNum(1)
            atom.SetIsotope(0)
    try:
        out = Chem.RemoveHs(rw.GetMol())
        Chem.SanitizeMol(out)
    except Exception:
        return None
    return out


def smiles_sources():
    nci = os.path.join(RDConfig.RDDataDir, "NCI", "first_5K.smi")
    for line in open(nci):
        yield line.split()[0]
    wehi = os.path.join(RDConfig.RDDataDir, "Pains", "test_data", "wehi_mols.csv")
    for line in open(wehi):
        yield line.split(",")[0].strip('"')


def harvest():
    seen = {}
    for smi in smiles_sources():
        mol = Chem.MolFromSmiles(smi)
        if mol is None:
            continue
        if keep(mol):
            seen.setdefault(Chem.MolToSmiles(mol), mol)
        try:
            frags = BRICS.BRICSDecompose(mol)
        except Exception:
            continue
        for frag in frags:
            capped = cap_dummies(frag)
            if keep(capped):
                seen.setdefault(Chem.MolToSmiles(capped), capped)
    return seen


def embed(mol, seed):
    mol = Chem.AddHs(mol)
    params = AllChem.ETKDGv3()
    params.randomSeed = seed
    if AllChem.EmbedMolecule(mol, params) != 0:
        return None
    if AllChem.MMFFOptimizeMolecule(mol, maxIters=2000) != 0:
        return None
    return mol


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/qm9_like.xyz")
    ap.add_argument("--max", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    pool = harvest()
    keys = sorted(pool)
    random.Random(args.seed).shuffle(keys)
    written = 0
    with open(args.out, "w") as fh:
        for key in keys:
            if written >= args.max:
                break
            mol = embed(pool[key], args.seed)
            if mol is None:
                continue
            conf = mol.GetConformer()
            fh.write(f"{mol.GetNumAtoms()}\n{key}\n")
            for i, atom in enumerate(mol.GetAtoms()):
                p = conf.GetAtomPosition(i)
                fh.write(f"{atom.GetSymbol()} {p.x:.6f} {p.y:.6f} {p.z:.6f}\n")
            written += 1
    print(f"{len(pool)} candidates, wrote {written} molecules to {args.out}")


if __name__ == "__main__":
    main()
