"""Regenerate the bundled molecule tables under data/.

Requires rdkit and the MOSES training split (train.csv.gz from the `molsets`
source distribution). Output is deterministic for a fixed --seed.

  qm9_style_1k.csv   1000 small molecules (<= 9 heavy atoms, C/N/O/F only),
                     cut as connected fragments out of MOSES molecules
  zinc_sample.csv    200 kekulized MOSES molecules (ZINC alphabet)
  qm9_style_1k.rdkit.csv  per-line reference counts from rdkit, used by the
                     parser cross-check tests
"""
import argparse
import csv
import gzip
import random

from rdkit import Chem, RDLogger
from rdkit.Chem import QED, Crippen, Descriptors, Lipinski, rdMolDescriptors

RDLogger.DisableLog("rdApp.*")

QM9_ATOMS = {"C", "N", "O", "F"}
ZINC_ATOMS = {"C", "N", "O", "F", "P", "S", "Cl", "Br", "I"}
SIZE_WEIGHTS = {9: 0.75, 8: 0.15, 7: 0.06, 6: 0.02, 5: 0.01, 4: 0.005, 3: 0.005}


def esol(mol):
    logp = Crippen.MolLogP(mol)
    mw = Descriptors.MolWt(mol)
    rb = Lipinski.NumRotatableBonds(mol)
    heavy = mol.GetNumHeavyAtoms()
    arom = sum(1 for a in mol.GetAtoms() if a.GetIsAromatic())
    ap = arom / heavy if heavy else 0.0
    return 0.16 - 0.63 * logp - 0.0062 * mw + 0.066 * rb - 0.74 * ap


def props(mol):
    return {
        "clogp": round(Crippen.MolLogP(mol), 6),
        "clogs": round(esol(mol), 6),
        "mw": round(Descriptors.MolWt(mol), 6),
        "qed": round(QED.qed(mol), 6),
        "tpsa": round(rdMolDescriptors.CalcTPSA(mol), 6),
    }


def kekule_smiles(mol):
    mol = Chem.Mol(mol)
    Chem.Kekulize(mol, clearAromaticFlags=True)
    return Chem.MolToSmiles(mol, kekuleSmiles=True)


def fragment(parent, rng, size):
    Chem.Kekulize(parent, clearAromaticFlags=True)
    allowed = [
        a.GetIdx()
        for a in parent.GetAtoms()
        if a.GetSymbol() in QM9_ATOMS and a.GetFormalCharge() == 0
    ]
    if not allowed:
        return None
    chosen = [rng.choice(allowed)]
    frontier = set()
    while len(chosen) < size:
        for n in parent.GetAtomWithIdx(chosen[-1]).GetNeighbors():
            if n.GetIdx() in allowed and n.GetIdx() not in chosen:
                frontier.add(n.GetIdx())
        frontier -= set(chosen)
        if not frontier:
            break
        chosen.append(rng.choice(sorted(frontier)))
    if len(chosen) != size:
        return None
    rw = Chem.RWMol()
    index = {}
    for idx in chosen:
        atom = Chem.Atom(parent.GetAtomWithIdx(idx).GetSymbol())
        index[idx] = rw.AddAtom(atom)
    for bond in parent.GetBonds():
        a, b = bond.GetBeginAtomIdx(), bond.GetEndAtomIdx()
        if a in index and b in index:
            rw.AddBond(index[a], index[b], bond.GetBondType())
    mol = rw.GetMol()
    try:
        Chem.SanitizeMol(mol)
    except Exception:
        return None
    return mol


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--moses", required=True)
    ap.add_argument("--out", default="data")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    rng = random.Random(args.seed)

    with gzip.open(args.moses, "rt") as fh:
        parents = [line.strip() for line in fh][1:]
    rng.shuffle(parents)

    sizes, weights = zip(*SIZE_WEIGHTS.items())
    seen = set()
    small = []
    for smi in parents:
        if len(small) >= 1000:
            break
        parent = Chem.MolFromSmiles(smi)
        if parent is None:
            continue
        size = rng.choices(sizes, weights)[0]
        mol = fragment(parent, rng, size)
        if mol is None:
            continue
        key = Chem.MolToSmiles(mol)
        if key in seen:
            continue
        seen.add(key)
        small.append(mol)

    fields = ["smiles", "clogp", "clogs", "mw", "qed", "tpsa"]
    with open(f"{args.out}/qm9_style_1k.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for mol in small:
            w.writerow({"smiles": kekule_smiles(mol), **props(mol)})

    with open(f"{args.out}/qm9_style_1k.rdkit.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["smiles", "heavy_atoms", "bonds", "bond_order_sum", "implicit_h"])
        for mol in small:
            smi = kekule_smiles(mol)
            m = Chem.MolFromSmiles(smi)
            Chem.Kekulize(m, clearAromaticFlags=True)
            orders = sum(int(b.GetBondTypeAsDouble()) for b in m.GetBonds())
            hs = sum(a.GetTotalNumHs() for a in m.GetAtoms())
            w.writerow([smi, m.GetNumHeavyAtoms(), m.GetNumBonds(), orders, hs])

    zinc = []
    for smi in parents[-5000:]:
        if len(zinc) >= 200:
            break
        mol = Chem.MolFromSmiles(smi)
        if mol is None:
            continue
        if any(a.GetSymbol() not in ZINC_ATOMS or a.GetFormalCharge() != 0 for a in mol.GetAtoms()):
            continue
        zinc.append(mol)
    with open(f"{args.out}/zinc_sample.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for mol in zinc:
            w.writerow({"smiles": kekule_smiles(mol), **props(mol)})


if __name__ == "__main__":
    main()
