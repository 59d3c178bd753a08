use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{AtomRegistry, ChemError, HYDROGEN_MASS};

/// Number of bond types (single, double, triple).
pub const BOND_TYPES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

/// Hydrogen-suppressed molecular graph.
///
/// Atoms are indices into an [`AtomRegistry`]. Bonds are stored with `i < j`
/// and sorted, so two graphs with the same labelled structure compare equal.
/// Construction only checks the simple-graph invariants; valence is checked by
/// [`MolecularGraph::is_valid`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct MolecularGraph {
    atoms: Vec<usize>,
    bonds: Vec<Bond>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    atoms: Vec<usize>,
    bonds: Vec<(usize, usize, u8)>,
}

impl TryFrom<RawGraph> for MolecularGraph {
    type Error = ChemError;
    fn try_from(raw: RawGraph) -> Result<Self, ChemError> {
        MolecularGraph::new(raw.atoms, raw.bonds)
    }
}

impl From<MolecularGraph> for RawGraph {
    fn from(g: MolecularGraph) -> Self {
        RawGraph {
            atoms: g.atoms,
            bonds: g.bonds.iter().map(|b| (b.i, b.j, b.order)).collect(),
        }
    }
}

impl MolecularGraph {
    pub fn new(
        atoms: Vec<usize>,
        bonds: impl IntoIterator<Item = (usize, usize, u8)>,
    ) -> Result<Self, ChemError> {
        let n = atoms.len();
        let mut out: Vec<Bond> = Vec::new();
        for (a, b, order) in bonds {
            if a >= n || b >= n {
                return Err(ChemError::Structure(format!(
                    "bond ({a},{b}) references a missing atom"
                )));
            }
            if a == b {
                return Err(ChemError::Structure(format!("self-loop on atom {a}")));
            }
            if !(1..=3).contains(&order) {
                return Err(ChemError::Structure(format!("bond order {order}")));
            }
            out.push(Bond {
                i: a.min(b),
                j: a.max(b),
                order,
            });
        }
        out.sort();
        if out.windows(2).any(|w| w[0].i == w[1].i && w[0].j == w[1].j) {
            return Err(ChemError::Structure("duplicate bond".into()));
        }
        Ok(Self { atoms, bonds: out })
    }

    pub fn single_atom(atom: usize) -> Self {
        Self {
            atoms: vec![atom],
            bonds: Vec::new(),
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[usize] {
        &self.atoms
    }

    pub fn atom(&self, v: usize) -> usize {
        self.atoms[v]
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn bond_order(&self, a: usize, b: usize) -> Option<u8> {
        let (i, j) = (a.min(b), a.max(b));
        self.bonds
            .iter()
            .find(|bd| bd.i == i && bd.j == j)
            .map(|bd| bd.order)
    }

    /// Per-node neighbour lists `(neighbour, order)`, sorted by neighbour.
    pub fn adjacency(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.i].push((b.j, b.order));
            adj[b.j].push((b.i, b.order));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Dense order matrix, zero where there is no bond.
    pub fn order_matrix(&self) -> Vec<Vec<u8>> {
        let n = self.atoms.len();
        let mut m = vec![vec![0u8; n]; n];
        for b in &self.bonds {
            m[b.i][b.j] = b.order;
            m[b.j][b.i] = b.order;
        }
        m
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.atoms.len()];
        for b in &self.bonds {
            d[b.i] += 1;
            d[b.j] += 1;
        }
        d
    }

    /// Sum of incident bond orders per node.
    pub fn bond_order_sums(&self) -> Vec<u32> {
        let mut s = vec![0u32; self.atoms.len()];
        for b in &self.bonds {
            s[b.i] += b.order as u32;
            s[b.j] += b.order as u32;
        }
        s
    }

    pub fn implicit_hydrogens(&self, registry: &AtomRegistry) -> Vec<u32> {
        self.bond_order_sums()
            .iter()
            .zip(&self.atoms)
            .map(|(&used, &a)| (registry.max_valence(a) as u32).saturating_sub(used))
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.atoms.is_empty() {
            return false;
        }
        self.component_of(0).len() == self.atoms.len()
    }

    /// Nodes reachable from `root`, in increasing index order.
    pub fn component_of(&self, root: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.atoms.len()];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(v) = queue.pop_front() {
            for &(u, _) in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        (0..self.atoms.len()).filter(|&v| seen[v]).collect()
    }

    /// Subgraph induced by `nodes`, renumbered in the given order.
    pub fn induced(&self, nodes: &[usize]) -> Self {
        let mut index = vec![usize::MAX; self.atoms.len()];
        for (new, &old) in nodes.iter().enumerate() {
            index[old] = new;
        }
        let atoms = nodes.iter().map(|&v| self.atoms[v]).collect();
        let bonds = self
            .bonds
            .iter()
            .filter(|b| index[b.i] != usize::MAX && index[b.j] != usize::MAX)
            .map(|b| (index[b.i], index[b.j], b.order));
        Self::new(atoms, bonds).expect("induced subgraph of a simple graph is simple")
    }

    /// Relabel nodes: old node `v` becomes node `perm[v]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.atoms.len());
        let mut atoms = vec![0; self.atoms.len()];
        for (v, &p) in perm.iter().enumerate() {
            atoms[p] = self.atoms[v];
        }
        let bonds = self.bonds.iter().map(|b| (perm[b.i], perm[b.j], b.order));
        Self::new(atoms, bonds).expect("permutation preserves simplicity")
    }

    pub fn remove_bond(&self, a: usize, b: usize) -> Self {
        let (i, j) = (a.min(b), a.max(b));
        Self {
            atoms: self.atoms.clone(),
            bonds: self
                .bonds
                .iter()
                .copied()
                .filter(|bd| !(bd.i == i && bd.j == j))
                .collect(),
        }
    }

    /// Valence respected at every node, atoms known to the registry, and a
    /// single connected component.
    pub fn is_valid(&self, registry: &AtomRegistry) -> bool {
        if self.atoms.is_empty() || self.atoms.iter().any(|&a| a >= registry.len()) {
            return false;
        }
        let valence_ok = self
            .bond_order_sums()
            .iter()
            .zip(&self.atoms)
            .all(|(&used, &a)| used <= registry.max_valence(a) as u32);
        valence_ok && self.is_connected()
    }

    pub fn molecular_weight(&self, registry: &AtomRegistry) -> f64 {
        let heavy: f64 = self.atoms.iter().map(|&a| registry.get(a).mass).sum();
        let hydrogens: u32 = self.implicit_hydrogens(registry).iter().sum();
        heavy + HYDROGEN_MASS * hydrogens as f64
    }

    pub fn to_json(&self, registry: &AtomRegistry) -> GraphJson {
        GraphJson {
            atoms: self
                .atoms
                .iter()
                .map(|&a| registry.symbol(a).to_owned())
                .collect(),
            bonds: self.bonds.iter().map(|b| [b.i, b.j, b.order as usize]).collect(),
        }
    }

    pub fn from_json(json: &GraphJson, registry: &AtomRegistry) -> Result<Self, ChemError> {
        let atoms = json
            .atoms
            .iter()
            .map(|s| {
                registry
                    .index_of(s)
                    .ok_or_else(|| ChemError::UnknownElement(s.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let bonds = json
            .bonds
            .iter()
            .map(|&[i, j, o]| (i, j, u8::try_from(o).unwrap_or(u8::MAX)));
        Self::new(atoms, bonds)
    }
}

/// Interchange form: `{"atoms": ["C","O"], "bonds": [[0,1,2]]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphJson {
    pub atoms: Vec<String>,
    pub bonds: Vec<[usize; 3]>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> AtomRegistry {
        AtomRegistry::qm9()
    }

    #[test]
    fn lone_carbon_is_valid() {
        assert!(MolecularGraph::single_atom(0).is_valid(&reg()));
    }

    #[test]
    fn pentavalent_carbon_is_invalid() {
        let g = MolecularGraph::new(vec![0; 6], (1..6).map(|j| (0, j, 1))).unwrap();
        assert!(!g.is_valid(&reg()));
    }

    #[test]
    fn oxygen_with_two_double_bonds_is_invalid() {
        let g = MolecularGraph::new(vec![2, 0, 0], [(0, 1, 2), (0, 2, 2)]).unwrap();
        assert!(!g.is_valid(&reg()));
    }

    #[test]
    fn disconnected_is_invalid() {
        let g = MolecularGraph::new(vec![0, 0], []).unwrap();
        assert!(!g.is_valid(&reg()));
    }

    #[test]
    fn structural_errors() {
        assert!(MolecularGraph::new(vec![0, 0], [(0, 0, 1)]).is_err());
        assert!(MolecularGraph::new(vec![0, 0], [(0, 1, 1), (1, 0, 2)]).is_err());
        assert!(MolecularGraph::new(vec![0, 0], [(0, 2, 1)]).is_err());
        assert!(MolecularGraph::new(vec![0, 0], [(0, 1, 4)]).is_err());
    }

    #[test]
    fn json_shape() {
        let g = MolecularGraph::new(vec![0, 2], [(1, 0, 2)]).unwrap();
        let js = serde_json::to_string(&g.to_json(&reg())).unwrap();
        assert_eq!(js, r#"{"atoms":["C","O"],"bonds":[[0,1,2]]}"#);
        let back: GraphJson = serde_json::from_str(&js).unwrap();
        assert_eq!(MolecularGraph::from_json(&back, &reg()).unwrap(), g);
    }

    #[test]
    fn methane_and_water_weights() {
        let r = reg();
        assert!((MolecularGraph::single_atom(0).molecular_weight(&r) - 16.043).abs() < 1e-9);
        assert!((MolecularGraph::single_atom(2).molecular_weight(&r) - 18.015).abs() < 1e-9);
    }
}
