use serde::{Deserialize, Serialize};

use super::ChemError;

/// Mass of one hydrogen atom in unified atomic mass units.
pub const HYDROGEN_MASS: f64 = 1.008;

/// An element the model can place as a heavy atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSpec {
    pub symbol: String,
    pub mass: f64,
    pub max_valence: u8,
}

impl AtomSpec {
    pub fn new(symbol: &str, mass: f64, max_valence: u8) -> Self {
        Self {
            symbol: symbol.to_owned(),
            mass,
            max_valence,
        }
    }
}

/// Ordered atom alphabet. The position of an element is its one-hot index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomRegistry {
    atoms: Vec<AtomSpec>,
}

impl AtomRegistry {
    pub fn new(atoms: Vec<AtomSpec>) -> Result<Self, ChemError> {
        if atoms.is_empty() {
            return Err(ChemError::Registry("registry is empty".into()));
        }
        for (i, a) in atoms.iter().enumerate() {
            if a.max_valence < 1 {
                return Err(ChemError::Registry(format!(
                    "{} has max valence 0",
                    a.symbol
                )));
            }
            if atoms[..i].iter().any(|b| b.symbol == a.symbol) {
                return Err(ChemError::Registry(format!(
                    "duplicate symbol {}",
                    a.symbol
                )));
            }
        }
        Ok(Self { atoms })
    }

    /// C, N, O, F.
    pub fn qm9() -> Self {
        Self {
            atoms: vec![
                AtomSpec::new("C", 12.011, 4),
                AtomSpec::new("N", 14.007, 3),
                AtomSpec::new("O", 15.999, 2),
                AtomSpec::new("F", 18.998, 1),
            ],
        }
    }

    /// The QM9 alphabet extended with P, S, Cl, Br and I.
    pub fn zinc() -> Self {
        let mut atoms = Self::qm9().atoms;
        atoms.extend([
            AtomSpec::new("P", 30.974, 5),
            AtomSpec::new("S", 32.06, 6),
            AtomSpec::new("Cl", 35.45, 1),
            AtomSpec::new("Br", 79.904, 1),
            AtomSpec::new("I", 126.904, 1),
        ]);
        Self { atoms }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn get(&self, index: usize) -> &AtomSpec {
        &self.atoms[index]
    }

    pub fn atoms(&self) -> &[AtomSpec] {
        &self.atoms
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.atoms.iter().position(|a| a.symbol == symbol)
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.atoms[index].symbol
    }

    pub fn max_valence(&self, index: usize) -> u8 {
        self.atoms[index].max_valence
    }
}

impl Default for AtomRegistry {
    fn default() -> Self {
        Self::qm9()
    }
}
