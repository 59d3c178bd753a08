//! Synthetic molecules whose properties are known monotone functions of
//! injected composition factors.
//!
//! Each molecule is a random single-bonded tree over C, N and O. Per molecule
//! an oxygen rate and a nitrogen rate are drawn; the realized oxygen and
//! nitrogen fractions are the two factors. Property `j` is a fixed increasing
//! function of the standardized factor `j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, DatasetError, PropertySpec, RawRow, SplitConfig};
use crate::chem::{emit_smiles, AtomRegistry, MolecularGraph};

pub const PROPERTY_NAMES: [&str; 2] = ["y_oxygen", "y_nitrogen"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Response {
    /// y = 2s
    Linear,
    /// y = 0.5s + 0.1s² + 0.2s³, increasing everywhere
    Cubic,
}

impl Response {
    pub fn apply(self, s: f64) -> f64 {
        match self {
            Response::Linear => 2.0 * s,
            Response::Cubic => 0.5 * s + 0.1 * s * s + 0.2 * s * s * s,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub molecules: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub max_rate: f64,
    pub response: Response,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { molecules: 600, min_atoms: 6, max_atoms: 9, max_rate: 0.45, response: Response::Cubic, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticMolecule {
    pub graph: MolecularGraph,
    /// Realized (oxygen, nitrogen) fractions.
    pub factors: [f64; 2],
}

pub fn generate(cfg: &SyntheticConfig) -> Vec<SyntheticMolecule> {
    let registry = AtomRegistry::qm9();
    let (c, n_idx, o) = (0, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.molecules)
        .map(|_| {
            let n = rng.random_range(cfg.min_atoms..=cfg.max_atoms);
            let p_o = rng.random_range(0.0..cfg.max_rate);
            let p_n = rng.random_range(0.0..cfg.max_rate);
            let mut atoms = Vec::with_capacity(n);
            let mut rem = Vec::with_capacity(n);
            let mut bonds = Vec::with_capacity(n.saturating_sub(1));
            for v in 0..n {
                let u: f64 = rng.random();
                let a = if u < p_o { o } else if u < p_o + p_n { n_idx } else { c };
                atoms.push(a);
                rem.push(registry.max_valence(a) as i32);
                if v > 0 {
                    let open: Vec<usize> = (0..v).filter(|&p| rem[p] > 0).collect();
                    let p = open[rng.random_range(0..open.len())];
                    rem[p] -= 1;
                    rem[v] -= 1;
                    bonds.push((p, v, 1u8));
                }
            }
            let count = |t: usize| atoms.iter().filter(|&&a| a == t).count() as f64 / n as f64;
            let factors = [count(o), count(n_idx)];
            let graph = MolecularGraph::new(atoms, bonds).expect("tree is simple");
            SyntheticMolecule { graph, factors }
        })
        .collect()
}

/// Standardize each factor over the generated set and map it through the
/// response. Returns the dataset and the per-factor (mean, std) used.
pub fn monotone_dataset(cfg: &SyntheticConfig, split: SplitConfig) -> Result<(Dataset, [(f64, f64); 2]), DatasetError> {
    let registry = AtomRegistry::qm9();
    let mols = generate(cfg);
    let m = mols.len() as f64;
    let mut stats = [(0.0, 1.0); 2];
    for (j, st) in stats.iter_mut().enumerate() {
        let mean = mols.iter().map(|x| x.factors[j]).sum::<f64>() / m;
        let var = mols.iter().map(|x| (x.factors[j] - mean).powi(2)).sum::<f64>() / m;
        *st = (mean, if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    let rows = mols
        .into_iter()
        .map(|x| {
            let raw = (0..2).map(|j| cfg.response.apply((x.factors[j] - stats[j].0) / stats[j].1)).collect();
            RawRow { smiles: emit_smiles(&x.graph, &registry), graph: x.graph, raw }
        })
        .collect();
    let specs: Vec<PropertySpec> = PROPERTY_NAMES.iter().map(|n| PropertySpec::column(n)).collect();
    Ok((Dataset::from_rows(rows, &specs, &registry, split, 0)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn molecules_are_valid_trees() {
        let r = AtomRegistry::qm9();
        for m in generate(&SyntheticConfig { molecules: 200, ..Default::default() }) {
            assert!(m.graph.is_valid(&r));
            assert_eq!(m.graph.bonds().len(), m.graph.num_atoms() - 1);
            assert!(m.factors.iter().all(|f| (0.0..=1.0).contains(f)));
        }
    }

    #[test]
    fn cubic_response_is_increasing() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let y = Response::Cubic.apply(-5.0 + i as f64 * 0.01);
            assert!(y > prev);
            prev = y;
        }
    }
}
