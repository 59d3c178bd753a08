use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, DatasetRecord};
use crate::chem::{MolecularGraph, BOND_TYPES};

/// Padded, masked mini-batch. Dense tensors are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n_max: usize,
    pub num_types: usize,
    pub num_props: usize,
    /// B × N_max × K′ one-hot atom types.
    pub node_features: Vec<f64>,
    /// B × N_max × N_max × K one-hot bond types.
    pub adjacency: Vec<f64>,
    /// B × N_max.
    pub node_mask: Vec<bool>,
    /// B × J normalized properties.
    pub properties: Vec<f64>,
    pub sizes: Vec<usize>,
    pub graphs: Vec<MolecularGraph>,
}

impl Batch {
    pub fn from_records(records: &[&DatasetRecord], n_max: usize, num_types: usize) -> Result<Self, DatasetError> {
        let b = records.len();
        let num_props = records.first().map_or(0, |r| r.properties.len());
        let mut out = Batch {
            n_max,
            num_types,
            num_props,
            node_features: vec![0.0; b * n_max * num_types],
            adjacency: vec![0.0; b * n_max * n_max * BOND_TYPES],
            node_mask: vec![false; b * n_max],
            properties: Vec::with_capacity(b * num_props),
            sizes: Vec::with_capacity(b),
            graphs: Vec::with_capacity(b),
        };
        for (bi, rec) in records.iter().enumerate() {
            let g = &rec.graph;
            let n = g.num_atoms();
            if n > n_max {
                return Err(DatasetError::TooLarge { size: n, n_max });
            }
            for (v, &a) in g.atoms().iter().enumerate() {
                out.node_features[(bi * n_max + v) * num_types + a] = 1.0;
                out.node_mask[bi * n_max + v] = true;
            }
            for bond in g.bonds() {
                let k = bond.order as usize - 1;
                out.adjacency[((bi * n_max + bond.i) * n_max + bond.j) * BOND_TYPES + k] = 1.0;
                out.adjacency[((bi * n_max + bond.j) * n_max + bond.i) * BOND_TYPES + k] = 1.0;
            }
            out.properties.extend_from_slice(&rec.properties);
            out.sizes.push(n);
            out.graphs.push(g.clone());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn property(&self, b: usize, j: usize) -> f64 {
        self.properties[b * self.num_props + j]
    }
}

/// Seeded pass over a record slice in batches; the last partial batch is kept.
pub struct Batches<'a> {
    records: &'a [DatasetRecord],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    n_max: usize,
    num_types: usize,
}

pub fn make_batches(
    records: &[DatasetRecord],
    batch_size: usize,
    n_max: usize,
    num_types: usize,
    seed: u64,
) -> Result<Batches<'_>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatch);
    }
    if let Some(r) = records.iter().find(|r| r.graph.num_atoms() > n_max) {
        return Err(DatasetError::TooLarge { size: r.graph.num_atoms(), n_max });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Batches { records, order, pos: 0, batch_size, n_max, num_types })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let chunk: Vec<&DatasetRecord> = self.order[self.pos..end].iter().map(|&i| &self.records[i]).collect();
        self.pos = end;
        Some(Batch::from_records(&chunk, self.n_max, self.num_types).expect("sizes checked up front"))
    }
}
