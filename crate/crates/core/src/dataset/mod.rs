//! Ingestion, property normalization, splitting and batching.

mod batch;
mod props;
pub mod synthetic;

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chem::{canonical_key, AtomRegistry, CanonicalKey, ChemError, MolecularGraph, SmilesParser};
use crate::container::{self, ContainerError};

pub use batch::{make_batches, Batch, Batches};
pub use props::{compute_property, hydrogen_contribution, logp_atom_contrib, logp_type, BuiltinProperty, LogpType};

const CACHE_MAGIC: &[u8; 8] = b"MDVAEDS\0";
const CACHE_VERSION: u32 = 1;

/// Validation share matching a 120k/20k train/validation split.
pub const DEFAULT_VALID_FRACTION: f64 = 1.0 / 7.0;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("no usable molecules ({skipped} rows skipped)")]
    Empty { skipped: usize },
    #[error("unknown property {0:?}")]
    UnknownProperty(String),
    #[error("molecule with {size} atoms exceeds N_max = {n_max}")]
    TooLarge { size: usize, n_max: usize },
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("cache: {0}")]
    Cache(#[from] ContainerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PropertySource {
    Builtin(BuiltinProperty),
    Column(String),
}

/// One targeted property and its normalization, fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertySpec {
    pub name: String,
    pub source: PropertySource,
    pub mean: f64,
    pub std: f64,
}

impl PropertySpec {
    pub fn builtin(p: BuiltinProperty) -> Self {
        Self { name: p.name().to_owned(), source: PropertySource::Builtin(p), mean: 0.0, std: 1.0 }
    }

    pub fn column(name: &str) -> Self {
        Self { name: name.to_owned(), source: PropertySource::Column(name.to_owned()), mean: 0.0, std: 1.0 }
    }

    /// Comma-separated names; built-in descriptor names are computed, anything
    /// else is read from the CSV column of that name.
    pub fn parse_list(list: &str) -> Vec<Self> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match BuiltinProperty::from_name(s) {
                Some(p) => Self::builtin(p),
                None => Self::column(s),
            })
            .collect()
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub graph: MolecularGraph,
    pub smiles: String,
    /// Property values in source units.
    pub raw: Vec<f64>,
    /// Normalized property values, the `Y` the model sees.
    pub properties: Vec<f64>,
    pub key: CanonicalKey,
}

/// A parsed row before sorting, splitting and normalization.
#[derive(Debug, Clone)]
pub struct RawRow {
    pub graph: MolecularGraph,
    pub smiles: String,
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { valid_fraction: DEFAULT_VALID_FRACTION, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub registry: AtomRegistry,
    pub specs: Vec<PropertySpec>,
    pub train: Vec<DatasetRecord>,
    pub valid: Vec<DatasetRecord>,
    /// Rows dropped during ingestion (unparseable, invalid, bad property).
    pub skipped: usize,
}

pub fn ingest(
    path: &Path,
    specs: &[PropertySpec],
    registry: &AtomRegistry,
    parser: &dyn SmilesParser,
    split: SplitConfig,
) -> Result<Dataset, DatasetError> {
    ingest_reader(std::fs::File::open(path)?, specs, registry, parser, split)
}

pub fn ingest_reader<R: Read>(
    input: R,
    specs: &[PropertySpec],
    registry: &AtomRegistry,
    parser: &dyn SmilesParser,
    split: SplitConfig,
) -> Result<Dataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_owned()))
    };
    let smiles_col = column("smiles")?;
    let sources: Vec<Option<usize>> = specs
        .iter()
        .map(|s| match &s.source {
            PropertySource::Builtin(_) => Ok(None),
            PropertySource::Column(c) => column(c).map(Some),
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut skipped = 0;
    for record in reader.records() {
        let record = record?;
        let Some(text) = record.get(smiles_col) else {
            skipped += 1;
            continue;
        };
        let graph = match parser.parse(text, registry) {
            Ok(g) if g.is_valid(registry) => g,
            _ => {
                skipped += 1;
                continue;
            }
        };
        let raw: Option<Vec<f64>> = specs
            .iter()
            .zip(&sources)
            .map(|(spec, col)| match (&spec.source, col) {
                (PropertySource::Builtin(p), _) => Some(p.compute(&graph, registry)),
                (_, Some(c)) => record.get(*c).and_then(|v| v.parse::<f64>().ok()),
                _ => None,
            })
            .map(|v| v.filter(|x| x.is_finite()))
            .collect();
        match raw {
            Some(raw) => rows.push(RawRow { graph, smiles: text.to_owned(), raw }),
            None => skipped += 1,
        }
    }
    Dataset::from_rows(rows, specs, registry, split, skipped)
}

impl Dataset {
    /// Sort by canonical key, split with a seeded shuffle, fit normalization on
    /// the training part.
    pub fn from_rows(
        rows: Vec<RawRow>,
        specs: &[PropertySpec],
        registry: &AtomRegistry,
        split: SplitConfig,
        mut skipped: usize,
    ) -> Result<Self, DatasetError> {
        let mut keyed = Vec::with_capacity(rows.len());
        for row in rows {
            match canonical_key(&row.graph, registry) {
                Ok(key) => keyed.push((key, row)),
                Err(_) => skipped += 1,
            }
        }
        if keyed.is_empty() {
            return Err(DatasetError::Empty { skipped });
        }
        keyed.sort_by(|(ka, a), (kb, b)| {
            ka.cmp(kb)
                .then_with(|| {
                    a.raw
                        .iter()
                        .zip(&b.raw)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .then_with(|| a.smiles.cmp(&b.smiles))
        });

        let n = keyed.len();
        let n_valid = ((n as f64 * split.valid_fraction).round() as usize).min(n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
        let mut is_valid = vec![false; n];
        for &i in &order[..n_valid] {
            is_valid[i] = true;
        }

        let mut specs = specs.to_vec();
        for (j, spec) in specs.iter_mut().enumerate() {
            let values: Vec<f64> = keyed
                .iter()
                .enumerate()
                .filter(|(i, _)| !is_valid[*i])
                .map(|(_, (_, r))| r.raw[j])
                .collect();
            let m = values.len() as f64;
            let mean = values.iter().sum::<f64>() / m;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            spec.mean = mean;
            spec.std = if var.sqrt() > 0.0 && var.is_finite() { var.sqrt() } else { 1.0 };
        }

        let mut train = Vec::with_capacity(n - n_valid);
        let mut valid = Vec::with_capacity(n_valid);
        for (i, (key, row)) in keyed.into_iter().enumerate() {
            let properties = row.raw.iter().zip(&specs).map(|(&y, s)| s.normalize(y)).collect();
            let rec = DatasetRecord { graph: row.graph, smiles: row.smiles, raw: row.raw, properties, key };
            if is_valid[i] {
                valid.push(rec);
            } else {
                train.push(rec);
            }
        }
        Ok(Self { registry: registry.clone(), specs, train, valid, skipped })
    }

    pub fn num_properties(&self) -> usize {
        self.specs.len()
    }

    pub fn max_atoms(&self) -> usize {
        self.train.iter().chain(&self.valid).map(|r| r.graph.num_atoms()).max().unwrap_or(0)
    }

    /// `hist[n]` = number of training molecules with `n` atoms.
    pub fn size_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.max_atoms() + 1];
        for r in &self.train {
            hist[r.graph.num_atoms()] += 1;
        }
        hist
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        Ok(container::save(path, CACHE_MAGIC, CACHE_VERSION, self)?)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Ok(container::load(path, CACHE_MAGIC, CACHE_VERSION)?)
    }
}
