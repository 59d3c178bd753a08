//! Sampling, distribution metrics, disentanglement scores and latent
//! traversals.

mod disentangle;
mod divergence;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use disentangle::{
    beta_vae_score, dci_disentanglement, discretize_factors, disentanglement_metrics, factor_vae_score, modularity,
    Disentanglement, DisentanglementConfig,
};
pub use divergence::{
    equal_frequency_bins, gaussian_kernel, kld_property, mi_matrix, mmd, mutual_information, normalized_mi,
    DEFAULT_KLD_BINS, DEFAULT_MI_BINS, KLD_SMOOTHING, MIN_MI_SAMPLES,
};

use crate::autodiff::Tensor;
use crate::chem::{
    canonical_key, clustering_coefficients, degree_histogram, emit_smiles, orbit_counts, CanonicalKey, ChemError,
    MolecularGraph, ORBITS_4,
};
use crate::dataset::{Dataset, DatasetRecord, PropertySource, PropertySpec};
use crate::decoder::{decode_sample, DecoderError};
use crate::encoder::{encode_graph_values, standard_normal};
use crate::heads::{GroupHead, HeadError};
use crate::model::{Model, ModelError};
use crate::training::Checkpoint;

pub const DEFAULT_TRAVERSAL_RANGE: (f64, f64) = (-5.0, 5.0);
pub const CLUSTERING_BINS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{what} needs at least {min} samples, got {got}")]
    TooFew { what: &'static str, min: usize, got: usize },
    #[error("row {row} has {got} entries, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("factor {factor} has fewer than 2 levels")]
    FactorLevels { factor: usize },
    #[error("kernel bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("traversal: {0}")]
    Traversal(String),
    #[error("checkpoint has no training size distribution")]
    NoSizes,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct GeneratedMolecule {
    pub graph: MolecularGraph,
    pub smiles: String,
    pub key: CanonicalKey,
    pub valid: bool,
    /// Source units. Built-in descriptors are computed on the graph; other
    /// properties are head predictions and flagged in `predicted`.
    pub properties: Vec<f64>,
    pub predicted: Vec<bool>,
    /// Node-mean of the latents the molecule was decoded from.
    pub zbar: Vec<f64>,
    /// Latent rows drawn; the decoded graph keeps only the component of
    /// node 0 and may be smaller.
    pub drawn_atoms: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GeneratedSet {
    pub molecules: Vec<GeneratedMolecule>,
}

impl GeneratedSet {
    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    pub fn graphs(&self) -> Vec<&MolecularGraph> {
        self.molecules.iter().map(|m| &m.graph).collect()
    }

    /// CSV with smiles, key, validity, one column per property and the
    /// `;`-joined names of predicted properties.
    pub fn write_csv(&self, specs: &[PropertySpec], path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["smiles".to_owned(), "canonical_key".into(), "valid".into()];
        header.extend(specs.iter().map(|s| s.name.clone()));
        header.push("predicted".into());
        w.write_record(&header)?;
        for m in &self.molecules {
            let mut rec = vec![m.smiles.clone(), m.key.to_hex(), m.valid.to_string()];
            rec.extend(m.properties.iter().map(|v| v.to_string()));
            let flagged: Vec<&str> =
                specs.iter().zip(&m.predicted).filter(|(_, &p)| p).map(|(s, _)| s.name.as_str()).collect();
            rec.push(flagged.join(";"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One `{index}.json` graph file per molecule.
    pub fn write_graph_dir(&self, registry: &crate::chem::AtomRegistry, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        for (i, m) in self.molecules.iter().enumerate() {
            let f = std::fs::File::create(dir.join(format!("{i}.json")))?;
            serde_json::to_writer(f, &m.graph.to_json(registry))?;
        }
        Ok(())
    }
}

/// Head predictions (normalized units) for every property at `zbar`.
pub fn predict_properties(heads: &[GroupHead], zbar: &[f64], num_properties: usize) -> Result<Vec<f64>, EvalError> {
    let mut out = vec![0.0; num_properties];
    for head in heads {
        let z: Vec<f64> = head.group.latent_dims.iter().map(|&d| zbar[d]).collect();
        for (&p, v) in head.group.properties.iter().zip(head.predict(&z)?) {
            out[p] = v;
        }
    }
    Ok(out)
}

fn node_mean(z: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; z.cols];
    for r in 0..z.rows {
        for (a, v) in m.iter_mut().zip(z.row_slice(r)) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= z.rows as f64);
    m
}

fn describe(
    model: &Model,
    heads: &[GroupHead],
    specs: &[PropertySpec],
    graph: MolecularGraph,
    zbar: Vec<f64>,
    drawn_atoms: usize,
) -> Result<GeneratedMolecule, EvalError> {
    let registry = &model.registry;
    let predictions = predict_properties(heads, &zbar, specs.len())?;
    let mut properties = Vec::with_capacity(specs.len());
    let mut predicted = Vec::with_capacity(specs.len());
    for (spec, pred) in specs.iter().zip(predictions) {
        match spec.source {
            PropertySource::Builtin(p) => {
                properties.push(p.compute(&graph, registry));
                predicted.push(false);
            }
            PropertySource::Column(_) => {
                properties.push(spec.denormalize(pred));
                predicted.push(true);
            }
        }
    }
    Ok(GeneratedMolecule {
        key: canonical_key(&graph, registry)?,
        smiles: emit_smiles(&graph, registry),
        valid: graph.is_valid(registry),
        graph,
        properties,
        predicted,
        zbar,
        drawn_atoms,
    })
}

/// `n` molecules: atom count from the training size distribution, per-node
/// latents from N(0, I), then decoding.
pub fn sample_with(
    model: &Model,
    specs: &[PropertySpec],
    size_histogram: &[usize],
    n: usize,
    seed: u64,
) -> Result<GeneratedSet, EvalError> {
    if n == 0 {
        return Err(EvalError::Empty("sample count"));
    }
    let sizes = WeightedIndex::new(size_histogram).map_err(|_| EvalError::NoSizes)?;
    let heads = model.group_heads();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = model.config.latent;
    let mut molecules = Vec::with_capacity(n);
    for _ in 0..n {
        let atoms = sizes.sample(&mut rng);
        if atoms == 0 {
            return Err(EvalError::NoSizes);
        }
        let z = Tensor::new(atoms, l, standard_normal(atoms * l, &mut rng));
        let decode_seed: u64 = rng.random();
        let graph = decode_sample(model, &z, 1.0, decode_seed)?;
        molecules.push(describe(model, &heads, specs, graph, node_mean(&z), atoms)?);
    }
    Ok(GeneratedSet { molecules })
}

pub fn sample_set(ck: &Checkpoint, n: usize, seed: u64) -> Result<GeneratedSet, EvalError> {
    sample_with(&ck.model()?, &ck.specs, &ck.size_histogram, n, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
}

/// Identity is the canonical key. Uniqueness and novelty count distinct keys
/// of valid molecules.
pub fn basic_metrics(generated: &[GeneratedMolecule], train_keys: &HashSet<CanonicalKey>) -> BasicMetrics {
    if generated.is_empty() {
        return BasicMetrics { validity: 0.0, uniqueness: 0.0, novelty: 0.0 };
    }
    let n = generated.len() as f64;
    let valid = generated.iter().filter(|m| m.valid).count();
    let distinct: HashSet<&CanonicalKey> = generated.iter().filter(|m| m.valid).map(|m| &m.key).collect();
    let novel = distinct.iter().filter(|k| !train_keys.contains(**k)).count();
    BasicMetrics {
        validity: valid as f64 / n,
        uniqueness: distinct.len() as f64 / n,
        novelty: if distinct.is_empty() { 0.0 } else { novel as f64 / distinct.len() as f64 },
    }
}

/// Per-graph statistic vectors compared by MMD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GraphStatistic {
    Degree,
    Clustering,
    Orbit,
}

impl GraphStatistic {
    pub const ALL: [GraphStatistic; 3] = [GraphStatistic::Degree, GraphStatistic::Clustering, GraphStatistic::Orbit];

    pub fn name(self) -> &'static str {
        match self {
            GraphStatistic::Degree => "degree",
            GraphStatistic::Clustering => "clustering",
            GraphStatistic::Orbit => "orbit",
        }
    }

    /// Degree and clustering as normalized histograms, orbits as mean
    /// per-node counts.
    pub fn describe(self, g: &MolecularGraph) -> Vec<f64> {
        let n = g.num_atoms().max(1) as f64;
        match self {
            GraphStatistic::Degree => degree_histogram(g).into_iter().map(|c| c as f64 / n).collect(),
            GraphStatistic::Clustering => {
                let mut h = vec![0.0; CLUSTERING_BINS];
                for c in clustering_coefficients(g) {
                    h[((c * CLUSTERING_BINS as f64) as usize).min(CLUSTERING_BINS - 1)] += 1.0 / n;
                }
                h
            }
            GraphStatistic::Orbit => {
                let mut m = vec![0.0; ORBITS_4];
                for row in orbit_counts(g) {
                    for (a, &c) in m.iter_mut().zip(&row) {
                        *a += c as f64 / n;
                    }
                }
                m
            }
        }
    }
}

pub fn mmd_statistics(
    generated: &[&MolecularGraph],
    reference: &[&MolecularGraph],
    sigma: f64,
) -> Result<BTreeMap<String, f64>, EvalError> {
    GraphStatistic::ALL
        .iter()
        .map(|s| {
            let a: Vec<Vec<f64>> = generated.iter().map(|g| s.describe(g)).collect();
            let b: Vec<Vec<f64>> = reference.iter().map(|g| s.describe(g)).collect();
            Ok((s.name().to_owned(), mmd(&a, &b, sigma)?))
        })
        .collect()
}

/// Node-mean of the posterior means, one row per graph.
pub fn latent_means(model: &Model, graphs: &[&MolecularGraph]) -> Vec<Vec<f64>> {
    graphs.iter().map(|g| node_mean(&encode_graph_values(model, g).0)).collect()
}

/// Evenly spaced, first and last values exact. One step gives `[lo]`.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    let last = steps.saturating_sub(1).max(1) as f64;
    (0..steps)
        .map(|i| if i > 0 && i + 1 == steps { hi } else { lo + (hi - lo) * (i as f64 / last) })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TraversalPoint {
    pub value: f64,
    pub graph: MolecularGraph,
    pub smiles: String,
    /// Built-in descriptors computed on the decoded graph, in source units;
    /// `None` for properties that are not computable from the graph.
    pub properties: Vec<Option<f64>>,
    /// Head predictions (normalized units) for the properties of the group
    /// that owns the traversed dimension, listed in `group_properties`.
    pub predictions: Vec<f64>,
    pub group_properties: Vec<usize>,
}

/// Shift coordinate `dim` of every node latent so the node-mean hits each
/// grid value, then decode greedily.
pub fn traverse(
    model: &Model,
    specs: &[PropertySpec],
    dim: usize,
    range: (f64, f64),
    steps: usize,
    base: &Tensor,
) -> Result<Vec<TraversalPoint>, EvalError> {
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(EvalError::Traversal(format!("range [{lo}, {hi}] is empty")));
    }
    if steps < 2 {
        return Err(EvalError::Traversal(format!("need at least 2 steps, got {steps}")));
    }
    if base.cols != model.config.latent || base.rows == 0 {
        return Err(EvalError::Traversal(format!(
            "base latents are {}x{}, expected n x {}",
            base.rows, base.cols, model.config.latent
        )));
    }
    let (g, _) = model
        .groups
        .locate_dim(dim)
        .ok_or_else(|| EvalError::Traversal(format!("latent dim {dim} is not tied to a property")))?;
    let head = &model.group_heads()[g];
    let zbar = node_mean(base);
    linspace(lo, hi, steps)
        .into_iter()
        .map(|value| {
            let mut z = base.clone();
            let shift = value - zbar[dim];
            for r in 0..z.rows {
                z.data[r * z.cols + dim] += shift;
            }
            let graph = decode_sample(model, &z, 0.0, 0)?;
            let coords: Vec<f64> =
                head.group.latent_dims.iter().map(|&d| if d == dim { value } else { zbar[d] }).collect();
            let properties = specs
                .iter()
                .map(|s| match s.source {
                    PropertySource::Builtin(p) => Some(p.compute(&graph, &model.registry)),
                    PropertySource::Column(_) => None,
                })
                .collect();
            Ok(TraversalPoint {
                value,
                smiles: emit_smiles(&graph, &model.registry),
                graph,
                properties,
                predictions: head.predict(&coords)?,
                group_properties: head.group.properties.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub seed: u64,
    pub mmd_sigma: f64,
    pub kld_bins: usize,
    pub mi_bins: usize,
    pub disentanglement: DisentanglementConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
            mmd_sigma: 1.0,
            kld_bins: DEFAULT_KLD_BINS,
            mi_bins: DEFAULT_MI_BINS,
            disentanglement: DisentanglementConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub validity: f64,
    pub novelty: f64,
    pub uniqueness: f64,
    pub mmd: BTreeMap<String, f64>,
    /// Only properties computable from the graph.
    pub kld: BTreeMap<String, f64>,
    /// properties × latent dims
    pub mi: Vec<Vec<f64>>,
    pub disentanglement: Disentanglement,
}

/// Full report: a fresh sample against the validation split (training split
/// when validation is empty) for the distribution metrics, encoder means of
/// the training split for MI and disentanglement.
pub fn evaluate(ck: &Checkpoint, data: &Dataset, cfg: &EvalConfig) -> Result<(MetricReport, GeneratedSet), EvalError> {
    let model = ck.model()?;
    let generated = sample_with(&model, &ck.specs, &ck.size_histogram, cfg.samples, cfg.seed)?;
    let train_keys: HashSet<CanonicalKey> = data.train.iter().map(|r| r.key.clone()).collect();
    let basic = basic_metrics(&generated.molecules, &train_keys);

    let reference: &[DatasetRecord] = if data.valid.is_empty() { &data.train } else { &data.valid };
    let ref_graphs: Vec<&MolecularGraph> = reference.iter().map(|r| &r.graph).collect();
    let mmd = mmd_statistics(&generated.graphs(), &ref_graphs, cfg.mmd_sigma)?;

    let mut kld = BTreeMap::new();
    for (j, spec) in ck.specs.iter().enumerate() {
        if let PropertySource::Builtin(_) = spec.source {
            let gen: Vec<f64> = generated.molecules.iter().map(|m| m.properties[j]).collect();
            let refv: Vec<f64> = reference.iter().map(|r| r.raw[j]).collect();
            kld.insert(spec.name.clone(), kld_property(&gen, &refv, cfg.kld_bins)?);
        }
    }

    let train_graphs: Vec<&MolecularGraph> = data.train.iter().map(|r| &r.graph).collect();
    let zbar = latent_means(&model, &train_graphs);
    let y: Vec<Vec<f64>> = data.train.iter().map(|r| r.properties.clone()).collect();
    let mi = mi_matrix(&zbar, &y, cfg.mi_bins)?;
    let disentanglement = disentanglement_metrics(&zbar, &y, &cfg.disentanglement)?;

    let report = MetricReport {
        validity: basic.validity,
        novelty: basic.novelty,
        uniqueness: basic.uniqueness,
        mmd,
        kld,
        mi,
        disentanglement,
    };
    Ok((report, generated))
}
