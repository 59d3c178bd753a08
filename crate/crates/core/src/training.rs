//! Optimization loop, configuration and checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::chem::AtomRegistry;
use crate::container::{self, ContainerError};
use crate::dataset::{Batch, Dataset, DatasetRecord, PropertySpec};
use crate::encoder::standard_normal;
use crate::heads::GroupSpec;
use crate::model::{Model, ModelConfig, ModelError};
use crate::objectives::{derangement, loss_and_gradients, total_loss, LossBreakdown, LossInputs, LossWeights, ObjectiveError};

const CHECKPOINT_MAGIC: &[u8; 8] = b"MDVAECK\0";
const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.mdvae";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrainingSet,
    #[error("step {step}: {source}")]
    Objective { step: u64, source: ObjectiveError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint was trained with atom types {found:?}, expected {expected:?}")]
    RegistryMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("log: {0}")]
    Log(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub propagation_steps: usize,
    pub poly_degree: usize,
    /// Names of the targeted properties; empty means every dataset property.
    pub properties: Vec<String>,
    /// Defaults to one latent dim per property, dims 0..J.
    pub groups: Option<GroupSpec>,
    /// Share of all steps over which the KL weight ramps up from 0.
    pub kl_warmup_fraction: f64,
    pub clip_norm: f64,
    /// Randomly renumber each molecule's atoms every epoch.
    pub relabel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::qm9()
    }
}

impl TrainConfig {
    pub fn qm9() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 64,
            epochs: 10,
            weights: LossWeights::default(),
            seed: 0,
            latent_dim: 100,
            hidden_dim: 100,
            propagation_steps: 2,
            poly_degree: 3,
            properties: Vec::new(),
            groups: None,
            kl_warmup_fraction: 0.1,
            clip_norm: 10.0,
            relabel: true,
        }
    }

    pub fn zinc() -> Self {
        Self { batch_size: 8, epochs: 5, ..Self::qm9() }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden_dim,
            latent: self.latent_dim,
            steps: self.propagation_steps,
            degree: self.poly_degree,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return bad("kl_warmup_fraction must lie in [0, 1]".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        self.weights.validate().map_err(TrainError::Config)
    }
}

/// Everything needed to rebuild the trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub registry: AtomRegistry,
    pub groups: GroupSpec,
    pub params: ParamStore,
    /// Normalization of the targeted properties, in head order.
    pub specs: Vec<PropertySpec>,
    pub train_config: TrainConfig,
    pub step: u64,
    pub epoch: usize,
    /// `size_histogram[n]` = training molecules with `n` atoms.
    pub size_histogram: Vec<usize>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, specs: Vec<PropertySpec>, cfg: &TrainConfig, step: u64, epoch: usize, hist: Vec<usize>) -> Self {
        Self {
            model_config: model.config,
            registry: model.registry.clone(),
            groups: model.groups.clone(),
            params: model.params.clone(),
            specs,
            train_config: cfg.clone(),
            step,
            epoch,
            size_histogram: hist,
        }
    }

    pub fn model(&self) -> Result<Model, ModelError> {
        Model::from_params(self.model_config, self.registry.clone(), self.groups.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        container::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        container::decode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(container::save(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Ok(container::load(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?)
    }

    /// Load and insist on the given atom registry.
    pub fn load_for(path: &Path, registry: &AtomRegistry) -> Result<Self, TrainError> {
        let ck = Self::load(path)?;
        if &ck.registry != registry {
            let names = |r: &AtomRegistry| r.atoms().iter().map(|a| a.symbol.clone()).collect();
            return Err(TrainError::RegistryMismatch { expected: names(registry), found: names(&ck.registry) });
        }
        Ok(ck)
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((t, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                t.data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// KL weight in effect at `step` (0-based) of `total` steps.
pub fn kl_weight(lambda: f64, step: u64, total: u64, warmup_fraction: f64) -> f64 {
    let warm = (warmup_fraction * total as f64).ceil();
    if warm <= 0.0 {
        lambda
    } else {
        lambda * (step as f64 / warm).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub recon: f64,
    pub kl: f64,
    pub dip: f64,
    pub prop_nll: f64,
    pub mono: f64,
    pub total: f64,
}

impl LogRow {
    fn new(step: u64, b: &LossBreakdown) -> Self {
        Self { step, recon: b.recon, kl: b.kl, dip: b.dip, prop_nll: b.prop_nll, mono: b.mono, total: b.total }
    }
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Rewritten after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Per-step CSV log, rewritten after every epoch.
    pub log: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl TrainOptions {
    /// Checkpoint and log under their default names in `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self { checkpoint: Some(dir.join(CHECKPOINT_FILE)), log: Some(dir.join(LOG_FILE)), verbose: false }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Property columns selected by `config.properties`, and their specs.
fn select_properties(dataset: &Dataset, config: &TrainConfig) -> Result<(Vec<usize>, Vec<PropertySpec>), TrainError> {
    let idx: Vec<usize> = if config.properties.is_empty() {
        (0..dataset.num_properties()).collect()
    } else {
        config
            .properties
            .iter()
            .map(|name| {
                dataset
                    .specs
                    .iter()
                    .position(|s| &s.name == name)
                    .ok_or_else(|| TrainError::Config(format!("dataset has no property {name:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    let specs = idx.iter().map(|&j| dataset.specs[j].clone()).collect();
    Ok((idx, specs))
}

fn project(records: &[DatasetRecord], idx: &[usize]) -> Vec<DatasetRecord> {
    records
        .iter()
        .map(|r| DatasetRecord {
            raw: idx.iter().map(|&j| r.raw[j]).collect(),
            properties: idx.iter().map(|&j| r.properties[j]).collect(),
            ..r.clone()
        })
        .collect()
}

/// Shuffled chunks of `batch_size`; a trailing single molecule joins the
/// previous chunk since the covariance penalty needs two.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        let last = chunks.pop().expect("nonempty");
        chunks.last_mut().expect("nonempty").extend(last);
    }
    chunks
}

/// Batch of the given records, each optionally renumbered at random.
fn assemble(records: &[DatasetRecord], chunk: &[usize], n_max: usize, k: usize, relabel: Option<&mut ChaCha8Rng>) -> Batch {
    let picked: Vec<DatasetRecord> = match relabel {
        None => chunk.iter().map(|&i| records[i].clone()).collect(),
        Some(rng) => chunk
            .iter()
            .map(|&i| {
                let r = &records[i];
                let mut perm: Vec<usize> = (0..r.graph.num_atoms()).collect();
                perm.shuffle(rng);
                DatasetRecord { graph: r.graph.permute(&perm), ..r.clone() }
            })
            .collect(),
    };
    let refs: Vec<&DatasetRecord> = picked.iter().collect();
    Batch::from_records(&refs, n_max, k).expect("sizes bounded by n_max")
}

/// Noise tensors for one batch, one n×L block per molecule.
pub fn batch_noise(batch: &Batch, latent: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    batch
        .graphs
        .iter()
        .map(|g| Tensor::new(g.num_atoms(), latent, standard_normal(g.num_atoms() * latent, rng)))
        .collect()
}

pub fn train(dataset: &Dataset, config: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let (idx, specs) = select_properties(dataset, config)?;
    let records = project(&dataset.train, &idx);
    let groups = config.groups.clone().unwrap_or_else(|| GroupSpec::singletons(idx.len()));
    if groups.num_properties() != idx.len() {
        return Err(TrainError::Config(format!(
            "group spec covers {} properties, {} targeted",
            groups.num_properties(),
            idx.len()
        )));
    }
    if records.len() < 2 {
        return Err(TrainError::Config("need at least two training molecules".into()));
    }
    let mut model = Model::new(config.model_config(), dataset.registry.clone(), groups, config.seed)?;
    let n_max = dataset.max_atoms();
    let k = dataset.registry.len();
    let hist = dataset.size_histogram();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
    let batches_per_epoch = epoch_batches(records.len(), config.batch_size, &mut rng.clone()).len() as u64;
    let total_steps = batches_per_epoch * config.epochs as u64;
    let mut adam = Adam::new(config.learning_rate, &model.params);
    let mut log = Vec::new();
    let mut step = 0u64;
    for path in opts.checkpoint.iter().chain(&opts.log) {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
    }

    for epoch in 0..config.epochs {
        let chunks = epoch_batches(records.len(), config.batch_size, &mut rng);
        let mut epoch_total = 0.0;
        for chunk in &chunks {
            let batch = assemble(&records, chunk, n_max, k, config.relabel.then_some(&mut rng));
            let noise = batch_noise(&batch, model.config.latent, &mut rng);
            let pairing = derangement(batch.len(), &mut rng);
            let inputs = LossInputs { batch: &batch, noise: &noise, pairing: Some(&pairing) };
            let lambda = kl_weight(config.weights.lambda, step, total_steps, config.kl_warmup_fraction);
            let (breakdown, mut grads) = loss_and_gradients(&model, &inputs, &config.weights, lambda)
                .map_err(|source| TrainError::Objective { step, source })?;
            clip_gradients(&mut grads, config.clip_norm);
            adam.step(&mut model.params, &grads);
            if !model.params.all_finite() {
                return Err(TrainError::Objective {
                    step,
                    source: ObjectiveError::NonFinite { term: "parameters", value: f64::NAN },
                });
            }
            log.push(LogRow::new(step, &breakdown));
            epoch_total += breakdown.total;
            step += 1;
        }
        let ck = Checkpoint::from_model(&model, specs.clone(), config, step, epoch + 1, hist.clone());
        if let Some(path) = &opts.checkpoint {
            ck.save(path)?;
        }
        if let Some(path) = &opts.log {
            write_log(path, &log)?;
        }
        if opts.verbose {
            eprintln!("epoch {} mean total loss {:.4}", epoch + 1, epoch_total / chunks.len() as f64);
        }
    }
    let checkpoint = Checkpoint::from_model(&model, specs, config, step, config.epochs, hist);
    Ok(TrainOutcome { checkpoint, log })
}

/// Mean loss over fixed noise on the given records, for before/after checks.
pub fn evaluate_loss(
    model: &Model,
    records: &[DatasetRecord],
    weights: &LossWeights,
    lambda: f64,
    seed: u64,
) -> Result<LossBreakdown, ObjectiveError> {
    let n_max = records.iter().map(|r| r.graph.num_atoms()).max().unwrap_or(1);
    let refs: Vec<&DatasetRecord> = records.iter().collect();
    let batch = Batch::from_records(&refs, n_max, model.num_types()).expect("sizes bounded by n_max");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = batch_noise(&batch, model.config.latent, &mut rng);
    let pairing = derangement(batch.len(), &mut rng);
    total_loss(model, &LossInputs { batch: &batch, noise: &noise, pairing: Some(&pairing) }, weights, lambda)
}
