//! In-browser explorer: load a checkpoint, draw a molecule from the prior,
//! slide its targeted latent coordinates and sweep one of them.
//!
//! [`Demo`] is the plain Rust API; [`Explorer`] wraps it for JavaScript and
//! passes everything as JSON strings.

use std::collections::BTreeMap;

use mdvae::autodiff::Tensor;
use mdvae::chem::{canonical_key, emit_smiles, GraphJson};
use mdvae::dataset::{BuiltinProperty, PropertySpec};
use mdvae::decoder::decode_sample;
use mdvae::encoder::standard_normal;
use mdvae::evaluation::{linspace, predict_properties};
use mdvae::heads::GroupHead;
use mdvae::model::Model;
use mdvae::training::Checkpoint;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

pub const MAX_SWEEP_STEPS: usize = 101;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no molecule seeded yet")]
    NotSeeded,
    #[error("{0}")]
    Bad(String),
    #[error("decoder: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub dim: usize,
    pub property: String,
    /// Ascending powers, normalized units.
    pub coefficients: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Info {
    pub latent_dim: usize,
    pub max_atoms: usize,
    /// Names in the order of `View::predicted`.
    pub properties: Vec<String>,
    pub curves: Vec<Curve>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub dim: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub graph: GraphJson,
    pub smiles: String,
    pub canonical_key: String,
    pub valid: bool,
    pub computed: BTreeMap<String, f64>,
    /// Head outputs in source units, one per property.
    pub predicted: Vec<f64>,
    pub zbar: Vec<f64>,
}

pub struct Demo {
    model: Model,
    heads: Vec<GroupHead>,
    specs: Vec<PropertySpec>,
    size_histogram: Vec<usize>,
    seed: u64,
    latents: Option<Tensor>,
}

impl Demo {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DemoError> {
        let model = ck.model().map_err(|e| DemoError::Checkpoint(e.to_string()))?;
        Ok(Self {
            heads: model.group_heads(),
            model,
            specs: ck.specs.clone(),
            size_histogram: ck.size_histogram.clone(),
            seed: 0,
            latents: None,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DemoError> {
        let ck = Checkpoint::from_bytes(bytes).map_err(|e| DemoError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }

    pub fn max_atoms(&self) -> usize {
        self.size_histogram.len().saturating_sub(1).max(1)
    }

    pub fn info(&self) -> Info {
        let curves = (0..self.model.config.latent)
            .filter_map(|dim| {
                let (g, k) = self.model.groups.locate_dim(dim)?;
                let head = &self.heads[g];
                if head.group.latent_dims.len() != 1 {
                    return None;
                }
                let j = head.group.properties[0];
                let spec = self.specs.get(j);
                Some(Curve {
                    dim,
                    property: spec.map_or_else(|| format!("property_{j}"), |s| s.name.clone()),
                    coefficients: head.polynomials[k].clone(),
                    mean: spec.map_or(0.0, |s| s.mean),
                    std: spec.map_or(1.0, |s| s.std),
                })
            })
            .collect();
        Info {
            latent_dim: self.model.config.latent,
            max_atoms: self.max_atoms(),
            properties: self.specs.iter().map(|s| s.name.clone()).collect(),
            curves,
        }
    }

    /// Draw node latents from the prior; returns their node-mean.
    pub fn seed(&mut self, seed: u64, n_atoms: Option<usize>) -> Result<Vec<f64>, DemoError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = match n_atoms {
            Some(n) if n == 0 || n > self.max_atoms() => {
                return Err(DemoError::Bad(format!("atoms must be in 1..={}, got {n}", self.max_atoms())));
            }
            Some(n) => n,
            None => match WeightedIndex::new(&self.size_histogram) {
                Ok(w) => w.sample(&mut rng).max(1),
                Err(_) => self.max_atoms(),
            },
        };
        let l = self.model.config.latent;
        let z = Tensor::new(n, l, standard_normal(n * l, &mut rng));
        self.seed = seed;
        self.latents = Some(z);
        Ok(self.zbar().expect("just seeded"))
    }

    fn zbar(&self) -> Option<Vec<f64>> {
        let z = self.latents.as_ref()?;
        Some((0..z.cols).map(|c| (0..z.rows).map(|r| z.data[r * z.cols + c]).sum::<f64>() / z.rows as f64).collect())
    }

    /// Greedy decode after shifting each overridden coordinate of every node
    /// latent so the node-mean equals the requested value.
    pub fn decode(&self, overrides: &[Override]) -> Result<View, DemoError> {
        let mut z = self.latents.clone().ok_or(DemoError::NotSeeded)?;
        let mut zbar = self.zbar().ok_or(DemoError::NotSeeded)?;
        for o in overrides {
            if self.model.groups.locate_dim(o.dim).is_none() || !o.value.is_finite() {
                return Err(DemoError::Bad(format!("cannot set dim {} to {}", o.dim, o.value)));
            }
            let shift = o.value - zbar[o.dim];
            for r in 0..z.rows {
                z.data[r * z.cols + o.dim] += shift;
            }
            zbar[o.dim] = o.value;
        }
        let graph = decode_sample(&self.model, &z, 0.0, self.seed).map_err(|e| DemoError::Decode(e.to_string()))?;
        let reg = &self.model.registry;
        let predicted = predict_properties(&self.heads, &zbar, self.specs.len())
            .map_err(|e| DemoError::Decode(e.to_string()))?
            .into_iter()
            .zip(&self.specs)
            .map(|(v, s)| s.denormalize(v))
            .collect();
        Ok(View {
            canonical_key: canonical_key(&graph, reg).map(|k| k.to_hex()).unwrap_or_default(),
            smiles: emit_smiles(&graph, reg),
            valid: graph.is_valid(reg),
            computed: BuiltinProperty::ALL.iter().map(|p| (p.name().to_owned(), p.compute(&graph, reg))).collect(),
            graph: graph.to_json(reg),
            predicted,
            zbar,
        })
    }

    /// Decode at `steps` evenly spaced values of `dim`.
    pub fn sweep(&self, dim: usize, lo: f64, hi: f64, steps: usize) -> Result<Vec<View>, DemoError> {
        if !(2..=MAX_SWEEP_STEPS).contains(&steps) || !(lo < hi) {
            return Err(DemoError::Bad(format!("need lo < hi and 2..={MAX_SWEEP_STEPS} steps")));
        }
        linspace(lo, hi, steps).into_iter().map(|value| self.decode(&[Override { dim, value }])).collect()
    }
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Explorer(Demo);

#[wasm_bindgen]
impl Explorer {
    #[wasm_bindgen(constructor)]
    pub fn new(checkpoint: &[u8]) -> Result<Explorer, JsError> {
        Demo::from_bytes(checkpoint).map(Explorer).map_err(js)
    }

    /// `Info` as JSON.
    pub fn info(&self) -> Result<String, JsError> {
        serde_json::to_string(&self.0.info()).map_err(js)
    }

    /// Node-mean latent as a JSON array. `atoms = 0` draws the size.
    pub fn seed(&mut self, seed: u32, atoms: u32) -> Result<String, JsError> {
        let n = (atoms > 0).then_some(atoms as usize);
        let zbar = self.0.seed(seed as u64, n).map_err(js)?;
        serde_json::to_string(&zbar).map_err(js)
    }

    /// `overrides` is a JSON array of `{dim, value}`; returns a `View`.
    pub fn decode(&self, overrides: &str) -> Result<String, JsError> {
        let o: Vec<Override> = serde_json::from_str(overrides).map_err(js)?;
        serde_json::to_string(&self.0.decode(&o).map_err(js)?).map_err(js)
    }

    /// JSON array of `View`s.
    pub fn sweep(&self, dim: usize, lo: f64, hi: f64, steps: usize) -> Result<String, JsError> {
        serde_json::to_string(&self.0.sweep(dim, lo, hi, steps).map_err(js)?).map_err(js)
    }
}
