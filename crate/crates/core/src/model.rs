//! Parameter layout shared by the encoder, decoder and property heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::chem::{AtomRegistry, BOND_TYPES};
use crate::decoder::DecoderIds;
use crate::encoder::EncoderIds;
use crate::heads::{GroupHead, GroupSpec, HeadError, PolynomialHead, DEFAULT_DEGREE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Node state width H.
    pub hidden: usize,
    /// Latent width L.
    pub latent: usize,
    /// Message passing rounds T.
    pub steps: usize,
    /// Property polynomial degree d.
    pub degree: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 100, latent: 100, steps: 2, degree: DEFAULT_DEGREE }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter {0} missing")]
    MissingParam(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error(transparent)]
    Head(#[from] HeadError),
}

/// Creates parameters on a fresh store, or looks them up and shape-checks
/// them on a loaded one.
pub(crate) struct Init<'a> {
    store: &'a mut ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl Init<'_> {
    fn existing(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, ModelError> {
        let id = self.store.id(name).ok_or_else(|| ModelError::MissingParam(name.to_owned()))?;
        let t = self.store.get(id);
        if (t.rows, t.cols) != (rows, cols) {
            return Err(ModelError::Shape { name: name.to_owned(), expected: (rows, cols), found: (t.rows, t.cols) });
        }
        Ok(id)
    }

    pub(crate) fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, ModelError> {
        match self.rng.as_mut() {
            Some(rng) => Ok(self.store.add_glorot(name, rows, cols, rng)),
            None => self.existing(name, rows, cols),
        }
    }

    pub(crate) fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, ModelError> {
        match self.rng {
            Some(_) => Ok(self.store.add_zeros(name, rows, cols)),
            None => self.existing(name, rows, cols),
        }
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub(crate) fn uniform(&mut self, name: &str, rows: usize, cols: usize, scale: f64) -> Result<ParamId, ModelError> {
        match self.rng.as_mut() {
            Some(rng) => {
                let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
                Ok(self.store.add(name, Tensor::new(rows, cols, data)))
            }
            None => self.existing(name, rows, cols),
        }
    }

    /// Polynomial coefficients for `F(z) = z` plus uniform jitter of
    /// `scale`. A near-flat head passes almost no gradient to its latent
    /// coordinate, so starting from a slope of one keeps the property term
    /// from stalling at zero.
    pub(crate) fn near_identity(&mut self, name: &str, degree: usize, scale: f64) -> Result<ParamId, ModelError> {
        let id = self.uniform(name, 1, degree + 1, scale)?;
        if self.rng.is_some() && degree >= 1 {
            self.store.get_mut(id).data[1] += 1.0;
        }
        Ok(id)
    }

    pub(crate) fn filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId, ModelError> {
        match self.rng {
            Some(_) => Ok(self.store.add(name, Tensor::filled(rows, cols, v))),
            None => self.existing(name, rows, cols),
        }
    }
}

/// Parameter handles of the property heads.
#[derive(Debug, Clone)]
pub(crate) struct HeadIds {
    /// Per group, per latent dim: coefficient row 1×(d+1).
    pub coef: Vec<Vec<ParamId>>,
    /// Per group, per property: raw noise (σ = softplus(raw)).
    pub noise: Vec<Vec<ParamId>>,
    /// Per group: mixing matrix |properties|×|dims|; none for singletons.
    pub mix: Vec<Option<ParamId>>,
}

/// softplus⁻¹(1): a unit noise scale at initialization.
const UNIT_NOISE_RAW: f64 = 0.541_324_854_612_918_1;

impl HeadIds {
    fn build(init: &mut Init<'_>, groups: &GroupSpec, degree: usize) -> Result<Self, ModelError> {
        let mut ids = HeadIds { coef: Vec::new(), noise: Vec::new(), mix: Vec::new() };
        for (g, group) in groups.groups.iter().enumerate() {
            let mut coef = Vec::new();
            for &d in &group.latent_dims {
                coef.push(init.near_identity(&format!("head.dim{d}.coef"), degree, 0.1)?);
            }
            let mut noise = Vec::new();
            for &p in &group.properties {
                noise.push(init.filled(&format!("head.prop{p}.noise"), 1, 1, UNIT_NOISE_RAW)?);
            }
            let mix = if group.is_singleton() {
                None
            } else {
                let (r, c) = (group.properties.len(), group.latent_dims.len());
                Some(init.filled(&format!("head.group{g}.mix"), r, c, 1.0 / c as f64)?)
            };
            ids.coef.push(coef);
            ids.noise.push(noise);
            ids.mix.push(mix);
        }
        Ok(ids)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub registry: AtomRegistry,
    pub groups: GroupSpec,
    pub params: ParamStore,
    pub(crate) enc: EncoderIds,
    pub(crate) dec: DecoderIds,
    pub(crate) heads: HeadIds,
}

impl Model {
    /// Freshly initialized model. `groups` ties latent dims to properties.
    pub fn new(config: ModelConfig, registry: AtomRegistry, groups: GroupSpec, seed: u64) -> Result<Self, ModelError> {
        let mut params = ParamStore::new();
        let rng = Some(ChaCha8Rng::seed_from_u64(seed));
        let (enc, dec, heads) = Self::layout(&config, &registry, &groups, &mut Init { store: &mut params, rng })?;
        Ok(Self { config, registry, groups, params, enc, dec, heads })
    }

    /// Rebuild from stored parameters, checking every name and shape.
    pub fn from_params(
        config: ModelConfig,
        registry: AtomRegistry,
        groups: GroupSpec,
        mut params: ParamStore,
    ) -> Result<Self, ModelError> {
        let (enc, dec, heads) = Self::layout(&config, &registry, &groups, &mut Init { store: &mut params, rng: None })?;
        Ok(Self { config, registry, groups, params, enc, dec, heads })
    }

    fn layout(
        config: &ModelConfig,
        registry: &AtomRegistry,
        groups: &GroupSpec,
        init: &mut Init<'_>,
    ) -> Result<(EncoderIds, DecoderIds, HeadIds), ModelError> {
        if config.hidden == 0 || config.latent == 0 || config.steps == 0 {
            return Err(ModelError::Config("hidden, latent and steps must be positive".into()));
        }
        if config.degree == 0 {
            return Err(HeadError::Degree.into());
        }
        groups.validate(config.latent, groups.num_properties())?;
        let k = registry.len();
        let enc = EncoderIds::build(init, k, config.hidden, config.latent)?;
        let dec = DecoderIds::build(init, k, config.hidden, config.latent)?;
        let heads = HeadIds::build(init, groups, config.degree)?;
        Ok((enc, dec, heads))
    }

    pub fn num_types(&self) -> usize {
        self.registry.len()
    }

    pub fn num_properties(&self) -> usize {
        self.groups.num_properties()
    }

    pub fn group_heads(&self) -> Vec<GroupHead> {
        self.groups
            .groups
            .iter()
            .enumerate()
            .map(|(g, group)| {
                let polynomials = self.heads.coef[g].iter().map(|&id| self.params.get(id).data.clone()).collect();
                let mixing = match self.heads.mix[g] {
                    Some(id) => {
                        let t = self.params.get(id);
                        (0..t.rows).map(|r| t.row_slice(r).to_vec()).collect()
                    }
                    None => vec![vec![1.0]],
                };
                let noise_sigma = self.heads.noise[g].iter().map(|&id| softplus(self.params.get(id).data[0])).collect();
                GroupHead { group: group.clone(), polynomials, mixing, noise_sigma }
            })
            .collect()
    }

    /// Head of property `j` when it sits in a singleton group.
    pub fn property_head(&self, j: usize) -> Option<PolynomialHead> {
        let (g, _) = self.groups.locate_property(j)?;
        self.group_heads()[g].as_polynomial()
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn bond_edges(bonds: impl IntoIterator<Item = (usize, usize, u8)>) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (i, j, o) in bonds {
        let k = o as usize - 1;
        debug_assert!(k < BOND_TYPES);
        out.push((i, j, k));
        out.push((j, i, k));
    }
    out
}
