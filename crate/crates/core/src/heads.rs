//! Polynomial maps from latent coordinates to properties.

use serde::{Deserialize, Serialize};

use crate::autodiff::{horner, horner_deriv};

pub const DEFAULT_DEGREE: usize = 3;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HeadError {
    #[error("polynomial degree must be at least 1")]
    Degree,
    #[error("noise sigma must be positive, got {0}")]
    Noise(f64),
    #[error("group {group}: {msg}")]
    Group { group: usize, msg: String },
    #[error("expected {expected} latent values, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// `F(z) = Σ a_k z^k` with a Gaussian observation model of width `noise_sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialHead {
    /// Constant term first.
    pub coefficients: Vec<f64>,
    pub noise_sigma: f64,
}

impl PolynomialHead {
    pub fn new(coefficients: Vec<f64>, noise_sigma: f64) -> Result<Self, HeadError> {
        if coefficients.len() < 2 {
            return Err(HeadError::Degree);
        }
        if !(noise_sigma > 0.0) {
            return Err(HeadError::Noise(noise_sigma));
        }
        Ok(Self { coefficients, noise_sigma })
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn predict(&self, z: f64) -> f64 {
        horner(&self.coefficients, z)
    }

    pub fn derivative(&self, z: f64) -> f64 {
        horner_deriv(&self.coefficients, z)
    }

    /// Negative Gaussian log-likelihood of `y` given `z`.
    pub fn nll(&self, y: f64, z: f64) -> f64 {
        gaussian_nll(y, self.predict(z), self.noise_sigma)
    }
}

pub fn gaussian_nll(y: f64, mean: f64, sigma: f64) -> f64 {
    let r = (y - mean) / sigma;
    0.5 * r * r + sigma.ln() + HALF_LN_2PI
}

/// A set of latent dimensions jointly tied to a set of properties.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub latent_dims: Vec<usize>,
    pub properties: Vec<usize>,
}

impl Group {
    pub fn is_singleton(&self) -> bool {
        self.latent_dims.len() == 1 && self.properties.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub groups: Vec<Group>,
}

impl GroupSpec {
    /// Property `j` tied to latent dimension `j`.
    pub fn singletons(num_properties: usize) -> Self {
        Self {
            groups: (0..num_properties)
                .map(|j| Group { latent_dims: vec![j], properties: vec![j] })
                .collect(),
        }
    }

    pub fn validate(&self, latent_dim: usize, num_properties: usize) -> Result<(), HeadError> {
        let mut dim_seen = vec![false; latent_dim];
        let mut prop_seen = vec![false; num_properties];
        for (g, group) in self.groups.iter().enumerate() {
            let err = |msg: String| HeadError::Group { group: g, msg };
            if group.latent_dims.is_empty() || group.properties.is_empty() {
                return Err(err("empty latent or property set".into()));
            }
            for &d in &group.latent_dims {
                if d >= latent_dim {
                    return Err(err(format!("latent dim {d} out of range")));
                }
                if std::mem::replace(&mut dim_seen[d], true) {
                    return Err(err(format!("latent dim {d} used twice")));
                }
            }
            for &p in &group.properties {
                if p >= num_properties {
                    return Err(err(format!("property {p} out of range")));
                }
                if std::mem::replace(&mut prop_seen[p], true) {
                    return Err(err(format!("property {p} used twice")));
                }
            }
        }
        if let Some(p) = prop_seen.iter().position(|s| !s) {
            return Err(HeadError::Group { group: self.groups.len(), msg: format!("property {p} not covered") });
        }
        Ok(())
    }

    pub fn num_properties(&self) -> usize {
        self.groups.iter().map(|g| g.properties.len()).sum()
    }

    /// Latent dims that feed some property head.
    pub fn targeted_dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.groups.iter().flat_map(|g| g.latent_dims.iter().copied()).collect();
        d.sort_unstable();
        d
    }

    /// (group index, position within the group) of property `j`.
    pub fn locate_property(&self, j: usize) -> Option<(usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .find_map(|(g, group)| group.properties.iter().position(|&p| p == j).map(|i| (g, i)))
    }

    pub fn locate_dim(&self, d: usize) -> Option<(usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .find_map(|(g, group)| group.latent_dims.iter().position(|&x| x == d).map(|i| (g, i)))
    }
}

/// Head for one group: per latent dim a polynomial, combined through a
/// |properties| × |latent dims| mixing matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupHead {
    pub group: Group,
    pub polynomials: Vec<Vec<f64>>,
    pub mixing: Vec<Vec<f64>>,
    pub noise_sigma: Vec<f64>,
}

impl GroupHead {
    fn check(&self, z: &[f64]) -> Result<(), HeadError> {
        if z.len() != self.group.latent_dims.len() {
            return Err(HeadError::Dimension { expected: self.group.latent_dims.len(), got: z.len() });
        }
        Ok(())
    }

    /// Predictions for the group's properties given its latent coordinates.
    pub fn predict(&self, z: &[f64]) -> Result<Vec<f64>, HeadError> {
        self.check(z)?;
        let p: Vec<f64> = self.polynomials.iter().zip(z).map(|(c, &x)| horner(c, x)).collect();
        Ok(self
            .mixing
            .iter()
            .map(|row| {
                // Start from the first term so a 1×1 unit mixing is exact.
                row.iter().zip(&p).skip(1).fold(row[0] * p[0], |acc, (m, v)| acc + m * v)
            })
            .collect())
    }

    /// `partials[i][d]` = ∂ prediction_i / ∂ z_d.
    pub fn partials(&self, z: &[f64]) -> Result<Vec<Vec<f64>>, HeadError> {
        self.check(z)?;
        let dp: Vec<f64> = self.polynomials.iter().zip(z).map(|(c, &x)| horner_deriv(c, x)).collect();
        Ok(self.mixing.iter().map(|row| row.iter().zip(&dp).map(|(m, d)| m * d).collect()).collect())
    }

    /// The single-dimension head when the group is a singleton.
    pub fn as_polynomial(&self) -> Option<PolynomialHead> {
        self.group.is_singleton().then(|| PolynomialHead {
            coefficients: self.polynomials[0].clone(),
            noise_sigma: self.noise_sigma[0],
        })
    }
}
