//! Training objective: reconstruction, KL, covariance penalty, property
//! likelihood and the monotonicity penalties.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Tape, Tensor, Var};
use crate::dataset::Batch;
use crate::decoder::reconstruction_nll_var;
use crate::encoder::{encode_graph, reparameterize_var};
use crate::heads::{GroupHead, GroupSpec};
use crate::model::Model;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ObjectiveError {
    #[error("{term} needs at least two molecules, got {got}")]
    BatchTooSmall { term: &'static str, got: usize },
    #[error("{term} is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("pairing is not a permutation of the batch")]
    Pairing,
    #[error("expected {expected} noise tensors, got {got}")]
    Noise { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MonoMode {
    #[default]
    Gradient,
    Direction,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub mono_mode: MonoMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0, lambda: 1.0, mono_mode: MonoMode::Gradient }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(format!("{name} must be a finite nonnegative weight, got {w}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub dip: f64,
    pub prop_nll: f64,
    pub mono: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted sum, in the same operation order the tape uses.
    pub fn weighted_total(&self, w: &LossWeights, lambda: f64) -> f64 {
        self.recon + lambda * self.kl + w.alpha * self.dip + w.beta * self.prop_nll + w.gamma * self.mono
    }
}

/// KL(N(μ, σ²) ‖ N(0, 1)) for one coordinate.
pub fn kl_per_dim(mu: f64, log_sigma: f64) -> f64 {
    0.5 * (mu * mu + (2.0 * log_sigma).exp() - 1.0 - 2.0 * log_sigma)
}

/// Population covariance of the rows of `means` (B × L).
pub fn covariance(means: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b = means.len() as f64;
    let l = means[0].len();
    let mean: Vec<f64> = (0..l).map(|d| means.iter().map(|r| r[d]).sum::<f64>() / b).collect();
    let mut s = vec![vec![0.0; l]; l];
    for r in means {
        for p in 0..l {
            for q in 0..l {
                s[p][q] += (r[p] - mean[p]) * (r[q] - mean[q]);
            }
        }
    }
    s.iter_mut().flatten().for_each(|x| *x /= b);
    s
}

/// Σ_{p≠q} S_pq² + Σ_p (S_pp − 1)² over the covariance of graph-level means.
pub fn dip_penalty(means: &[Vec<f64>]) -> Result<f64, ObjectiveError> {
    if means.len() < 2 {
        return Err(ObjectiveError::BatchTooSmall { term: "dip", got: means.len() });
    }
    let s = covariance(means);
    let mut out = 0.0;
    for (p, row) in s.iter().enumerate() {
        for (q, &v) in row.iter().enumerate() {
            let d = if p == q { v - 1.0 } else { v };
            out += d * d;
        }
    }
    Ok(out)
}

/// Σ over every (property, latent dim) partial of the group heads of the
/// batch mean of ReLU(−∂F/∂z), evaluated at the rows of `zbar` (B × L).
pub fn mono_gradient_penalty(heads: &[GroupHead], zbar: &[Vec<f64>]) -> f64 {
    let b = zbar.len() as f64;
    let mut total = 0.0;
    for head in heads {
        let dims = &head.group.latent_dims;
        let mut acc = vec![vec![0.0; dims.len()]; head.group.properties.len()];
        for row in zbar {
            let z: Vec<f64> = dims.iter().map(|&d| row[d]).collect();
            let partials = head.partials(&z).expect("dims taken from the group");
            for (a, p) in acc.iter_mut().flatten().zip(partials.iter().flatten()) {
                *a += (-p).max(0.0);
            }
        }
        total += acc.iter().flatten().map(|a| a / b).sum::<f64>();
    }
    total
}

fn check_pairing(pairing: &[usize], b: usize) -> Result<(), ObjectiveError> {
    let mut seen = vec![false; b];
    if pairing.len() != b {
        return Err(ObjectiveError::Pairing);
    }
    for &p in pairing {
        if p >= b || std::mem::replace(&mut seen[p], true) {
            return Err(ObjectiveError::Pairing);
        }
    }
    Ok(())
}

/// For each property and each latent dim of its group, the batch mean of
/// ReLU(−(Y_b − Y_π(b))(z_b − z_π(b))) with π = `pairing`. `y` is B × J.
pub fn mono_direction_penalty(
    groups: &GroupSpec,
    zbar: &[Vec<f64>],
    y: &[Vec<f64>],
    pairing: &[usize],
) -> Result<f64, ObjectiveError> {
    let b = zbar.len();
    if b < 2 {
        return Err(ObjectiveError::BatchTooSmall { term: "mono", got: b });
    }
    check_pairing(pairing, b)?;
    let mut total = 0.0;
    for group in &groups.groups {
        for &j in &group.properties {
            for &d in &group.latent_dims {
                let sum: f64 = (0..b)
                    .map(|i| {
                        let k = pairing[i];
                        (-(y[i][j] - y[k][j]) * (zbar[i][d] - zbar[k][d])).max(0.0)
                    })
                    .sum();
                total += sum / b as f64;
            }
        }
    }
    Ok(total)
}

/// Uniform random permutation of `0..b` without fixed points (b ≥ 2).
pub fn derangement(b: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(b >= 2, "a derangement needs two elements");
    let mut p: Vec<usize> = (0..b).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &x)| i != x) {
            return p;
        }
    }
}

/// Everything the loss needs besides the model: the batch, one standard
/// normal noise tensor (n × L) per molecule, and the pairing used by the
/// direction penalty.
pub struct LossInputs<'a> {
    pub batch: &'a Batch,
    pub noise: &'a [Tensor],
    pub pairing: Option<&'a [usize]>,
}

/// Loss on the tape. `lambda` is the KL weight in effect (after warm-up).
/// Terms are means over molecules.
pub fn build_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
    lambda: f64,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    let batch = inputs.batch;
    let bsz = batch.len();
    if inputs.noise.len() != bsz {
        return Err(ObjectiveError::Noise { expected: bsz, got: inputs.noise.len() });
    }
    if bsz < 2 {
        return Err(ObjectiveError::BatchTooSmall { term: "dip", got: bsz });
    }
    let inv_b = 1.0 / bsz as f64;
    let l = model.config.latent;

    let mut recon_terms = Vec::with_capacity(bsz);
    let mut kl_terms = Vec::with_capacity(bsz);
    let mut mu_means = Vec::with_capacity(bsz);
    let mut z_means = Vec::with_capacity(bsz);
    for (g, eps) in batch.graphs.iter().zip(inputs.noise) {
        let (mu, ls) = encode_graph(model, tape, bound, g);
        let z = reparameterize_var(tape, mu, ls, &eps.data);
        recon_terms.push(reconstruction_nll_var(model, tape, bound, g, z));

        let mu2 = tape.square(mu);
        let ls2 = tape.scale(ls, 2.0);
        let var = tape.exp(ls2);
        let a = tape.add(mu2, var);
        let a = tape.sub(a, ls2);
        let a = tape.add_scalar(a, -1.0);
        let a = tape.sum_all(a);
        kl_terms.push(tape.scale(a, 0.5));

        mu_means.push(tape.mean_rows(mu));
        z_means.push(tape.mean_rows(z));
    }
    let recon = mean_of(tape, &recon_terms, inv_b);
    let kl = mean_of(tape, &kl_terms, inv_b);

    // Covariance penalty on graph-level posterior means.
    let m = tape.concat_rows(&mu_means);
    let centre = tape.mean_rows(m);
    let neg = tape.scale(centre, -1.0);
    let c = tape.add_row(m, neg);
    let ct = tape.transpose(c);
    let s = tape.matmul(ct, c);
    let s = tape.scale(s, inv_b);
    let eye = {
        let mut t = Tensor::zeros(l, l);
        (0..l).for_each(|i| t.data[i * l + i] = 1.0);
        tape.leaf(t)
    };
    let dev = tape.sub(s, eye);
    let dev = tape.square(dev);
    let dip = tape.sum_all(dev);

    let zbar = tape.concat_rows(&z_means);
    let prop = property_nll(model, tape, bound, batch, zbar, inv_b);
    let mono = match weights.mono_mode {
        MonoMode::Off => None,
        MonoMode::Gradient => Some(gradient_penalty(model, tape, bound, zbar, inv_b)),
        MonoMode::Direction => {
            let pairing = inputs.pairing.ok_or(ObjectiveError::Pairing)?;
            check_pairing(pairing, bsz)?;
            Some(direction_penalty(model, tape, batch, zbar, pairing, inv_b))
        }
    };

    let mut total = recon;
    let kl_w = tape.scale(kl, lambda);
    total = tape.add(total, kl_w);
    let dip_w = tape.scale(dip, weights.alpha);
    total = tape.add(total, dip_w);
    let prop_w = tape.scale(prop, weights.beta);
    total = tape.add(total, prop_w);
    if let Some(mono) = mono {
        let mono_w = tape.scale(mono, weights.gamma);
        total = tape.add(total, mono_w);
    }

    let breakdown = LossBreakdown {
        recon: tape.scalar(recon),
        kl: tape.scalar(kl),
        dip: tape.scalar(dip),
        prop_nll: tape.scalar(prop),
        mono: mono.map_or(0.0, |v| tape.scalar(v)),
        total: tape.scalar(total),
    };
    for (term, value) in [
        ("recon", breakdown.recon),
        ("kl", breakdown.kl),
        ("dip", breakdown.dip),
        ("prop_nll", breakdown.prop_nll),
        ("mono", breakdown.mono),
        ("total", breakdown.total),
    ] {
        if !value.is_finite() {
            return Err(ObjectiveError::NonFinite { term, value });
        }
    }
    Ok((total, breakdown))
}

fn mean_of(tape: &mut Tape, terms: &[Var], inv_b: f64) -> Var {
    let row = tape.concat_cols(terms);
    let s = tape.sum_all(row);
    tape.scale(s, inv_b)
}

/// Predictions of every property of group `g`, one B×1 column per property.
fn group_predictions(model: &Model, tape: &mut Tape, bound: &Bound, zbar: Var, g: usize) -> Vec<Var> {
    let group = &model.groups.groups[g];
    let polys: Vec<Var> = group
        .latent_dims
        .iter()
        .zip(&model.heads.coef[g])
        .map(|(&d, &coef)| {
            let col = tape.slice_cols(zbar, d, 1);
            tape.poly(col, bound.var(coef))
        })
        .collect();
    match model.heads.mix[g] {
        None => polys,
        Some(mix) => {
            let p = tape.concat_cols(&polys);
            let mt = tape.transpose(bound.var(mix));
            let pred = tape.matmul(p, mt);
            (0..group.properties.len()).map(|i| tape.slice_cols(pred, i, 1)).collect()
        }
    }
}

fn property_nll(model: &Model, tape: &mut Tape, bound: &Bound, batch: &Batch, zbar: Var, inv_b: f64) -> Var {
    let bsz = batch.len();
    let mut terms = Vec::new();
    for (g, group) in model.groups.groups.iter().enumerate() {
        let preds = group_predictions(model, tape, bound, zbar, g);
        for ((&j, pred), &noise) in group.properties.iter().zip(preds).zip(&model.heads.noise[g]) {
            let y = tape.leaf(Tensor::column((0..bsz).map(|b| batch.property(b, j)).collect()));
            let r = tape.sub(y, pred);
            let r2 = tape.square(r);
            let ss = tape.sum_all(r2);
            let sigma = tape.softplus(bound.var(noise));
            let var = tape.square(sigma);
            let quad = tape.div(ss, var);
            let quad = tape.scale(quad, 0.5 * inv_b);
            let log_sigma = tape.log(sigma);
            let t = tape.add(quad, log_sigma);
            terms.push(tape.add_scalar(t, HALF_LN_2PI));
        }
    }
    let row = tape.concat_cols(&terms);
    tape.sum_all(row)
}

fn gradient_penalty(model: &Model, tape: &mut Tape, bound: &Bound, zbar: Var, inv_b: f64) -> Var {
    let mut terms = Vec::new();
    for (g, group) in model.groups.groups.iter().enumerate() {
        let nd = group.latent_dims.len();
        for (di, (&d, &coef)) in group.latent_dims.iter().zip(&model.heads.coef[g]).enumerate() {
            let col = tape.slice_cols(zbar, d, 1);
            let deriv = tape.poly_deriv(col, bound.var(coef));
            for i in 0..group.properties.len() {
                let partial = match model.heads.mix[g] {
                    None => deriv,
                    Some(mix) => {
                        let w = tape.pick(bound.var(mix), i * nd + di);
                        tape.mul_scalar_var(deriv, w)
                    }
                };
                let neg = tape.scale(partial, -1.0);
                let hinge = tape.relu(neg);
                let s = tape.sum_all(hinge);
                terms.push(tape.scale(s, inv_b));
            }
        }
    }
    let row = tape.concat_cols(&terms);
    tape.sum_all(row)
}

fn direction_penalty(model: &Model, tape: &mut Tape, batch: &Batch, zbar: Var, pairing: &[usize], inv_b: f64) -> Var {
    let bsz = batch.len();
    let mut terms = Vec::new();
    for group in &model.groups.groups {
        for &j in &group.properties {
            let dy: Vec<f64> = (0..bsz).map(|b| -(batch.property(b, j) - batch.property(pairing[b], j))).collect();
            for &d in &group.latent_dims {
                let col = tape.slice_cols(zbar, d, 1);
                let other = tape.select_rows(col, pairing);
                let dz = tape.sub(col, other);
                let prod = tape.mul_const(dz, &dy);
                let hinge = tape.relu(prod);
                let s = tape.sum_all(hinge);
                terms.push(tape.scale(s, inv_b));
            }
        }
    }
    let row = tape.concat_cols(&terms);
    tape.sum_all(row)
}

/// Loss value and per-parameter gradients, aligned with `model.params`.
pub fn loss_and_gradients(
    model: &Model,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<Vec<f64>>), ObjectiveError> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (total, breakdown) = build_loss(model, &mut tape, &bound, inputs, weights, lambda)?;
    let grads = tape.backward(total);
    Ok((breakdown, bound.collect(&grads, &model.params)))
}

/// Loss value only.
pub fn total_loss(
    model: &Model,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
    lambda: f64,
) -> Result<LossBreakdown, ObjectiveError> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    build_loss(model, &mut tape, &bound, inputs, weights, lambda).map(|(_, b)| b)
}
