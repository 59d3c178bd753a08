//! Gated graph network encoder producing per-node Gaussian posteriors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Bound, ParamId, Tape, Tensor, Var};
use crate::chem::{MolecularGraph, BOND_TYPES};
use crate::dataset::Batch;
use crate::model::{bond_edges, Init, Model, ModelError};

/// log σ is clamped to ±this bound.
pub const LOG_SIGMA_BOUND: f64 = 10.0;

/// Weights of one gated propagation block, shared across its steps.
#[derive(Debug, Clone)]
pub(crate) struct GgnnIds {
    /// H × (K·H): per bond type message transform, side by side.
    msg: ParamId,
    /// H × 3H: message contribution to update gate, reset gate, candidate.
    gate_m: ParamId,
    /// H × 2H: state contribution to update and reset gates.
    gate_h: ParamId,
    /// H × H: reset-scaled state contribution to the candidate.
    cand_h: ParamId,
    /// 1 × 3H.
    bias: ParamId,
    hidden: usize,
}

impl GgnnIds {
    pub(crate) fn build(init: &mut Init<'_>, prefix: &str, h: usize) -> Result<Self, ModelError> {
        Ok(Self {
            msg: init.glorot(&format!("{prefix}.msg"), h, BOND_TYPES * h)?,
            gate_m: init.glorot(&format!("{prefix}.gate_m"), h, 3 * h)?,
            gate_h: init.glorot(&format!("{prefix}.gate_h"), h, 2 * h)?,
            cand_h: init.glorot(&format!("{prefix}.cand_h"), h, h)?,
            bias: init.zeros(&format!("{prefix}.bias"), 1, 3 * h)?,
            hidden: h,
        })
    }

    /// `steps` rounds of message passing and gated update starting at `h0`.
    /// `edges` lists `(target, source, bond type)` in both directions.
    pub(crate) fn propagate(&self, tape: &mut Tape, b: &Bound, h0: Var, edges: &[(usize, usize, usize)], steps: usize) -> Var {
        let h = self.hidden;
        let mut s = h0;
        for _ in 0..steps {
            let per_type = tape.matmul(s, b.var(self.msg));
            let m = tape.gather(per_type, edges, h);
            let gm = tape.matmul(m, b.var(self.gate_m));
            let gm = tape.add_row(gm, b.var(self.bias));
            let gh = tape.matmul(s, b.var(self.gate_h));

            let zm = tape.slice_cols(gm, 0, h);
            let zh = tape.slice_cols(gh, 0, h);
            let zsum = tape.add(zm, zh);
            let update = tape.sigmoid(zsum);

            let rm = tape.slice_cols(gm, h, h);
            let rh = tape.slice_cols(gh, h, h);
            let rsum = tape.add(rm, rh);
            let reset = tape.sigmoid(rsum);

            let rs = tape.mul(reset, s);
            let ch = tape.matmul(rs, b.var(self.cand_h));
            let cm = tape.slice_cols(gm, 2 * h, h);
            let csum = tape.add(cm, ch);
            let cand = tape.tanh(csum);

            let delta = tape.sub(cand, s);
            let step = tape.mul(update, delta);
            s = tape.add(s, step);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderIds {
    w_in: ParamId,
    b_in: ParamId,
    ggnn: GgnnIds,
    w_mu: ParamId,
    b_mu: ParamId,
    w_ls: ParamId,
    b_ls: ParamId,
}

impl EncoderIds {
    pub(crate) fn build(init: &mut Init<'_>, k: usize, h: usize, l: usize) -> Result<Self, ModelError> {
        Ok(Self {
            w_in: init.glorot("enc.in.w", k, h)?,
            b_in: init.zeros("enc.in.b", 1, h)?,
            ggnn: GgnnIds::build(init, "enc.ggnn", h)?,
            w_mu: init.glorot("enc.mu.w", h, l)?,
            b_mu: init.zeros("enc.mu.b", 1, l)?,
            w_ls: init.glorot("enc.logsigma.w", h, l)?,
            b_ls: init.zeros("enc.logsigma.b", 1, l)?,
        })
    }
}

pub(crate) fn one_hot(types: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(types.len(), k);
    for (v, &a) in types.iter().enumerate() {
        t.data[v * k + a] = 1.0;
    }
    t
}

/// Per-node (μ, log σ), each n×L, for one molecule.
pub fn encode_graph(model: &Model, tape: &mut Tape, b: &Bound, g: &MolecularGraph) -> (Var, Var) {
    let ids = &model.enc;
    let x = tape.leaf(one_hot(g.atoms(), model.num_types()));
    let h0 = tape.matmul(x, b.var(ids.w_in));
    let h0 = tape.add_row(h0, b.var(ids.b_in));
    let h0 = tape.relu(h0);
    let edges = bond_edges(g.bonds().iter().map(|bd| (bd.i, bd.j, bd.order)));
    let s = ids.ggnn.propagate(tape, b, h0, &edges, model.config.steps);
    let mu = tape.matmul(s, b.var(ids.w_mu));
    let mu = tape.add_row(mu, b.var(ids.b_mu));
    let ls = tape.matmul(s, b.var(ids.w_ls));
    let ls = tape.add_row(ls, b.var(ids.b_ls));
    let ls = tape.clamp(ls, -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND);
    (mu, ls)
}

/// z = μ + exp(log σ) ⊙ ε for a fixed noise tensor.
pub fn reparameterize_var(tape: &mut Tape, mu: Var, log_sigma: Var, eps: &[f64]) -> Var {
    let sigma = tape.exp(log_sigma);
    let noise = tape.mul_const(sigma, eps);
    tape.add(mu, noise)
}

/// Batch-level posterior parameters and samples. Arrays are B × N_max × L;
/// masked node rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub n_max: usize,
    pub latent: usize,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub z: Option<Vec<f64>>,
    pub node_mask: Vec<bool>,
    pub sizes: Vec<usize>,
}

impl LatentCode {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    fn offset(&self, b: usize, v: usize) -> usize {
        (b * self.n_max + v) * self.latent
    }

    /// Rows of molecule `b` from `field`, as an n×L tensor.
    pub fn rows(&self, field: &[f64], b: usize) -> Tensor {
        let n = self.sizes[b];
        let start = self.offset(b, 0);
        Tensor::new(n, self.latent, field[start..start + n * self.latent].to_vec())
    }
}

/// Encode every molecule of a batch; only μ and log σ are filled.
pub fn encode(batch: &Batch, model: &Model) -> LatentCode {
    let l = model.config.latent;
    let n_max = batch.n_max;
    let mut code = LatentCode {
        n_max,
        latent: l,
        mu: vec![0.0; batch.len() * n_max * l],
        log_sigma: vec![0.0; batch.len() * n_max * l],
        z: None,
        node_mask: batch.node_mask.clone(),
        sizes: batch.sizes.clone(),
    };
    for (bi, g) in batch.graphs.iter().enumerate() {
        let (mu, ls) = encode_graph_values(model, g);
        let start = code.offset(bi, 0);
        code.mu[start..start + mu.len()].copy_from_slice(&mu.data);
        code.log_sigma[start..start + ls.len()].copy_from_slice(&ls.data);
    }
    code
}

/// Forward pass without keeping the tape.
pub fn encode_graph_values(model: &Model, g: &MolecularGraph) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let (mu, ls) = encode_graph(model, &mut tape, &b, g);
    (tape.value(mu).clone(), tape.value(ls).clone())
}

/// Standard normal noise for the unmasked entries, drawn in row-major order.
pub fn standard_normal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Fill `z` with μ + σ ε, ε ~ N(0, I), deterministic in `seed`.
pub fn reparameterize(code: &LatentCode, seed: u64) -> LatentCode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; code.mu.len()];
    for (b, &n) in code.sizes.iter().enumerate() {
        let start = code.offset(b, 0);
        let eps = standard_normal(n * code.latent, &mut rng);
        for (i, e) in eps.into_iter().enumerate() {
            z[start + i] = code.mu[start + i] + code.log_sigma[start + i].exp() * e;
        }
    }
    LatentCode { z: Some(z), ..code.clone() }
}

/// Masked mean of `z` over each molecule's nodes: B × L.
pub fn summarize(code: &LatentCode) -> Vec<f64> {
    let z = code.z.as_ref().expect("summarize needs sampled z");
    let l = code.latent;
    let mut out = vec![0.0; code.len() * l];
    for (b, &n) in code.sizes.iter().enumerate() {
        for v in 0..n {
            let row = &z[code.offset(b, v)..code.offset(b, v) + l];
            for (o, x) in out[b * l..(b + 1) * l].iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out[b * l..(b + 1) * l] {
            *o /= n as f64;
        }
    }
    out
}

