//! β-VAE, FactorVAE, modularity and DCI scores on observational data.
//!
//! Factors are continuous properties cut into equal-frequency bins. A probe
//! that fixes factor `k` draws its examples from one bin of `k`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::divergence::{check_matrix, column, equal_frequency_bins, mutual_information};
use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisentanglementConfig {
    /// Quantile bins per factor.
    pub factor_bins: usize,
    /// Equal-frequency bins per latent coordinate for the MI behind MOD.
    pub code_bins: usize,
    /// Training probes; half as many are drawn for scoring.
    pub probes: usize,
    /// Examples per probe.
    pub batch: usize,
    pub seed: u64,
}

impl Default for DisentanglementConfig {
    fn default() -> Self {
        Self { factor_bins: 10, code_bins: 20, probes: 10_000, batch: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disentanglement {
    pub beta_m: f64,
    pub factor_m: f64,
    pub dci: f64,
    #[serde(rename = "mod")]
    pub modularity: f64,
}

/// Quantile-binned factor labels, one vector per factor.
pub fn discretize_factors(factors: &[Vec<f64>], bins: usize) -> Result<Vec<Vec<usize>>, EvalError> {
    let k = check_matrix(factors, "factors")?;
    (0..k)
        .map(|j| {
            let labels = equal_frequency_bins(&column(factors, j), bins);
            let levels = labels.iter().max().map_or(0, |m| m + 1);
            let distinct = {
                let mut seen = vec![false; levels];
                labels.iter().for_each(|&l| seen[l] = true);
                seen.iter().filter(|&&s| s).count()
            };
            if distinct < 2 {
                Err(EvalError::FactorLevels { factor: j })
            } else {
                Ok(labels)
            }
        })
        .collect()
}

/// `groups[k][v]` = examples whose factor `k` falls in bin `v`.
struct Probes<'a> {
    labels: &'a [Vec<usize>],
    groups: Vec<Vec<Vec<usize>>>,
}

impl<'a> Probes<'a> {
    fn new(labels: &'a [Vec<usize>]) -> Self {
        let groups = labels
            .iter()
            .map(|lab| {
                let mut g = vec![Vec::new(); lab.iter().max().map_or(0, |m| m + 1)];
                for (i, &v) in lab.iter().enumerate() {
                    g[v].push(i);
                }
                g
            })
            .collect();
        Self { labels, groups }
    }

    /// Fixed factor and the pool sharing one of its values.
    fn draw(&self, rng: &mut ChaCha8Rng) -> (usize, &[usize]) {
        let k = rng.random_range(0..self.labels.len());
        let anchor = rng.random_range(0..self.labels[k].len());
        (k, &self.groups[k][self.labels[k][anchor]])
    }
}

fn pick<'p>(pool: &'p [usize], rng: &mut ChaCha8Rng) -> &'p usize {
    pool.choose(rng).expect("bins are nonempty")
}

fn check_inputs(z: &[Vec<f64>], labels: &[Vec<usize>]) -> Result<usize, EvalError> {
    if z.is_empty() {
        return Err(EvalError::Empty("representation"));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty("factors"));
    }
    if let Some(bad) = labels.iter().find(|l| l.len() != z.len()) {
        return Err(EvalError::Ragged { row: 0, expected: z.len(), got: bad.len() });
    }
    check_matrix(z, "representation")
}

/// Accuracy of a linear classifier predicting the fixed factor from the mean
/// absolute difference of paired codes.
pub fn beta_vae_score(z: &[Vec<f64>], labels: &[Vec<usize>], cfg: &DisentanglementConfig) -> Result<f64, EvalError> {
    check_inputs(z, labels)?;
    let probes = Probes::new(labels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |count: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
        (0..count)
            .map(|_| {
                let (k, pool) = probes.draw(&mut rng);
                let mut feat = vec![0.0; z[0].len()];
                for _ in 0..cfg.batch {
                    let (a, b) = (*pick(pool, &mut rng), *pick(pool, &mut rng));
                    for (f, (x, y)) in feat.iter_mut().zip(z[a].iter().zip(&z[b])) {
                        *f += (x - y).abs();
                    }
                }
                feat.iter_mut().for_each(|f| *f /= cfg.batch as f64);
                (feat, k)
            })
            .unzip()
    };
    let (train_x, train_y) = draw(cfg.probes);
    let (eval_x, eval_y) = draw((cfg.probes / 2).max(1));
    let clf = Softmax::fit(&train_x, &train_y, labels.len());
    let correct = eval_x.iter().zip(&eval_y).filter(|(x, &y)| clf.predict(x) == y).count();
    Ok(correct as f64 / eval_y.len() as f64)
}

/// Majority vote from the lowest-variance normalized coordinate to the
/// fixed factor.
pub fn factor_vae_score(z: &[Vec<f64>], labels: &[Vec<usize>], cfg: &DisentanglementConfig) -> Result<f64, EvalError> {
    let l = check_inputs(z, labels)?;
    let scale: Vec<f64> = (0..l).map(|c| variance(&column(z, c)).sqrt()).collect();
    let active: Vec<usize> = (0..l).filter(|&c| scale[c] > 1e-12).collect();
    if active.is_empty() {
        return Ok(0.0);
    }
    let probes = Probes::new(labels);
    let k_count = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut votes = |count: usize| -> Vec<Vec<usize>> {
        let mut v = vec![vec![0usize; k_count]; l];
        for _ in 0..count {
            let (k, pool) = probes.draw(&mut rng);
            let rows: Vec<usize> = (0..cfg.batch).map(|_| *pick(pool, &mut rng)).collect();
            let best = active
                .iter()
                .map(|&c| (c, variance(&rows.iter().map(|&i| z[i][c] / scale[c]).collect::<Vec<_>>())))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .expect("active dims nonempty");
            v[best][k] += 1;
        }
        v
    };
    let train = votes(cfg.probes);
    let eval = votes((cfg.probes / 2).max(1));
    let total: usize = eval.iter().flatten().sum();
    let correct: usize = train
        .iter()
        .zip(&eval)
        .map(|(t, e)| {
            let vote = (0..k_count).max_by_key(|&k| (t[k], std::cmp::Reverse(k))).unwrap_or(0);
            e[vote]
        })
        .sum();
    Ok(correct as f64 / total as f64)
}

/// How close each coordinate's MI profile is to depending on one factor only.
pub fn modularity(z: &[Vec<f64>], labels: &[Vec<usize>], code_bins: usize) -> Result<f64, EvalError> {
    let l = check_inputs(z, labels)?;
    let k = labels.len();
    let mut total = 0.0;
    for c in 0..l {
        let code = equal_frequency_bins(&column(z, c), code_bins);
        let mi: Vec<f64> = labels.iter().map(|f| mutual_information(&code, f).0).collect();
        let (arg, theta) = mi.iter().copied().enumerate().fold((0, 0.0), |acc, (j, m)| if m > acc.1 { (j, m) } else { acc });
        if theta <= 0.0 || k < 2 {
            // A coordinate with no information scores 0; one factor is trivially modular.
            total += if theta > 0.0 { 1.0 } else { 0.0 };
            continue;
        }
        let dev: f64 = mi.iter().enumerate().filter(|(j, _)| *j != arg).map(|(_, m)| m * m).sum();
        total += 1.0 - dev / (theta * theta * (k - 1) as f64);
    }
    Ok(total / l as f64)
}

/// DCI disentanglement: importance-weighted one minus the entropy (base
/// `#factors`) of each coordinate's normalized importance profile.
/// Importance is the MSE increase of a ridge regressor when one coordinate
/// is shuffled.
pub fn dci_disentanglement(z: &[Vec<f64>], labels: &[Vec<usize>], seed: u64) -> Result<f64, EvalError> {
    let l = check_inputs(z, labels)?;
    let k = labels.len();
    let x = standardize(z, l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffles: Vec<Vec<usize>> = Vec::with_capacity(l);
    for _ in 0..l {
        let mut p: Vec<usize> = (0..z.len()).collect();
        p.shuffle(&mut rng);
        shuffles.push(p);
    }
    // importance[c][f]
    let mut importance = vec![vec![0.0; k]; l];
    for (f, lab) in labels.iter().enumerate() {
        let y: Vec<f64> = lab.iter().map(|&v| v as f64).collect();
        let w = ridge(&x, &y, 1e-3);
        let base = mse(&x, &y, &w, None);
        for c in 0..l {
            importance[c][f] = (mse(&x, &y, &w, Some((c, &shuffles[c]))) - base).max(0.0);
        }
    }
    let grand: f64 = importance.iter().flatten().sum();
    if grand <= 0.0 {
        return Ok(0.0);
    }
    if k < 2 {
        return Ok(1.0);
    }
    let score = importance
        .iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                return 0.0;
            }
            let h: f64 = row.iter().filter(|&&r| r > 0.0).map(|&r| -(r / s) * (r / s).ln()).sum::<f64>() / (k as f64).ln();
            (s / grand) * (1.0 - h)
        })
        .sum();
    Ok(score)
}

pub fn disentanglement_metrics(z: &[Vec<f64>], factors: &[Vec<f64>], cfg: &DisentanglementConfig) -> Result<Disentanglement, EvalError> {
    if z.len() != factors.len() {
        return Err(EvalError::Ragged { row: 0, expected: z.len(), got: factors.len() });
    }
    let labels = discretize_factors(factors, cfg.factor_bins)?;
    Ok(Disentanglement {
        beta_m: beta_vae_score(z, &labels, cfg)?,
        factor_m: factor_vae_score(z, &labels, cfg)?,
        dci: dci_disentanglement(z, &labels, cfg.seed)?,
        modularity: modularity(z, &labels, cfg.code_bins)?,
    })
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

fn standardize(z: &[Vec<f64>], l: usize) -> Vec<Vec<f64>> {
    let stats: Vec<(f64, f64)> = (0..l)
        .map(|c| {
            let col = column(z, c);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let s = variance(&col).sqrt();
            (m, if s > 1e-12 { s } else { 1.0 })
        })
        .collect();
    z.iter().map(|r| r.iter().zip(&stats).map(|(v, (m, s))| (v - m) / s).collect()).collect()
}

/// Ridge regression with an unpenalized intercept, weights last.
fn ridge(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let d = x[0].len() + 1;
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for (row, &t) in x.iter().zip(y) {
        let r: Vec<f64> = row.iter().copied().chain(std::iter::once(1.0)).collect();
        for i in 0..d {
            b[i] += r[i] * t;
            for j in 0..d {
                a[i * d + j] += r[i] * r[j];
            }
        }
    }
    let n = x.len() as f64;
    for i in 0..d - 1 {
        a[i * d + i] += lambda * n;
    }
    solve_spd(&mut a, &mut b, d);
    b
}

/// In-place Cholesky solve; `a` must be symmetric positive definite.
fn solve_spd(a: &mut [f64], b: &mut [f64], d: usize) {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        let diag = s.max(1e-300).sqrt();
        a[j * d + j] = diag;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / diag;
        }
    }
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * d + k] * b[k];
        }
        b[i] = s / a[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= a[k * d + i] * b[k];
        }
        b[i] = s / a[i * d + i];
    }
}

fn mse(x: &[Vec<f64>], y: &[f64], w: &[f64], shuffled: Option<(usize, &[usize])>) -> f64 {
    let d = x[0].len();
    let mut s = 0.0;
    for (i, (row, &t)) in x.iter().zip(y).enumerate() {
        let mut p = w[d];
        for c in 0..d {
            let v = match shuffled {
                Some((sc, perm)) if sc == c => x[perm[i]][c],
                _ => row[c],
            };
            p += w[c] * v;
        }
        s += (p - t) * (p - t);
    }
    s / x.len() as f64
}

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent.
struct Softmax {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// classes × (features + 1), bias last
    w: Vec<Vec<f64>>,
}

impl Softmax {
    const ITERATIONS: usize = 500;
    const RATE: f64 = 1.0;
    const L2: f64 = 1e-4;

    fn fit(x: &[Vec<f64>], y: &[usize], classes: usize) -> Self {
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / x.len() as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|c| {
                let s = variance(&column(x, c)).sqrt();
                if s > 1e-12 { s } else { 1.0 }
            })
            .collect();
        let mut clf = Self { mean, scale, w: vec![vec![0.0; d + 1]; classes] };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| clf.features(r)).collect();
        let n = xs.len() as f64;
        for _ in 0..Self::ITERATIONS {
            let mut grad = vec![vec![0.0; d + 1]; classes];
            for (r, &t) in xs.iter().zip(y) {
                let p = clf.probabilities(r);
                for (k, g) in grad.iter_mut().enumerate() {
                    let e = p[k] - if k == t { 1.0 } else { 0.0 };
                    for (gi, ri) in g.iter_mut().zip(r) {
                        *gi += e * ri;
                    }
                }
            }
            for (w, g) in clf.w.iter_mut().zip(&grad) {
                for (i, (wi, gi)) in w.iter_mut().zip(g).enumerate() {
                    let reg = if i < d { Self::L2 * *wi } else { 0.0 };
                    *wi -= Self::RATE * (gi / n + reg);
                }
            }
        }
        clf
    }

    /// Standardized features with a trailing 1.
    fn features(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).chain(std::iter::once(1.0)).collect()
    }

    fn logits(&self, f: &[f64]) -> Vec<f64> {
        self.w.iter().map(|w| w.iter().zip(f).map(|(a, b)| a * b).sum()).collect()
    }

    fn probabilities(&self, f: &[f64]) -> Vec<f64> {
        let z = self.logits(f);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(&self.features(x));
        (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best })
    }
}
