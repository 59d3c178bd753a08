//! Distribution comparisons: kernel MMD, histogram KL and binned mutual
//! information.

use super::EvalError;

pub const DEFAULT_KLD_BINS: usize = 50;
pub const KLD_SMOOTHING: f64 = 1e-8;
pub const DEFAULT_MI_BINS: usize = 20;
pub const MIN_MI_SAMPLES: usize = 100;

/// Entropies below this are treated as a constant column.
const ENTROPY_FLOOR: f64 = 1e-12;

pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let n = a.len().max(b.len());
    let mut d2 = 0.0;
    for i in 0..n {
        let d = a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0);
        d2 += d * d;
    }
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += gaussian_kernel(x, y, sigma);
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Squared MMD, biased (V-statistic) form, Gaussian kernel. Vectors of
/// different length are zero-padded, so histograms of different support
/// compare directly.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty("mmd sample"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(EvalError::Bandwidth(sigma));
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("mmd sample"));
    }
    let kab = mean_kernel(a, b, sigma);
    let kaa = mean_kernel(a, a, sigma);
    let kbb = mean_kernel(b, b, sigma);
    // Nonnegative in exact arithmetic; clip rounding.
    Ok((kaa + kbb - 2.0 * kab).max(0.0))
}

/// KL(reference ‖ generated) between histograms over the union range.
pub fn kld_property(generated: &[f64], reference: &[f64], bins: usize) -> Result<f64, EvalError> {
    if generated.is_empty() || reference.is_empty() {
        return Err(EvalError::Empty("property sample"));
    }
    if bins == 0 {
        return Err(EvalError::Empty("histogram bins"));
    }
    if generated.iter().chain(reference).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("property sample"));
    }
    let lo = generated.iter().chain(reference).copied().fold(f64::INFINITY, f64::min);
    let hi = generated.iter().chain(reference).copied().fold(f64::NEG_INFINITY, f64::max);
    let p = smoothed_histogram(reference, lo, hi, bins);
    let q = smoothed_histogram(generated, lo, hi, bins);
    Ok(p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0))
}

fn smoothed_histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let width = hi - lo;
    for &v in values {
        let i = if width > 0.0 { (((v - lo) / width) * bins as f64) as usize } else { 0 };
        counts[i.min(bins - 1)] += 1.0;
    }
    let n = values.len() as f64;
    let norm = 1.0 + bins as f64 * KLD_SMOOTHING;
    counts.iter().map(|c| (c / n + KLD_SMOOTHING) / norm).collect()
}

/// Rank-based bins of roughly equal occupancy. Tied values share a bin, so
/// the labels depend only on the ordering of the values.
pub fn equal_frequency_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut labels = vec![0; n];
    for (r, &i) in order.iter().enumerate() {
        labels[i] = if r > 0 && values[order[r - 1]] == values[i] {
            labels[order[r - 1]]
        } else {
            r * bins / n
        };
    }
    labels
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| {
        let p = c as f64 / n;
        -p * p.ln()
    }).sum()
}

/// Plug-in (MI, H(a), H(b)) in nats for two discrete labelings.
pub fn mutual_information(a: &[usize], b: &[usize]) -> (f64, f64, f64) {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as f64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let ha = entropy(ca.into_iter(), n);
    let hb = entropy(cb.into_iter(), n);
    let hab = entropy(joint.into_iter(), n);
    ((ha + hb - hab).max(0.0), ha, hb)
}

/// MI normalized by the smaller marginal entropy; 0 when either is constant.
pub fn normalized_mi(a: &[usize], b: &[usize]) -> f64 {
    let (mi, ha, hb) = mutual_information(a, b);
    let h = ha.min(hb);
    if h < ENTROPY_FLOOR {
        0.0
    } else {
        (mi / h).clamp(0.0, 1.0)
    }
}

pub(crate) fn check_matrix(rows: &[Vec<f64>], what: &'static str) -> Result<usize, EvalError> {
    let cols = rows.first().map_or(0, Vec::len);
    for (row, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(EvalError::Ragged { row, expected: cols, got: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite(what));
        }
    }
    Ok(cols)
}

pub(crate) fn column(rows: &[Vec<f64>], c: usize) -> Vec<f64> {
    rows.iter().map(|r| r[c]).collect()
}

/// `mi[j][l]` = normalized MI between property `j` and latent coordinate `l`.
pub fn mi_matrix(latents: &[Vec<f64>], properties: &[Vec<f64>], bins: usize) -> Result<Vec<Vec<f64>>, EvalError> {
    if latents.len() != properties.len() {
        return Err(EvalError::Ragged { row: 0, expected: latents.len(), got: properties.len() });
    }
    if latents.len() < MIN_MI_SAMPLES {
        return Err(EvalError::TooFew { what: "mi_matrix", min: MIN_MI_SAMPLES, got: latents.len() });
    }
    if bins < 2 {
        return Err(EvalError::Empty("histogram bins"));
    }
    let l = check_matrix(latents, "latents")?;
    let j = check_matrix(properties, "properties")?;
    let zb: Vec<Vec<usize>> = (0..l).map(|c| equal_frequency_bins(&column(latents, c), bins)).collect();
    let yb: Vec<Vec<usize>> = (0..j).map(|c| equal_frequency_bins(&column(properties, c), bins)).collect();
    Ok(yb.iter().map(|y| zb.iter().map(|z| normalized_mi(z, y)).collect()).collect())
}
