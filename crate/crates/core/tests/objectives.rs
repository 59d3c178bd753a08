mod common;

use mdvae::autodiff::{Tape, Tensor};
use mdvae::chem::{canonical_key, AtomRegistry, MolecularGraph};
use mdvae::dataset::{Batch, DatasetRecord};
use mdvae::decoder::reconstruction_nll;
use mdvae::encoder::encode_graph_values;
use mdvae::heads::{Group, GroupHead, GroupSpec, PolynomialHead};
use mdvae::model::{Model, ModelConfig};
use mdvae::objectives::{
    build_loss, covariance, derangement, dip_penalty, kl_per_dim, loss_and_gradients, mono_direction_penalty,
    mono_gradient_penalty, total_loss, LossInputs, LossWeights, MonoMode, ObjectiveError,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

fn molecules() -> Vec<MolecularGraph> {
    vec![
        MolecularGraph::new(vec![0, 0, 2], [(0, 1, 1), (1, 2, 2)]).unwrap(),
        MolecularGraph::new(vec![0, 1, 0, 0], [(0, 1, 1), (1, 2, 1), (2, 3, 1), (0, 3, 1)]).unwrap(),
        MolecularGraph::new(vec![1, 0], [(0, 1, 3)]).unwrap(),
    ]
}

fn batch_of(graphs: &[MolecularGraph], props: &[Vec<f64>]) -> Batch {
    let reg = AtomRegistry::qm9();
    let recs: Vec<DatasetRecord> = graphs
        .iter()
        .zip(props)
        .map(|(g, p)| DatasetRecord {
            graph: g.clone(),
            smiles: String::new(),
            raw: p.clone(),
            properties: p.clone(),
            key: canonical_key(g, &reg).unwrap(),
        })
        .collect();
    let refs: Vec<&DatasetRecord> = recs.iter().collect();
    Batch::from_records(&refs, 6, reg.len()).unwrap()
}

fn model(seed: u64, hidden: usize, latent: usize, groups: GroupSpec) -> Model {
    let config = ModelConfig { hidden, latent, steps: 2, degree: 3 };
    Model::new(config, AtomRegistry::qm9(), groups, seed).unwrap()
}

fn grouped() -> GroupSpec {
    GroupSpec {
        groups: vec![
            Group { latent_dims: vec![0], properties: vec![0] },
            Group { latent_dims: vec![1, 2], properties: vec![1, 2] },
        ],
    }
}

#[test]
fn kl_tabulated() {
    assert_eq!(kl_per_dim(0.0, 0.0), 0.0);
    assert_eq!(kl_per_dim(1.0, 0.0), 0.5);
    assert!((kl_per_dim(0.0, 2f64.ln()) - 0.806_852_819_440_054_7).abs() < 1e-12);
    assert!(kl_per_dim(0.1, 0.0) > 0.0 && kl_per_dim(0.0, 0.1) > 0.0);
}

/// E_q[log q(z) − log p(z)] by sampling, against the closed form. Draws
/// come in antithetic pairs (u, −u) around μ.
#[test]
fn kl_matches_monte_carlo() {
    let mut rng = common::rng(40);
    let unit = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..20 {
        let mu = rng.random_range(-2.0..2.0);
        let sigma: f64 = rng.random_range(0.3..2.0);
        let log_ratio = |z: f64| (-0.5 * ((z - mu) / sigma).powi(2) - sigma.ln()) - (-0.5 * z * z);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n / 2 {
            let u: f64 = unit.sample(&mut rng);
            acc += log_ratio(mu + sigma * u) + log_ratio(mu - sigma * u);
        }
        let mc = acc / n as f64;
        let exact = kl_per_dim(mu, sigma.ln());
        assert!((mc - exact).abs() < 1e-2, "μ={mu} σ={sigma}: {mc} vs {exact}");
    }
}

fn whitened() -> Vec<Vec<f64>> {
    vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]]
}

#[test]
fn dip_known_batches() {
    assert_eq!(dip_penalty(&whitened()).unwrap(), 0.0);
    // Rows L·w with L the Cholesky factor of [[1, .5], [.5, 1]].
    let c = 0.75f64.sqrt();
    let skew: Vec<Vec<f64>> = whitened().iter().map(|w| vec![w[0], 0.5 * w[0] + c * w[1]]).collect();
    assert!((dip_penalty(&skew).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(dip_penalty(&[vec![1.0, 2.0]]), Err(ObjectiveError::BatchTooSmall { term: "dip", got: 1 }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Against E[xy] − E[x]E[y], and under batch reordering.
    #[test]
    fn dip_matches_moment_oracle(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..12), seed in 0u64..1000) {
        let b = rows.len() as f64;
        let mut oracle = 0.0;
        for p in 0..3 {
            for q in 0..3 {
                let exy = rows.iter().map(|r| r[p] * r[q]).sum::<f64>() / b;
                let ex = rows.iter().map(|r| r[p]).sum::<f64>() / b;
                let ey = rows.iter().map(|r| r[q]).sum::<f64>() / b;
                let s = exy - ex * ey - if p == q { 1.0 } else { 0.0 };
                oracle += s * s;
            }
        }
        let got = dip_penalty(&rows).unwrap();
        prop_assert!((got - oracle).abs() < 1e-9 * oracle.max(1.0));
        let mut shuffled = rows.clone();
        let perm = common::random_permutation(&mut common::rng(seed), rows.len());
        for (i, &p) in perm.iter().enumerate() {
            shuffled[p] = rows[i].clone();
        }
        prop_assert!((dip_penalty(&shuffled).unwrap() - got).abs() < 1e-12 * got.max(1.0));
    }

    #[test]
    fn penalties_are_nonnegative(
        coefs in prop::collection::vec(-2.0f64..2.0, 4),
        zs in prop::collection::vec(-5.0f64..5.0, 2..10),
        ys in prop::collection::vec(-3.0f64..3.0, 10),
        seed in 0u64..1000,
    ) {
        let head = GroupHead {
            group: Group { latent_dims: vec![0], properties: vec![0] },
            polynomials: vec![coefs],
            mixing: vec![vec![1.0]],
            noise_sigma: vec![1.0],
        };
        let zbar: Vec<Vec<f64>> = zs.iter().map(|&z| vec![z]).collect();
        prop_assert!(mono_gradient_penalty(&[head], &zbar) >= 0.0);
        let y: Vec<Vec<f64>> = ys[..zs.len()].iter().map(|&v| vec![v]).collect();
        let pairing = derangement(zs.len(), &mut common::rng(seed));
        prop_assert!(mono_direction_penalty(&GroupSpec::singletons(1), &zbar, &y, &pairing).unwrap() >= 0.0);
    }
}

#[test]
fn covariance_is_population_form() {
    let s = covariance(&[vec![0.0], vec![2.0]]);
    assert_eq!(s, vec![vec![1.0]]);
}

fn single(coefs: Vec<f64>) -> GroupHead {
    let h = PolynomialHead::new(coefs, 1.0).unwrap();
    GroupHead {
        group: Group { latent_dims: vec![0], properties: vec![0] },
        polynomials: vec![h.coefficients],
        mixing: vec![vec![1.0]],
        noise_sigma: vec![1.0],
    }
}

#[test]
fn gradient_penalty_tabulated() {
    let zbar: Vec<Vec<f64>> = (-5..=5).map(|z| vec![z as f64]).collect();
    assert_eq!(mono_gradient_penalty(&[single(vec![0.0, 0.0, 0.0, 1.0])], &zbar), 0.0);
    assert_eq!(mono_gradient_penalty(&[single(vec![0.0, -2.0])], &zbar), 2.0);
    assert_eq!(mono_gradient_penalty(&[single(vec![0.0, -1.0, 1.0])], &[vec![0.0]]), 1.0);
}

#[test]
fn direction_penalty_tabulated() {
    let g = GroupSpec::singletons(1);
    let co = mono_direction_penalty(&g, &[vec![0.0], vec![1.0]], &[vec![0.0], vec![2.0]], &[1, 0]).unwrap();
    assert_eq!(co, 0.0);
    // Both ordered pairs contribute 1; the batch mean is 1.
    let anti = mono_direction_penalty(&g, &[vec![0.0], vec![1.0]], &[vec![1.0], vec![0.0]], &[1, 0]).unwrap();
    assert_eq!(anti, 1.0);
    assert!(mono_direction_penalty(&g, &[vec![0.0]], &[vec![0.0]], &[0]).is_err());
    assert_eq!(
        mono_direction_penalty(&g, &[vec![0.0], vec![1.0]], &[vec![0.0], vec![1.0]], &[0, 0]),
        Err(ObjectiveError::Pairing)
    );
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Co-monotone batches of every size up to six score zero under every pairing.
#[test]
fn direction_penalty_zero_when_comonotone() {
    let mut rng = common::rng(41);
    let g = GroupSpec::singletons(2);
    for b in 2..=6 {
        for _ in 0..5 {
            let mut z: Vec<f64> = (0..b).map(|_| rng.random_range(-3.0..3.0)).collect();
            z.sort_by(f64::total_cmp);
            let mut y0: Vec<f64> = (0..b).map(|_| rng.random_range(-3.0..3.0)).collect();
            y0.sort_by(f64::total_cmp);
            let zbar: Vec<Vec<f64>> = z.iter().map(|&v| vec![v, -v]).collect();
            // Second property decreases with its own coordinate's negation, so it is co-monotone too.
            let y: Vec<Vec<f64>> = y0.iter().map(|&v| vec![v, -2.0 * v]).collect();
            for p in permutations(b) {
                assert_eq!(mono_direction_penalty(&g, &zbar, &y, &p).unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn derangements_have_no_fixed_points() {
    let mut rng = common::rng(42);
    for b in 2..20 {
        for _ in 0..20 {
            let p = derangement(b, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &x)| i != x));
            let mut s = p.clone();
            s.sort_unstable();
            assert_eq!(s, (0..b).collect::<Vec<_>>());
        }
    }
}

struct Fixture {
    model: Model,
    batch: Batch,
    noise: Vec<Tensor>,
    pairing: Vec<usize>,
}

fn fixture(seed: u64, groups: GroupSpec, hidden: usize, latent: usize) -> Fixture {
    let mut rng = common::rng(seed);
    let graphs = molecules();
    let j = groups.num_properties();
    let props: Vec<Vec<f64>> = graphs.iter().map(|_| (0..j).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
    let batch = batch_of(&graphs, &props);
    let noise = graphs.iter().map(|g| gaussian(&mut rng, g.num_atoms(), latent)).collect();
    let mut model = model(seed, hidden, latent, groups);
    // Push the head coefficients away from monotone so the hinge terms are active.
    for t in model.params.tensors_mut() {
        if t.cols == 4 && t.rows == 1 {
            t.data = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
    }
    Fixture { model, batch, noise, pairing: vec![2, 0, 1] }
}

impl Fixture {
    fn inputs(&self) -> LossInputs<'_> {
        LossInputs { batch: &self.batch, noise: &self.noise, pairing: Some(&self.pairing) }
    }
}

/// Each term recomputed from the plain (non-tape) functions.
#[test]
fn total_is_the_weighted_sum_of_independent_terms() {
    let f = fixture(43, GroupSpec::singletons(2), 7, 4);
    let w = LossWeights { alpha: 0.7, beta: 1.3, gamma: 2.1, lambda: 0.4, mono_mode: MonoMode::Gradient };
    let got = total_loss(&f.model, &f.inputs(), &w, 0.4).unwrap();

    let b = f.batch.len() as f64;
    let (mut recon, mut kl) = (0.0, 0.0);
    let (mut mu_means, mut zbar) = (Vec::new(), Vec::new());
    for (g, eps) in f.batch.graphs.iter().zip(&f.noise) {
        let (mu, ls) = encode_graph_values(&f.model, g);
        let z: Vec<f64> = (0..mu.len()).map(|i| mu.data[i] + ls.data[i].exp() * eps.data[i]).collect();
        let z = Tensor::new(mu.rows, mu.cols, z);
        recon += reconstruction_nll(&f.model, g, &z).unwrap() / b;
        kl += (0..mu.len()).map(|i| kl_per_dim(mu.data[i], ls.data[i])).sum::<f64>() / b;
        let mean = |t: &Tensor| (0..t.cols).map(|c| (0..t.rows).map(|r| t.get(r, c)).sum::<f64>() / t.rows as f64).collect::<Vec<_>>();
        mu_means.push(mean(&mu));
        zbar.push(mean(&z));
    }
    let dip = dip_penalty(&mu_means).unwrap();
    let mut prop = 0.0;
    for (bi, zb) in zbar.iter().enumerate() {
        for j in 0..2 {
            prop += f.model.property_head(j).unwrap().nll(f.batch.property(bi, j), zb[j]) / b;
        }
    }
    let mono = mono_gradient_penalty(&f.model.group_heads(), &zbar);

    let close = |a: f64, e: f64| (a - e).abs() <= 1e-10 * e.abs().max(1.0);
    assert!(close(got.recon, recon), "{} vs {recon}", got.recon);
    assert!(close(got.kl, kl));
    assert!(close(got.dip, dip));
    assert!(close(got.prop_nll, prop), "{} vs {prop}", got.prop_nll);
    assert!(close(got.mono, mono));
    assert!(mono > 0.0);
    let hand = recon + 0.4 * kl + 0.7 * dip + 1.3 * prop + 2.1 * mono;
    assert!(close(got.total, hand));
    assert_eq!(got.total, got.weighted_total(&w, 0.4));

    // Direction mode against the plain penalty on the same z̄.
    let wd = LossWeights { mono_mode: MonoMode::Direction, ..w };
    let got = total_loss(&f.model, &f.inputs(), &wd, 0.4).unwrap();
    let y: Vec<Vec<f64>> = (0..3).map(|bi| (0..2).map(|j| f.batch.property(bi, j)).collect()).collect();
    let plain = mono_direction_penalty(&f.model.groups, &zbar, &y, &f.pairing).unwrap();
    assert!(close(got.mono, plain));
}

#[test]
fn zero_weights_leave_reconstruction() {
    let f = fixture(44, GroupSpec::singletons(2), 6, 3);
    let zero = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, lambda: 0.0, mono_mode: MonoMode::Gradient };
    let got = total_loss(&f.model, &f.inputs(), &zero, 0.0).unwrap();
    assert_eq!(got.total, got.recon);

    let w = LossWeights { gamma: 0.0, ..LossWeights::default() };
    let off = LossWeights { mono_mode: MonoMode::Off, ..LossWeights::default() };
    let a = total_loss(&f.model, &f.inputs(), &w, 1.0).unwrap();
    let b = total_loss(&f.model, &f.inputs(), &off, 1.0).unwrap();
    assert_eq!(a.total, b.total);
}

#[test]
fn non_finite_terms_are_named() {
    let mut f = fixture(45, GroupSpec::singletons(2), 6, 3);
    let id = f.model.params.id("head.prop0.noise").unwrap();
    f.model.params.get_mut(id).data[0] = f64::NAN;
    let err = total_loss(&f.model, &f.inputs(), &LossWeights::default(), 1.0).unwrap_err();
    assert!(matches!(err, ObjectiveError::NonFinite { term: "prop_nll", value } if value.is_nan()), "{err}");
}

#[test]
fn batch_and_noise_are_checked() {
    let f = fixture(46, GroupSpec::singletons(2), 6, 3);
    let short = LossInputs { batch: &f.batch, noise: &f.noise[..2], pairing: None };
    assert!(matches!(total_loss(&f.model, &short, &LossWeights::default(), 1.0), Err(ObjectiveError::Noise { .. })));
    let no_pairing = LossInputs { batch: &f.batch, noise: &f.noise, pairing: None };
    let wd = LossWeights { mono_mode: MonoMode::Direction, ..LossWeights::default() };
    assert_eq!(total_loss(&f.model, &no_pairing, &wd, 1.0).unwrap_err(), ObjectiveError::Pairing);
}

/// Reverse-mode gradient of the full loss (all five terms active) against
/// central differences, for every parameter entry.
fn check_gradients(f: &Fixture, w: &LossWeights) -> f64 {
    let (base, grads) = loss_and_gradients(&f.model, &f.inputs(), w, w.lambda).unwrap();
    assert!(base.recon > 0.0 && base.kl > 0.0 && base.dip > 0.0 && base.prop_nll != 0.0 && base.mono > 0.0);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (pi, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let mut plus = f.model.clone();
            plus.params.tensors_mut()[pi].data[i] += h;
            let mut minus = f.model.clone();
            minus.params.tensors_mut()[pi].data[i] -= h;
            let lp = total_loss(&plus, &f.inputs(), w, w.lambda).unwrap().total;
            let lm = total_loss(&minus, &f.inputs(), w, w.lambda).unwrap().total;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let f = fixture(47, GroupSpec::singletons(2), 5, 3);
    let worst = check_gradients(&f, &LossWeights::default());
    assert!(worst < 1e-4, "gradient mode: {worst}");
    let wd = LossWeights { mono_mode: MonoMode::Direction, ..LossWeights::default() };
    let worst = check_gradients(&f, &wd);
    assert!(worst < 1e-4, "direction mode: {worst}");
}

#[test]
fn grouped_loss_gradient_matches_finite_differences() {
    let f = fixture(48, grouped(), 5, 4);
    let worst = check_gradients(&f, &LossWeights::default());
    assert!(worst < 1e-4, "grouped: {worst}");
}

/// The tape loss and the summed per-term gradients agree when built by hand.
#[test]
fn build_loss_reports_its_own_value() {
    let f = fixture(49, GroupSpec::singletons(2), 6, 3);
    let mut tape = Tape::new();
    let bound = f.model.params.bind(&mut tape);
    let (total, bd) = build_loss(&f.model, &mut tape, &bound, &f.inputs(), &LossWeights::default(), 1.0).unwrap();
    assert_eq!(tape.scalar(total), bd.total);
}
