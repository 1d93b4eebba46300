//! Sample-quality metrics over a fixed feature map, the label oracle, the
//! analytic Gaussian check of the solver, and wall-clock timing.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::Rng;

use crate::data::{MotionSet, CHANNELS, FLAT, FRAMES};
use crate::error::{check_dim, Error, Result};
use crate::nets::{Activation, Cond, Depth, MlpSpec, NetLayout, NetParams};
use crate::optim::{cosine_lr, AdamConfig, AdamW};
use crate::schedule::NoiseSchedule;
use crate::solver::{ddim_grid, ddim_multistep, EpsModel};
use crate::teacher::randn;

/// Flattened frames followed by per-channel means and variances.
pub const FEATURE_DIM: usize = FLAT + 2 * CHANNELS;
pub const COV_REG: f64 = 1e-6;
pub const DIVERSITY_PAIRS: usize = 100;
pub const MMODALITY_PAIRS: usize = 10;
pub const ORACLE_GATE: f64 = 0.95;

pub fn feature_map(frames: &Array2<f64>) -> Result<Array2<f64>> {
    check_dim(FLAT, frames.ncols())?;
    let mut out = Array2::zeros((frames.nrows(), FEATURE_DIM));
    for (row, mut f) in frames.rows().into_iter().zip(out.rows_mut()) {
        f.slice_mut(s![..FLAT]).assign(&row);
        for c in 0..CHANNELS {
            let ch = row.slice(s![c..;CHANNELS]);
            let mean = ch.sum() / FRAMES as f64;
            let var = ch.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / FRAMES as f64;
            f[FLAT + c] = mean;
            f[FLAT + CHANNELS + c] = var;
        }
    }
    Ok(out)
}

/// Features with the condition each row was generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        check_dim(features.nrows(), labels.len())?;
        Ok(Self { features, labels })
    }

    pub fn from_frames(frames: &Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        Self::new(feature_map(frames)?, labels)
    }

    pub fn from_motion(data: &MotionSet) -> Result<Self> {
        Self::from_frames(&data.frames, data.labels.clone())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn moments(x: &Array2<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 rows for a covariance, got {n}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centred = x - &mean;
    let cov = centred.t().dot(&centred) / (n - 1) as f64;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "covariance".into(),
            step: 0,
        });
    }
    Ok((
        DVector::from_iterator(d, mean.iter().copied()),
        DMatrix::from_fn(d, d, |i, j| cov[[i, j]]),
    ))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussians given by moments. The cross term uses
/// `tr sqrt(sqrt(A) B sqrt(A))`, which equals `tr sqrt(A B)` and stays symmetric.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    check_dim(mu_a.len(), mu_b.len())?;
    let d = mu_a.len();
    let reg = DMatrix::<f64>::identity(d, d) * COV_REG;
    let a = cov_a + &reg;
    let b = cov_b + &reg;
    let ra = sqrt_psd(&a);
    let cross = sqrt_psd(&(&ra * &b * &ra)).trace();
    let dist = (mu_a - mu_b).norm_squared() + a.trace() + b.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

/// Frechet distance between Gaussian fits of two row sets.
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_dim(a.ncols(), b.ncols())?;
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Frechet distance in feature space between two sets of flattened frames.
pub fn toy_fid(frames: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    frechet_distance(&feature_map(frames)?, &feature_map(reference)?)
}

fn mean_pair_distance(x: &Array2<f64>, rows: &[usize], pairs: usize) -> f64 {
    let (a, b) = rows.split_at(pairs);
    a.iter()
        .zip(b)
        .map(|(&i, &j)| {
            let d = &x.row(i) - &x.row(j);
            d.dot(&d).sqrt()
        })
        .sum::<f64>()
        / pairs as f64
}

/// Mean distance between aligned members of two disjoint random subsets.
pub fn diversity<R: Rng + ?Sized>(x: &Array2<f64>, pairs: usize, rng: &mut R) -> Result<f64> {
    if pairs == 0 || x.nrows() < 2 * pairs {
        return Err(Error::Invalid(format!(
            "diversity needs {} rows, got {}",
            2 * pairs,
            x.nrows()
        )));
    }
    let rows = sample(rng, x.nrows(), 2 * pairs).into_vec();
    Ok(mean_pair_distance(x, &rows, pairs))
}

/// Within-condition [`diversity`] averaged over `conditions` distinct labels,
/// taken in ascending order.
pub fn mmodality<R: Rng + ?Sized>(set: &FeatureSet, conditions: usize, pairs: usize, rng: &mut R) -> Result<f64> {
    let mut labels = set.labels.clone();
    labels.sort_unstable();
    labels.dedup();
    if conditions == 0 || conditions > labels.len() {
        return Err(Error::Invalid(format!(
            "asked for {conditions} conditions, set has {}",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for &c in &labels[..conditions] {
        let members: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == c).collect();
        if pairs == 0 || members.len() < 2 * pairs {
            return Err(Error::Invalid(format!(
                "condition {c} has {} samples, need {}",
                members.len(),
                2 * pairs
            )));
        }
        let picks: Vec<usize> = sample(rng, members.len(), 2 * pairs)
            .into_iter()
            .map(|k| members[k])
            .collect();
        total += mean_pair_distance(&set.features, &picks, pairs);
    }
    Ok(total / conditions as f64)
}

/// Label classifier on features, trained on real data.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    pub net: NetParams,
    /// Per-feature standardization applied before the network.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub heldout_acc: f64,
}

pub fn oracle_layout(classes: usize) -> NetLayout {
    NetLayout::new(&MlpSpec {
        dense_in: FEATURE_DIM,
        embedding: None,
        hidden: vec![64, 64],
        out: classes,
        activation: Activation::Silu,
        layer_norm: false,
        residual: false,
        input_skip: false,
    })
    .expect("oracle layout")
}

fn softmax_xent(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
        loss -= row[y].max(1e-300).ln();
        row[y] -= 1.0;
    }
    grad /= n;
    (loss / n, grad)
}

impl OracleClassifier {
    /// Trains on `data` and records accuracy on `heldout`.
    pub fn train<R: Rng + ?Sized>(
        data: &MotionSet,
        heldout: &MotionSet,
        classes: usize,
        iters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let feats = feature_map(&data.frames)?;
        let mean = feats.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std: Vec<f64> = feats.std_axis(Axis(0), 0.0).iter().map(|s| s.max(1e-8)).collect();
        let mut oracle = Self {
            net: NetParams::init(oracle_layout(classes), rng, false),
            mean,
            std,
            heldout_acc: 0.0,
        };
        let x = oracle.standardize(&feats);
        let mut opt = AdamW::new(AdamConfig::default(), oracle.net.param_count());
        let batch = 128.min(data.len());
        for step in 0..iters {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.len())).collect();
            let xb = x.select(Axis(0), &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let tape = oracle.net.forward(&xb, None, Depth::Full)?;
            let (loss, up) = softmax_xent(tape.output(), &yb);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "oracle loss".into(),
                    step,
                });
            }
            let g = oracle.net.backward(&tape, &up, true)?;
            opt.step(&mut oracle.net.values, &g.params, cosine_lr(1e-3, step, iters));
        }
        oracle.heldout_acc = oracle.accuracy_unchecked(&FeatureSet::from_motion(heldout)?)?;
        Ok(oracle)
    }

    fn standardize(&self, f: &Array2<f64>) -> Array2<f64> {
        let mut x = f.clone();
        for mut row in x.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        x
    }

    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<usize>> {
        let logits = self.net.forward(&self.standardize(features), None, Depth::Full)?.into_output();
        Ok(logits.rows().into_iter().map(argmax).collect())
    }

    fn accuracy_unchecked(&self, set: &FeatureSet) -> Result<f64> {
        let pred = self.predict(&set.features)?;
        let hits = pred.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / set.len().max(1) as f64)
    }
}

fn argmax(row: ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Fraction of samples the oracle assigns to their conditioning label.
/// Refuses to score with an oracle below the held-out gate.
pub fn cond_accuracy(samples: &FeatureSet, oracle: &OracleClassifier) -> Result<f64> {
    if oracle.heldout_acc < ORACLE_GATE {
        return Err(Error::Gate(format!(
            "oracle held-out accuracy {:.3} below {ORACLE_GATE}",
            oracle.heldout_acc
        )));
    }
    oracle.accuracy_unchecked(samples)
}

/// Optimal noise predictor for standard Gaussian data: `eps* = sigma_t z_t`.
pub struct GaussianOptimal<'a>(pub &'a NoiseSchedule);

impl EpsModel for GaussianOptimal<'_> {
    fn eps(&self, z: &Array2<f64>, t: &[usize], _: &[f64], _: &[Cond]) -> Result<Array2<f64>> {
        check_dim(z.nrows(), t.len())?;
        let mut out = z.clone();
        for (mut row, &i) in out.rows_mut().into_iter().zip(t) {
            row *= self.0.sigma(i);
        }
        Ok(out)
    }
}

/// Variance after DDIM with the optimal predictor, starting from unit variance.
/// Each step `i -> j` scales the latent by `alpha_i alpha_j + sigma_i sigma_j`.
pub fn gaussian_variance_recursion(s: &NoiseSchedule, grid: &[usize]) -> f64 {
    grid.windows(2)
        .map(|p| {
            let (i, j) = (p[0], p[1]);
            (s.alpha(i) * s.alpha(j) + s.sigma(i) * s.sigma(j)).powi(2)
        })
        .product()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleRow {
    pub steps: usize,
    /// Closed-form variance of the discrete solver.
    pub recursion_var: f64,
    /// Sample variance of the implemented solver's output.
    pub measured_var: f64,
    /// `|measured - 1|`: distance from the exact flow, which keeps unit variance.
    pub flow_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub rows: Vec<OracleRow>,
}

impl OracleReport {
    pub fn max_relative_gap(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.measured_var - r.recursion_var).abs() / r.recursion_var)
            .fold(0.0, f64::max)
    }

    pub fn error_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].flow_error < w[0].flow_error)
    }
}

pub const ORACLE_STEPS: [usize; 4] = [1, 2, 5, 50];

/// Runs guided DDIM with [`GaussianOptimal`] from `z_T ~ N(0, I)`.
pub fn gaussian_oracle_suite<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    samples: usize,
    dim: usize,
    rng: &mut R,
) -> Result<OracleReport> {
    let model = GaussianOptimal(s);
    let z = randn(rng, samples, dim);
    let w = vec![0.0; samples];
    let cond = vec![Cond::Null; samples];
    let mut rows = Vec::new();
    for steps in ORACLE_STEPS {
        let grid = ddim_grid(s.steps(), steps)?;
        let out = ddim_multistep(&model, s, &z, &grid, &w, &cond)?;
        let measured_var = out.z0_hat.iter().map(|v| v * v).sum::<f64>() / out.z0_hat.len() as f64;
        rows.push(OracleRow {
            steps,
            recursion_var: gaussian_variance_recursion(s, &grid),
            measured_var,
            flow_error: (measured_var - 1.0).abs(),
        });
    }
    Ok(OracleReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_ms: f64,
    /// Coefficient of variation across calls.
    pub cv: f64,
}

/// Mean wall time of `n` single-sample generations after one warm-up call.
pub fn aits<F: FnMut() -> Result<()>>(mut sampler: F, n: usize) -> Result<Timing> {
    if n == 0 {
        return Err(Error::Invalid("aits needs at least one call".into()));
    }
    sampler()?;
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        let t0 = Instant::now();
        sampler()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / n as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(Timing {
        mean_ms: mean,
        cv: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub toy_fid: f64,
    pub diversity: f64,
    pub mmodality: f64,
    pub cond_acc: f64,
    pub aits_ms: f64,
    pub nfe: usize,
}

impl MetricsReport {
    pub const HEADER: [&'static str; 6] = ["toy_fid", "diversity", "mmodality", "cond_acc", "aits_ms", "nfe"];

    pub fn fields(&self) -> [String; 6] {
        [
            self.toy_fid.to_string(),
            self.diversity.to_string(),
            self.mmodality.to_string(),
            self.cond_acc.to_string(),
            self.aits_ms.to_string(),
            self.nfe.to_string(),
        ]
    }
}

/// Scores decoded samples against a real reference set. `aits_ms` and `nfe`
/// come from the caller since they depend on the sampler, not the samples.
pub fn score<R: Rng + ?Sized>(
    samples: &FeatureSet,
    reference: &FeatureSet,
    oracle: &OracleClassifier,
    classes: usize,
    rng: &mut R,
) -> Result<MetricsReport> {
    let pairs = DIVERSITY_PAIRS.min(samples.len() / 2);
    let per_class = samples.len() / classes.max(1);
    Ok(MetricsReport {
        toy_fid: frechet_distance(&samples.features, &reference.features)?,
        diversity: diversity(&samples.features, pairs, rng)?,
        mmodality: mmodality(samples, classes, MMODALITY_PAIRS.min(per_class / 2), rng)?,
        cond_acc: cond_accuracy(samples, oracle)?,
        aits_ms: 0.0,
        nfe: 0,
    })
}
