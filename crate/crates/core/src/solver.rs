//! Probability-flow ODE solving and the phased consistency samplers.
//!
//! Every network call goes through [`EpsModel`]. The phased sampler jumps
//! edge to edge with one student evaluation per phase and consumes no
//! randomness; the stochastic consistency baseline re-noises between jumps;
//! the teacher baseline runs guided DDIM over an index grid.

use std::cell::Cell;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::nets::{CondNet, Cond};
use crate::schedule::NoiseSchedule;
use crate::teacher::cfg_epsilon;

/// Anything that predicts noise for a batch of latents.
pub trait EpsModel {
    fn eps(&self, z: &Array2<f64>, t: &[usize], w: &[f64], cond: &[Cond]) -> Result<Array2<f64>>;
}

impl EpsModel for CondNet {
    fn eps(&self, z: &Array2<f64>, t: &[usize], w: &[f64], cond: &[Cond]) -> Result<Array2<f64>> {
        self.predict(z, t, w, cond)
    }
}

impl<M: EpsModel + ?Sized> EpsModel for &M {
    fn eps(&self, z: &Array2<f64>, t: &[usize], w: &[f64], cond: &[Cond]) -> Result<Array2<f64>> {
        (**self).eps(z, t, w, cond)
    }
}

/// Wraps a model and counts batched evaluations.
pub struct CountingModel<M> {
    pub inner: M,
    calls: Cell<usize>,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<M: EpsModel> EpsModel for CountingModel<M> {
    fn eps(&self, z: &Array2<f64>, t: &[usize], w: &[f64], cond: &[Cond]) -> Result<Array2<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.eps(z, t, w, cond)
    }
}

/// Coefficients `(c_z, c_eps)` with `ddim(z, eps) = c_z * z + c_eps * eps`.
pub fn ddim_coeffs(s: &NoiseSchedule, i: usize, j: usize) -> (f64, f64) {
    let ratio = s.alpha(j) / s.alpha(i);
    (ratio, s.sigma(j) - ratio * s.sigma(i))
}

fn check_step(s: &NoiseSchedule, i: usize, j: usize) -> Result<()> {
    s.check_index(i, 1)?;
    s.check_index(j, 1)?;
    if j > i {
        return Err(Error::Invalid(format!(
            "solver runs toward lower noise only, got {i} -> {j}"
        )));
    }
    Ok(())
}

/// One deterministic DDIM step from index `i` down to index `j`.
pub fn ddim_step(
    s: &NoiseSchedule,
    z_t: ArrayView1<f64>,
    i: usize,
    j: usize,
    eps_hat: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    check_step(s, i, j)?;
    check_dim(z_t.len(), eps_hat.len())?;
    if i == j {
        return Ok(z_t.to_owned());
    }
    let ratio = s.alpha(j) / s.alpha(i);
    let (sig_i, sig_j) = (s.sigma(i), s.sigma(j));
    Ok(Array1::from_iter(
        z_t.iter()
            .zip(eps_hat.iter())
            .map(|(z, e)| ratio * (z - sig_i * e) + sig_j * e),
    ))
}

/// Row-wise [`ddim_step`] with per-row source and destination indices.
pub fn ddim_step_rows(
    s: &NoiseSchedule,
    z: &Array2<f64>,
    from: &[usize],
    to: &[usize],
    eps: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_dim(z.nrows(), from.len())?;
    check_dim(z.nrows(), to.len())?;
    if z.dim() != eps.dim() {
        return Err(Error::Dimension {
            expected: z.len(),
            got: eps.len(),
        });
    }
    let mut out = z.clone();
    for (r, (&i, &j)) in from.iter().zip(to).enumerate() {
        check_step(s, i, j)?;
        if i == j {
            continue;
        }
        let ratio = s.alpha(j) / s.alpha(i);
        let (sig_i, sig_j) = (s.sigma(i), s.sigma(j));
        let mut row = out.row_mut(r);
        row.zip_mut_with(&eps.row(r), |x, &e| *x = ratio * (*x - sig_i * e) + sig_j * e);
    }
    Ok(out)
}

/// The solution map `F(z, t_i, t_j)`: one epsilon evaluation, then a DDIM step.
pub fn f_big<M: EpsModel + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    z: &Array2<f64>,
    from: &[usize],
    to: &[usize],
    w: &[f64],
    cond: &[Cond],
) -> Result<Array2<f64>> {
    for (&i, &j) in from.iter().zip(to) {
        check_step(s, i, j)?;
    }
    let eps = model.eps(z, from, w, cond)?;
    ddim_step_rows(s, z, from, to, &eps)
}

/// Edge timesteps `s_0 = 1 < s_1 < ... < s_M = N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhasePartition {
    edges: Vec<usize>,
}

pub fn build_partition(n: usize, m: usize) -> Result<PhasePartition> {
    if m == 0 || n < 2 || m > n - 1 {
        return Err(Error::Invalid(format!(
            "cannot split {n} steps into {m} phases"
        )));
    }
    let edges: Vec<usize> = (0..=m)
        .map(|k| (1.0 + k as f64 * (n - 1) as f64 / m as f64).round_ties_even() as usize)
        .collect();
    debug_assert!(edges.windows(2).all(|w| w[0] < w[1]));
    Ok(PhasePartition { edges })
}

impl PhasePartition {
    pub fn from_edges(edges: Vec<usize>) -> Result<Self> {
        if edges.len() < 2 || edges[0] != 1 || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!("bad partition edges {edges:?}")));
        }
        Ok(Self { edges })
    }

    /// Number of phases `M`.
    pub fn phases(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    pub fn edge(&self, m: usize) -> usize {
        self.edges[m]
    }

    /// Phase containing index `i`. An edge `s_m` with `m < M` belongs to
    /// phase `m`, whose consistency target it is; `s_M` belongs to `M - 1`.
    pub fn phase_of(&self, i: usize) -> Result<usize> {
        let (lo, hi) = (self.edges[0], *self.edges.last().unwrap());
        if i < lo || i > hi {
            return Err(Error::Index { index: i, lo, hi });
        }
        let m = self.edges.partition_point(|&e| e <= i) - 1;
        Ok(m.min(self.phases() - 1))
    }
}

/// `f^m(z, t_i) = F(z, t_i, s_m)` with `m` the phase of `i`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_fn<M: EpsModel + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    p: &PhasePartition,
    z: &Array2<f64>,
    i: usize,
    w: &[f64],
    cond: &[Cond],
) -> Result<Array2<f64>> {
    let target = p.edge(p.phase_of(i)?);
    let b = z.nrows();
    f_big(model, s, z, &vec![i; b], &vec![target; b], w, cond)
}

#[derive(Debug, Clone)]
pub struct SamplerOutput {
    pub z0_hat: Array2<f64>,
    /// Network evaluations per sample.
    pub nfe: usize,
    /// Intermediate `(index, latents)` pairs, starting point first.
    pub trace: Vec<(usize, Array2<f64>)>,
}

/// Transition map from edge `s_from` down to edge `s_to`, one evaluation per phase.
#[allow(clippy::too_many_arguments)]
pub fn pcm_transition<M: EpsModel + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    p: &PhasePartition,
    z: &Array2<f64>,
    from_edge: usize,
    to_edge: usize,
    w: &[f64],
    cond: &[Cond],
) -> Result<SamplerOutput> {
    if from_edge > p.phases() || to_edge > from_edge {
        return Err(Error::Invalid(format!(
            "edge range {from_edge} -> {to_edge} outside 0..={}",
            p.phases()
        )));
    }
    let b = z.nrows();
    let mut z = z.clone();
    let mut trace = vec![(p.edge(from_edge), z.clone())];
    for m in (to_edge..from_edge).rev() {
        z = f_big(model, s, &z, &vec![p.edge(m + 1); b], &vec![p.edge(m); b], w, cond)?;
        trace.push((p.edge(m), z.clone()));
    }
    Ok(SamplerOutput {
        z0_hat: z,
        nfe: from_edge - to_edge,
        trace,
    })
}

/// Deterministic multi-phase sampling from `z_T` at `s_M` down to `s_0`.
pub fn pcm_sample<M: EpsModel + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    p: &PhasePartition,
    z_t: &Array2<f64>,
    w: &[f64],
    cond: &[Cond],
) -> Result<SamplerOutput> {
    if *p.edges.last().unwrap() != s.steps() {
        return Err(Error::Invalid(format!(
            "partition ends at {} but schedule has {} steps",
            p.edges.last().unwrap(),
            s.steps()
        )));
    }
    pcm_transition(model, s, p, z_t, p.phases(), 0, w, cond)
}

fn check_descending(steps: &[usize], first: usize) -> Result<()> {
    if steps.first() != Some(&first) || steps.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Invalid(format!(
            "steps must strictly decrease from {first}, got {steps:?}"
        )));
    }
    Ok(())
}

/// Multistep consistency baseline: jump to `s_0`, re-noise to the next
/// index with fresh Gaussian noise, repeat.
#[allow(clippy::too_many_arguments)]
pub fn cm_sample_stochastic<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    z_t: &Array2<f64>,
    steps: &[usize],
    w: &[f64],
    cond: &[Cond],
    rng: &mut R,
) -> Result<SamplerOutput> {
    check_descending(steps, s.steps())?;
    let b = z_t.nrows();
    let mut z = z_t.clone();
    let mut trace = vec![(steps[0], z.clone())];
    let mut z0 = z.clone();
    for (k, &i) in steps.iter().enumerate() {
        z0 = f_big(model, s, &z, &vec![i; b], &vec![1; b], w, cond)?;
        if let Some(&next) = steps.get(k + 1) {
            let (a, sg) = (s.alpha(next), s.sigma(next));
            z = z0.mapv(|x| a * x + sg * rng.sample::<f64, _>(StandardNormal));
            trace.push((next, z.clone()));
        }
    }
    trace.push((1, z0.clone()));
    Ok(SamplerOutput {
        z0_hat: z0,
        nfe: steps.len(),
        trace,
    })
}

/// Guided DDIM over an index grid `N = g_0 > g_1 > ... > g_K = 1`; two
/// evaluations (conditional and unconditional) per step.
pub fn ddim_multistep<M: EpsModel + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    z_t: &Array2<f64>,
    grid: &[usize],
    w: &[f64],
    cond: &[Cond],
) -> Result<SamplerOutput> {
    check_descending(grid, s.steps())?;
    if grid.len() < 2 || *grid.last().unwrap() != 1 {
        return Err(Error::Invalid(format!("grid must end at index 1, got {grid:?}")));
    }
    let b = z_t.nrows();
    let mut z = z_t.clone();
    let mut trace = vec![(grid[0], z.clone())];
    for pair in grid.windows(2) {
        let (i, j) = (pair[0], pair[1]);
        let eps = cfg_epsilon(model, &z, &vec![i; b], w, cond)?;
        z = ddim_step_rows(s, &z, &vec![i; b], &vec![j; b], &eps)?;
        trace.push((j, z.clone()));
    }
    Ok(SamplerOutput {
        z0_hat: z,
        nfe: 2 * (grid.len() - 1),
        trace,
    })
}

/// `steps + 1` grid points uniformly spaced from `n` down to 1, endpoints included.
pub fn ddim_grid(n: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > n - 1 {
        return Err(Error::Invalid(format!("cannot take {steps} steps over {n}")));
    }
    Ok((0..=steps)
        .map(|k| (n as f64 - k as f64 * (n - 1) as f64 / steps as f64).round_ties_even() as usize)
        .collect())
}

/// `count` evaluation indices for the stochastic baseline, starting at `n`.
pub fn cm_steps(n: usize, count: usize) -> Result<Vec<usize>> {
    let mut grid = ddim_grid(n, count)?;
    grid.pop();
    Ok(grid)
}

/// Worst errors of the exact-solution identities over random tuples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityReport {
    pub tuples: usize,
    /// Relative error of [`ddim_step`] against the exponential-integrator form.
    pub ddim_rel: f64,
    /// Relative error of composite Simpson quadrature of `exp(-lambda)`
    /// against its closed-form antiderivative.
    pub quadrature_rel: f64,
}

const SIMPSON_INTERVALS: usize = 4096;

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let h = (b - a) / SIMPSON_INTERVALS as f64;
    let inner: f64 = (1..SIMPSON_INTERVALS)
        .map(|k| f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    h / 3.0 * (f(a) + f(b) + inner)
}

/// Checks `ddim_step(z, i, j, e) = (a_j/a_i) z - a_j e * int_{l_i}^{l_j} exp(-l) dl`
/// on random `(i, j, z, e)` and the quadrature identity for the integral itself.
pub fn integral_identity_check<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    tuples: usize,
    dim: usize,
    rng: &mut R,
) -> Result<IdentityReport> {
    let mut report = IdentityReport {
        tuples,
        ddim_rel: 0.0,
        quadrature_rel: 0.0,
    };
    for _ in 0..tuples {
        let i = rng.random_range(2..=s.steps());
        let j = rng.random_range(1..i);
        let z: Array1<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let e: Array1<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (li, lj) = (s.lambda(i), s.lambda(j));
        let closed = (-li).exp() - (-lj).exp();
        let quad = simpson(|l| (-l).exp(), li, lj);
        report.quadrature_rel = report.quadrature_rel.max((quad - closed).abs() / closed.abs());
        let want = &z * (s.alpha(j) / s.alpha(i)) - &e * (s.alpha(j) * closed);
        let got = ddim_step(s, z.view(), i, j, e.view())?;
        let norm = |v: &Array1<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        report.ddim_rel = report.ddim_rel.max(norm(&(&got - &want)) / norm(&want));
    }
    Ok(report)
}
