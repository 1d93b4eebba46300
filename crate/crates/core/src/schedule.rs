//! Discrete variance-preserving noise schedule and the forward process.
//!
//! Index 0 is clean data (`alpha = 1`, `sigma = 0`, `lambda = +inf`). Indices
//! `1..=N` are usable diffusion steps; index 1 plays the role of the smallest
//! time the consistency functions map back to.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{check_dim, Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 2e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    lambda: Vec<f64>,
}

/// A latent together with the timestep index it lives at.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Array1<f64>,
    pub index: usize,
}

pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleConfig {
        steps,
        beta_min,
        beta_max,
    })
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_min,
            beta_max,
        } = config;
        if steps < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_max < 1.0) {
            return Err(Error::Schedule(format!(
                "beta bounds must lie in (0, 1), got [{beta_min}, {beta_max}]"
            )));
        }
        if beta_min > beta_max {
            return Err(Error::Schedule(format!(
                "beta_min {beta_min} exceeds beta_max {beta_max}"
            )));
        }

        let span = (steps - 1) as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|k| beta_min + (beta_max - beta_min) * k as f64 / span)
            .collect();

        let mut alpha = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        let mut lambda = Vec::with_capacity(steps + 1);
        alpha.push(1.0);
        sigma.push(0.0);
        lambda.push(f64::INFINITY);

        // log of the cumulative product, accumulated with ln1p to keep
        // 1 - alpha_bar accurate at small indices
        let mut log_abar = 0.0f64;
        for &beta in &betas {
            log_abar += (-beta).ln_1p();
            let abar = log_abar.exp();
            let one_minus = -log_abar.exp_m1();
            let a = abar.sqrt();
            let s = one_minus.sqrt();
            alpha.push(a);
            sigma.push(s);
            lambda.push(a.ln() - s.ln());
        }

        Ok(Self {
            config,
            betas,
            alpha,
            sigma,
            lambda,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Number of diffusion steps `N`.
    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha[i]
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigma[i]
    }

    /// Log signal-to-noise ratio `ln(alpha / sigma)`; `+inf` at index 0.
    pub fn lambda(&self, i: usize) -> f64 {
        self.lambda[i]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    pub(crate) fn check_index(&self, i: usize, lo: usize) -> Result<()> {
        if i < lo || i > self.steps() {
            Err(Error::Index {
                index: i,
                lo,
                hi: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `z = alpha_i * z0 + sigma_i * eps`.
    pub fn forward_diffuse(
        &self,
        z0: ArrayView1<f64>,
        i: usize,
        eps: ArrayView1<f64>,
    ) -> Result<LatentState> {
        self.check_index(i, 1)?;
        check_dim(z0.len(), eps.len())?;
        let (a, s) = (self.alpha[i], self.sigma[i]);
        let z = Array1::from_iter(z0.iter().zip(eps.iter()).map(|(x, e)| a * x + s * e));
        Ok(LatentState { z, index: i })
    }

    /// Row-wise forward process with a per-row index.
    pub fn forward_diffuse_rows(
        &self,
        z0: &Array2<f64>,
        indices: &[usize],
        eps: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        check_dim(z0.nrows(), indices.len())?;
        check_dim(z0.dim().0 * z0.dim().1, eps.len())?;
        let mut out = z0.clone();
        for ((mut row, e), &i) in out.rows_mut().into_iter().zip(eps.rows()).zip(indices) {
            self.check_index(i, 1)?;
            let (a, s) = (self.alpha[i], self.sigma[i]);
            row.zip_mut_with(&e, |x, &e| *x = a * *x + s * e);
        }
        Ok(out)
    }
}
