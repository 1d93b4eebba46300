//! Two-stage pretraining: an autoencoder into a small latent space, then a
//! class-conditional epsilon-prediction diffusion model in that space.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{gen_dataset, MotionSet, CHANNELS, FLAT, FRAMES};
use crate::error::{check_dim, Error, Result};
use crate::eval::{self, OracleClassifier};
use crate::nets::{Activation, Cond, CondNet, CondNetSpec, Depth, MlpSpec, NetLayout, NetParams};
use crate::optim::{cosine_lr, AdamConfig, AdamW};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::solver::{ddim_grid, ddim_multistep, EpsModel};

/// Guided noise `(1 + w) eps(z, t, c) - w eps(z, t, null)`, two evaluations.
/// Evaluated as `eps_c + w (eps_c - eps_null)` so equal branches cancel exactly.
pub fn cfg_epsilon<M: EpsModel + ?Sized>(
    model: &M,
    z: &Array2<f64>,
    t: &[usize],
    w: &[f64],
    cond: &[Cond],
) -> Result<Array2<f64>> {
    check_dim(z.nrows(), w.len())?;
    let nulls = vec![Cond::Null; z.nrows()];
    let eps_c = model.eps(z, t, w, cond)?;
    let eps_u = model.eps(z, t, w, &nulls)?;
    let mut out = eps_c;
    for ((mut row, u), &wr) in out.rows_mut().into_iter().zip(eps_u.rows()).zip(w) {
        row.zip_mut_with(&u, |c, &u| *c += wr * (*c - u));
    }
    Ok(out)
}

pub(crate) fn randn<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn batch_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn check_finite(loss: f64, what: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.into(),
            step,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    /// Hidden widths of both encoder and decoder; empty gives linear maps.
    pub hidden: Vec<usize>,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: vec![128, 128],
            iters: 3000,
            batch: 128,
            lr: 1e-3,
        }
    }
}

/// Reconstruction quality of an autoencoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconReport {
    /// Mean per-frame Euclidean error, each frame's channels taken as one joint.
    pub mpjpe: f64,
    /// Mean latent distance between encodings of inputs and reconstructions.
    pub feature_error: f64,
}

fn mlp(input: usize, hidden: &[usize], out: usize) -> NetLayout {
    NetLayout::new(&MlpSpec {
        dense_in: input,
        embedding: None,
        hidden: hidden.to_vec(),
        out,
        activation: Activation::Silu,
        layer_norm: false,
        residual: false,
        input_skip: false,
    })
    .expect("plain mlp layout")
}

pub fn encoder_layout(cfg: &AutoencoderConfig) -> NetLayout {
    mlp(FLAT, &cfg.hidden, cfg.latent_dim)
}

pub fn decoder_layout(cfg: &AutoencoderConfig) -> NetLayout {
    let rev: Vec<usize> = cfg.hidden.iter().rev().copied().collect();
    mlp(cfg.latent_dim, &rev, FLAT)
}

pub fn encode(encoder: &NetParams, frames: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(encoder.forward(frames, None, Depth::Full)?.into_output())
}

pub fn recon_report(encoder: &NetParams, decoder: &NetParams, data: &MotionSet) -> Result<ReconReport> {
    let z = encode(encoder, &data.frames)?;
    let recon = decoder.forward(&z, None, Depth::Full)?.into_output();
    let n = data.len() as f64;
    let mut joint = 0.0;
    for (a, b) in recon.rows().into_iter().zip(data.frames.rows()) {
        for l in 0..FRAMES {
            let d2: f64 = (0..CHANNELS)
                .map(|c| (a[l * CHANNELS + c] - b[l * CHANNELS + c]).powi(2))
                .sum();
            joint += d2.sqrt();
        }
    }
    let z_recon = encode(encoder, &recon)?;
    let feature_error = (&z - &z_recon)
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .sum::<f64>()
        / n;
    Ok(ReconReport {
        mpjpe: joint / (n * FRAMES as f64),
        feature_error,
    })
}

/// Minimizes mean squared reconstruction error over flattened frames.
pub fn train_autoencoder<R: Rng + ?Sized>(
    data: &MotionSet,
    cfg: &AutoencoderConfig,
    rng: &mut R,
) -> Result<(NetParams, NetParams, ReconReport)> {
    if cfg.latent_dim > FLAT {
        return Err(Error::Invalid(format!(
            "latent width {} exceeds input width {FLAT}",
            cfg.latent_dim
        )));
    }
    let mut enc = NetParams::init(encoder_layout(cfg), rng, false);
    let mut dec = NetParams::init(decoder_layout(cfg), rng, false);
    let mut opt_e = AdamW::new(AdamConfig::default(), enc.param_count());
    let mut opt_d = AdamW::new(AdamConfig::default(), dec.param_count());
    let n = data.len();
    for step in 0..cfg.iters {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..n)).collect();
        let x = batch_rows(&data.frames, &idx);
        let te = enc.forward(&x, None, Depth::Full)?;
        let td = dec.forward(te.output(), None, Depth::Full)?;
        let diff = td.output() - &x;
        let scale = 1.0 / diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;
        check_finite(loss, "autoencoder loss", step)?;
        let up = diff * (2.0 * scale);
        let gd = dec.backward(&td, &up, true)?;
        let ge = enc.backward(&te, &gd.input, true)?;
        let lr = cosine_lr(cfg.lr, step, cfg.iters);
        opt_d.step(&mut dec.values, &gd.params, lr);
        opt_e.step(&mut enc.values, &ge.params, lr);
    }
    let report = recon_report(&enc, &dec, data)?;
    Ok((enc, dec, report))
}

/// Standardized encoder outputs with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDataset {
    pub latents: Array2<f64>,
    pub labels: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentDataset {
    pub fn encode(encoder: &NetParams, data: &MotionSet) -> Result<Self> {
        let raw = encode(encoder, &data.frames)?;
        let mean = raw.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std: Vec<f64> = raw
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|s| s.max(1e-8))
            .collect();
        let mut latents = raw;
        for mut row in latents.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[k]) / std[k];
            }
        }
        Ok(Self {
            latents,
            labels: data.labels.clone(),
            mean,
            std,
        })
    }

    pub fn destandardize(&self, z: &Array2<f64>) -> Array2<f64> {
        destandardize(z, &self.mean, &self.std)
    }
}

pub fn destandardize(z: &Array2<f64>, mean: &[f64], std: &[f64]) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = *v * std[k] + mean[k];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsTrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the label with the null condition.
    pub p_drop: f64,
}

impl Default for EpsTrainConfig {
    fn default() -> Self {
        Self {
            iters: 20000,
            batch: 128,
            lr: 2e-4,
            p_drop: 0.1,
        }
    }
}

/// One noise-regression batch: clean latents, timesteps, noise, conditions.
#[derive(Debug, Clone)]
pub struct EpsBatch {
    pub z0: Array2<f64>,
    pub t: Vec<usize>,
    pub eps: Array2<f64>,
    pub cond: Vec<Cond>,
}

impl EpsBatch {
    pub fn sample<R: Rng + ?Sized>(
        data: &LatentDataset,
        s: &NoiseSchedule,
        batch: usize,
        p_drop: f64,
        rng: &mut R,
    ) -> Self {
        let n = data.labels.len();
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let z0 = batch_rows(&data.latents, &idx);
        let t = (0..batch).map(|_| rng.random_range(1..=s.steps())).collect();
        let eps = randn(rng, batch, z0.ncols());
        let cond = idx
            .iter()
            .map(|&i| {
                if rng.random::<f64>() < p_drop {
                    Cond::Null
                } else {
                    Cond::Class(data.labels[i])
                }
            })
            .collect();
        Self { z0, t, eps, cond }
    }
}

/// Batch mean of `|eps - eps_hat(z_t, t, c)|^2` and its parameter gradient.
pub fn teacher_loss(net: &CondNet, s: &NoiseSchedule, b: &EpsBatch) -> Result<(f64, Vec<f64>)> {
    let z_t = s.forward_diffuse_rows(&b.z0, &b.t, &b.eps)?;
    let tape = net.forward(&z_t, &b.t, &[], &b.cond, Depth::Full)?;
    let diff = tape.output() - &b.eps;
    let inv_b = 1.0 / b.t.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() * inv_b;
    let grads = net.backward(&tape, &(diff * (2.0 * inv_b)), true)?;
    Ok((loss, grads.params))
}

pub fn train_teacher<R: Rng + ?Sized>(
    latents: &LatentDataset,
    s: &NoiseSchedule,
    spec: CondNetSpec,
    cfg: &EpsTrainConfig,
    rng: &mut R,
) -> Result<CondNet> {
    let mut net = CondNet::init(spec, rng);
    let mut opt = AdamW::new(AdamConfig::default(), net.params.param_count());
    for step in 0..cfg.iters {
        let b = EpsBatch::sample(latents, s, cfg.batch, cfg.p_drop, rng);
        let (loss, grads) = teacher_loss(&net, s, &b)?;
        check_finite(loss, "teacher loss", step)?;
        opt.step(&mut net.params.values, &grads, cosine_lr(cfg.lr, step, cfg.iters));
    }
    Ok(net)
}

/// Everything the teacher stage produces.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    pub config: TeacherConfig,
    pub seed: u64,
    pub encoder: NetParams,
    pub decoder: NetParams,
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
    pub eps_net: CondNet,
    pub oracle: OracleClassifier,
    pub recon: ReconReport,
    /// Toy-FID of guided 50-step DDIM samples; `None` until measured.
    pub gate_fid: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub schedule: ScheduleConfig,
    pub classes: usize,
    pub train_samples: usize,
    pub jitter: f64,
    pub autoencoder: AutoencoderConfig,
    pub eps: EpsTrainConfig,
    pub oracle_iters: usize,
    /// Guidance scale used when scoring samples.
    pub eval_omega: f64,
    pub eval_samples: usize,
    /// Maximum toy-FID of 50-step guided DDIM samples.
    pub gate_fid: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            classes: 4,
            train_samples: 2048,
            jitter: 1.0,
            autoencoder: AutoencoderConfig::default(),
            eps: EpsTrainConfig::default(),
            oracle_iters: 1500,
            eval_omega: DEFAULT_EVAL_OMEGA,
            eval_samples: 1024,
            gate_fid: DEFAULT_GATE_FID,
        }
    }
}

pub const DEFAULT_EVAL_OMEGA: f64 = 0.25;
pub const DEFAULT_GATE_FID: f64 = 0.1;

/// Separate streams so changing one stage's budget leaves the others' data alone.
pub(crate) fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stage.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

pub const STAGE_DATA: u64 = 1;
pub const STAGE_AE: u64 = 2;
pub const STAGE_EPS: u64 = 3;
pub const STAGE_ORACLE: u64 = 4;
pub const STAGE_REFERENCE: u64 = 5;
pub const STAGE_GATE: u64 = 6;

impl TeacherBundle {
    /// Runs the full teacher stage and measures the quality gate.
    pub fn train(cfg: &TeacherConfig, seed: u64) -> Result<Self> {
        let schedule = NoiseSchedule::new(cfg.schedule)?;
        let mut rng = crate::seeded(stage_seed(seed, STAGE_DATA));
        let samples = gen_dataset(cfg.train_samples, cfg.classes, cfg.jitter, &mut rng)?;
        let data = MotionSet::from_samples(&samples);

        let mut rng = crate::seeded(stage_seed(seed, STAGE_AE));
        let (encoder, decoder, recon) = train_autoencoder(&data, &cfg.autoencoder, &mut rng)?;
        let latents = LatentDataset::encode(&encoder, &data)?;

        let mut rng = crate::seeded(stage_seed(seed, STAGE_EPS));
        let spec = CondNetSpec::teacher(cfg.autoencoder.latent_dim, cfg.classes);
        let eps_net = train_teacher(&latents, &schedule, spec, &cfg.eps, &mut rng)?;

        let mut rng = crate::seeded(stage_seed(seed, STAGE_ORACLE));
        let heldout = MotionSet::from_samples(&gen_dataset(cfg.eval_samples, cfg.classes, cfg.jitter, &mut rng)?);
        let oracle = OracleClassifier::train(&data, &heldout, cfg.classes, cfg.oracle_iters, &mut rng)?;

        let mut bundle = Self {
            config: cfg.clone(),
            seed,
            encoder,
            decoder,
            latent_mean: latents.mean,
            latent_std: latents.std,
            eps_net,
            oracle,
            recon,
            gate_fid: None,
        };
        bundle.gate_fid = Some(bundle.measure_gate()?);
        Ok(bundle)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.config.schedule)
    }

    pub fn latent_dim(&self) -> usize {
        self.eps_net.spec.latent_dim
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Standardized latents back to frames.
    pub fn decode(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        let raw = destandardize(z, &self.latent_mean, &self.latent_std);
        Ok(self.decoder.forward(&raw, None, Depth::Full)?.into_output())
    }

    /// Standardized latents of the training draw.
    pub fn latents(&self) -> Result<LatentDataset> {
        let mut rng = crate::seeded(stage_seed(self.seed, STAGE_DATA));
        let samples = gen_dataset(self.config.train_samples, self.config.classes, self.config.jitter, &mut rng)?;
        let data = MotionSet::from_samples(&samples);
        let raw = encode(&self.encoder, &data.frames)?;
        let mut latents = raw;
        for mut row in latents.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.latent_mean[k]) / self.latent_std[k];
            }
        }
        Ok(LatentDataset {
            latents,
            labels: data.labels,
            mean: self.latent_mean.clone(),
            std: self.latent_std.clone(),
        })
    }

    /// Held-out real data for scoring, independent of the training draw.
    pub fn reference_set(&self) -> Result<MotionSet> {
        let mut rng = crate::seeded(stage_seed(self.seed, STAGE_REFERENCE));
        let samples = gen_dataset(self.config.eval_samples, self.config.classes, self.config.jitter, &mut rng)?;
        Ok(MotionSet::from_samples(&samples))
    }

    /// Balanced condition labels and prior draws for `n` samples.
    pub fn prior<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Vec<Cond>) {
        let z = randn(rng, n, self.latent_dim());
        let cond = (0..n).map(|i| Cond::Class(i % self.classes())).collect();
        (z, cond)
    }

    pub fn measure_gate(&self) -> Result<f64> {
        let s = self.schedule()?;
        let mut rng = crate::seeded(stage_seed(self.seed, STAGE_GATE));
        let (z, cond) = self.prior(self.config.eval_samples, &mut rng);
        let w = vec![self.config.eval_omega; z.nrows()];
        let out = ddim_multistep(&self.eps_net, &s, &z, &ddim_grid(s.steps(), 50)?, &w, &cond)?;
        let frames = self.decode(&out.z0_hat)?;
        let reference = self.reference_set()?;
        eval::toy_fid(&frames, &reference.frames)
    }

    pub fn passes_gate(&self) -> bool {
        self.gate_fid.is_some_and(|f| f <= self.config.gate_fid)
    }
}
