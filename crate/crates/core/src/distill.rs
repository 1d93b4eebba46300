//! Phased consistency distillation with an EMA target and a hinge
//! discriminator on a frozen teacher trunk.
//!
//! One step, for each sample in the batch:
//!
//! 1. draw a phase `m`, a pair `n < n + k` inside `[s_m, s_{m+1}]`, and a
//!    guidance scale `w ~ U[w_min, w_max]`;
//! 2. diffuse `z0` to `n + k` and solve one guided teacher step down to `n`;
//! 3. map both points to `s_m`: the online net from `n + k`, the target net
//!    from the solved point; the pseudo-Huber distance is the PCD loss;
//! 4. re-noise the online estimate to an index `s` in the same phase and
//!    score it against `z0` diffused to `s` with the discriminator.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::nets::{Activation, Cond, CondNet, Depth, MlpSpec, NetLayout, NetParams};
use crate::optim::{cosine_lr, AdamConfig, AdamW};
use crate::schedule::NoiseSchedule;
use crate::solver::{ddim_coeffs, ddim_step_rows, build_partition, EpsModel, PhasePartition};
use crate::teacher::{randn, TeacherBundle};

/// Width of the student's guidance-scale embedding.
pub const OMEGA_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Teacher solver skip, in schedule indices.
    pub k: usize,
    /// EMA rate of the target network.
    pub mu: f64,
    pub lambda_adv: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub phases: usize,
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub huber_c: f64,
    pub seed: u64,
    /// Rows are written to the training log every this many steps.
    pub log_every: usize,
}

pub const DEFAULT_W_MIN: f64 = 0.0;
pub const DEFAULT_W_MAX: f64 = 0.5;

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            k: 100,
            mu: 0.95,
            lambda_adv: 0.1,
            w_min: DEFAULT_W_MIN,
            w_max: DEFAULT_W_MAX,
            phases: 1,
            batch: 128,
            iters: 8000,
            lr: 3e-3,
            huber_c: 1e-3,
            seed: 0,
            log_every: 50,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.k >= steps {
            return bad(format!("k must be in 1..{steps}, got {}", self.k));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad(format!("mu must be in [0, 1], got {}", self.mu));
        }
        if !(self.lambda_adv >= 0.0) {
            return bad(format!("lambda_adv must be non-negative, got {}", self.lambda_adv));
        }
        if !(self.w_min <= self.w_max) {
            return bad(format!("w_min {} exceeds w_max {}", self.w_min, self.w_max));
        }
        if !(self.huber_c > 0.0) {
            return bad(format!("huber_c must be positive, got {}", self.huber_c));
        }
        if self.phases == 0 || self.batch == 0 {
            return bad("phases and batch must be positive".into());
        }
        Ok(())
    }
}

/// `sqrt(|a - b|^2 + c^2) - c`.
pub fn huber(a: &[f64], b: &[f64], c: f64) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    if !(c > 0.0) {
        return Err(Error::Invalid(format!("huber constant must be positive, got {c}")));
    }
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((d2 + c * c).sqrt() - c)
}

/// Batch-mean pseudo-Huber loss and its gradient w.r.t. `a`.
fn huber_rows(a: &Array2<f64>, b: &Array2<f64>, c: f64) -> (f64, Array2<f64>) {
    let n = a.nrows() as f64;
    let mut grad = a - b;
    let mut loss = 0.0;
    for mut row in grad.rows_mut() {
        let r = (row.dot(&row) + c * c).sqrt();
        loss += r - c;
        row /= r * n;
    }
    (loss / n, grad)
}

/// Guided teacher target from `n + k` down to `n`: the conditional and
/// unconditional DDIM solutions combined as `(1 + w) psi_c - w psi_null`.
#[allow(clippy::too_many_arguments)]
pub fn solve_target<M: EpsModel + ?Sized>(
    teacher: &M,
    s: &NoiseSchedule,
    z_nk: &Array2<f64>,
    n: &[usize],
    k: &[usize],
    w: &[f64],
    cond: &[Cond],
) -> Result<Array2<f64>> {
    let b = z_nk.nrows();
    check_dim(b, n.len())?;
    check_dim(b, k.len())?;
    check_dim(b, w.len())?;
    let mut from = Vec::with_capacity(b);
    for (&ni, &ki) in n.iter().zip(k) {
        if ki == 0 {
            return Err(Error::Invalid("skip k must be at least 1".into()));
        }
        s.check_index(ni, 1)?;
        s.check_index(ni + ki, 1)?;
        from.push(ni + ki);
    }
    let nulls = vec![Cond::Null; b];
    let psi_c = ddim_step_rows(s, z_nk, &from, n, &teacher.eps(z_nk, &from, w, cond)?)?;
    let psi_u = ddim_step_rows(s, z_nk, &from, n, &teacher.eps(z_nk, &from, w, &nulls)?)?;
    let mut out = psi_c;
    for ((mut row, u), &wr) in out.rows_mut().into_iter().zip(psi_u.rows()).zip(w) {
        row.zip_mut_with(&u, |c, &u| *c += wr * (*c - u));
    }
    Ok(out)
}

/// `theta_minus <- mu theta_minus + (1 - mu) theta`.
pub fn ema_update(theta_minus: &mut NetParams, theta: &NetParams, mu: f64) -> Result<()> {
    if !theta_minus.same_shape(theta) {
        return Err(Error::Dimension {
            expected: theta_minus.param_count(),
            got: theta.param_count(),
        });
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Invalid(format!("EMA rate must be in [0, 1], got {mu}")));
    }
    if mu == 0.0 {
        theta_minus.values.copy_from_slice(&theta.values);
        return Ok(());
    }
    // increment form: exact no-op when the two already agree
    for (tm, &t) in theta_minus.values.iter_mut().zip(&theta.values) {
        *tm += (1.0 - mu) * (t - *tm);
    }
    Ok(())
}

/// `(ReLU(1 - real) + ReLU(1 + fake), ReLU(1 - fake))` for one pair of logits.
pub fn hinge_losses(real: f64, fake: f64) -> (f64, f64) {
    ((1.0 - real).max(0.0) + (1.0 + fake).max(0.0), (1.0 - fake).max(0.0))
}

/// Trainable head over the hidden features of a frozen trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub head: NetParams,
}

pub const HEAD_WIDTH: usize = 64;

pub fn head_layout(feature_dim: usize) -> NetLayout {
    NetLayout::new(&MlpSpec {
        dense_in: feature_dim,
        embedding: None,
        hidden: vec![HEAD_WIDTH, HEAD_WIDTH],
        out: 1,
        activation: Activation::Silu,
        layer_norm: true,
        residual: true,
        input_skip: false,
    })
    .expect("head layout")
}

struct DiscPass {
    trunk: crate::nets::Tape,
    head: crate::nets::Tape,
}

impl Discriminator {
    pub fn init<R: Rng + ?Sized>(trunk: &CondNet, rng: &mut R) -> Self {
        Self {
            head: NetParams::init(head_layout(trunk.params.layout().feature_dim()), rng, false),
        }
    }

    fn pass(&self, trunk: &CondNet, z: &Array2<f64>, t: &[usize], cond: &[Cond]) -> Result<DiscPass> {
        let trunk_tape = trunk.forward(z, t, &[], cond, Depth::Features)?;
        let head = self.head.forward(trunk_tape.output(), None, Depth::Full)?;
        Ok(DiscPass {
            trunk: trunk_tape,
            head,
        })
    }

    /// One logit per row.
    pub fn forward(&self, trunk: &CondNet, z: &Array2<f64>, t: &[usize], cond: &[Cond]) -> Result<Array1<f64>> {
        let p = self.pass(trunk, z, t, cond)?;
        Ok(p.head.into_output().column(0).to_owned())
    }

    /// Batch-mean hinge losses `(disc, gen)`.
    pub fn adv_losses(
        &self,
        trunk: &CondNet,
        z_real: &Array2<f64>,
        z_fake: &Array2<f64>,
        t: &[usize],
        cond: &[Cond],
    ) -> Result<(f64, f64)> {
        let real = self.forward(trunk, z_real, t, cond)?;
        let fake = self.forward(trunk, z_fake, t, cond)?;
        let n = real.len() as f64;
        let (d, g) = real
            .iter()
            .zip(fake.iter())
            .map(|(&r, &f)| hinge_losses(r, f))
            .fold((0.0, 0.0), |(a, b), (d, g)| (a + d, b + g));
        Ok((d / n, g / n))
    }
}

/// Per-sample randomness of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub phase: Vec<usize>,
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    pub s: Vec<usize>,
    pub omega: Vec<f64>,
    pub eps: Array2<f64>,
    pub eps_fake: Array2<f64>,
    pub eps_real: Array2<f64>,
}

impl StepDraws {
    pub fn sample<R: Rng + ?Sized>(
        cfg: &DistillConfig,
        p: &PhasePartition,
        batch: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut d = Self {
            phase: Vec::with_capacity(batch),
            n: Vec::with_capacity(batch),
            k: Vec::with_capacity(batch),
            s: Vec::with_capacity(batch),
            omega: Vec::with_capacity(batch),
            eps: Array2::zeros((0, 0)),
            eps_fake: Array2::zeros((0, 0)),
            eps_real: Array2::zeros((0, 0)),
        };
        for _ in 0..batch {
            let m = rng.random_range(0..p.phases());
            let (lo, hi) = (p.edge(m), p.edge(m + 1));
            let k = cfg.k.min(hi - lo);
            d.phase.push(m);
            d.n.push(rng.random_range(lo..=hi - k));
            d.k.push(k);
            d.s.push(rng.random_range(lo.max(1)..=hi));
            d.omega.push(sample_omega(cfg, rng));
        }
        d.eps = randn(rng, batch, dim);
        d.eps_fake = randn(rng, batch, dim);
        d.eps_real = randn(rng, batch, dim);
        d
    }
}

pub fn sample_omega<R: Rng + ?Sized>(cfg: &DistillConfig, rng: &mut R) -> f64 {
    if cfg.w_min == cfg.w_max {
        cfg.w_min
    } else {
        rng.random_range(cfg.w_min..cfg.w_max)
    }
}

/// Bridge from a latent at index `from` to the noisier index `to`.
fn renoise_rows(s: &NoiseSchedule, z: &Array2<f64>, from: &[usize], to: &[usize], eps: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = z.clone();
    let mut ratios = Vec::with_capacity(z.nrows());
    for (r, (&a, &b)) in from.iter().zip(to).enumerate() {
        let ratio = s.alpha(b) / s.alpha(a);
        let noise = (s.sigma(b).powi(2) - (ratio * s.sigma(a)).powi(2)).max(0.0).sqrt();
        let mut row = out.row_mut(r);
        row.zip_mut_with(&eps.row(r), |x, &e| *x = ratio * *x + noise * e);
        ratios.push(ratio);
    }
    (out, ratios)
}

/// `F(z, from, edge)` with the network's own noise estimate.
fn map_to_edge(
    net: &CondNet,
    s: &NoiseSchedule,
    z: &Array2<f64>,
    from: &[usize],
    edge: &[usize],
    w: &[f64],
    cond: &[Cond],
) -> Result<Array2<f64>> {
    ddim_step_rows(s, z, from, edge, &net.predict(z, from, w, cond)?)
}

/// Losses of one step and the gradients each update needs.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub pcd: f64,
    pub gen: f64,
    pub disc: f64,
    /// Gradient of `w_pcd * pcd + w_gen * gen` w.r.t. the online parameters.
    pub theta_grad: Vec<f64>,
    /// Gradient of `disc` w.r.t. the head parameters.
    pub head_grad: Vec<f64>,
}

/// Networks one step reads.
pub struct StepNets<'a> {
    pub teacher: &'a CondNet,
    pub online: &'a CondNet,
    pub target: &'a CondNet,
    pub disc: &'a Discriminator,
}

/// Evaluates all three objectives on fixed draws.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_step(
    nets: &StepNets,
    s: &NoiseSchedule,
    p: &PhasePartition,
    z0: &Array2<f64>,
    cond: &[Cond],
    d: &StepDraws,
    huber_c: f64,
    (w_pcd, w_gen): (f64, f64),
) -> Result<StepEval> {
    let b = z0.nrows();
    let nk: Vec<usize> = d.n.iter().zip(&d.k).map(|(n, k)| n + k).collect();
    let edge: Vec<usize> = d.phase.iter().map(|&m| p.edge(m)).collect();

    let z_nk = s.forward_diffuse_rows(z0, &nk, &d.eps)?;
    let z_n = solve_target(nets.teacher, s, &z_nk, &d.n, &d.k, &d.omega, cond)?;

    let online_tape = nets.online.forward(&z_nk, &nk, &d.omega, cond, Depth::Full)?;
    let online = ddim_step_rows(s, &z_nk, &nk, &edge, online_tape.output())?;
    let target = map_to_edge(nets.target, s, &z_n, &d.n, &edge, &d.omega, cond)?;
    let (pcd, mut g_edge) = huber_rows(&online, &target, huber_c);
    g_edge *= w_pcd;

    let (fake, ratios) = renoise_rows(s, &online, &edge, &d.s, &d.eps_fake);
    let real = s.forward_diffuse_rows(z0, &d.s, &d.eps_real)?;
    let real_pass = nets.disc.pass(nets.teacher, &real, &d.s, cond)?;
    let fake_pass = nets.disc.pass(nets.teacher, &fake, &d.s, cond)?;
    let inv_b = 1.0 / b as f64;
    let (mut disc, mut gen) = (0.0, 0.0);
    let mut up_real = Array2::zeros((b, 1));
    let mut up_fake = Array2::zeros((b, 1));
    let mut up_gen = Array2::zeros((b, 1));
    for r in 0..b {
        let (fr, ff) = (real_pass.head.output()[[r, 0]], fake_pass.head.output()[[r, 0]]);
        let (dl, gl) = hinge_losses(fr, ff);
        disc += dl;
        gen += gl;
        if fr < 1.0 {
            up_real[[r, 0]] = -inv_b;
        }
        if ff > -1.0 {
            up_fake[[r, 0]] = inv_b;
        }
        if ff < 1.0 {
            up_gen[[r, 0]] = -inv_b;
        }
    }
    let gr = nets.disc.head.backward(&real_pass.head, &up_real, true)?;
    let gf = nets.disc.head.backward(&fake_pass.head, &up_fake, true)?;
    let head_grad: Vec<f64> = gr.params.iter().zip(&gf.params).map(|(a, b)| a + b).collect();

    if w_gen != 0.0 {
        let gh = nets.disc.head.backward(&fake_pass.head, &(up_gen * w_gen), false)?;
        let gz = nets.teacher.backward(&fake_pass.trunk, &gh.input, false)?.input;
        for (r, ratio) in ratios.iter().enumerate() {
            let mut row = g_edge.row_mut(r);
            row.scaled_add(*ratio, &gz.row(r));
        }
    }

    // online = c_z z_nk + c_eps eps_hat, so only the eps path carries parameters
    let mut up_eps = g_edge;
    for (r, (&i, &j)) in nk.iter().zip(&edge).enumerate() {
        let (_, c_eps) = ddim_coeffs(s, i, j);
        up_eps.row_mut(r).mapv_inplace(|v| v * c_eps);
    }
    let theta_grad = nets.online.backward(&online_tape, &up_eps, true)?.params;

    Ok(StepEval {
        pcd,
        gen: gen * inv_b,
        disc: disc * inv_b,
        theta_grad,
        head_grad,
    })
}

/// Online and target students, the discriminator head and both optimizers.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub theta: CondNet,
    pub theta_minus: CondNet,
    pub disc: Discriminator,
    pub opt_theta: AdamW,
    pub opt_disc: AdamW,
    pub step: usize,
}

impl DistillState {
    pub fn new<R: Rng + ?Sized>(teacher: &CondNet, rng: &mut R) -> Self {
        let theta = CondNet::student_from_teacher(teacher, OMEGA_DIM);
        let disc = Discriminator::init(teacher, rng);
        Self {
            opt_theta: AdamW::new(AdamConfig::default(), theta.params.param_count()),
            opt_disc: AdamW::new(AdamConfig::default(), disc.head.param_count()),
            theta_minus: theta.clone(),
            theta,
            disc,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub pcd: f64,
    pub gen: f64,
    pub disc: f64,
    pub lr: f64,
}

/// One update of the online net, the EMA target and the discriminator head.
#[allow(clippy::too_many_arguments)]
pub fn distill_step<R: Rng + ?Sized>(
    state: &mut DistillState,
    teacher: &CondNet,
    s: &NoiseSchedule,
    p: &PhasePartition,
    z0: &Array2<f64>,
    cond: &[Cond],
    cfg: &DistillConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepLog> {
    let draws = StepDraws::sample(cfg, p, z0.nrows(), z0.ncols(), rng);
    let nets = StepNets {
        teacher,
        online: &state.theta,
        target: &state.theta_minus,
        disc: &state.disc,
    };
    let ev = evaluate_step(&nets, s, p, z0, cond, &draws, cfg.huber_c, (1.0, cfg.lambda_adv))?;
    let total = ev.pcd + cfg.lambda_adv * ev.gen;
    if !total.is_finite() || !ev.disc.is_finite() {
        return Err(Error::NonFinite {
            what: "distillation loss".into(),
            step: state.step,
        });
    }
    state.opt_theta.step(&mut state.theta.params.values, &ev.theta_grad, lr);
    ema_update(&mut state.theta_minus.params, &state.theta.params, cfg.mu)?;
    state.opt_disc.step(&mut state.disc.head.values, &ev.head_grad, lr);
    state.step += 1;
    Ok(StepLog {
        pcd: ev.pcd,
        gen: ev.gen,
        disc: ev.disc,
        lr,
    })
}

/// A finished or aborted run. The state is kept either way so callers can
/// flush a checkpoint.
#[derive(Debug)]
pub struct DistillRun {
    pub state: DistillState,
    pub partition: PhasePartition,
    pub aborted: Option<Error>,
}

impl DistillRun {
    /// The released sampler: the EMA target network.
    pub fn student(&self) -> Student {
        Student {
            net: self.state.theta_minus.clone(),
            partition: self.partition.clone(),
        }
    }
}

/// A distilled network with the partition it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub net: CondNet,
    pub partition: PhasePartition,
}

pub const LOG_HEADER: [&str; 6] = ["step", "pcd_loss", "gen_loss", "disc_loss", "lr", "wall_ms"];

/// Runs `cfg.iters` steps on the teacher's training latents. Refuses a
/// teacher that failed its quality gate.
pub fn distill_train<W: std::io::Write>(
    teacher: &TeacherBundle,
    cfg: &DistillConfig,
    mut log: Option<&mut csv::Writer<W>>,
) -> Result<DistillRun> {
    if !teacher.passes_gate() {
        return Err(Error::Gate(format!(
            "teacher toy-FID {:?} above gate {}",
            teacher.gate_fid, teacher.config.gate_fid
        )));
    }
    let s = teacher.schedule()?;
    cfg.validate(s.steps())?;
    let partition = build_partition(s.steps(), cfg.phases)?;
    let latents = teacher.latents()?;
    let mut rng = crate::seeded(cfg.seed);
    let mut state = DistillState::new(&teacher.eps_net, &mut rng);
    if let Some(w) = log.as_deref_mut() {
        w.write_record(LOG_HEADER)?;
    }
    let t0 = Instant::now();
    let n = latents.labels.len();
    let mut aborted = None;
    for step in 0..cfg.iters {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..n)).collect();
        let z0 = latents.latents.select(Axis(0), &idx);
        let cond: Vec<Cond> = idx.iter().map(|&i| Cond::Class(latents.labels[i])).collect();
        let lr = cosine_lr(cfg.lr, step, cfg.iters);
        match distill_step(&mut state, &teacher.eps_net, &s, &partition, &z0, &cond, cfg, lr, &mut rng) {
            Ok(l) => {
                if let Some(w) = log.as_deref_mut() {
                    if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.iters {
                        w.write_record([
                            step.to_string(),
                            l.pcd.to_string(),
                            l.gen.to_string(),
                            l.disc.to_string(),
                            l.lr.to_string(),
                            t0.elapsed().as_millis().to_string(),
                        ])?;
                    }
                }
            }
            Err(e) => {
                aborted = Some(e);
                break;
            }
        }
    }
    if let Some(w) = log {
        w.flush()?;
    }
    Ok(DistillRun {
        state,
        partition,
        aborted,
    })
}
