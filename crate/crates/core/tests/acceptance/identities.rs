use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use pcdl::distill::{evaluate_step, DistillConfig, DistillState, StepDraws, StepNets};
use pcdl::nets::{grad_check, Cond, CondNet, CondNetSpec, NetParams};
use pcdl::schedule::{NoiseSchedule, ScheduleConfig};
use pcdl::seeded;
use pcdl::solver::{
    build_partition, cm_sample_stochastic, cm_steps, consistency_fn, ddim_grid, ddim_multistep, ddim_step, pcm_sample,
    EpsModel,
};
use pcdl::teacher::{teacher_loss, EpsBatch, LatentDataset};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::Outcome;

pub const IDENTITY_TOL: f64 = 1e-9;
pub const QUADRATURE_TOL: f64 = 1e-8;
pub const IDENTITY_TUPLES: usize = 1000;
pub const IDENTITY_BUDGET: Duration = Duration::from_secs(5);
pub const DETERMINISM_SEEDS: u64 = 100;
pub const DETERMINISM_BUDGET: Duration = Duration::from_secs(30);
pub const ORACLE_GAP_TOL: f64 = 0.02;
pub const ORACLE_STEPS: [usize; 4] = [1, 2, 5, 50];
pub const ORACLE_SAMPLES: usize = 4000;
pub const ORACLE_BUDGET: Duration = Duration::from_secs(30);
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_H: f64 = 1e-5;
pub const GRAD_COORDS: usize = 400;
pub const GRAD_BUDGET: Duration = Duration::from_secs(60);

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(ScheduleConfig::default()).unwrap()
}

/// `(alpha, sigma)` for the default linear-beta schedule by direct product.
fn oracle_schedule() -> (Vec<f64>, Vec<f64>) {
    let (n, lo, hi) = (1000usize, 1e-4, 2e-2);
    let mut abar = 1.0f64;
    let (mut alpha, mut sigma) = (vec![1.0], vec![0.0]);
    for k in 0..n {
        abar *= 1.0 - (lo + (hi - lo) * k as f64 / (n - 1) as f64);
        alpha.push(abar.sqrt());
        sigma.push((1.0 - abar).sqrt());
    }
    (alpha, sigma)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let mut acc = f(a) + f(b);
    for k in 1..intervals {
        acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn norm(v: &Array1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn integrator_identity(_: &mut crate::Ctx) -> Outcome {
    let t0 = Instant::now();
    let s = schedule();
    let (alpha, sigma) = oracle_schedule();
    let lambda = |i: usize| (alpha[i] / sigma[i]).ln();
    let mut rng = seeded(2024);
    let (mut worst_ddim, mut worst_quad) = (0.0f64, 0.0f64);
    for _ in 0..IDENTITY_TUPLES {
        let i = rng.random_range(2..=1000);
        let j = rng.random_range(1..i);
        let z: Array1<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let e: Array1<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let closed = (-lambda(i)).exp() - (-lambda(j)).exp();
        let quad = simpson(|l| (-l).exp(), lambda(i), lambda(j), 8192);
        worst_quad = worst_quad.max((quad - closed).abs() / closed.abs());
        let want = &z * (alpha[j] / alpha[i]) - &e * (alpha[j] * closed);
        let got = ddim_step(&s, z.view(), i, j, e.view()).unwrap();
        worst_ddim = worst_ddim.max(norm(&(&got - &want)) / norm(&want));
    }
    let el = t0.elapsed();
    Outcome::new(
        worst_ddim < IDENTITY_TOL && worst_quad < QUADRATURE_TOL && el < IDENTITY_BUDGET,
        format!(
            "{IDENTITY_TUPLES} tuples, step rel err {worst_ddim:.2e} (< {IDENTITY_TOL:e}), quadrature rel err \
             {worst_quad:.2e} (< {QUADRATURE_TOL:e}), runtime {:.2} s (< {} s)",
            el.as_secs_f64(),
            IDENTITY_BUDGET.as_secs()
        ),
    )
}

/// Student-shaped network with every parameter drawn at random.
fn random_student(seed: u64, latent: usize) -> CondNet {
    let spec = CondNetSpec {
        width: 48,
        ..CondNetSpec::teacher(latent, 4)
    }
    .with_omega(16);
    CondNet::from_params(spec, NetParams::init(spec.layout(), &mut seeded(seed), false)).unwrap()
}

fn randn(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn boundary_condition(_: &mut crate::Ctx) -> Outcome {
    let s = schedule();
    let mut checked = 0;
    let mut bad = Vec::new();
    for seed in 0..5 {
        let net = random_student(seed, 8);
        let mut rng = seeded(100 + seed);
        let z = randn(&mut rng, 16, 8);
        let w: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..15.0)).collect();
        let cond: Vec<Cond> = (0..16).map(|i| if i % 5 == 4 { Cond::Null } else { Cond::Class(i % 4) }).collect();
        for m in [1, 2, 3, 4, 8, 16] {
            let p = build_partition(s.steps(), m).unwrap();
            for k in 0..m {
                let out = consistency_fn(&net, &s, &p, &z, p.edge(k), &w, &cond).unwrap();
                checked += 1;
                if out != z {
                    bad.push(format!("seed {seed} M={m} edge {}", p.edge(k)));
                }
            }
        }
    }
    Outcome::new(
        bad.is_empty(),
        format!("{checked} (network, partition, edge) cases exact, {} mismatches {bad:?}", bad.len()),
    )
}

/// Shifted-data variance, exactly zero when every output is identical.
fn elementwise_variance(outs: &[Array2<f64>]) -> f64 {
    let n = outs.len() as f64;
    let shift = &outs[0];
    let d: Vec<Array2<f64>> = outs.iter().map(|o| o - shift).collect();
    let sum = d.iter().fold(Array2::<f64>::zeros(shift.raw_dim()), |a, o| a + o);
    let sq: f64 = d.iter().map(|o| o.mapv(|v| v * v).sum()).sum();
    (sq - sum.mapv(|v| v * v).sum() / n) / (n * shift.len() as f64)
}

pub fn determinism_split(_: &mut crate::Ctx) -> Outcome {
    let t0 = Instant::now();
    let s = schedule();
    let net = random_student(7, 8);
    let z_t = randn(&mut seeded(1), 8, 8);
    let w = vec![0.25; 8];
    let cond: Vec<Cond> = (0..8).map(|i| Cond::Class(i % 4)).collect();
    let mut parts = Vec::new();
    let mut pass = true;
    for m in [1, 2, 4] {
        let p = build_partition(s.steps(), m).unwrap();
        let outs: Vec<Array2<f64>> = (0..DETERMINISM_SEEDS)
            .map(|seed| {
                // the seed drives everything after z_T; the phased sampler must ignore it
                let mut rng = seeded(seed);
                let _: f64 = rng.sample(StandardNormal);
                pcm_sample(&net, &s, &p, &z_t, &w, &cond).unwrap().z0_hat
            })
            .collect();
        let v = elementwise_variance(&outs);
        pass &= v == 0.0;
        parts.push(format!("pcm M={m} var {v:e}"));
    }
    for steps in [2, 4] {
        let grid = cm_steps(s.steps(), steps).unwrap();
        let outs: Vec<Array2<f64>> = (0..DETERMINISM_SEEDS)
            .map(|seed| cm_sample_stochastic(&net, &s, &z_t, &grid, &w, &cond, &mut seeded(seed)).unwrap().z0_hat)
            .collect();
        let v = elementwise_variance(&outs);
        pass &= v > 0.0;
        parts.push(format!("cm {steps}-step var {v:.3e}"));
    }
    let el = t0.elapsed();
    pass &= el < DETERMINISM_BUDGET;
    Outcome::new(
        pass,
        format!(
            "{DETERMINISM_SEEDS} seeds: {} (pcm = 0, cm > 0), runtime {:.2} s (< {} s)",
            parts.join(", "),
            el.as_secs_f64(),
            DETERMINISM_BUDGET.as_secs()
        ),
    )
}

/// Exact denoiser for unit-variance Gaussian data: `eps* = sigma_t z_t`.
struct Optimal<'a>(&'a [f64]);

impl EpsModel for Optimal<'_> {
    fn eps(&self, z: &Array2<f64>, t: &[usize], _: &[f64], _: &[Cond]) -> pcdl::Result<Array2<f64>> {
        let mut out = z.clone();
        for (mut row, &i) in out.rows_mut().into_iter().zip(t) {
            row *= self.0[i];
        }
        Ok(out)
    }
}

pub fn gaussian_oracle(_: &mut crate::Ctx) -> Outcome {
    let t0 = Instant::now();
    let s = schedule();
    let (alpha, sigma) = oracle_schedule();
    let model = Optimal(&sigma);
    let z = randn(&mut seeded(0), ORACLE_SAMPLES, 8);
    let w = vec![0.0; ORACLE_SAMPLES];
    let cond = vec![Cond::Null; ORACLE_SAMPLES];
    let mut rows = Vec::new();
    for steps in ORACLE_STEPS {
        let grid = ddim_grid(s.steps(), steps).unwrap();
        // each optimal step multiplies the latent by alpha_i alpha_j + sigma_i sigma_j
        let recursion: f64 = grid
            .windows(2)
            .map(|g| (alpha[g[0]] * alpha[g[1]] + sigma[g[0]] * sigma[g[1]]).powi(2))
            .product();
        let out = ddim_multistep(&model, &s, &z, &grid, &w, &cond).unwrap().z0_hat;
        let measured = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
        rows.push((steps, recursion, measured, (measured - 1.0).abs()));
    }
    let (_, rec50, meas50, _) = rows[3];
    let gap = (meas50 - rec50).abs() / rec50;
    let decreasing = rows.windows(2).all(|r| r[1].3 < r[0].3);
    let el = t0.elapsed();
    let errs: Vec<String> = rows.iter().map(|r| format!("{}:{:.4}", r.0, r.3)).collect();
    Outcome::new(
        gap < ORACLE_GAP_TOL && decreasing && el < ORACLE_BUDGET,
        format!(
            "50-step variance {meas50:.4} vs recursion {rec50:.4} (gap {:.2}% < {:.0}%), flow error by steps [{}] \
             strictly decreasing: {decreasing}, runtime {:.2} s (< {} s)",
            100.0 * gap,
            100.0 * ORACLE_GAP_TOL,
            errs.join(" "),
            el.as_secs_f64(),
            ORACLE_BUDGET.as_secs()
        ),
    )
}

fn small_teacher(seed: u64) -> CondNet {
    let spec = CondNetSpec {
        width: 32,
        depth: 2,
        ..CondNetSpec::teacher(4, 3)
    };
    CondNet::from_params(spec, NetParams::init(spec.layout(), &mut seeded(seed), false)).unwrap()
}

pub fn gradient_suite(_: &mut crate::Ctx) -> Outcome {
    let t0 = Instant::now();
    let s = schedule();
    let mut rng = seeded(31);

    // noise regression loss of the teacher
    let teacher = small_teacher(0);
    let data = LatentDataset {
        latents: randn(&mut rng, 64, 4),
        labels: (0..64).map(|i| i % 3).collect(),
        mean: vec![0.0; 4],
        std: vec![1.0; 4],
    };
    let batch = EpsBatch::sample(&data, &s, 16, 0.2, &mut rng);
    let (spec, layout) = (teacher.spec, teacher.params.layout().clone());
    let ddpm = grad_check(
        &teacher.params.values,
        |v| {
            let net = CondNet::from_params(spec, NetParams::from_values(layout.clone(), v.to_vec()).unwrap()).unwrap();
            teacher_loss(&net, &s, &batch).unwrap()
        },
        GRAD_H,
        GRAD_COORDS,
        &mut seeded(1),
    )
    .unwrap();

    // distillation losses on a two-phase partition
    let p = build_partition(s.steps(), 2).unwrap();
    let cfg = DistillConfig {
        phases: 2,
        batch: 6,
        w_min: 0.0,
        w_max: 0.5,
        ..DistillConfig::default()
    };
    let state = DistillState::new(&teacher, &mut seeded(1));
    let z0 = randn(&mut seeded(2), 6, 4);
    let cond: Vec<Cond> = (0..6).map(|i| Cond::Class(i % 3)).collect();
    let d = StepDraws::sample(&cfg, &p, 6, 4, &mut seeded(5));
    // online net moved off the target so the consistency loss is away from its minimum
    let mut theta_v = state.theta.params.values.clone();
    for x in theta_v.iter_mut() {
        *x += 0.05 * rng.random_range(-1.0..1.0);
    }
    let (sspec, slayout) = (state.theta.spec, state.theta.params.layout().clone());
    let online = |v: &[f64]| CondNet::from_params(sspec, NetParams::from_values(slayout.clone(), v.to_vec()).unwrap()).unwrap();
    let theta_check = |weights: (f64, f64), seed: u64| {
        grad_check(
            &theta_v,
            |v| {
                let net = online(v);
                let nets = StepNets {
                    teacher: &teacher,
                    online: &net,
                    target: &state.theta_minus,
                    disc: &state.disc,
                };
                let ev = evaluate_step(&nets, &s, &p, &z0, &cond, &d, cfg.huber_c, weights).unwrap();
                (weights.0 * ev.pcd + weights.1 * ev.gen, ev.theta_grad)
            },
            GRAD_H,
            GRAD_COORDS,
            &mut seeded(seed),
        )
        .unwrap()
    };
    let pcd = theta_check((1.0, 0.0), 6);
    let gen = theta_check((0.0, 1.0), 7);

    let hlayout = state.disc.head.layout().clone();
    let released = online(&theta_v);
    let disc = grad_check(
        &state.disc.head.values,
        |v| {
            let disc = pcdl::distill::Discriminator {
                head: NetParams::from_values(hlayout.clone(), v.to_vec()).unwrap(),
            };
            let nets = StepNets {
                teacher: &teacher,
                online: &released,
                target: &state.theta_minus,
                disc: &disc,
            };
            let ev = evaluate_step(&nets, &s, &p, &z0, &cond, &d, cfg.huber_c, (0.0, 0.0)).unwrap();
            (ev.disc, ev.head_grad)
        },
        GRAD_H,
        GRAD_COORDS,
        &mut seeded(8),
    )
    .unwrap();

    let el = t0.elapsed();
    let worst = ddpm.max(pcd).max(gen).max(disc);
    Outcome::new(
        worst < GRAD_TOL && el < GRAD_BUDGET,
        format!(
            "max rel err over {GRAD_COORDS} random coords: teacher {ddpm:.2e}, consistency {pcd:.2e}, generator \
             {gen:.2e}, discriminator {disc:.2e} (< {GRAD_TOL:e}), runtime {:.1} s (< {} s)",
            el.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}
