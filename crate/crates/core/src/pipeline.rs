//! End-to-end sampling, scoring and the ablation grid.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::distill::{distill_train, DistillConfig, Student};
use crate::error::{Error, Result};
use crate::eval::{aits, score, FeatureSet, MetricsReport};
use crate::nets::Cond;
use crate::solver::{cm_sample_stochastic, cm_steps, ddim_grid, ddim_multistep, pcm_sample, SamplerOutput};
use crate::teacher::{stage_seed, TeacherBundle};

const STAGE_EVAL: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Guided teacher DDIM with this many steps.
    Ddim(usize),
    /// Deterministic phased sampling, one step per trained phase.
    Pcm,
    /// Multistep consistency sampling with re-noising.
    Stochastic(usize),
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            SamplerKind::Ddim(n) => write!(f, "ddim:{n}"),
            SamplerKind::Pcm => write!(f, "pcm"),
            SamplerKind::Stochastic(n) => write!(f, "cm:{n}"),
        }
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    /// `ddim:<steps>`, `pcm`, or `cm:<steps>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown sampler '{s}' (expected ddim:N, pcm or cm:N)"));
        let steps = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match s.split_once(':') {
            None if s == "pcm" => Ok(SamplerKind::Pcm),
            Some(("ddim", n)) => Ok(SamplerKind::Ddim(steps(n)?)),
            Some(("cm", n)) => Ok(SamplerKind::Stochastic(steps(n)?)),
            _ => Err(bad()),
        }
    }
}

/// Runs a sampler from the given prior draws. Student samplers need `student`.
#[allow(clippy::too_many_arguments)]
pub fn run_sampler<R: Rng + ?Sized>(
    bundle: &TeacherBundle,
    student: Option<&Student>,
    kind: SamplerKind,
    z: &Array2<f64>,
    w: &[f64],
    cond: &[Cond],
    rng: &mut R,
) -> Result<SamplerOutput> {
    let s = bundle.schedule()?;
    let need = || Error::Invalid(format!("sampler {kind} needs a student checkpoint"));
    match kind {
        SamplerKind::Ddim(steps) => ddim_multistep(&bundle.eps_net, &s, z, &ddim_grid(s.steps(), steps)?, w, cond),
        SamplerKind::Pcm => {
            let st = student.ok_or_else(need)?;
            pcm_sample(&st.net, &s, &st.partition, z, w, cond)
        }
        SamplerKind::Stochastic(steps) => {
            let st = student.ok_or_else(need)?;
            cm_sample_stochastic(&st.net, &s, z, &cm_steps(s.steps(), steps)?, w, cond, rng)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub samples: usize,
    pub omega: f64,
    pub seed: u64,
    /// Single-sample calls timed for the per-sample latency.
    pub timing_calls: usize,
}

impl EvalConfig {
    pub fn for_teacher(bundle: &TeacherBundle, seed: u64) -> Self {
        Self {
            samples: bundle.config.eval_samples,
            omega: bundle.config.eval_omega,
            seed,
            timing_calls: 20,
        }
    }
}

/// Decoded samples with their conditioning labels.
pub fn generate(
    bundle: &TeacherBundle,
    student: Option<&Student>,
    kind: SamplerKind,
    cfg: &EvalConfig,
) -> Result<(FeatureSet, usize)> {
    let mut rng = crate::seeded(stage_seed(cfg.seed, STAGE_EVAL));
    let (z, cond) = bundle.prior(cfg.samples, &mut rng);
    let w = vec![cfg.omega; cfg.samples];
    let out = run_sampler(bundle, student, kind, &z, &w, &cond, &mut rng)?;
    let frames = bundle.decode(&out.z0_hat)?;
    let labels = cond.iter().map(|c| c.row(bundle.classes())).collect();
    Ok((FeatureSet::from_frames(&frames, labels)?, out.nfe))
}

/// Toy-FID of a sampler against the bundle's held-out reference set.
pub fn sampler_fid(bundle: &TeacherBundle, student: Option<&Student>, kind: SamplerKind, cfg: &EvalConfig) -> Result<f64> {
    let (set, _) = generate(bundle, student, kind, cfg)?;
    let reference = FeatureSet::from_motion(&bundle.reference_set()?)?;
    crate::eval::frechet_distance(&set.features, &reference.features)
}

/// Full metric suite, including single-sample latency.
pub fn evaluate(
    bundle: &TeacherBundle,
    student: Option<&Student>,
    kind: SamplerKind,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let (set, nfe) = generate(bundle, student, kind, cfg)?;
    let reference = FeatureSet::from_motion(&bundle.reference_set()?)?;
    let mut rng = crate::seeded(stage_seed(cfg.seed, STAGE_EVAL + 1));
    let mut report = score(&set, &reference, &bundle.oracle, bundle.classes(), &mut rng)?;
    report.nfe = nfe;
    if cfg.timing_calls > 0 {
        let (z, cond) = bundle.prior(1, &mut rng);
        let w = [cfg.omega];
        report.aits_ms = aits(
            || {
                let out = run_sampler(bundle, student, kind, &z, &w, &cond, &mut rng)?;
                bundle.decode(&out.z0_hat).map(drop)
            },
            cfg.timing_calls,
        )?
        .mean_ms;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    K,
    Mu,
    Lambda,
    Omega,
    Steps,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "k" => AblationAxis::K,
            "mu" => AblationAxis::Mu,
            "lambda" => AblationAxis::Lambda,
            "omega" => AblationAxis::Omega,
            "steps" => AblationAxis::Steps,
            _ => return Err(Error::Config(format!("unknown axis '{s}' (k, mu, lambda, omega, steps)"))),
        })
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::K => "k",
            AblationAxis::Mu => "mu",
            AblationAxis::Lambda => "lambda",
            AblationAxis::Omega => "omega",
            AblationAxis::Steps => "steps",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub axis: AblationAxis,
    pub values: Vec<f64>,
    pub base: DistillConfig,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
}

/// One grid cell: the metrics or the error that stopped it.
#[derive(Debug)]
pub struct Cell {
    pub value: f64,
    pub seed: u64,
    pub result: Result<MetricsReport>,
}

fn as_count(axis: AblationAxis, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{axis} values must be positive integers, got {v}")))
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one value and one seed".into()));
        }
        if matches!(self.axis, AblationAxis::K | AblationAxis::Steps) {
            for &v in &self.values {
                as_count(self.axis, v)?;
            }
        }
        Ok(())
    }

    fn cell(&self, bundle: &TeacherBundle, value: f64, seed: u64, student: Option<&Student>) -> Result<MetricsReport> {
        let mut eval = EvalConfig { seed, ..self.eval };
        match self.axis {
            AblationAxis::Steps => evaluate(bundle, None, SamplerKind::Ddim(as_count(self.axis, value)?), &eval),
            AblationAxis::Omega => {
                eval.omega = value;
                evaluate(bundle, student, SamplerKind::Pcm, &eval)
            }
            _ => {
                let mut cfg = DistillConfig { seed, ..self.base.clone() };
                match self.axis {
                    AblationAxis::K => cfg.k = as_count(self.axis, value)?,
                    AblationAxis::Mu => cfg.mu = value,
                    _ => cfg.lambda_adv = value,
                }
                let student = train_student(bundle, &cfg)?;
                evaluate(bundle, Some(&student), SamplerKind::Pcm, &eval)
            }
        }
    }

    /// Every `(value, seed)` cell in order. A failing cell is recorded and
    /// the grid continues.
    pub fn run(&self, bundle: &TeacherBundle) -> Result<Vec<Cell>> {
        self.validate()?;
        let mut cells = Vec::with_capacity(self.values.len() * self.seeds.len());
        for &seed in &self.seeds {
            // the guidance sweep scores one student per seed at every value
            let fixed = match self.axis {
                AblationAxis::Omega => Some(train_student(bundle, &DistillConfig { seed, ..self.base.clone() })),
                _ => None,
            };
            for &value in &self.values {
                let result = match &fixed {
                    Some(Err(e)) => Err(Error::Invalid(format!("student training failed: {e}"))),
                    Some(Ok(st)) => self.cell(bundle, value, seed, Some(st)),
                    None => self.cell(bundle, value, seed, None),
                };
                cells.push(Cell { value, seed, result });
            }
        }
        cells.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.seed.cmp(&b.seed)));
        Ok(cells)
    }
}

/// Distills and returns the released network; a mid-run abort is an error here.
pub fn train_student(bundle: &TeacherBundle, cfg: &DistillConfig) -> Result<Student> {
    let run = distill_train::<std::io::Sink>(bundle, cfg, None)?;
    match run.aborted {
        Some(e) => Err(e),
        None => Ok(run.student()),
    }
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub const ABLATION_HEADER: [&str; 10] = [
    "axis", "value", "seed", "status", "toy_fid", "diversity", "mmodality", "cond_acc", "aits_ms", "nfe",
];

/// One row per cell, then one `median` row per value over its successful cells.
pub fn write_ablation<W: std::io::Write>(axis: AblationAxis, cells: &[Cell], out: &mut csv::Writer<W>) -> Result<()> {
    out.write_record(ABLATION_HEADER)?;
    let blank = || vec![String::new(); 6];
    for c in cells {
        let (status, fields) = match &c.result {
            Ok(m) => ("ok".to_string(), m.fields().to_vec()),
            Err(e) => (format!("error:{}", e.kind()), blank()),
        };
        let mut row = vec![axis.to_string(), c.value.to_string(), c.seed.to_string(), status];
        row.extend(fields);
        out.write_record(&row)?;
    }
    let mut values: Vec<f64> = cells.iter().map(|c| c.value).collect();
    values.dedup();
    for v in values {
        let ok: Vec<&MetricsReport> = cells
            .iter()
            .filter(|c| c.value == v)
            .filter_map(|c| c.result.as_ref().ok())
            .collect();
        let mut row = vec![axis.to_string(), v.to_string(), "median".to_string()];
        if ok.is_empty() {
            row.push("no-data".into());
            row.extend(blank());
        } else {
            row.push("ok".into());
            let cols: [fn(&MetricsReport) -> f64; 6] = [
                |m| m.toy_fid,
                |m| m.diversity,
                |m| m.mmodality,
                |m| m.cond_acc,
                |m| m.aits_ms,
                |m| m.nfe as f64,
            ];
            for col in cols {
                let mut xs: Vec<f64> = ok.iter().map(|m| col(m)).collect();
                row.push(median(&mut xs).expect("non-empty").to_string());
            }
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
