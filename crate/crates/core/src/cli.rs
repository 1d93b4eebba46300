//! Command-line front end.
//!
//! Every subcommand derives all randomness from `--seed` (or `PCDL_SEED`).
//! Failures print one `error: kind=<kind> msg=<message>` line to stderr and
//! exit nonzero. Outputs are accompanied by a `<output>.cfg` file holding the
//! fully resolved configuration.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::artifact::{read_released, read_teacher, student_checkpoint, teacher_checkpoint};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_list, KvConfig};
use crate::data::{gen_dataset, MotionSet};
use crate::distill::{distill_train, DistillConfig, Student};
use crate::error::{Error, Result};
use crate::eval::{gaussian_oracle_suite, MetricsReport};
use crate::pipeline::{evaluate, run_sampler, write_ablation, AblationAxis, EvalConfig, ExperimentPlan, SamplerKind};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::solver::integral_identity_check;
use crate::teacher::{stage_seed, TeacherBundle, TeacherConfig, STAGE_DATA};

/// Tolerances the `oracle-suite` command enforces.
pub const IDENTITY_TOL: f64 = 1e-9;
pub const QUADRATURE_TOL: f64 = 1e-8;
pub const ORACLE_GAP_TOL: f64 = 0.02;

#[derive(Debug, Parser)]
#[command(name = "pcdl", version, about = "Phased consistency distillation at toy scale")]
pub struct Cli {
    /// Root seed for every random draw of the command.
    #[arg(long, global = true, env = "PCDL_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labelled motion dataset as CSV.
    GenData(GenDataArgs),
    /// Train autoencoder, teacher and oracle classifier; write a teacher checkpoint.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a teacher checkpoint into a phased student checkpoint.
    Distill(DistillArgs),
    /// Dump sampled latents as CSV.
    Sample(SampleArgs),
    /// Score a sampler and write one metrics row.
    Eval(EvalArgs),
    /// Run a grid of distillation or sampling variants.
    Ablate(AblateArgs),
    /// Check solver identities and the Gaussian oracle.
    OracleSuite(OracleArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2048)]
    pub samples: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 1.0)]
    pub jitter: f64,
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    /// Teacher config file; missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Distillation config file; `--seed` replaces its `seed` key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `phases` key.
    #[arg(long)]
    pub phases: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    /// Teacher or student checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `pcm`, `ddim:<steps>` or `cm:<steps>`.
    #[arg(long, default_value = "pcm")]
    pub sampler: SamplerKind,
    /// Guidance scale; defaults to the teacher's evaluation scale.
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Defaults to the teacher's evaluation sample count.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub timing_calls: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub axis: AblationAxis,
    /// Comma-separated axis values.
    #[arg(long)]
    pub values: String,
    /// Comma-separated run seeds.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    /// Base distillation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub timing_calls: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 1000)]
    pub tuples: usize,
    #[arg(long, default_value_t = 4000)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Optional CSV of the oracle rows.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (program name first) and runs it, returning the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            eprintln!("error: kind=usage msg={msg}");
            let _ = e.print();
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            1
        }
    }
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => gen_data(&a, seed),
        Command::TrainTeacher(a) => train_teacher(&a, seed),
        Command::Distill(a) => distill(&a, seed),
        Command::Sample(a) => sample(&a, seed),
        Command::Eval(a) => eval(&a, seed),
        Command::Ablate(a) => ablate(&a, seed),
        Command::OracleSuite(a) => oracle_suite(&a, seed),
    }
}

/// Path of the resolved-config echo written next to `out`.
pub fn echo_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn read_config<C: KvConfig>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            C::from_kv(&text)
        }
    }
}

fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingEntry(format!("checkpoint {}", path.display())));
    }
    Checkpoint::load(path)
}

/// The teacher and, for student checkpoints, the released student.
pub fn load_models(path: &Path) -> Result<(TeacherBundle, Option<Student>)> {
    let ck = load(path)?;
    match ck.meta("kind")? {
        "teacher" => Ok((read_teacher(&ck)?, None)),
        "student" => {
            let (t, s) = read_released(&ck)?;
            Ok((t, Some(s)))
        }
        other => Err(Error::Invalid(format!("unknown checkpoint kind '{other}'"))),
    }
}

fn gen_data(a: &GenDataArgs, seed: u64) -> Result<()> {
    let mut rng = crate::seeded(stage_seed(seed, STAGE_DATA));
    let data = MotionSet::from_samples(&gen_dataset(a.samples, a.classes, a.jitter, &mut rng)?);
    let mut w = csv::Writer::from_path(&a.out)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..data.frames.ncols()).map(|c| format!("x{c}")));
    w.write_record(&header)?;
    for (i, (row, label)) in data.frames.rows().into_iter().zip(&data.labels).enumerate() {
        let mut rec = vec![i.to_string(), label.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    fs::write(
        echo_path(&a.out),
        format!(
            "seed = {seed}\nsamples = {}\nclasses = {}\njitter = {}\n",
            a.samples, a.classes, a.jitter
        ),
    )?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn train_teacher(a: &TrainTeacherArgs, seed: u64) -> Result<()> {
    let cfg: TeacherConfig = read_config(a.config.as_deref())?;
    fs::write(echo_path(&a.out), format!("# seed = {seed}\n{}", cfg.to_kv()))?;
    let mut bundle = TeacherBundle::train(&cfg, seed)?;
    let fid = bundle.measure_gate()?;
    bundle.gate_fid = Some(fid);
    teacher_checkpoint(&bundle)?.save(&a.out)?;
    println!(
        "recon mpjpe={:.5} feature_error={:.5} oracle_acc={:.4} gate_fid={fid:.5} (gate {}) -> {}",
        bundle.recon.mpjpe,
        bundle.recon.feature_error,
        bundle.oracle.heldout_acc,
        cfg.gate_fid,
        if bundle.passes_gate() { "pass" } else { "FAIL" }
    );
    Ok(())
}

fn distill(a: &DistillArgs, seed: u64) -> Result<()> {
    let teacher = read_teacher(&load(&a.teacher)?)?;
    let mut cfg: DistillConfig = read_config(a.config.as_deref())?;
    cfg.seed = seed;
    if let Some(m) = a.phases {
        cfg.phases = m;
    }
    fs::write(echo_path(&a.out), cfg.to_kv())?;
    let run = match &a.log {
        Some(p) => {
            let mut w = csv::Writer::from_path(p)?;
            distill_train(&teacher, &cfg, Some(&mut w))?
        }
        None => distill_train::<std::io::Sink>(&teacher, &cfg, None)?,
    };
    // an aborted run still leaves its last finite state on disk
    student_checkpoint(&teacher, &cfg, &run)?.save(&a.out)?;
    match run.aborted {
        Some(e) => Err(e),
        None => {
            println!("distilled {} phases for {} steps -> {}", cfg.phases, run.state.step, a.out.display());
            Ok(())
        }
    }
}

fn sample(a: &SampleArgs, seed: u64) -> Result<()> {
    let (teacher, student) = load_models(&a.sampler.checkpoint)?;
    let omega = a.sampler.omega.unwrap_or(teacher.config.eval_omega);
    let mut rng = crate::seeded(seed);
    let (z, cond) = teacher.prior(a.n, &mut rng);
    let w = vec![omega; a.n];
    let out = run_sampler(&teacher, student.as_ref(), a.sampler.sampler, &z, &w, &cond, &mut rng)?;
    let mut csv = csv::Writer::from_path(&a.sampler.out)?;
    let mut header = vec!["id".to_string(), "condition".to_string()];
    header.extend((0..out.z0_hat.ncols()).map(|c| format!("z{c}")));
    csv.write_record(&header)?;
    for (i, row) in out.z0_hat.rows().into_iter().enumerate() {
        let mut rec = vec![i.to_string(), cond[i].row(teacher.classes()).to_string()];
        rec.extend(row.iter().map(f64::to_string));
        csv.write_record(&rec)?;
    }
    csv.flush()?;
    fs::write(
        echo_path(&a.sampler.out),
        format!("seed = {seed}\nsampler = {}\nomega = {omega}\nn = {}\n", a.sampler.sampler, a.n),
    )?;
    println!("wrote {} samples ({} nfe each) to {}", a.n, out.nfe, a.sampler.out.display());
    Ok(())
}

fn eval(a: &EvalArgs, seed: u64) -> Result<()> {
    let (teacher, student) = load_models(&a.sampler.checkpoint)?;
    let mut cfg = EvalConfig::for_teacher(&teacher, seed);
    cfg.timing_calls = a.timing_calls;
    if let Some(o) = a.sampler.omega {
        cfg.omega = o;
    }
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
    let report = evaluate(&teacher, student.as_ref(), a.sampler.sampler, &cfg)?;
    write_metrics(&a.sampler.out, a.sampler.sampler, &cfg, &report)?;
    fs::write(
        echo_path(&a.sampler.out),
        format!(
            "seed = {seed}\nsampler = {}\nomega = {}\nsamples = {}\ntiming_calls = {}\n",
            a.sampler.sampler, cfg.omega, cfg.samples, cfg.timing_calls
        ),
    )?;
    println!("{}", MetricsReport::HEADER.join(","));
    println!("{}", report.fields().join(","));
    Ok(())
}

fn write_metrics(path: &Path, kind: SamplerKind, cfg: &EvalConfig, m: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sampler", "omega", "samples", "seed"];
    header.extend(MetricsReport::HEADER);
    w.write_record(&header)?;
    let mut row = vec![kind.to_string(), cfg.omega.to_string(), cfg.samples.to_string(), cfg.seed.to_string()];
    row.extend(m.fields());
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

fn ablate(a: &AblateArgs, seed: u64) -> Result<()> {
    let teacher = read_teacher(&load(&a.teacher)?)?;
    let base: DistillConfig = read_config(a.config.as_deref())?;
    let mut eval = EvalConfig::for_teacher(&teacher, seed);
    eval.timing_calls = a.timing_calls;
    if let Some(o) = a.omega {
        eval.omega = o;
    }
    if let Some(n) = a.samples {
        eval.samples = n;
    }
    let plan = ExperimentPlan {
        axis: a.axis,
        values: parse_list("values", &a.values)?,
        base,
        seeds: parse_list("seeds", &a.seeds)?,
        eval,
    };
    plan.validate()?;
    let mut echo = fs::File::create(echo_path(&a.out))?;
    writeln!(echo, "# axis = {}", plan.axis)?;
    writeln!(echo, "# values = {}", a.values)?;
    writeln!(echo, "# seeds = {}", a.seeds)?;
    writeln!(echo, "# omega = {}", plan.eval.omega)?;
    writeln!(echo, "# samples = {}", plan.eval.samples)?;
    write!(echo, "{}", plan.base.to_kv())?;
    let cells = plan.run(&teacher)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    write_ablation(plan.axis, &cells, &mut w)?;
    let failed = cells.iter().filter(|c| c.result.is_err()).count();
    println!("{} cells ({failed} failed) -> {}", cells.len(), a.out.display());
    Ok(())
}

fn oracle_suite(a: &OracleArgs, seed: u64) -> Result<()> {
    let s = NoiseSchedule::new(ScheduleConfig::default())?;
    let mut rng = crate::seeded(seed);
    let id = integral_identity_check(&s, a.tuples, a.dim, &mut rng)?;
    println!(
        "identity tuples={} ddim_rel={:.3e} quadrature_rel={:.3e}",
        id.tuples, id.ddim_rel, id.quadrature_rel
    );
    let report = gaussian_oracle_suite(&s, a.samples, a.dim, &mut rng)?;
    println!("steps,recursion_var,measured_var,flow_error");
    for r in &report.rows {
        println!("{},{:.6},{:.6},{:.6}", r.steps, r.recursion_var, r.measured_var, r.flow_error);
    }
    if let Some(p) = &a.out {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["steps", "recursion_var", "measured_var", "flow_error"])?;
        for r in &report.rows {
            w.write_record([
                r.steps.to_string(),
                r.recursion_var.to_string(),
                r.measured_var.to_string(),
                r.flow_error.to_string(),
            ])?;
        }
        w.flush()?;
    }
    let mut failures = Vec::new();
    if !(id.ddim_rel < IDENTITY_TOL) {
        failures.push(format!("ddim identity {:.3e}", id.ddim_rel));
    }
    if !(id.quadrature_rel < QUADRATURE_TOL) {
        failures.push(format!("quadrature {:.3e}", id.quadrature_rel));
    }
    let last = report.rows.last().map_or(f64::NAN, |r| (r.measured_var - r.recursion_var).abs() / r.recursion_var);
    if !(last < ORACLE_GAP_TOL) {
        failures.push(format!("50-step variance gap {last:.4}"));
    }
    if !report.error_decreasing() {
        failures.push("flow error not decreasing in steps".into());
    }
    if failures.is_empty() {
        println!("oracle suite: pass");
        Ok(())
    } else {
        Err(Error::Gate(format!("oracle suite failed: {}", failures.join("; "))))
    }
}
