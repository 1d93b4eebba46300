use std::time::Duration;

use pcdl::artifact::{read_student, student_checkpoint};
use pcdl::checkpoint::{Checkpoint, VERSION};
use pcdl::distill::{distill_train, DistillConfig, Student, OMEGA_DIM};
use pcdl::eval::aits;
use pcdl::nets::CondNet;
use pcdl::pipeline::{run_sampler, SamplerKind};
use pcdl::solver::build_partition;
use pcdl::Error;

use crate::fixtures::{median, Ctx};
use crate::Outcome;

pub const DISTILL_SEEDS: [u64; 3] = [0, 1, 2];
pub const PHASES: [usize; 3] = [1, 2, 4];
pub const TEACHER_STEPS: usize = 50;
pub const FID_RATIO: f64 = 2.0;
pub const PIPELINE_BUDGET: Duration = Duration::from_secs(15 * 60);
pub const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const LAMBDA_OFF: f64 = 0.0;
pub const LAMBDA_ON: f64 = 0.1;
pub const TIME_RATIO: f64 = 0.1;
pub const PCM_CALLS: usize = 200;
pub const DDIM_CALLS: usize = 20;

pub fn distillation_beats_ddim(ctx: &mut Ctx) -> Outcome {
    ctx.teacher();
    // summed from recorded stage times, so cached work still counts
    let mut secs = ctx.teacher_secs;
    let t50 = median(
        DISTILL_SEEDS
            .iter()
            .map(|&s| {
                let (f, t) = ctx.ddim(TEACHER_STEPS, s);
                secs += t;
                f
            })
            .collect(),
    );
    let bound = FID_RATIO * t50;
    let mut pass = true;
    let mut parts = vec![format!("teacher {TEACHER_STEPS}-step median {t50:.4} (bound {bound:.4})")];
    for m in PHASES {
        let mut student = Vec::new();
        let mut ddim = Vec::new();
        for &s in &DISTILL_SEEDS {
            let r = ctx.run(m, LAMBDA_ON, s);
            student.push(r.fid);
            secs += r.secs;
            let (f, t) = ctx.ddim(m, s);
            ddim.push(f);
            secs += t;
        }
        let (sm, dm) = (median(student.clone()), median(ddim));
        let ok = sm < dm && sm <= bound;
        pass &= ok;
        let per_seed: Vec<String> = student.iter().map(|f| format!("{f:.4}")).collect();
        parts.push(format!("M={m}: student {sm:.4} [{}] vs ddim {dm:.4} {}", per_seed.join(" "), if ok { "ok" } else { "X" }));
    }
    let total = Duration::from_secs_f64(secs);
    pass &= total < PIPELINE_BUDGET;
    Outcome::new(
        pass,
        format!(
            "medians over seeds {DISTILL_SEEDS:?}: {}; pipeline {:.0} s (< {} s)",
            parts.join("; "),
            total.as_secs_f64(),
            PIPELINE_BUDGET.as_secs()
        ),
    )
}

pub fn adversarial_ablation(ctx: &mut Ctx) -> Outcome {
    let off: Vec<f64> = ABLATION_SEEDS.iter().map(|&s| ctx.run(1, LAMBDA_OFF, s).fid).collect();
    let on: Vec<f64> = ABLATION_SEEDS.iter().map(|&s| ctx.run(1, LAMBDA_ON, s).fid).collect();
    let (mo, mn) = (median(off.clone()), median(on.clone()));
    let fmt = |v: &[f64]| v.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>().join(" ");
    Outcome::soft(
        mn <= mo,
        format!(
            "1-step median toy-FID lambda={LAMBDA_ON}: {mn:.4} <= lambda={LAMBDA_OFF}: {mo:.4}; per seed \
             {ABLATION_SEEDS:?} lambda={LAMBDA_ON} [{}] lambda={LAMBDA_OFF} [{}]",
            fmt(&on),
            fmt(&off)
        ),
    )
}

pub fn timing_ordering(ctx: &mut Ctx) -> Outcome {
    let teacher = ctx.teacher().clone();
    // latency depends on architecture and step count only
    let student = |m| Student {
        net: CondNet::student_from_teacher(&teacher.eps_net, OMEGA_DIM),
        partition: build_partition(teacher.config.schedule.steps, m).unwrap(),
    };
    let (one, four) = (student(1), student(4));
    let mut rng = pcdl::seeded(3);
    let (z, cond) = teacher.prior(1, &mut rng);
    let w = [teacher.config.eval_omega];
    let mut time = |st: Option<&Student>, kind, calls| {
        aits(
            || {
                let out = run_sampler(&teacher, st, kind, &z, &w, &cond, &mut rng)?;
                teacher.decode(&out.z0_hat).map(drop)
            },
            calls,
        )
        .unwrap()
        .mean_ms
    };
    let pcm1 = time(Some(&one), SamplerKind::Pcm, PCM_CALLS);
    let pcm4 = time(Some(&four), SamplerKind::Pcm, PCM_CALLS);
    let ddim = time(None, SamplerKind::Ddim(TEACHER_STEPS), DDIM_CALLS);
    let ratio = pcm1 / ddim;
    Outcome::new(
        ratio < TIME_RATIO && pcm4 >= pcm1,
        format!(
            "per sample: pcm 1-step {pcm1:.4} ms, pcm 4-step {pcm4:.4} ms, ddim {TEACHER_STEPS}-step {ddim:.3} ms; \
             ratio {ratio:.4} (< {TIME_RATIO}), 4-step >= 1-step: {}",
            pcm4 >= pcm1
        ),
    )
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn checkpoint_round_trip(ctx: &mut Ctx) -> Outcome {
    let teacher = ctx.teacher().clone();
    let cfg = DistillConfig {
        iters: 5,
        batch: 16,
        phases: 2,
        ..DistillConfig::default()
    };
    let run = distill_train::<std::io::Sink>(&teacher, &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.pcdl");
    student_checkpoint(&teacher, &cfg, &run).unwrap().save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let (t2, cfg2, run2) = read_student(&ck).unwrap();
    let same = cfg2 == cfg
        && ck.to_bytes() == bytes
        && bits(&run2.state.theta.params.values) == bits(&run.state.theta.params.values)
        && bits(&run2.state.theta_minus.params.values) == bits(&run.state.theta_minus.params.values)
        && bits(&run2.state.disc.head.values) == bits(&run.state.disc.head.values)
        && bits(&run2.state.opt_theta.m) == bits(&run.state.opt_theta.m)
        && bits(&t2.eps_net.params.values) == bits(&teacher.eps_net.params.values)
        && bits(&t2.decoder.values) == bits(&teacher.decoder.values);

    let mut magic = bytes.clone();
    magic[0] ^= 0x20;
    let magic_err = Checkpoint::from_bytes(&magic).unwrap_err();
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(VERSION + 7).to_le_bytes());
    let version_err = Checkpoint::from_bytes(&version).unwrap_err();
    let last = ck.entries.last().unwrap().name.clone();
    let trunc_err = Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();

    let modes = [
        matches!(magic_err, Error::BadMagic) && magic_err.to_string() == "bad magic",
        matches!(version_err, Error::Version { found, .. } if found == VERSION + 7),
        matches!(&trunc_err, Error::Truncated(n) if *n == last) && trunc_err.to_string().contains(&last),
    ];
    Outcome::new(
        same && modes.iter().all(|&m| m),
        format!(
            "{} entries / {} bytes bitwise identical: {same}; rejected: magic '{magic_err}', version '{version_err}', \
             truncation '{trunc_err}'",
            ck.entries.len(),
            bytes.len()
        ),
    )
}
