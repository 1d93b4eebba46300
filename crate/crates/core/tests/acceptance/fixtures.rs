use std::collections::BTreeMap;
use std::time::Instant;

use pcdl::distill::DistillConfig;
use pcdl::pipeline::{sampler_fid, train_student, EvalConfig, SamplerKind};
use pcdl::teacher::{TeacherBundle, TeacherConfig};

pub const TEACHER_SEED: u64 = 0;

/// Toy-FID of a distilled student under the standard evaluation.
pub struct Run {
    pub fid: f64,
    pub secs: f64,
}

/// State shared between criteria so nothing is trained twice.
#[derive(Default)]
pub struct Ctx {
    teacher: Option<TeacherBundle>,
    pub teacher_secs: f64,
    /// Keyed by `(phases, lambda bits, seed)`.
    runs: BTreeMap<(usize, u64, u64), Run>,
    /// Keyed by `(steps, seed)`.
    ddim: BTreeMap<(usize, u64), (f64, f64)>,
}

impl Ctx {
    /// The default-config teacher, trained and gated on first use.
    pub fn teacher(&mut self) -> &TeacherBundle {
        if self.teacher.is_none() {
            let t0 = Instant::now();
            let mut b = TeacherBundle::train(&TeacherConfig::default(), TEACHER_SEED).expect("teacher training");
            b.gate_fid = Some(b.measure_gate().expect("gate measurement"));
            self.teacher_secs = t0.elapsed().as_secs_f64();
            println!(
                "  teacher: gate toy-FID {:.4} (gate {}), oracle accuracy {:.4}, {:.1} s",
                b.gate_fid.unwrap(),
                b.config.gate_fid,
                b.oracle.heldout_acc,
                self.teacher_secs
            );
            self.teacher = Some(b);
        }
        self.teacher.as_ref().unwrap()
    }

    pub fn eval_config(&mut self, seed: u64) -> EvalConfig {
        EvalConfig {
            timing_calls: 0,
            ..EvalConfig::for_teacher(self.teacher(), seed)
        }
    }

    /// Default distillation with `phases`, `lambda` and `seed`; cached.
    pub fn run(&mut self, phases: usize, lambda: f64, seed: u64) -> &Run {
        let key = (phases, lambda.to_bits(), seed);
        if !self.runs.contains_key(&key) {
            let eval = self.eval_config(seed);
            let teacher = self.teacher();
            let cfg = DistillConfig {
                phases,
                lambda_adv: lambda,
                seed,
                ..DistillConfig::default()
            };
            let t0 = Instant::now();
            let student = train_student(teacher, &cfg).expect("distillation");
            let fid = sampler_fid(teacher, Some(&student), SamplerKind::Pcm, &eval).expect("student evaluation");
            let secs = t0.elapsed().as_secs_f64();
            println!("  distilled M={phases} lambda={lambda} seed={seed}: toy-FID {fid:.4}, {secs:.1} s");
            self.runs.insert(key, Run { fid, secs });
        }
        &self.runs[&key]
    }

    /// Teacher DDIM toy-FID with `steps` steps under the seed's evaluation; cached.
    /// Returns `(fid, seconds)`.
    pub fn ddim(&mut self, steps: usize, seed: u64) -> (f64, f64) {
        if let Some(&v) = self.ddim.get(&(steps, seed)) {
            return v;
        }
        let eval = self.eval_config(seed);
        let t0 = Instant::now();
        let fid = sampler_fid(self.teacher(), None, SamplerKind::Ddim(steps), &eval).expect("teacher evaluation");
        let v = (fid, t0.elapsed().as_secs_f64());
        self.ddim.insert((steps, seed), v);
        v
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    pcdl::pipeline::median(&mut v).expect("non-empty")
}
