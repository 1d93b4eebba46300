//! A small adversarial-weight sweep written as CSV.
//!
//! `cargo run --release --example ablate -- [iters]`

use pcdl::distill::DistillConfig;
use pcdl::pipeline::{write_ablation, AblationAxis, EvalConfig, ExperimentPlan};
use pcdl::teacher::{TeacherBundle, TeacherConfig};

fn main() -> pcdl::Result<()> {
    let iters = std::env::args().nth(1).map_or(Ok(1000), |a| a.parse()).expect("iters");
    let mut teacher = TeacherBundle::train(&TeacherConfig::default(), 0)?;
    teacher.gate_fid = Some(teacher.measure_gate()?);
    let plan = ExperimentPlan {
        axis: AblationAxis::Lambda,
        values: vec![0.0, 0.1, 0.3],
        base: DistillConfig { phases: 1, iters, ..DistillConfig::default() },
        seeds: vec![0, 1],
        eval: EvalConfig { timing_calls: 0, ..EvalConfig::for_teacher(&teacher, 0) },
    };
    let cells = plan.run(&teacher)?;
    let mut out = csv::Writer::from_writer(std::io::stdout());
    write_ablation(plan.axis, &cells, &mut out)?;
    out.flush()?;
    Ok(())
}
