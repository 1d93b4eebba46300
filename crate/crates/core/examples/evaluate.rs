//! Scores teacher solvers and a distilled student on the full metric suite.
//!
//! `cargo run --release --example evaluate -- [iters]`

use pcdl::distill::DistillConfig;
use pcdl::eval::MetricsReport;
use pcdl::pipeline::{evaluate, train_student, EvalConfig, SamplerKind};
use pcdl::teacher::{TeacherBundle, TeacherConfig};

fn main() -> pcdl::Result<()> {
    let iters = std::env::args().nth(1).map_or(Ok(DistillConfig::default().iters), |a| a.parse()).expect("iters");
    let mut teacher = TeacherBundle::train(&TeacherConfig::default(), 0)?;
    teacher.gate_fid = Some(teacher.measure_gate()?);
    let student = train_student(&teacher, &DistillConfig { phases: 1, iters, ..DistillConfig::default() })?;
    let eval = EvalConfig::for_teacher(&teacher, 0);

    println!("sampler,{}", MetricsReport::HEADER.join(","));
    for kind in [SamplerKind::Ddim(1), SamplerKind::Ddim(4), SamplerKind::Ddim(50), SamplerKind::Pcm] {
        let st = matches!(kind, SamplerKind::Pcm).then_some(&student);
        println!("{kind},{}", evaluate(&teacher, st, kind, &eval)?.fields().join(","));
    }
    Ok(())
}
