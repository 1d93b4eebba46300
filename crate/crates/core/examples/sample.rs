//! Draws a few motions from every sampler and prints the first frames.
//!
//! `cargo run --release --example sample -- [iters]`

use pcdl::distill::DistillConfig;
use pcdl::pipeline::{run_sampler, train_student, SamplerKind};
use pcdl::teacher::{TeacherBundle, TeacherConfig};

fn main() -> pcdl::Result<()> {
    let iters = std::env::args().nth(1).map_or(Ok(2000), |a| a.parse()).expect("iters");
    let mut teacher = TeacherBundle::train(&TeacherConfig::default(), 0)?;
    teacher.gate_fid = Some(teacher.measure_gate()?);
    let student = train_student(&teacher, &DistillConfig { phases: 4, iters, ..DistillConfig::default() })?;

    let mut rng = pcdl::seeded(5);
    let (z, cond) = teacher.prior(3, &mut rng);
    let w = vec![teacher.config.eval_omega; 3];
    for kind in [SamplerKind::Ddim(50), SamplerKind::Pcm, SamplerKind::Stochastic(4)] {
        let out = run_sampler(&teacher, Some(&student), kind, &z, &w, &cond, &mut rng)?;
        let frames = teacher.decode(&out.z0_hat)?;
        println!("{kind} (nfe {})", out.nfe);
        for (row, c) in frames.rows().into_iter().zip(&cond) {
            let head: Vec<String> = row.iter().take(6).map(|v| format!("{v:+.3}")).collect();
            println!("  {c:?}: {} ...", head.join(" "));
        }
    }
    Ok(())
}
