//! Trains a teacher, distills a 2-phase student and saves it.
//!
//! `cargo run --release --example distill -- [iters] [out.pcdl]`

use pcdl::artifact::student_checkpoint;
use pcdl::distill::{distill_train, DistillConfig};
use pcdl::teacher::{TeacherBundle, TeacherConfig};

fn main() -> pcdl::Result<()> {
    let mut args = std::env::args().skip(1);
    let iters = args.next().map_or(Ok(DistillConfig::default().iters), |a| a.parse()).expect("iters");
    let out = args.next().unwrap_or_else(|| "student.pcdl".into());

    let mut teacher = TeacherBundle::train(&TeacherConfig::default(), 0)?;
    teacher.gate_fid = Some(teacher.measure_gate()?);
    println!("teacher gate toy-FID {:.4}", teacher.gate_fid.unwrap());

    let cfg = DistillConfig {
        phases: 2,
        iters,
        log_every: iters.div_ceil(10).max(1),
        ..DistillConfig::default()
    };
    let mut log = csv::Writer::from_writer(std::io::stdout());
    let run = distill_train(&teacher, &cfg, Some(&mut log))?;
    log.flush()?;
    student_checkpoint(&teacher, &cfg, &run)?.save(std::path::Path::new(&out))?;
    println!("edges {:?} -> {out}", run.partition.edges());
    Ok(())
}
