use std::time::Instant;

use pcdl::teacher::{TeacherBundle, TeacherConfig};

fn main() -> pcdl::Result<()> {
    let t0 = Instant::now();
    let bundle = TeacherBundle::train(&TeacherConfig::default(), 0)?;
    println!("recon {:?}", bundle.recon);
    println!("oracle held-out accuracy {:.3}", bundle.oracle.heldout_acc);
    println!("gate fid {:?} (passes: {})", bundle.gate_fid, bundle.passes_gate());
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
