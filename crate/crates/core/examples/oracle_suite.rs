//! Closed-form checks of the solver: the integrator identity and the
//! Gaussian-data optimal model.

use pcdl::eval::gaussian_oracle_suite;
use pcdl::schedule::{NoiseSchedule, ScheduleConfig};
use pcdl::solver::integral_identity_check;

fn main() -> pcdl::Result<()> {
    let s = NoiseSchedule::new(ScheduleConfig::default())?;
    let mut rng = pcdl::seeded(0);
    let id = integral_identity_check(&s, 1000, 8, &mut rng)?;
    println!("identity over {} tuples: step {:.2e}, quadrature {:.2e}", id.tuples, id.ddim_rel, id.quadrature_rel);

    let report = gaussian_oracle_suite(&s, 4000, 8, &mut rng)?;
    println!("steps  recursion  measured  flow_error");
    for r in &report.rows {
        println!("{:>5}  {:>9.5}  {:>8.5}  {:>10.5}", r.steps, r.recursion_var, r.measured_var, r.flow_error);
    }
    println!("max gap {:.3}%, error decreasing: {}", 100.0 * report.max_relative_gap(), report.error_decreasing());
    Ok(())
}
