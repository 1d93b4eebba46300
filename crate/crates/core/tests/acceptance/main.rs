//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs everything. Criterion
//! numbers after `--` restrict the run, e.g. `-- 1 2 9`.

#[path = "../common/mod.rs"]
mod common;
mod fixtures;
mod identities;
mod trained;

use std::time::Instant;

use fixtures::Ctx;

pub struct Outcome {
    pub pass: bool,
    /// A failing soft criterion is reported but does not fail the suite.
    pub soft: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            soft: false,
            detail: detail.into(),
        }
    }

    pub fn soft(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            soft: true,
            ..Self::new(pass, detail)
        }
    }
}

type Criterion = (u32, &'static str, fn(&mut Ctx) -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "exponential-integrator identity", identities::integrator_identity),
    (2, "boundary condition at partition edges", identities::boundary_condition),
    (3, "determinism split between samplers", identities::determinism_split),
    (4, "gaussian oracle", identities::gaussian_oracle),
    (5, "gradient suite", identities::gradient_suite),
    (9, "unit examples", trivial::unit_examples),
    (10, "checkpoint round trip and corruption", trained::checkpoint_round_trip),
    (8, "per-sample time ordering", trained::timing_ordering),
    (6, "distillation beats few-step solver", trained::distillation_beats_ddim),
    (7, "adversarial ablation", trained::adversarial_ablation),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Ctx::default();
    let mut results = Vec::new();
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let out = run(&mut ctx);
        let tag = match (out.pass, out.soft) {
            (true, _) => "PASS",
            (false, true) => "SOFT-FAIL",
            (false, false) => "FAIL",
        };
        let line = format!(
            "[{tag}] criterion {id:>2} {name}: {} ({:.1} s)",
            out.detail,
            t0.elapsed().as_secs_f64()
        );
        println!("{line}");
        results.push((id, out.pass || out.soft, line));
    }
    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (_, _, line) in &results {
        println!("{line}");
    }
    let failed = results.iter().filter(|r| !r.1).count();
    println!("{} criteria run, {failed} failed", results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
