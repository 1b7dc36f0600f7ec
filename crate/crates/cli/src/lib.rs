//! Command-line front end: configuration, checkpoints and the train, eval,
//! ablate, gen-data and check workflows.

pub mod checkpoint;
pub mod config;
pub mod run;

use detalign::verify::{self, CheckOutcome};

/// Runs the full invariant and oracle suite at its documented sizes.
pub fn run_checks(seed: u64, mut report: impl FnMut(&CheckOutcome)) -> detalign::Result<Vec<CheckOutcome>> {
    let checks: [&dyn Fn() -> detalign::Result<CheckOutcome>; 5] = [
        &|| verify::ot_oracle(1000, seed),
        &|| verify::gradient_suite(100, seed),
        &|| verify::swd_properties(10_000, seed),
        &|| verify::mask_oracle(1000, 100, seed),
        &|| verify::degenerate_equivalence(100, seed),
    ];
    let mut out = Vec::with_capacity(checks.len());
    for c in checks {
        let o = c()?;
        report(&o);
        out.push(o);
    }
    Ok(out)
}
