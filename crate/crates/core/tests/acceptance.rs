//! Runs every acceptance check and prints one line per check.
//!
//! Built without the libtest harness so the lines are shown even when all pass.

use std::process::ExitCode;

use lanekeep_core::verify::run_suite;

fn main() -> ExitCode {
    let reports = run_suite("all").expect("suite exists");
    assert_eq!(reports.len(), 10);
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<u8> = reports.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} checks passed", reports.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed checks {failed:?}");
        ExitCode::FAILURE
    }
}
