//! Runs the built-in self checks and prints one line per check.

use gasa::verify::{run_all, VerifyOptions};

fn main() {
    let report = run_all(&VerifyOptions::default());
    for c in &report.checks {
        println!(
            "{} {:<28} {:>4} cases  max error {:.2e} (tol {:.0e}) {}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.cases,
            c.max_error,
            c.tolerance,
            c.detail
        );
    }
    println!("max gradient relative error {:.2e}", report.max_grad_rel_err);
    std::process::exit(if report.passed { 0 } else { 1 });
}
