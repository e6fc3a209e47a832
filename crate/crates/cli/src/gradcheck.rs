//! `alfa gradcheck`: finite-difference suites over the op set and the
//! unrolled meta-gradients. Prints one line per suite; exits 5 on any
//! tolerance breach.

use std::process::ExitCode;

use alfa_core::gradcheck::{run_all, CheckSize};

use crate::{CheckSizeArg, EXIT_GRADCHECK, EXIT_NUMERIC, EXIT_OK};

pub fn run(size: CheckSizeArg, corrupt: Option<&str>) -> ExitCode {
    let size = match size {
        CheckSizeArg::Tiny => CheckSize::Tiny,
        CheckSizeArg::Small => CheckSize::Small,
    };
    let reports = match run_all(size, corrupt) {
        Ok(reports) => reports,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(EXIT_NUMERIC);
        }
    };
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<34} max_rel_err {:>12.3e} tolerance {:>9.1e}", r.name, r.max_rel_err, r.tolerance);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        ExitCode::from(EXIT_OK)
    } else {
        eprintln!("gradcheck failed: {}", failed.join(", "));
        ExitCode::from(EXIT_GRADCHECK)
    }
}
