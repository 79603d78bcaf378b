//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#[path = "../common/mod.rs"]
mod common;

mod analytics;
mod durability;
mod pipeline;
mod scheduling;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

/// Outcome of one criterion: a short measurement summary, or why it failed.
pub type Outcome = Result<String, String>;

/// Fails the enclosing check with a formatted message.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    // `cargo test -- --list` and friends pass arguments through; a filter
    // selects criteria by substring.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria = [
        Criterion {
            name: "scheduler replay",
            budget: Duration::from_secs(1),
            run: scheduling::replay,
        },
        Criterion {
            name: "throughput law",
            budget: Duration::from_secs(30),
            run: scheduling::throughput,
        },
        Criterion {
            name: "pelt exactness",
            budget: Duration::from_secs(60),
            run: analytics::pelt_exactness,
        },
        Criterion {
            name: "penalized-fit oracle",
            budget: Duration::from_secs(60),
            run: analytics::penalized_fit,
        },
        Criterion {
            name: "gam2 statistics",
            budget: Duration::from_secs(120),
            run: analytics::gam2_statistics,
        },
        Criterion {
            name: "end-to-end pipeline",
            budget: Duration::from_secs(180),
            run: pipeline::end_to_end,
        },
        Criterion {
            name: "occurrence semantics",
            budget: Duration::from_secs(60),
            run: scheduling::occurrences,
        },
        Criterion {
            name: "durability",
            budget: Duration::from_secs(120),
            run: durability::kill_and_restart,
        },
    ];

    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !args.is_empty() && !args.iter().any(|a| c.name.contains(a.as_str())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = match panic::catch_unwind(AssertUnwindSafe(c.run)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => Err(format!("{detail}; took {elapsed:.2?}, budget {:?}", c.budget)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {:<22} {detail} ({elapsed:.2?})", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:<22} {why} ({elapsed:.2?})", c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
