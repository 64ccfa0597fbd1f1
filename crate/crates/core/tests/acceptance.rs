//! Runs the eleven acceptance checks at their default sizes and prints one
//! PASS/FAIL line per criterion.

use kinetic_core::config::{RunConfig, CHECK_NAMES};
use kinetic_core::report::Status;
use kinetic_core::suite::{criterion_of, run_check};

fn main() {
    let cfg = RunConfig::default();
    let mut failed = Vec::new();
    for name in CHECK_NAMES {
        let Some(n) = criterion_of(name) else { continue };
        let (rep, secs) = run_check(&cfg, name).expect("known check");
        let verdict = if rep.status == Status::Pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {name:<20} {verdict} ({secs:.1} s)");
        for (k, v) in &rep.values {
            match v.tolerance {
                Some(t) => println!("    {k} = {:.3e} (tol {t:.1e})", v.value),
                None => println!("    {k} = {:.3e}", v.value),
            }
        }
        for note in rep.notes.iter().chain(&rep.error) {
            println!("    ! {note}");
        }
        if verdict == "FAIL" {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
