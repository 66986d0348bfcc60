//! The eight acceptance criteria, one PASS/FAIL line each.

use std::io::Write;

use mfe::bench_cli::criteria;

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    for (id, ..) in criteria::CRITERIA {
        let outcome = criteria::run(id).expect("registered criterion");
        // straight to stderr so the line shows without --nocapture
        writeln!(std::io::stderr(), "{outcome}").unwrap();
        if !outcome.passed {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
