//! Runs every acceptance criterion and prints one line per criterion. Exits
//! nonzero if any criterion fails.

use std::io::Write;

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let verdicts = rimfg_acceptance::run_all(scratch.path());
    let mut out = std::io::stdout().lock();
    let mut failed = 0;
    for v in &verdicts {
        failed += usize::from(!v.passed);
        let _ = writeln!(
            out,
            "criterion {:>2} {} | {} | {} | {:.1}s (budget {}s)",
            v.id,
            if v.passed { "PASS" } else { "FAIL" },
            v.title,
            v.detail,
            v.elapsed.as_secs_f64(),
            v.budget.as_secs()
        );
    }
    let _ = writeln!(out, "acceptance: {} passed, {} failed", verdicts.len() - failed, failed);
    drop(out);
    if failed > 0 {
        std::process::exit(1);
    }
}
