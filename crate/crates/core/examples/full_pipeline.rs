//! The whole run for a config file, as the `run` command does it.

use semiconj::report::{load_config, run_to_dir};
use std::path::PathBuf;

fn main() {
    let config = std::env::args().nth(1).unwrap_or_else(|| "configs/basilica_capture.json".into());
    let cfg = load_config(&PathBuf::from(&config)).unwrap();
    let (outcome, files) = run_to_dir(&cfg, &cfg.out).unwrap();
    for (stage, secs) in &outcome.timings.0 {
        println!("{stage:<12} {secs:.2}s");
    }
    for r in &outcome.report.residuals {
        println!("level {}: exact step {:.2e}, limit {:.3e}", r.level, r.exact_step, r.limit);
    }
    for c in &outcome.report.checks {
        println!("{} {} = {:.4e}", if c.passed { "pass" } else { "FAIL" }, c.name, c.value);
    }
    println!("{} files in {}", files.len(), cfg.out.display());
}
