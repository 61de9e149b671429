use clap::{Args, Parser, Subcommand};
use semiconj::report::{
    build_fields, check_outputs, load_config, run_to_dir, write_images, Check, PipelineError, RunConfig, Timings,
};
use semiconj::pullback::{run_pullback, ContinuationOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Thurston pullback, partial semiconjugacies and expanding metrics for
/// point-push surgeries.
///
/// Exit status: 0 when every check passes, 1 when a check fails, 2 when a
/// stage fails, 3 on a bad configuration. `SEMICONJ_THREADS` sets the
/// number of worker threads.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a configuration.
    Validate(Overrides),
    /// Run the full pipeline and write the report and artifacts.
    Run(Overrides),
    /// Build the fields and write one image per level.
    Render(Overrides),
    /// Recompute the checks of a finished run from its trace.
    Check {
        /// Directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tolerance: Option<f64>,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig, ExitCode> {
        let mut cfg = load_config(&self.config).map_err(|e| fail(3, &e))?;
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(d) = self.depth {
            cfg.depth = d;
        }
        if let Some(d) = self.density {
            cfg.density = d;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.tolerance {
            cfg.tolerance = t;
        }
        cfg.validate().map_err(|e| fail(3, &e))?;
        Ok(cfg)
    }
}

fn fail(code: u8, e: &dyn std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(code)
}

fn pipeline_fail(e: PipelineError) -> ExitCode {
    match e {
        PipelineError::Config(c) => fail(3, &c),
        other => fail(2, &other),
    }
}

fn print_checks(checks: &[Check]) -> ExitCode {
    for c in checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        println!("{mark} {:<28} {:>12.4e}  (threshold {:.4e})", c.name, c.value, c.threshold);
    }
    if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn execute(cli: Cli) -> Result<ExitCode, ExitCode> {
    match cli.command {
        Command::Validate(o) => {
            let cfg = o.load()?;
            println!("{} ok", o.config.display());
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(o) => {
            let cfg = o.load()?;
            let (outcome, files) = run_to_dir(&cfg, &cfg.out).map_err(pipeline_fail)?;
            for (stage, secs) in &outcome.timings.0 {
                println!("{stage:<12} {secs:8.2}s");
            }
            println!("wrote {} files to {}", files.len(), cfg.out.display());
            Ok(print_checks(&outcome.report.checks))
        }
        Command::Render(o) => {
            let cfg = o.load()?;
            let surgery = cfg.surgery().map_err(|e| fail(3, &e))?;
            let run = run_pullback(&surgery, cfg.max_steps, cfg.tolerance, cfg.fixed_steps, &ContinuationOptions::default())
                .map_err(|e| fail(2, &e))?;
            let mut timings = Timings::default();
            let (_, stack) = build_fields(&cfg, &surgery, &run, &mut timings).map_err(pipeline_fail)?;
            let mut files = Vec::new();
            write_images(&stack, &cfg.out, cfg.image_size, &mut files).map_err(|e| fail(2, &e))?;
            for f in &files {
                println!("{}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { out } => {
            let checks = check_outputs(&out).map_err(|e| fail(2, &e))?;
            Ok(print_checks(&checks))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("SEMICONJ_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(3, &e);
        }
    }
    execute(cli).unwrap_or_else(|code| code)
}
