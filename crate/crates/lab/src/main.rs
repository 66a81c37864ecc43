use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nth_lab::error::{EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_PASS};
use nth_lab::spec::SEED_ENV;
use nth_lab::{run, CommandKind, Context, ExperimentSpec, LabError};

/// Numerical laboratory for wide residual networks under gradient flow.
#[derive(Debug, Parser)]
#[command(name = "nth-lab", version = env!("NTH_LAB_BUILD"))]
struct Cli {
    command: CommandKind,
    /// JSON experiment spec.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the spec's `output_dir`, then `out/`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; output does not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Add the opt-in heavy widths.
    #[arg(long)]
    heavy: bool,
}

fn execute(cli: &Cli) -> Result<i32, LabError> {
    let mut spec = ExperimentSpec::load(&cli.config)?;
    if spec.command != cli.command {
        return Err(LabError::Config(format!(
            "spec is for {:?} but the command is {:?}",
            spec.command.name(),
            cli.command.name()
        )));
    }
    let env = std::env::var(SEED_ENV).ok();
    let seed_source = if spec.apply_seed_override(env.as_deref())? {
        SEED_ENV.to_string()
    } else {
        "spec".to_string()
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(LabError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| LabError::Config(e.to_string()))?;
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| spec.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Context {
        out_dir,
        heavy: cli.heavy,
        seed_source,
    };
    log::info!("running {} (base seed {})", spec.command.name(), spec.base_seed);
    let report = run(&spec, &ctx)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    Ok(if report.passed() { EXIT_PASS } else { EXIT_CHECK_FAILED })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let code = match execute(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
