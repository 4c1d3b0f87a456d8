use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use deepwkb::pipeline::{run_all, run_stage, RunConfig, RunManifest, Stage, StageStatus};

/// Exit status when the WKB form is rejected by the validation stage.
const EXIT_REJECTED: u8 = 2;

/// Quasi-potential and WKB prefactor estimation for small-noise SDEs.
///
/// TARGET is a stage (simulate, regress, validate, train-v, expand, train-z,
/// evaluate, fp-residual), `all` to run every stage in order, or `init-config`
/// to write the default config for `--benchmark` to `--config`.
#[derive(Parser)]
#[command(name = "deepwkb", version)]
struct Cli {
    target: String,
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rerun stages even when their outputs are current.
    #[arg(long)]
    force: bool,
    /// Benchmark id for `init-config`.
    #[arg(long, default_value = "ou1d")]
    benchmark: String,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    if let Some(o) = &cli.out {
        return o.clone();
    }
    let base = cli.config.parent().unwrap_or(Path::new("."));
    base.join(&cfg.output_dir)
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    if cli.target == "init-config" {
        std::fs::write(&cli.config, RunConfig::for_benchmark(&cli.benchmark)?.to_toml()?)?;
        println!("wrote {}", cli.config.display());
        return Ok(ExitCode::SUCCESS);
    }
    let cfg = RunConfig::load(&cli.config)?;
    let dir = out_dir(&cli, &cfg);
    let manifest = if cli.target == "all" {
        let m = run_all(&cfg, &dir, cli.force)?;
        for rec in &m.stages {
            println!("{}: done", rec.stage);
        }
        m
    } else {
        let stage: Stage = cli.target.parse()?;
        let mut m = RunManifest::load(&dir)?;
        let word = match run_stage(stage, &cfg, &mut m, &dir, cli.force)? {
            StageStatus::Ran => "done",
            StageStatus::Skipped => "up to date",
        };
        println!("{stage}: {word}");
        m
    };
    if let Some(v) = &manifest.verdict {
        println!("WKB form {v}");
    }
    Ok(match manifest.wkb_holds() {
        Some(false) => ExitCode::from(EXIT_REJECTED),
        _ => ExitCode::SUCCESS,
    })
}
