use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use log::info;

use xmatch_core::config::RunConfig;
use xmatch_core::dataset::Split;
use xmatch_core::run::{self, EvalRequest};
use xmatch_core::Error;

/// Two-stage identity-aware text-image matching on synthetic data.
#[derive(Debug, Parser)]
#[command(name = "xmatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the stage-1 encoders with the CMCE loss.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the stage-2 co-attention verifier.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_sma: bool,
        #[arg(long)]
        no_spa: bool,
        #[arg(long)]
        no_stage1: bool,
        #[arg(long)]
        no_id: bool,
    },
    /// Text-to-image evaluation, optionally reranked by stage 2.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long, requires = "stage2")]
        rerank: Option<usize>,
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every finite-difference gradient suite.
    Gradcheck {
        #[arg(long = "f64")]
        f64_mode: bool,
        /// Defaults to a fresh seed, printed with the report.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the ablation grid over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn config(path: Option<&Path>) -> xmatch_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn set_threads() -> xmatch_core::Result<()> {
    let Ok(v) = std::env::var("XMATCH_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("XMATCH_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::State(e.to_string()))
}

fn execute(cmd: Command) -> xmatch_core::Result<()> {
    set_threads()?;
    match cmd {
        Command::GenData { out, config: c } => {
            let cfg = config(c.as_deref())?;
            run::gen_data(&out, &cfg)?;
        }
        Command::TrainStage1 { data, out, config: c, seed } => {
            let cfg = config(c.as_deref())?;
            let trace = run::train_stage1(&data, &out, &cfg, seed)?;
            info!("stage-1 epoch losses: {:?}", trace.epoch_means);
        }
        Command::TrainStage2 { data, stage1, out, config: c, seed, no_sma, no_spa, no_stage1, no_id } => {
            let mut cfg = config(c.as_deref())?;
            let s2 = &mut cfg.stage2;
            s2.variant.no_sma |= no_sma;
            s2.variant.no_spa |= no_spa;
            s2.no_stage1 |= no_stage1;
            s2.no_id |= no_id;
            let trace = run::train_stage2(&data, stage1.as_deref(), &out, &cfg, seed)?;
            info!("stage-2 epoch losses: {:?}", trace.epoch_means);
        }
        Command::Eval { data, stage1, rerank, stage2, split, out } => {
            let req = EvalRequest {
                data: &data,
                stage1: &stage1,
                stage2: stage2.as_deref(),
                rerank,
                split,
                out: &out,
            };
            for r in run::eval(&req)? {
                println!("{}\t{}\t{:.4}", r.variant, r.metric, r.value);
            }
        }
        Command::Gradcheck { f64_mode, seed } => {
            let seed = seed.unwrap_or_else(|| {
                SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0)
            });
            println!("seed {seed}, {}", if f64_mode { "f64" } else { "f32" });
            let suites = run::gradcheck(f64_mode, seed)?;
            for s in &suites {
                println!(
                    "{} {}: max relative error {:.3e} (tolerance {:.0e}) over {} instances in {:.2?}",
                    if s.passed() { "PASS" } else { "FAIL" },
                    s.name,
                    s.max_error,
                    s.tolerance,
                    s.instances,
                    s.elapsed
                );
            }
            if let Some(bad) = suites.iter().find(|s| !s.passed()) {
                return Err(Error::Numeric(format!("gradient suite '{}' failed", bad.name)));
            }
        }
        Command::Ablate { data, out, seeds, config: c } => {
            let cfg = config(c.as_deref())?;
            let rows = run::ablate(&data, &out, &cfg, &seeds)?;
            print!("{}", run::ablation_summary(&rows, &seeds));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
