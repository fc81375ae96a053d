//! Command implementations shared by the CLI and the tests: each one owns
//! its run directory through a lock file and logs the resolved
//! configuration, seed and build next to its outputs.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use crate::checkpoint::{load_stage1, load_stage2, read_checkpoint, save_stage1, save_stage2};
use crate::config::{Precision, RunConfig};
use crate::dataset::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::pipeline::{
    evaluate, topk_accuracy, train_stage1 as fit_stage1, train_stage2 as fit_stage2, write_loss_csv, write_reports,
    EvalOptions, LossTrace, MetricReport, Stage1Model, Stage2Config,
};
use crate::scalar::Scalar;
use crate::verify::{all_suites, SuiteResult};

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const LOCK_FILE: &str = "run.lock";
pub const RUN_LOG: &str = "run.log";

macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::State(format!(
                    "run directory {} is locked by another process (remove {} if stale)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// The rendered configuration preceded by `#` lines naming the command,
/// seed and build. The result parses as a configuration file itself.
pub fn run_log_text(command: &str, seed: Option<u64>, cfg: &RunConfig) -> String {
    let mut s = String::new();
    writeln!(s, "# command = {command}").expect("write to string");
    if let Some(seed) = seed {
        writeln!(s, "# seed = {seed}").expect("write to string");
    }
    writeln!(s, "# build = {BUILD_ID}").expect("write to string");
    s + &cfg.render()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::Input(format!("dataset file {} not found", path.display())));
    }
    dataset::load(path)
}

/// Generates the synthetic corpus described by `cfg` into `out`.
pub fn gen_data(out: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let _lock = RunLock::acquire(&parent_dir(out))?;
    let (ds, _) = dataset::generate(&cfg.dataset)?;
    dataset::save(&ds, out)?;
    write_text(&out.with_extension("log"), &run_log_text("gen-data", None, cfg))?;
    info!("wrote {} records to {}", ds.len(), out.display());
    Ok(ds)
}

fn stage1_in<T: Scalar>(ds: &Dataset, out: &Path, cfg: &RunConfig, seed: u64) -> Result<LossTrace> {
    let (model, trace) = fit_stage1::<T>(ds, &cfg.stage1, seed)?;
    save_stage1(out, &model, &cfg.render(), seed)?;
    Ok(trace)
}

/// Trains stage 1 and writes its checkpoint, loss trace and run log to `out`.
pub fn train_stage1(data: &Path, out: &Path, cfg: &RunConfig, seed: u64) -> Result<LossTrace> {
    let _lock = RunLock::acquire(out)?;
    write_text(&out.join(RUN_LOG), &run_log_text("train-stage1", Some(seed), cfg))?;
    let ds = load_dataset(data)?;
    let trace = with_precision!(cfg.precision, stage1_in(&ds, out, cfg, seed))?;
    write_loss_csv(&out.join("loss.csv"), &trace)?;
    Ok(trace)
}

fn stage2_in<T: Scalar>(ds: &Dataset, stage1: Option<&Path>, out: &Path, cfg: &RunConfig, seed: u64) -> Result<LossTrace> {
    let s1 = match stage1 {
        Some(dir) if !cfg.stage2.no_stage1 => {
            let (m, _) = load_stage1::<T>(dir)?;
            if m.no_id != cfg.stage2.no_id {
                warn!("stage-1 checkpoint no_id = {} but stage-2 no_id = {}", m.no_id, cfg.stage2.no_id);
            }
            Some(m)
        }
        _ => None,
    };
    let (model, trace) = fit_stage2::<T>(ds, s1.as_ref(), &cfg.stage2, seed)?;
    save_stage2(out, &model, &cfg.render(), seed)?;
    Ok(trace)
}

/// Trains stage 2 and writes its checkpoint, loss trace and run log to
/// `out`. With `no_stage1` set the stage-1 directory is never opened.
pub fn train_stage2(data: &Path, stage1: Option<&Path>, out: &Path, cfg: &RunConfig, seed: u64) -> Result<LossTrace> {
    if stage1.is_none() && !cfg.stage2.no_stage1 {
        return Err(Error::Config("train-stage2 needs --stage1 unless no_stage1 is set".into()));
    }
    let _lock = RunLock::acquire(out)?;
    write_text(&out.join(RUN_LOG), &run_log_text("train-stage2", Some(seed), cfg))?;
    let ds = load_dataset(data)?;
    let trace = with_precision!(cfg.precision, stage2_in(&ds, stage1, out, cfg, seed))?;
    write_loss_csv(&out.join("loss.csv"), &trace)?;
    Ok(trace)
}

#[derive(Clone, Debug)]
pub struct EvalRequest<'a> {
    pub data: &'a Path,
    pub stage1: &'a Path,
    pub stage2: Option<&'a Path>,
    /// Defaults to the stage-2 checkpoint's `rerank_k`.
    pub rerank: Option<usize>,
    pub split: Split,
    pub out: &'a Path,
}

fn eval_in<T: Scalar>(ds: &Dataset, req: &EvalRequest, cfg: &RunConfig, seed: u64) -> Result<Vec<MetricReport>> {
    let (m1, _) = load_stage1::<T>(req.stage1)?;
    let m2 = req.stage2.map(load_stage2::<T>).transpose()?;
    let rerank_k = match (req.rerank, &m2) {
        (Some(k), _) => k,
        (None, Some((_, manifest))) => RunConfig::parse(&manifest.config)?.rerank_k,
        (None, None) => cfg.rerank_k,
    };
    let opts = EvalOptions { split: req.split, rerank_k, ap_k: cfg.ap_k, seed };
    let outcome = evaluate(ds, Some(&m1), m2.as_ref().map(|(m, _)| m), &opts)?;
    Ok(outcome.reports)
}

/// Evaluates stage 1, or stage 1 reranked by stage 2, on one split and
/// writes the reports as JSON plus a TSV sibling.
pub fn eval(req: &EvalRequest) -> Result<Vec<MetricReport>> {
    let (manifest, _) = read_checkpoint(req.stage1)?;
    let cfg = RunConfig::parse(&manifest.config)?;
    let seed = match req.stage2 {
        Some(dir) => read_checkpoint(dir)?.0.seed,
        None => manifest.seed,
    };
    let _lock = RunLock::acquire(&parent_dir(req.out))?;
    write_text(&req.out.with_extension("log"), &run_log_text("eval", Some(seed), &cfg))?;
    let ds = load_dataset(req.data)?;
    let reports = with_precision!(cfg.precision, eval_in(&ds, req, &cfg, seed))?;
    write_reports(req.out, &reports)?;
    Ok(reports)
}

/// Every finite-difference suite in the requested precision.
pub fn gradcheck(f64_mode: bool, seed: u64) -> Result<Vec<SuiteResult>> {
    if f64_mode {
        all_suites::<f64>(seed)
    } else {
        all_suites::<f32>(seed)
    }
}

/// Rows of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Stage1,
    NoSmaSpaStage1,
    NoSmaSpa,
    NoSma,
    NoId,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Stage1,
        AblationVariant::NoSmaSpaStage1,
        AblationVariant::NoSmaSpa,
        AblationVariant::NoSma,
        AblationVariant::NoId,
        AblationVariant::Full,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationVariant::Stage1 => "stage1",
            AblationVariant::NoSmaSpaStage1 => "no-sma-spa-no-stage1",
            AblationVariant::NoSmaSpa => "no-sma-spa",
            AblationVariant::NoSma => "no-sma",
            AblationVariant::NoId => "no-id",
            AblationVariant::Full => "full",
        }
    }

    /// Stage-2 configuration for this row, or `None` for stage 1 alone.
    pub fn stage2(self, base: &Stage2Config) -> Option<Stage2Config> {
        let mut c = base.clone();
        match self {
            AblationVariant::Stage1 => return None,
            AblationVariant::NoSmaSpaStage1 => {
                c.variant.no_sma = true;
                c.variant.no_spa = true;
                c.no_stage1 = true;
            }
            AblationVariant::NoSmaSpa => {
                c.variant.no_sma = true;
                c.variant.no_spa = true;
            }
            AblationVariant::NoSma => c.variant.no_sma = true,
            AblationVariant::NoId => c.no_id = true,
            AblationVariant::Full => {}
        }
        Some(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seed: u64,
    pub top1: f64,
    pub top10: f64,
}

fn ablate_seed<T: Scalar>(ds: &Dataset, cfg: &RunConfig, seed: u64, variants: &[AblationVariant]) -> Result<Vec<AblationRow>> {
    let opts = EvalOptions { split: Split::Test, rerank_k: cfg.rerank_k, ap_k: cfg.ap_k, seed };
    let (m1, _) = fit_stage1::<T>(ds, &cfg.stage1, seed)?;
    let mut no_id_stage1: Option<Stage1Model<T>> = None;
    let mut rows = Vec::new();
    for &v in variants {
        let lists = match v.stage2(&cfg.stage2) {
            None => evaluate(ds, Some(&m1), None, &opts)?.final_lists,
            Some(c2) => {
                let base = if c2.no_id {
                    if no_id_stage1.is_none() {
                        let c1 = crate::pipeline::Stage1Config { no_id: true, ..cfg.stage1.clone() };
                        no_id_stage1 = Some(fit_stage1::<T>(ds, &c1, seed)?.0);
                    }
                    no_id_stage1.as_ref().expect("no-id stage 1")
                } else {
                    &m1
                };
                let (m2, trace) = fit_stage2::<T>(ds, Some(base), &c2, seed)?;
                info!(
                    "seed {seed} {}: final BCE {:.4}",
                    v.tag(),
                    trace.epoch_means.last().copied().unwrap_or(f64::NAN)
                );
                evaluate(ds, Some(base), Some(&m2), &opts)?.final_lists
            }
        };
        let k10 = 10.min(lists[0].len());
        let row = AblationRow { variant: v, seed, top1: topk_accuracy(&lists, 1)?, top10: topk_accuracy(&lists, k10)? };
        info!("seed {seed} {}: top1 {:.3} top10 {:.3}", v.tag(), row.top1, row.top10);
        rows.push(row);
    }
    Ok(rows)
}

/// Runs `variants` for every seed on the test split, in memory.
pub fn ablation_grid(ds: &Dataset, cfg: &RunConfig, seeds: &[u64], variants: &[AblationVariant]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in seeds {
        rows.extend(with_precision!(cfg.precision, ablate_seed(ds, cfg, seed, variants))?);
    }
    Ok(rows)
}

/// Mean top-1 of `variant` over the rows present.
pub fn mean_top1(rows: &[AblationRow], variant: AblationVariant) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.top1).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Variant by seed table of top-1 with a mean column.
pub fn ablation_summary(rows: &[AblationRow], seeds: &[u64]) -> String {
    let mut s = String::from("variant");
    for seed in seeds {
        write!(s, "\tseed{seed}").expect("write to string");
    }
    s.push_str("\tmean\n");
    for v in AblationVariant::ALL {
        let Some(mean) = mean_top1(rows, v) else { continue };
        s.push_str(v.tag());
        for &seed in seeds {
            match rows.iter().find(|r| r.variant == v && r.seed == seed) {
                Some(r) => write!(s, "\t{:.4}", r.top1),
                None => write!(s, "\t-"),
            }
            .expect("write to string");
        }
        writeln!(s, "\t{mean:.4}").expect("write to string");
    }
    s
}

/// The full ablation grid; writes per-run reports and a summary table.
pub fn ablate(data: &Path, out: &Path, cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    let _lock = RunLock::acquire(out)?;
    let joined: Vec<String> = seeds.iter().map(u64::to_string).collect();
    write_text(&out.join(RUN_LOG), &run_log_text(&format!("ablate --seeds {}", joined.join(",")), None, cfg))?;
    let ds = load_dataset(data)?;
    let rows = ablation_grid(&ds, cfg, seeds, &AblationVariant::ALL)?;
    let reports: Vec<MetricReport> = rows
        .iter()
        .flat_map(|r| {
            [("top1", r.top1), ("top10", r.top10)].map(|(metric, value)| MetricReport {
                metric: metric.into(),
                value,
                split: Split::Test.to_string(),
                variant: r.variant.tag().into(),
                seed: r.seed,
            })
        })
        .collect();
    write_reports(&out.join("reports.json"), &reports)?;
    write_text(&out.join("summary.tsv"), &ablation_summary(&rows, seeds))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::take_read_log;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::State(_))));
        drop(a);
        assert!(!dir.path().join(LOCK_FILE).exists());
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn run_log_reparses() {
        let mut cfg = RunConfig::default();
        cfg.stage1.epochs = 3;
        let text = run_log_text("train-stage1", Some(7), &cfg);
        assert!(text.contains("# seed = 7") && text.contains(BUILD_ID));
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn summary_layout() {
        let rows = vec![
            AblationRow { variant: AblationVariant::Full, seed: 1, top1: 0.5, top10: 1.0 },
            AblationRow { variant: AblationVariant::Full, seed: 2, top1: 0.25, top10: 1.0 },
            AblationRow { variant: AblationVariant::Stage1, seed: 1, top1: 0.75, top10: 1.0 },
        ];
        let s = ablation_summary(&rows, &[1, 2]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "variant\tseed1\tseed2\tmean");
        assert_eq!(lines[1], "stage1\t0.7500\t-\t0.7500");
        assert_eq!(lines[2], "full\t0.5000\t0.2500\t0.3750");
        assert_eq!(mean_top1(&rows, AblationVariant::NoSma), None);
    }

    #[test]
    fn no_stage1_reads_no_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::parse(
            "num_identities = 4\nembed = 4\nhidden = 4\nregion = 4\njoint = 4\nattention = 3\nimportance = 3\n\
             fc = 3\ndecoder = 3\nphase1_epochs = 1\nphase2_epochs = 1\nk_screen = 3\n",
        )
        .unwrap();
        cfg.stage2.no_stage1 = true;
        let data = dir.path().join("d.jsonl");
        gen_data(&data, &cfg).unwrap();
        take_read_log();
        let s1 = dir.path().join("s1");
        train_stage2(&data, Some(&s1), &dir.path().join("s2"), &cfg, 0).unwrap();
        assert!(take_read_log().is_empty());
        cfg.stage2.no_stage1 = false;
        assert!(train_stage2(&data, Some(&s1), &dir.path().join("s3"), &cfg, 0).is_err());
        assert_eq!(take_read_log(), vec![s1]);
    }
}
