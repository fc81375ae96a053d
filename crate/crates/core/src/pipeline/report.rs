use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step training losses and their per-epoch means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub steps: Vec<f64>,
    pub epoch_means: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub split: String,
    pub variant: String,
    pub seed: u64,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `step,loss` CSV.
pub fn write_loss_csv(path: &Path, trace: &LossTrace) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.steps.iter().enumerate() {
        writeln!(s, "{i},{l:?}").expect("write to string");
    }
    write(path, &s)
}

/// Writes `path` as a JSON array and a TSV sibling with extension `.tsv`.
pub fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let json = serde_json::to_string_pretty(reports).map_err(|e| Error::Input(e.to_string()))?;
    write(path, &(json + "\n"))?;
    let mut tsv = String::from("metric\tvalue\tsplit\tvariant\tseed\n");
    for r in reports {
        writeln!(tsv, "{}\t{:?}\t{}\t{}\t{}", r.metric, r.value, r.split, r.variant, r.seed).expect("write to string");
    }
    write(&path.with_extension("tsv"), &tsv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let trace = LossTrace { steps: vec![1.5, 0.25], epoch_means: vec![0.875] };
        write_loss_csv(&dir.path().join("loss.csv"), &trace).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv, "step,loss\n0,1.5\n1,0.25\n");
        let r = MetricReport { metric: "top1".into(), value: 0.5, split: "test".into(), variant: "stage1".into(), seed: 7 };
        write_reports(&dir.path().join("m.json"), std::slice::from_ref(&r)).unwrap();
        let back: Vec<MetricReport> =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(back, vec![r]);
        let tsv = std::fs::read_to_string(dir.path().join("m.tsv")).unwrap();
        assert_eq!(tsv.lines().nth(1).unwrap(), "top1\t0.5\ttest\tstage1\t7");
    }
}
