use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::pipeline::retrieval::RankedList;

pub const DEFAULT_AP_CUTOFF: usize = 50;

fn check(lists: &[RankedList], k: usize, what: &str) -> Result<()> {
    if k == 0 {
        return Err(Error::Config(format!("{what} needs k ≥ 1")));
    }
    if lists.is_empty() {
        return Err(Error::Input(format!("{what} over zero queries")));
    }
    if let Some(l) = lists.iter().find(|l| l.len() < k) {
        return Err(Error::Config(format!("{what}: k = {k} exceeds list length {}", l.len())));
    }
    Ok(())
}

/// Fraction of queries with a correct-identity candidate among the first `k`.
pub fn topk_accuracy(lists: &[RankedList], k: usize) -> Result<f64> {
    check(lists, k, "top-k accuracy")?;
    let hits = lists.iter().filter(|l| l.hit_within(k)).count();
    Ok(hits as f64 / lists.len() as f64)
}

/// Percentage of correct-identity items among the first `k` candidates,
/// averaged over the lists of each query class and then over classes.
pub fn ap_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    check(lists, k, "AP@k")?;
    let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for l in lists {
        let hits = l.candidates[..k].iter().filter(|c| c.identity == l.query_identity).count();
        let e = per_class.entry(l.query_identity).or_insert((0.0, 0));
        e.0 += hits as f64 / k as f64;
        e.1 += 1;
    }
    let mean = per_class.values().map(|(s, n)| s / *n as f64).sum::<f64>() / per_class.len() as f64;
    Ok(100.0 * mean)
}
