//! Retrieval metrics over [`RankingResult`]s.
//!
//! A ranked item is relevant when it shares the query's class label. `R` is
//! the number of relevant items in the ranking (after self-exclusion); queries
//! with `R = 0` are skipped and counted.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ranking::RankingResult;
use crate::error::{DiorError, Result};

/// Aggregated metric values for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub k: Option<usize>,
    pub per_query: Vec<(String, f64)>,
    /// Mean over scored queries; absent when every query was skipped.
    pub aggregate: Option<f64>,
    pub n_queries: usize,
    pub n_skipped: usize,
}

impl MetricReport {
    pub(crate) fn from_values(metric: &str, k: Option<usize>, per_query: Vec<(String, f64)>, n_queries: usize) -> Self {
        let n_skipped = n_queries - per_query.len();
        let aggregate = if per_query.is_empty() {
            None
        } else {
            Some(per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64)
        };
        Self {
            metric: metric.to_string(),
            k,
            per_query,
            aggregate,
            n_queries,
            n_skipped,
        }
    }
}

/// Which metric to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricSpec {
    MapAtR,
    MapAtK(usize),
    RecallAtK(usize),
    GenecisAtK(usize),
    Ami,
}

impl MetricSpec {
    pub fn name(self) -> &'static str {
        match self {
            MetricSpec::MapAtR => "map@r",
            MetricSpec::MapAtK(_) => "map@k",
            MetricSpec::RecallAtK(_) => "recall@k",
            MetricSpec::GenecisAtK(_) => "genecis@k",
            MetricSpec::Ami => "ami",
        }
    }

    pub fn k(self) -> Option<usize> {
        match self {
            MetricSpec::MapAtK(k) | MetricSpec::RecallAtK(k) | MetricSpec::GenecisAtK(k) => Some(k),
            MetricSpec::MapAtR | MetricSpec::Ami => None,
        }
    }

    /// Parses a metric name as accepted on the command line, taking `k` for
    /// the metrics that need it.
    pub fn parse(name: &str, k: Option<usize>) -> Result<Self> {
        let need_k = || k.ok_or_else(|| DiorError::Input(format!("metric `{name}` requires k")));
        match name {
            "map@r" => Ok(MetricSpec::MapAtR),
            "map@k" => Ok(MetricSpec::MapAtK(need_k()?)),
            "recall@k" => Ok(MetricSpec::RecallAtK(need_k()?)),
            "genecis@k" => Ok(MetricSpec::GenecisAtK(need_k()?)),
            "ami" => Ok(MetricSpec::Ami),
            other => Err(DiorError::Input(format!("unknown metric `{other}`"))),
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.k() {
            Some(k) => write!(f, "{}{k}", self.name().trim_end_matches('k')),
            None => f.write_str(self.name()),
        }
    }
}

impl FromStr for MetricSpec {
    type Err = DiorError;

    /// Accepts `map@r`, `ami`, or a concrete form like `map@10`, `recall@1`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some((name, k)) = s.split_once('@') {
            if let Ok(k) = k.parse::<usize>() {
                return MetricSpec::parse(&format!("{name}@k"), Some(k));
            }
        }
        MetricSpec::parse(s, None)
    }
}

/// Relevance flags of a ranking against the query's label.
fn relevance(ranking: &RankingResult, labels: &HashMap<String, String>) -> Result<Vec<bool>> {
    let label_of = |id: &str| {
        labels
            .get(id)
            .ok_or_else(|| DiorError::MissingLabel { id: id.to_string() })
    };
    let query_label = label_of(&ranking.query_id)?;
    ranking
        .ids()
        .map(|id| Ok(label_of(id)? == query_label))
        .collect()
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(DiorError::Input("k must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Sum of precision@i over relevant positions among the first `limit`.
fn precision_sum(rel: &[bool], limit: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in rel.iter().take(limit).enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum
}

fn per_query<F>(rankings: &[RankingResult], labels: &HashMap<String, String>, score: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&[bool], usize) -> f64,
{
    let mut out = Vec::with_capacity(rankings.len());
    for ranking in rankings {
        let rel = relevance(ranking, labels)?;
        let r = rel.iter().filter(|&&x| x).count();
        if r > 0 {
            out.push((ranking.query_id.clone(), score(&rel, r)));
        }
    }
    Ok(out)
}

/// Mean average precision at R.
pub fn map_at_r(rankings: &[RankingResult], labels: &HashMap<String, String>) -> Result<MetricReport> {
    let values = per_query(rankings, labels, |rel, r| precision_sum(rel, r) / r as f64)?;
    Ok(MetricReport::from_values("map@r", None, values, rankings.len()))
}

/// Mean average precision at k, normalized by `min(R, k)`.
pub fn map_at_k(rankings: &[RankingResult], labels: &HashMap<String, String>, k: usize) -> Result<MetricReport> {
    check_k(k)?;
    let values = per_query(rankings, labels, |rel, r| precision_sum(rel, k) / r.min(k) as f64)?;
    Ok(MetricReport::from_values("map@k", Some(k), values, rankings.len()))
}

/// Fraction of queries with at least one relevant item in the top k.
pub fn recall_at_k(rankings: &[RankingResult], labels: &HashMap<String, String>, k: usize) -> Result<MetricReport> {
    check_k(k)?;
    let values = per_query(rankings, labels, |rel, _| {
        if rel.iter().take(k).any(|&x| x) {
            1.0
        } else {
            0.0
        }
    })?;
    Ok(MetricReport::from_values("recall@k", Some(k), values, rankings.len()))
}
