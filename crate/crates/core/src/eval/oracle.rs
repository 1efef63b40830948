//! Brute-force reference implementations of the retrieval metrics.
//!
//! Nothing here calls into the fast path. Ranks are found by counting, for
//! every index item, how many other items beat it; metrics are then evaluated
//! straight from their definitions. Intended for instances of at most 200
//! items.

use std::collections::HashMap;

use super::metrics::{MetricReport, MetricSpec};
use super::ranking::RankingResult;
use crate::error::{DiorError, Result};

pub const ORACLE_MAX_ITEMS: usize = 200;

/// Metric value for one query given the relevance of the item at each rank
/// (`rel_at_rank[i]` is rank `i + 1`).
fn metric_from_ranks(rel_at_rank: &[bool], metric: MetricSpec) -> Result<Option<f64>> {
    let n = rel_at_rank.len();
    let mut r = 0usize;
    for &x in rel_at_rank {
        if x {
            r += 1;
        }
    }
    if r == 0 {
        return Ok(None);
    }
    let precision_at = |i: usize| {
        let mut c = 0usize;
        for &x in &rel_at_rank[..i] {
            if x {
                c += 1;
            }
        }
        c as f64 / i as f64
    };
    let value = match metric {
        MetricSpec::MapAtR => {
            let mut total = 0.0;
            for i in 1..=r {
                if rel_at_rank[i - 1] {
                    total += precision_at(i);
                }
            }
            total / r as f64
        }
        MetricSpec::MapAtK(k) => {
            let mut total = 0.0;
            for i in 1..=k.min(n) {
                if rel_at_rank[i - 1] {
                    total += precision_at(i);
                }
            }
            total / if r < k { r } else { k } as f64
        }
        MetricSpec::RecallAtK(k) => {
            let mut hit = 0.0;
            for i in 1..=k.min(n) {
                if rel_at_rank[i - 1] {
                    hit = 1.0;
                }
            }
            hit
        }
        other => {
            return Err(DiorError::Input(format!(
                "oracle does not implement metric `{}`",
                other.name()
            )))
        }
    };
    Ok(Some(value))
}

fn report(metric: MetricSpec, values: Vec<(String, f64)>, n_queries: usize) -> MetricReport {
    let mut sum = 0.0;
    for (_, v) in &values {
        sum += v;
    }
    MetricReport {
        metric: metric.name().to_string(),
        k: metric.k(),
        aggregate: if values.is_empty() {
            None
        } else {
            Some(sum / values.len() as f64)
        },
        n_skipped: n_queries - values.len(),
        n_queries,
        per_query: values,
    }
}

/// Computes `metric` from a raw score matrix: `scores[q][i]` is the
/// similarity of query `q` to index item `i`. With `exclude_self`, an index
/// item whose id equals the query id is dropped.
pub fn brute_force_from_scores(
    query_ids: &[String],
    index_ids: &[String],
    scores: &[Vec<f64>],
    labels: &HashMap<String, String>,
    exclude_self: bool,
    metric: MetricSpec,
) -> Result<MetricReport> {
    if index_ids.len() > ORACLE_MAX_ITEMS || query_ids.len() > ORACLE_MAX_ITEMS {
        return Err(DiorError::TooLarge(index_ids.len().max(query_ids.len())));
    }
    if scores.len() != query_ids.len() || scores.iter().any(|row| row.len() != index_ids.len()) {
        return Err(DiorError::Input("score matrix shape does not match ids".into()));
    }
    let label = |id: &String| labels.get(id).ok_or_else(|| DiorError::MissingLabel { id: id.clone() });

    let mut values = Vec::new();
    for (q, qid) in query_ids.iter().enumerate() {
        let qlabel = label(qid)?;
        let kept: Vec<usize> = (0..index_ids.len())
            .filter(|&i| !(exclude_self && index_ids[i] == *qid))
            .collect();
        let mut rel_at_rank = vec![false; kept.len()];
        for &j in &kept {
            let mut beaten_by = 0usize;
            for &l in &kept {
                if l == j {
                    continue;
                }
                let (sl, sj) = (scores[q][l], scores[q][j]);
                if sl > sj || (sl == sj && index_ids[l] < index_ids[j]) {
                    beaten_by += 1;
                }
            }
            rel_at_rank[beaten_by] = label(&index_ids[j])? == qlabel;
        }
        if let Some(v) = metric_from_ranks(&rel_at_rank, metric)? {
            values.push((qid.clone(), v));
        }
    }
    Ok(report(metric, values, query_ids.len()))
}

/// Computes `metric` from rankings whose order is taken as given.
pub fn brute_force_from_rankings(
    rankings: &[RankingResult],
    labels: &HashMap<String, String>,
    metric: MetricSpec,
) -> Result<MetricReport> {
    let mut values = Vec::new();
    for ranking in rankings {
        if ranking.entries.len() > ORACLE_MAX_ITEMS {
            return Err(DiorError::TooLarge(ranking.entries.len()));
        }
        let qlabel = labels
            .get(&ranking.query_id)
            .ok_or_else(|| DiorError::MissingLabel {
                id: ranking.query_id.clone(),
            })?;
        let mut rel_at_rank = Vec::with_capacity(ranking.entries.len());
        for (id, _) in &ranking.entries {
            let l = labels
                .get(id)
                .ok_or_else(|| DiorError::MissingLabel { id: id.clone() })?;
            rel_at_rank.push(l == qlabel);
        }
        if let Some(v) = metric_from_ranks(&rel_at_rank, metric)? {
            values.push((ranking.query_id.clone(), v));
        }
    }
    Ok(report(metric, values, rankings.len()))
}
