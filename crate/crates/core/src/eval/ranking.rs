use std::cmp::Ordering;
use std::collections::HashSet;

use serde::Serialize;

use super::similarity::cosine_similarity;
use crate::error::{DiorError, Result};
use crate::extraction::EmbeddingRecord;

/// A full descending ranking of index items for one query. Ties are broken
/// by ascending index id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingResult {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
    pub self_excluded: bool,
}

impl RankingResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }
}

fn by_score_then_id(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Ranks precomputed `(index id, score)` pairs for `query_id`.
pub fn rank_scores(query_id: &str, scores: Vec<(String, f64)>, exclude_self: bool) -> Result<RankingResult> {
    let mut seen = HashSet::with_capacity(scores.len());
    for (id, s) in &scores {
        if !seen.insert(id.as_str()) {
            return Err(DiorError::Consistency(format!("duplicate index id `{id}`")));
        }
        if s.is_nan() {
            return Err(DiorError::Numeric(format!("score for `{id}`")));
        }
    }
    let mut entries: Vec<(String, f64)> = scores
        .into_iter()
        .filter(|(id, _)| !(exclude_self && id == query_id))
        .collect();
    entries.sort_by(by_score_then_id);
    Ok(RankingResult {
        query_id: query_id.to_string(),
        entries,
        self_excluded: exclude_self,
    })
}

/// Ranks `index` by cosine similarity to `query`. All records must come from
/// one extraction configuration and one condition.
pub fn rank_index(query: &EmbeddingRecord, index: &[EmbeddingRecord], exclude_self: bool) -> Result<RankingResult> {
    let scores = index
        .iter()
        .map(|rec| {
            if !rec.same_config(query) || rec.condition != query.condition {
                return Err(DiorError::Consistency(format!(
                    "record `{}` ({}, layer {}, {}, `{}`) does not match query `{}` ({}, layer {}, {}, `{}`)",
                    rec.image_id,
                    rec.model_id,
                    rec.layer,
                    rec.strategy,
                    rec.condition,
                    query.image_id,
                    query.model_id,
                    query.layer,
                    query.strategy,
                    query.condition
                )));
            }
            Ok((rec.image_id.clone(), cosine_similarity(&query.vector, &rec.vector)?))
        })
        .collect::<Result<Vec<_>>>()?;
    rank_scores(&query.image_id, scores, exclude_self)
}
