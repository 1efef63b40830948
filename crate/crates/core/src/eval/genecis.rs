use super::metrics::MetricReport;
use super::similarity::cosine_similarity;
use crate::error::{DiorError, Result};
use crate::manifest::{GeneCisManifest, GeneCisQuery, ImageRef};

/// Position of the correct candidate when candidates are ranked by cosine
/// similarity to the query (ties by candidate order).
fn answer_rank(
    query: &GeneCisQuery,
    embed: &mut dyn FnMut(&ImageRef, &str) -> Result<Vec<f32>>,
) -> Result<usize> {
    let q = embed(&query.query, &query.condition)?;
    let mut scored = query
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((i, cosine_similarity(&q, &embed(c, &query.condition)?)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .iter()
        .position(|(i, _)| *i == query.answer)
        .expect("answer index validated on load"))
}

/// Recall@k on GeneCIS focus queries: each query ranks only its own
/// candidates. `embed` yields the conditional embedding of an image under the
/// query's condition text. Queries whose embedding fails are skipped and
/// counted.
pub fn genecis_recall(
    manifest: &GeneCisManifest,
    embed: &mut dyn FnMut(&ImageRef, &str) -> Result<Vec<f32>>,
    k: usize,
) -> Result<MetricReport> {
    if !(1..=3).contains(&k) {
        return Err(DiorError::Input(format!("GeneCIS recall is defined for k in 1..=3, got {k}")));
    }
    let mut values = Vec::with_capacity(manifest.queries.len());
    for query in &manifest.queries {
        match answer_rank(query, embed) {
            Ok(rank) => values.push((query.id.clone(), if rank < k { 1.0 } else { 0.0 })),
            Err(e) => log::warn!("GeneCIS query `{}` skipped: {e}", query.id),
        }
    }
    Ok(MetricReport::from_values("genecis@k", Some(k), values, manifest.queries.len()))
}
