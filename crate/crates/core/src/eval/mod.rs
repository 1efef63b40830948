//! Similarity, ranking, and every evaluation metric, plus brute-force
//! reference implementations and t-SNE coordinates.

mod ami;
mod cluster;
mod genecis;
mod metrics;
pub mod oracle;
mod probe;
mod ranking;
mod similarity;
mod tsne;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ami::ami_score;
pub use cluster::cluster_embeddings;
pub use genecis::genecis_recall;
pub use metrics::{map_at_k, map_at_r, recall_at_k, MetricReport, MetricSpec};
pub use probe::{few_shot_eval, linear_probe_eval, ProbeProtocol, ProbeResult, PROBE_INVERSE_REGULARIZATION};
pub use ranking::{rank_index, rank_scores, RankingResult};
pub use similarity::cosine_similarity;
pub use tsne::{tsne_2d, TsneConfig};

use crate::error::{DiorError, Result};
use crate::backend::VisionLanguageBackend;
use crate::extraction::{extract_conditional_embedding, EmbeddingRecord};
use crate::manifest::{DatasetManifest, ExtractionConfig, GeneCisManifest, ImageRef};

/// k-means restarts used when clustering for AMI.
pub const AMI_CLUSTER_RESTARTS: usize = 10;

/// A metric report for one condition together with a fingerprint of
/// everything that determined it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub condition: String,
    pub config_fingerprint: String,
    pub report: MetricReport,
}

/// Flat, one-line summary of a [`ConditionReport`] for leaderboard diffing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub metric: String,
    pub k: Option<usize>,
    pub aggregate: Option<f64>,
    pub n_queries: usize,
    pub n_skipped: usize,
    pub config_fingerprint: String,
    pub condition: String,
}

impl ConditionReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            metric: self.report.metric.clone(),
            k: self.report.k,
            aggregate: self.report.aggregate,
            n_queries: self.report.n_queries,
            n_skipped: self.report.n_skipped,
            config_fingerprint: self.config_fingerprint.clone(),
            condition: self.condition.clone(),
        }
    }
}

/// Embeddings of the labeled manifest items under one condition, in manifest
/// order, paired with their class labels.
struct LabeledRecords<'a> {
    query: Vec<&'a EmbeddingRecord>,
    index: Vec<&'a EmbeddingRecord>,
    all: Vec<(&'a EmbeddingRecord, &'a str)>,
    labels: HashMap<String, String>,
}

fn gather<'a>(
    records: &'a [EmbeddingRecord],
    manifest: &'a DatasetManifest,
    condition: &str,
) -> Result<LabeledRecords<'a>> {
    if manifest.condition(condition).is_none() {
        return Err(DiorError::Validation {
            item: manifest.dataset.clone(),
            condition: Some(condition.to_string()),
            message: "condition is not declared by the manifest".into(),
        });
    }
    let mut by_id: HashMap<&str, &EmbeddingRecord> = HashMap::new();
    for rec in records.iter().filter(|r| r.condition == condition) {
        if let Some(first) = by_id.values().next() {
            if !rec.same_config(first) {
                return Err(DiorError::Consistency(format!(
                    "record `{}` was extracted with a different configuration than `{}`",
                    rec.image_id, first.image_id
                )));
            }
        }
        if manifest.item(&rec.image_id).is_none() {
            return Err(DiorError::Consistency(format!(
                "embedding for `{}` has no manifest item",
                rec.image_id
            )));
        }
        if by_id.insert(rec.image_id.as_str(), rec).is_some() {
            return Err(DiorError::Consistency(format!(
                "duplicate embedding for `{}` under `{condition}`",
                rec.image_id
            )));
        }
    }

    let mut out = LabeledRecords {
        query: Vec::new(),
        index: Vec::new(),
        all: Vec::new(),
        labels: HashMap::new(),
    };
    for item in &manifest.items {
        let Some(label) = item.labels.get(condition) else {
            continue;
        };
        let rec = by_id.get(item.image.id.as_str()).copied().ok_or_else(|| {
            DiorError::Consistency(format!(
                "no embedding for `{}` under `{condition}`",
                item.image.id
            ))
        })?;
        if item.role.is_query() {
            out.query.push(rec);
        }
        if item.role.is_index() {
            out.index.push(rec);
        }
        out.all.push((rec, label.as_str()));
        out.labels.insert(item.image.id.clone(), label.clone());
    }
    if out.all.is_empty() {
        return Err(DiorError::Input(format!("no labeled items under `{condition}`")));
    }
    Ok(out)
}

fn fingerprint(records: &[(&EmbeddingRecord, &str)], dataset: &str, condition: &str, metric: MetricSpec, seed: u64) -> String {
    let first = records[0].0;
    let mut h = Sha256::new();
    for part in [
        dataset,
        condition,
        &first.model_id,
        &first.prompt,
        &first.layer.to_string(),
        first.strategy.as_str(),
        &first.vector.len().to_string(),
        &metric.to_string(),
        &seed.to_string(),
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    for (rec, _) in records {
        h.update((rec.image_id.len() as u64).to_le_bytes());
        h.update(rec.image_id.as_bytes());
        for v in &rec.vector {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Scores the embeddings of one condition against the manifest's labels.
///
/// Retrieval metrics rank the manifest's index items for every query item;
/// an item acting as both is never retrieved for itself. AMI clusters all
/// labeled items into as many clusters as there are classes. The seed only
/// affects clustering but always enters the fingerprint.
pub fn evaluate_condition(
    records: &[EmbeddingRecord],
    manifest: &DatasetManifest,
    condition: &str,
    metric: MetricSpec,
    seed: u64,
) -> Result<ConditionReport> {
    let set = gather(records, manifest, condition)?;
    let report = match metric {
        MetricSpec::MapAtR | MetricSpec::MapAtK(_) | MetricSpec::RecallAtK(_) => {
            let index: Vec<EmbeddingRecord> = set.index.iter().map(|r| (*r).clone()).collect();
            let rankings = set
                .query
                .iter()
                .map(|q| rank_index(q, &index, true))
                .collect::<Result<Vec<_>>>()?;
            match metric {
                MetricSpec::MapAtR => map_at_r(&rankings, &set.labels)?,
                MetricSpec::MapAtK(k) => map_at_k(&rankings, &set.labels, k)?,
                MetricSpec::RecallAtK(k) => recall_at_k(&rankings, &set.labels, k)?,
                _ => unreachable!("handled by the outer match"),
            }
        }
        MetricSpec::Ami => {
            let classes: BTreeSet<&str> = set.all.iter().map(|(_, l)| *l).collect();
            if classes.len() < 2 {
                return Err(DiorError::Input(format!(
                    "AMI needs at least two classes under `{condition}`"
                )));
            }
            let vectors: Vec<Vec<f32>> = set.all.iter().map(|(r, _)| r.vector.clone()).collect();
            let truth: Vec<&str> = set.all.iter().map(|(_, l)| *l).collect();
            let assignments = cluster_embeddings(&vectors, classes.len(), seed, AMI_CLUSTER_RESTARTS)?;
            let value = ami_score(&assignments, &truth)?;
            MetricReport::from_values("ami", None, vec![("all".to_string(), value)], 1)
        }
        MetricSpec::GenecisAtK(_) => {
            return Err(DiorError::Input(
                "genecis@k is evaluated over a GeneCIS manifest, not a dataset manifest".into(),
            ))
        }
    };
    Ok(ConditionReport {
        condition: condition.to_string(),
        config_fingerprint: fingerprint(&set.all, &manifest.dataset, condition, metric, seed),
        report,
    })
}

/// Aggregate of a retrieval metric, for use as a layer-sweep evaluator.
/// Fails when every query was skipped.
pub fn retrieval_score(
    records: &[EmbeddingRecord],
    manifest: &DatasetManifest,
    condition: &str,
    metric: MetricSpec,
) -> Result<f64> {
    let report = evaluate_condition(records, manifest, condition, metric, 0)?;
    report.report.aggregate.ok_or_else(|| {
        DiorError::Degenerate(format!("every query under `{condition}` has no relevant item"))
    })
}

/// GeneCIS Recall@k with embeddings extracted on the fly. Each query's
/// condition text fills the prompt template.
pub fn evaluate_genecis(
    backend: &dyn VisionLanguageBackend,
    manifest: &GeneCisManifest,
    config: &ExtractionConfig,
    k: usize,
) -> Result<ConditionReport> {
    let layer = config.validate(backend.info().layer_count)?;
    let mut embed = |image: &ImageRef, condition: &str| {
        extract_conditional_embedding(backend, image, condition, config, None).map(|r| r.vector)
    };
    let report = genecis_recall(manifest, &mut embed, k)?;
    let mut h = Sha256::new();
    for part in [
        manifest.dataset.as_str(),
        "genecis",
        &backend.info().model_id,
        &config.prompt.template(),
        &layer.to_string(),
        config.strategy.as_str(),
        &MetricSpec::GenecisAtK(k).to_string(),
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    for q in &manifest.queries {
        h.update((q.id.len() as u64).to_le_bytes());
        h.update(q.id.as_bytes());
    }
    for (id, v) in &report.per_query {
        h.update(id.as_bytes());
        h.update(v.to_le_bytes());
    }
    Ok(ConditionReport {
        condition: "genecis".into(),
        config_fingerprint: hex::encode(h.finalize()),
        report,
    })
}

/// Labels of the records under `condition`, in record order.
pub fn labels_of(records: &[EmbeddingRecord], manifest: &DatasetManifest, condition: &str) -> Result<Vec<String>> {
    let labels = manifest.labels_for(condition)?;
    records
        .iter()
        .map(|r| {
            labels
                .get(&r.image_id)
                .cloned()
                .ok_or_else(|| DiorError::MissingLabel { id: r.image_id.clone() })
        })
        .collect()
}
