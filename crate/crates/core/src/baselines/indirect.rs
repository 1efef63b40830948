//! Condition subspaces from text-label embeddings, and projection of image
//! embeddings onto them.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::labels::LabelSet;
use super::text::TextEmbedder;
use crate::error::{DiorError, Result};

/// Template turning a label into the text that gets embedded.
pub const LABEL_PROMPT_TEMPLATE: &str = "a photo with {label} {condition}";

pub fn render_label_prompt(template: &str, label: &str, condition: &str) -> String {
    template.replace("{label}", label).replace("{condition}", condition)
}

/// How many principal components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRule {
    /// Smallest count whose cumulative explained variance reaches
    /// `threshold`, capped at `max` and at the rank.
    ExplainedVariance { threshold: f64, max: usize },
    /// A fixed count; clamped to the rank with a warning flag.
    Fixed(usize),
}

impl Default for ComponentRule {
    fn default() -> Self {
        ComponentRule::ExplainedVariance {
            threshold: 0.9,
            max: 32,
        }
    }
}

/// A fitted condition subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceModel {
    pub condition: String,
    pub labels: Vec<String>,
    pub label_template: String,
    pub rule: ComponentRule,
    /// Mean of the L2-normalized fitting vectors.
    pub mean: Vec<f64>,
    /// Orthonormal components, one row per component.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub eigenvalues: Vec<f64>,
    /// Share of total variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub rank: usize,
    /// Set when a fixed component count exceeded the rank and was reduced.
    pub clamped: bool,
}

impl SubspaceModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }
}

fn normalized(v: &[f32]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(DiorError::Input("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|x| f64::from(*x) / norm).collect())
}

/// Principal axes of the L2-normalized, mean-centered `vectors`.
///
/// Uses the `d x d` covariance when there are more points than dimensions and
/// the `n x n` Gram matrix otherwise; both give the same nonzero spectrum.
pub fn fit_subspace_from_vectors(
    vectors: &[Vec<f32>],
    rule: ComponentRule,
    condition: &str,
    labels: Vec<String>,
    label_template: &str,
) -> Result<SubspaceModel> {
    if vectors.len() < 2 {
        return Err(DiorError::Input("subspace fitting needs at least two vectors".into()));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(DiorError::Input("fitting vectors differ in dimension".into()));
    }
    let n = vectors.len();
    let rows = vectors.iter().map(|v| normalized(v)).collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0f64; d];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let total: f64 = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if total <= 1e-12 {
        return Err(DiorError::Degenerate(
            "fitting vectors have zero variance after normalization".into(),
        ));
    }

    // (eigenvalue, unit component in R^d), descending.
    let mut axes: Vec<(f64, Vec<f64>)> = if n > d {
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        (0..d)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect()))
            .collect()
    } else {
        let gram = &centered * centered.transpose() / n as f64;
        let eig = SymmetricEigen::new(gram);
        (0..n)
            .filter(|&k| eig.eigenvalues[k] > 0.0)
            .map(|k| {
                let lambda = eig.eigenvalues[k];
                let v = centered.transpose() * eig.eigenvectors.column(k) / (n as f64 * lambda).sqrt();
                (lambda, v.iter().copied().collect())
            })
            .collect()
    };
    axes.sort_by(|a, b| b.0.total_cmp(&a.0));
    let tolerance = axes[0].0 * 1e-10;
    axes.retain(|(l, _)| *l > tolerance);
    let rank = axes.len();

    let (keep, clamped) = match rule {
        ComponentRule::Fixed(0) => return Err(DiorError::Input("component count must be at least 1".into())),
        ComponentRule::Fixed(m) if m > rank => {
            log::warn!("requested {m} components but the fitting data has rank {rank}");
            (rank, true)
        }
        ComponentRule::Fixed(m) => (m, false),
        ComponentRule::ExplainedVariance { threshold, max } => {
            let cap = max.max(1).min(rank);
            let mut cumulative = 0.0;
            let mut keep = cap;
            for (i, (l, _)) in axes.iter().enumerate().take(cap) {
                cumulative += l / total;
                if cumulative >= threshold {
                    keep = i + 1;
                    break;
                }
            }
            (keep, false)
        }
    };
    axes.truncate(keep);
    Ok(SubspaceModel {
        condition: condition.to_string(),
        labels,
        label_template: label_template.to_string(),
        rule,
        mean,
        explained_variance: axes.iter().map(|(l, _)| l / total).collect(),
        eigenvalues: axes.iter().map(|(l, _)| *l).collect(),
        components: axes.into_iter().map(|(_, v)| v).collect(),
        rank,
        clamped,
    })
}

/// Fits the subspace spanned by the embedded label prompts of `labels`.
pub fn fit_indirect_subspace(
    embedder: &dyn TextEmbedder,
    labels: &LabelSet,
    rule: ComponentRule,
    label_template: &str,
) -> Result<SubspaceModel> {
    if labels.labels.len() < 2 {
        return Err(DiorError::Input("subspace fitting needs at least two labels".into()));
    }
    let vectors = labels
        .labels
        .iter()
        .map(|l| embedder.embed_text(&render_label_prompt(label_template, l, &labels.condition)))
        .collect::<Result<Vec<_>>>()?;
    fit_subspace_from_vectors(&vectors, rule, &labels.condition, labels.labels.clone(), label_template)
}

/// Coordinates of the normalized, centered `embedding` in the subspace.
pub fn indirect_project(model: &SubspaceModel, embedding: &[f32]) -> Result<Vec<f32>> {
    if embedding.len() != model.dim() {
        return Err(DiorError::Input(format!(
            "embedding has dimension {}, subspace expects {}",
            embedding.len(),
            model.dim()
        )));
    }
    let x = normalized(embedding)?;
    Ok(model
        .components
        .iter()
        .map(|c| c.iter().zip(x.iter().zip(&model.mean)).map(|(v, (x, m))| v * (x - m)).sum::<f64>() as f32)
        .collect())
}
