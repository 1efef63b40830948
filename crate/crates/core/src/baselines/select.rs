//! Choosing a generated label vocabulary on a held-out dev split.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::labels::LabelSet;
use crate::error::{DiorError, Result};
use crate::manifest::DatasetManifest;

/// Splits `manifest` into disjoint (dev, test) manifests, putting
/// `dev_fraction` of the items (at least one) into dev. Seeded.
pub fn dev_test_split(manifest: &DatasetManifest, dev_fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) || manifest.items.len() < 2 {
        return Err(DiorError::Input(
            "dev split needs a fraction in (0, 1) and at least two items".into(),
        ));
    }
    let mut ids: Vec<String> = manifest.items.iter().map(|i| i.image.id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = ((ids.len() as f64 * dev_fraction).round() as usize).clamp(1, ids.len() - 1);
    let dev: HashSet<String> = ids[..n_dev].iter().cloned().collect();
    let test: HashSet<String> = ids[n_dev..].iter().cloned().collect();
    Ok((
        manifest.subset(format!("{}-dev", manifest.dataset), &dev),
        manifest.subset(format!("{}-test", manifest.dataset), &test),
    ))
}

/// Returns the candidate scoring highest on `dev`, with its score. Ties go
/// to the smaller label set, then to the lexicographically smaller first
/// label. `dev` must share no item with `test`.
pub fn select_label_set(
    candidates: &[LabelSet],
    dev: &DatasetManifest,
    test: &DatasetManifest,
    evaluator: &mut dyn FnMut(&LabelSet, &DatasetManifest) -> Result<f64>,
) -> Result<(LabelSet, f64)> {
    if candidates.is_empty() {
        return Err(DiorError::Input("no candidate label sets".into()));
    }
    let test_ids: HashSet<&str> = test.items.iter().map(|i| i.image.id.as_str()).collect();
    if let Some(shared) = dev.items.iter().find(|i| test_ids.contains(i.image.id.as_str())) {
        return Err(DiorError::Validation {
            item: shared.image.id.clone(),
            condition: None,
            message: "item appears in both the dev and the test split".into(),
        });
    }
    let mut best: Option<(&LabelSet, f64)> = None;
    for candidate in candidates {
        let score = evaluator(candidate, dev)?;
        if score.is_nan() {
            return Err(DiorError::Numeric("dev score is NaN".into()));
        }
        let better = match best {
            None => true,
            Some((b, s)) => {
                score > s
                    || (score == s
                        && (candidate.labels.len(), candidate.labels.first()) < (b.labels.len(), b.labels.first()))
            }
        };
        if better {
            best = Some((candidate, score));
        }
    }
    let (set, score) = best.expect("at least one candidate");
    Ok((set.clone(), score))
}
