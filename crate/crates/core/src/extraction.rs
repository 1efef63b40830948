//! Conditional embedding extraction.
//!
//! The image and the rendered prompt go through the backend; the hidden state
//! at the last prompt position (or of generated tokens, depending on the
//! [`TokenStrategy`]) becomes the embedding. When several conditions are
//! extracted for one image, the image positions and the shared head of the
//! prompt are computed once and reused from a [`PrefixState`].

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::backend::{PatchEmbeddings, PrefixState, TokenSequence, VisionLanguageBackend};
use crate::error::{DiorError, Result};
use crate::manifest::{DatasetManifest, ExtractionConfig, ImageRef, TokenStrategy};
use crate::prompting::{render_prompt, PromptSpec};

/// One conditional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub condition: String,
    pub model_id: String,
    pub prompt: String,
    pub layer: usize,
    pub strategy: TokenStrategy,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    /// True when both records come from the same model, prompt template,
    /// layer and strategy. The prompt text itself differs per condition, so
    /// only the condition-independent configuration is compared.
    pub fn same_config(&self, other: &EmbeddingRecord) -> bool {
        self.model_id == other.model_id
            && self.layer == other.layer
            && self.strategy == other.strategy
            && self.vector.len() == other.vector.len()
    }
}

fn prompt_for(spec: &PromptSpec, condition: &str) -> Result<String> {
    render_prompt(spec, spec.with_condition.then_some(condition))
}

fn check_finite(v: &[f32], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DiorError::Numeric(what.to_string()))
    }
}

/// Embedding from already-tokenized input. Shared by the single-call and the
/// cached batch paths so both produce identical vectors.
fn embed_tokens(
    backend: &dyn VisionLanguageBackend,
    patches: &PatchEmbeddings,
    tokens: &TokenSequence,
    config: &ExtractionConfig,
    layer: usize,
    prefix: Option<&PrefixState>,
) -> Result<(Vec<f32>, PrefixState)> {
    match config.strategy {
        TokenStrategy::LastInput => {
            let (hidden, state) = backend.forward_hidden_states(patches, tokens, prefix)?;
            Ok((hidden.last(layer).to_vec(), state))
        }
        TokenStrategy::FirstOutput | TokenStrategy::MeanOutput => {
            let cap = match config.strategy {
                TokenStrategy::FirstOutput => 1,
                _ => config.max_new_tokens,
            };
            // The decode path does not hand its cache back; callers that
            // need one run a prompt-only forward instead.
            let (_, state) = backend.forward_hidden_states(patches, tokens, prefix)?;
            let decoded = backend.greedy_decode_from(patches, tokens, Some(&state), cap)?;
            let mut used: &[_] = &decoded;
            if used.len() > 1 && used.last().is_some_and(|t| t.token == backend.eos_token()) {
                used = &used[..used.len() - 1];
            }
            let d = backend.info().hidden_dim;
            let mut mean = vec![0f32; d];
            for t in used {
                for (m, h) in mean.iter_mut().zip(&t.hidden) {
                    *m += h;
                }
            }
            let n = used.len() as f32;
            mean.iter_mut().for_each(|m| *m /= n);
            Ok((mean, state))
        }
    }
}

fn record(
    backend: &dyn VisionLanguageBackend,
    image_id: &str,
    condition: &str,
    prompt: String,
    config: &ExtractionConfig,
    layer: usize,
    vector: Vec<f32>,
) -> Result<EmbeddingRecord> {
    check_finite(&vector, "extracted embedding")?;
    Ok(EmbeddingRecord {
        image_id: image_id.to_string(),
        condition: condition.to_string(),
        model_id: backend.info().model_id.clone(),
        prompt,
        layer,
        strategy: config.strategy,
        vector,
    })
}

/// Extracts the embedding of `image` under `condition`.
pub fn extract_conditional_embedding(
    backend: &dyn VisionLanguageBackend,
    image: &ImageRef,
    condition: &str,
    config: &ExtractionConfig,
    prefix: Option<&PrefixState>,
) -> Result<EmbeddingRecord> {
    let layer = config.validate(backend.info().layer_count)?;
    let patches = backend.encode_image_patches(image)?;
    let prompt = prompt_for(&config.prompt, condition)?;
    let tokens = backend.tokenize(&backend.render_input(&prompt))?;
    let (vector, _) = embed_tokens(backend, &patches, &tokens, config, layer, prefix)?;
    record(backend, &image.id, condition, prompt, config, layer, vector)
}

/// Token-level sharing plan for extracting several conditions of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CachePlan {
    pub patch_count: usize,
    /// Text tokens shared by every rendered prompt.
    pub prefix_ids: Vec<u32>,
    /// Per condition, the tokens after the shared prefix.
    pub suffix_ids: Vec<Vec<u32>>,
    pub prompts: Vec<String>,
    /// Positions computed when every condition runs from scratch.
    pub positions_without_cache: u64,
    /// Positions computed when the image and shared prefix run once.
    pub positions_with_cache: u64,
    #[serde(skip)]
    tokens: Vec<TokenSequence>,
}

impl CachePlan {
    pub fn shared_len(&self) -> usize {
        self.prefix_ids.len()
    }

    /// Fraction of positions saved by the cache.
    pub fn reduction(&self) -> f64 {
        1.0 - self.positions_with_cache as f64 / self.positions_without_cache as f64
    }

    pub fn tokens(&self) -> &[TokenSequence] {
        &self.tokens
    }

    /// Runs the plan: the first condition computes the full sequence, the
    /// rest resume from its cache truncated to the shared prefix. Returns one
    /// vector per condition, in plan order.
    fn execute(
        &self,
        backend: &dyn VisionLanguageBackend,
        patches: &PatchEmbeddings,
        config: &ExtractionConfig,
        layer: usize,
    ) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(self.tokens.len());
        let mut shared: Option<PrefixState> = None;
        for tokens in &self.tokens {
            let (vector, state) = embed_tokens(backend, patches, tokens, config, layer, shared.as_ref())?;
            if shared.is_none() {
                shared = Some(state.truncate(self.patch_count + self.shared_len(), patches, tokens.ids())?);
            }
            out.push(vector);
        }
        Ok(out)
    }
}

fn longest_common_prefix(seqs: &[TokenSequence]) -> usize {
    let first = seqs[0].ids();
    (0..first.len())
        .take_while(|&i| seqs.iter().all(|s| s.ids().get(i) == Some(&first[i])))
        .count()
}

fn plan_for_patch_count(
    backend: &dyn VisionLanguageBackend,
    patch_count: usize,
    conditions: &[String],
    spec: &PromptSpec,
) -> Result<CachePlan> {
    if conditions.is_empty() {
        return Err(DiorError::Input("cache plan needs at least one condition".into()));
    }
    let prompts = conditions
        .iter()
        .map(|c| prompt_for(spec, c))
        .collect::<Result<Vec<_>>>()?;
    let tokens = prompts
        .iter()
        .map(|p| backend.tokenize(&backend.render_input(p)))
        .collect::<Result<Vec<_>>>()?;
    let shared = longest_common_prefix(&tokens);
    let head = (patch_count + shared) as u64;
    let suffix_ids: Vec<Vec<u32>> = tokens.iter().map(|t| t.ids()[shared..].to_vec()).collect();
    let suffix_total: u64 = suffix_ids.iter().map(|s| s.len() as u64).sum();
    Ok(CachePlan {
        patch_count,
        prefix_ids: tokens[0].ids()[..shared].to_vec(),
        suffix_ids,
        prompts,
        positions_without_cache: head * conditions.len() as u64 + suffix_total,
        positions_with_cache: head + suffix_total,
        tokens,
    })
}

/// Plans prefix sharing across `conditions` for one image.
pub fn plan_cache(
    backend: &dyn VisionLanguageBackend,
    image: &ImageRef,
    conditions: &[String],
    spec: &PromptSpec,
) -> Result<CachePlan> {
    let patches = backend.encode_image_patches(image)?;
    plan_for_patch_count(backend, patches.len(), conditions, spec)
}

/// Result of a batch run: every record that could be produced, plus the
/// images that failed.
#[derive(Debug, Default)]
pub struct BatchExtraction {
    pub records: Vec<EmbeddingRecord>,
    pub errors: Vec<(String, DiorError)>,
}

fn check_conditions(manifest: &DatasetManifest, conditions: &[String]) -> Result<()> {
    if conditions.is_empty() {
        return Err(DiorError::Config("no conditions requested".into()));
    }
    for c in conditions {
        if manifest.condition(c).is_none() {
            return Err(DiorError::Config(format!(
                "condition `{c}` is not declared in manifest `{}`",
                manifest.dataset
            )));
        }
    }
    Ok(())
}

/// Extracts every (item, condition) pair, in manifest order then condition
/// order. A failing image is recorded in `errors` and skipped.
pub fn batch_extract(
    backend: &dyn VisionLanguageBackend,
    manifest: &DatasetManifest,
    conditions: &[String],
    config: &ExtractionConfig,
) -> Result<BatchExtraction> {
    check_conditions(manifest, conditions)?;
    let layer = config.validate(backend.info().layer_count)?;
    let mut out = BatchExtraction::default();
    for item in &manifest.items {
        let image = &item.image;
        let result = backend.encode_image_patches(image).and_then(|patches| {
            let plan = plan_for_patch_count(backend, patches.len(), conditions, &config.prompt)?;
            let vectors = plan.execute(backend, &patches, config, layer)?;
            conditions
                .iter()
                .zip(plan.prompts)
                .zip(vectors)
                .map(|((c, prompt), v)| record(backend, &image.id, c, prompt, config, layer, v))
                .collect::<Result<Vec<_>>>()
        });
        match result {
            Ok(records) => out.records.extend(records),
            Err(e) => {
                log::warn!("extraction failed for `{}`: {e}", image.id);
                out.errors.push((image.id.clone(), e));
            }
        }
    }
    Ok(out)
}

/// Per-layer scores from a layer sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSweep {
    pub condition: String,
    pub scores: BTreeMap<usize, f64>,
    pub best_layer: usize,
}

/// Scores `last_input` embeddings from every layer `0..=L` under one
/// condition. One forward pass per image serves all layers.
pub fn sweep_layers(
    backend: &dyn VisionLanguageBackend,
    manifest: &DatasetManifest,
    condition: &str,
    template: &ExtractionConfig,
    evaluator: &mut dyn FnMut(&[EmbeddingRecord]) -> Result<f64>,
) -> Result<LayerSweep> {
    check_conditions(manifest, &[condition.to_string()])?;
    if template.strategy != TokenStrategy::LastInput {
        return Err(DiorError::Config(format!(
            "layer sweeps need last_input embeddings, got {}",
            template.strategy
        )));
    }
    let layers = backend.info().layer_count;
    let prompt = prompt_for(&template.prompt, condition)?;
    let tokens = backend.tokenize(&backend.render_input(&prompt))?;

    let mut per_layer: Vec<Vec<EmbeddingRecord>> = vec![Vec::new(); layers + 1];
    for item in &manifest.items {
        let patches = backend.encode_image_patches(&item.image)?;
        let (hidden, _) = backend.forward_hidden_states(&patches, &tokens, None)?;
        for (l, bucket) in per_layer.iter_mut().enumerate() {
            let rec = record(
                backend,
                &item.image.id,
                condition,
                prompt.clone(),
                template,
                l,
                hidden.last(l).to_vec(),
            )?;
            bucket.push(rec);
        }
    }

    let mut scores = BTreeMap::new();
    for (l, records) in per_layer.iter().enumerate() {
        let score = evaluator(records)?;
        if !(0.0..=1.0).contains(&score) {
            return Err(DiorError::Consistency(format!(
                "layer {l} evaluator returned {score}, outside [0, 1]"
            )));
        }
        scores.insert(l, score);
    }
    let best_layer = scores
        .iter()
        .fold((0usize, f64::NEG_INFINITY), |best, (&l, &s)| if s > best.1 { (l, s) } else { best })
        .0;
    Ok(LayerSweep {
        condition: condition.to_string(),
        scores,
        best_layer,
    })
}

/// Wall-clock and computed-position comparison of cached and uncached
/// multi-condition extraction for one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub image_id: String,
    pub conditions: Vec<String>,
    pub repetitions: usize,
    pub patch_count: usize,
    pub shared_prefix_tokens: usize,
    pub suffix_tokens: Vec<usize>,
    pub median_ms_without_cache: f64,
    pub median_ms_with_cache: f64,
    pub positions_without_cache: u64,
    pub positions_with_cache: u64,
    pub position_reduction: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Times `last_input` extraction of `conditions` with and without the
/// prefix cache. Position counts are checked against the plan on every
/// repetition.
pub fn timing_report(
    backend: &dyn VisionLanguageBackend,
    image: &ImageRef,
    conditions: &[String],
    spec: &PromptSpec,
    repetitions: usize,
) -> Result<TimingReport> {
    if repetitions == 0 {
        return Err(DiorError::Input("repetitions must be at least 1".into()));
    }
    let config = ExtractionConfig {
        prompt: *spec,
        ..ExtractionConfig::default()
    };
    let layer = config.validate(backend.info().layer_count)?;
    let patches = backend.encode_image_patches(image)?;
    let plan = plan_for_patch_count(backend, patches.len(), conditions, spec)?;

    let mut without_ms = Vec::with_capacity(repetitions);
    let mut with_ms = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let before = backend.computed_positions();
        let start = Instant::now();
        for tokens in plan.tokens() {
            embed_tokens(backend, &patches, tokens, &config, layer, None)?;
        }
        without_ms.push(start.elapsed().as_secs_f64() * 1e3);
        let counted = backend.computed_positions() - before;
        if counted != plan.positions_without_cache {
            return Err(DiorError::Consistency(format!(
                "uncached run computed {counted} positions, plan predicted {}",
                plan.positions_without_cache
            )));
        }

        let before = backend.computed_positions();
        let start = Instant::now();
        plan.execute(backend, &patches, &config, layer)?;
        with_ms.push(start.elapsed().as_secs_f64() * 1e3);
        let counted = backend.computed_positions() - before;
        if counted != plan.positions_with_cache {
            return Err(DiorError::Consistency(format!(
                "cached run computed {counted} positions, plan predicted {}",
                plan.positions_with_cache
            )));
        }
    }

    Ok(TimingReport {
        image_id: image.id.clone(),
        conditions: conditions.to_vec(),
        repetitions,
        patch_count: plan.patch_count,
        shared_prefix_tokens: plan.shared_len(),
        suffix_tokens: plan.suffix_ids.iter().map(Vec::len).collect(),
        median_ms_without_cache: median(&mut without_ms),
        median_ms_with_cache: median(&mut with_ms),
        positions_without_cache: plan.positions_without_cache,
        positions_with_cache: plan.positions_with_cache,
        position_reduction: plan.reduction(),
    })
}
