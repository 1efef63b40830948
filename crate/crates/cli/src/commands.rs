use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dior::baselines::{
    capemb_embed, dev_test_split, fit_indirect_subspace, generate_condition_labels, global_image_embed,
    indirect_project, label_count_sweep, select_label_set, BackendCaptioner, ComponentRule, FixtureLabelClient,
    HashTextEmbedder, LabelClient, LabelSet, SubspaceModel, TextEmbedder, ToyVisionEncoder, VisionEncoder,
};
use dior::eval::{
    evaluate_condition, evaluate_genecis, few_shot_eval, linear_probe_eval, retrieval_score, tsne_2d, ReportSummary,
    TsneConfig,
};
use dior::extraction::{batch_extract, sweep_layers, timing_report};
use dior::manifest::load_genecis_manifest;
use dior::prompting::variant_catalog;
use dior::store::{load_embeddings, write_embeddings, write_store, write_subspace, StoreHeader, StoreRecord};
use dior::{DatasetManifest, DiorError, EmbeddingRecord, MetricSpec, TokenStrategy, VisionLanguageBackend};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::label_service::{HttpLabelClient, LABEL_ENDPOINT_ENV};
use crate::plot::{class_indices, scatter};
use crate::{condition_list, create_output, load_dataset, make_backend, metric_spec, resolve, JsonLines};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Embed(a) => embed(a),
        Command::Baseline(a) => baseline(a),
        Command::Evaluate(a) => evaluate(a),
        Command::SweepLayers(a) => sweep_layers_cmd(a),
        Command::SweepPrompts(a) => sweep_prompts(a),
        Command::BenchCache(a) => bench_cache(a),
        Command::Probe(a) => probe(a),
        Command::PlotTsne(a) => plot_tsne(a),
    }
}

fn extract_all(
    backend: &dyn VisionLanguageBackend,
    manifest: &DatasetManifest,
    conditions: &[String],
    config: &dior::ExtractionConfig,
) -> Result<Vec<EmbeddingRecord>> {
    let batch = batch_extract(backend, manifest, conditions, config)?;
    if let Some((id, first)) = batch.errors.first() {
        for (id, e) in &batch.errors {
            eprintln!("extraction failed for `{id}`: {e}");
        }
        bail!(
            "{} of {} images failed (first: `{id}`: {first})",
            batch.errors.len(),
            manifest.items.len()
        );
    }
    Ok(batch.records)
}

fn embed(a: EmbedArgs) -> Result<()> {
    let manifest = load_dataset(&a.manifest)?;
    let conditions = condition_list(a.conditions.as_deref(), &manifest)?;
    let backend = make_backend(&a.backend, a.seed)?;
    let config = a.extract.config();
    let records = extract_all(backend.as_ref(), &manifest, &conditions, &config)?;
    let bytes = write_embeddings(&a.store, "dior", &config.prompt.template(), &records, a.overwrite)?;
    log::info!("wrote {} records ({bytes} bytes) to {}", records.len(), a.store.display());
    Ok(())
}

fn baseline_record(image_id: &str, condition: &str, model_id: &str, prompt: String, vector: Vec<f32>) -> EmbeddingRecord {
    EmbeddingRecord {
        image_id: image_id.to_string(),
        condition: condition.to_string(),
        model_id: model_id.to_string(),
        prompt,
        layer: 0,
        strategy: TokenStrategy::LastInput,
        vector,
    }
}

fn component_rule(arg: &str) -> Result<ComponentRule> {
    if arg == "auto" {
        return Ok(ComponentRule::default());
    }
    let m: usize = arg
        .parse()
        .map_err(|_| anyhow!("--components takes `auto` or a positive count, got `{arg}`"))?;
    if m == 0 {
        bail!("--components must be at least 1");
    }
    Ok(ComponentRule::Fixed(m))
}

/// Class names of a condition: the declared vocabulary, or the distinct
/// labels present in the manifest.
fn manifest_labels(manifest: &DatasetManifest, condition: &str) -> Result<LabelSet> {
    let declared = manifest.condition(condition).and_then(|c| c.classes.clone());
    let names = match declared {
        Some(classes) => classes,
        None => {
            let mut seen: Vec<String> = manifest
                .items
                .iter()
                .filter_map(|i| i.labels.get(condition).cloned())
                .collect();
            seen.sort();
            seen.dedup();
            seen
        }
    };
    Ok(LabelSet::from_labels(condition, names)?)
}

fn file_stem_for(condition: &str) -> String {
    condition
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

struct Projection<'a> {
    embedder: &'a dyn TextEmbedder,
    images: &'a HashMap<String, Vec<f32>>,
    rule: ComponentRule,
    template: &'a str,
    model_id: &'a str,
}

impl Projection<'_> {
    fn fit(&self, labels: &LabelSet) -> Result<SubspaceModel> {
        Ok(fit_indirect_subspace(self.embedder, labels, self.rule, self.template)?)
    }

    fn records(&self, model: &SubspaceModel, manifest: &DatasetManifest) -> Result<Vec<EmbeddingRecord>> {
        manifest
            .items
            .iter()
            .map(|item| {
                let v = indirect_project(model, &self.images[&item.image.id])?;
                Ok(baseline_record(
                    &item.image.id,
                    &model.condition,
                    self.model_id,
                    self.template.to_string(),
                    v,
                ))
            })
            .collect()
    }
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let manifest = load_dataset(&a.manifest)?;
    let conditions = condition_list(a.conditions.as_deref(), &manifest)?;
    let mut extra = BTreeMap::new();
    let (records, prompt) = match a.method {
        BaselineMethod::Clip => {
            let encoder = ToyVisionEncoder::new(a.seed, a.dim, a.backend.patches)?;
            let mut records = Vec::new();
            for item in &manifest.items {
                let v = global_image_embed(&encoder, &item.image)?;
                for c in &conditions {
                    records.push(baseline_record(&item.image.id, c, encoder.encoder_id(), String::new(), v.clone()));
                }
            }
            (records, String::new())
        }
        BaselineMethod::Indirect => {
            let (records, meta) = indirect(&a, &manifest, &conditions)?;
            extra.insert("indirect".to_string(), meta);
            (records, a.label_template.clone())
        }
        BaselineMethod::Capemb => {
            let backend = make_backend(&a.backend, a.seed)?;
            let embedder = HashTextEmbedder::new(a.seed, a.dim)?;
            let captioner = BackendCaptioner {
                backend: backend.as_ref(),
                max_new_tokens: a.extract.max_new_tokens,
            };
            let model_id = format!("{}+{}", backend.info().model_id, embedder.embedder_id());
            let spec = a.extract.prompt_spec;
            let mut records = Vec::new();
            for item in &manifest.items {
                for c in &conditions {
                    let (caption, v) = capemb_embed(&captioner, &embedder, &item.image, c, &spec)?;
                    log::debug!("{} / {c}: {caption}", item.image.id);
                    records.push(baseline_record(&item.image.id, c, &model_id, String::new(), v));
                }
            }
            (records, spec.template())
        }
    };
    let mut header = StoreHeader::for_records(a.method.name(), &prompt, &records)?;
    header.layer = None;
    header.strategy = None;
    header.extra = extra;
    let rows: Vec<StoreRecord> = records.iter().map(StoreRecord::from).collect();
    let bytes = write_store(&a.store, &header, &rows, a.overwrite)?;
    log::info!("wrote {} records ({bytes} bytes) to {}", rows.len(), a.store.display());
    Ok(())
}

fn label_client(a: &BaselineArgs) -> Result<Option<Box<dyn LabelClient>>> {
    if a.labels_from_manifest {
        return Ok(None);
    }
    if let Some(path) = &a.fixtures {
        let client = FixtureLabelClient::load(path).with_context(|| format!("loading fixtures {}", path.display()))?;
        return Ok(Some(Box::new(client)));
    }
    match HttpLabelClient::from_env() {
        Some(client) => Ok(Some(Box::new(client))),
        None => bail!("no label source: pass --fixtures or --labels-from-manifest, or set {LABEL_ENDPOINT_ENV}"),
    }
}

/// Projected records for every condition, zero-padded to the largest
/// component count, plus per-condition metadata for the store header.
fn indirect(
    a: &BaselineArgs,
    manifest: &DatasetManifest,
    conditions: &[String],
) -> Result<(Vec<EmbeddingRecord>, serde_json::Value)> {
    let encoder = ToyVisionEncoder::new(a.seed, a.dim, a.backend.patches)?;
    let embedder = HashTextEmbedder::new(a.seed, a.dim)?;
    let model_id = format!("{}+{}", encoder.encoder_id(), embedder.embedder_id());
    let images = manifest
        .items
        .iter()
        .map(|i| Ok((i.image.id.clone(), global_image_embed(&encoder, &i.image)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    let projection = Projection {
        embedder: &embedder,
        images: &images,
        rule: component_rule(&a.components)?,
        template: &a.label_template,
        model_id: &model_id,
    };
    let client = label_client(a)?;

    let split = if a.label_sweep {
        if client.is_none() {
            bail!("--label-sweep needs a label service or --fixtures");
        }
        Some(dev_test_split(manifest, a.dev_fraction, a.seed)?)
    } else {
        None
    };
    let target = split.as_ref().map_or(manifest, |(_, test)| test);

    let mut records = Vec::new();
    let mut meta = serde_json::Map::new();
    for condition in conditions {
        let (labels, dev_score) = match (&client, &split) {
            (None, _) => (manifest_labels(manifest, condition)?, None),
            (Some(client), None) => (generate_condition_labels(client.as_ref(), condition, a.label_count)?, None),
            (Some(client), Some((dev, test))) => {
                let candidates = label_count_sweep(client.as_ref(), condition)?;
                let mut score = |set: &LabelSet, dev: &DatasetManifest| -> dior::Result<f64> {
                    let model = fit_indirect_subspace(&embedder, set, projection.rule, &a.label_template)?;
                    let recs = projection
                        .records(&model, dev)
                        .map_err(|e| DiorError::Input(format!("{e:#}")))?;
                    retrieval_score(&recs, dev, condition, MetricSpec::MapAtR)
                };
                let (best, s) = select_label_set(&candidates, dev, test, &mut score)?;
                (best, Some(s))
            }
        };
        let model = projection.fit(&labels)?;
        if let Some(dir) = &a.subspace_dir {
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("{}.subspace", file_stem_for(condition)));
            write_subspace(&path, &model_id, &model, a.overwrite)?;
        }
        meta.insert(
            condition.clone(),
            json!({
                "labels_requested": labels.requested,
                "labels": labels.labels.len(),
                "components": model.num_components(),
                "rank": model.rank,
                "clamped": model.clamped,
                "dev_map_at_r": dev_score,
            }),
        );
        records.extend(projection.records(&model, target)?);
    }

    let width = records.iter().map(|r| r.vector.len()).max().unwrap_or(0);
    for r in &mut records {
        r.vector.resize(width, 0.0);
    }
    if let Some((dev, test)) = &split {
        let path = split_manifest_path(&a.store);
        if path.exists() && !a.overwrite {
            return Err(DiorError::Refused(path).into());
        }
        test.save(&path)?;
        log::info!("test split ({} items) written to {}", test.items.len(), path.display());
        meta.insert(
            "dev_items".to_string(),
            json!(dev.items.iter().map(|i| i.image.id.as_str()).collect::<Vec<_>>()),
        );
    }
    Ok((records, serde_json::Value::Object(meta)))
}

/// Where the held-out test manifest of a label sweep is written.
pub fn split_manifest_path(store: &Path) -> PathBuf {
    let mut name = store.file_name().unwrap_or_default().to_os_string();
    name.push(".test.jsonl");
    store.with_file_name(name)
}

#[derive(Serialize)]
struct EvalLine<'a> {
    store: Option<String>,
    method: &'a str,
    model_id: &'a str,
    #[serde(flatten)]
    summary: ReportSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_query: Option<&'a [(String, f64)]>,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let metric = metric_spec(&a.metric, a.k)?;
    if let MetricSpec::GenecisAtK(k) = metric {
        return evaluate_genecis_cmd(&a, k);
    }
    let manifest_path = a.manifest.as_ref().context("--manifest is required for this metric")?;
    if a.store.is_empty() {
        bail!("no --store given");
    }
    let manifest = load_dataset(manifest_path)?;
    let mut sink = JsonLines::open(&a.output)?;
    for store in &a.store {
        let (header, records) = load_embeddings(store).with_context(|| format!("reading store {}", store.display()))?;
        if let Some(expected) = &a.backend.model_id {
            if *expected != header.model_id {
                return Err(DiorError::Consistency(format!(
                    "store {} holds model `{}`, expected `{expected}`",
                    store.display(),
                    header.model_id
                ))
                .into());
            }
        }
        let conditions = match &a.conditions {
            Some(list) => condition_list(Some(list), &manifest)?,
            None => store_conditions(&records, &manifest)?,
        };
        for condition in &conditions {
            let report = evaluate_condition(&records, &manifest, condition, metric, a.seed)?;
            sink.write(&EvalLine {
                store: Some(store.display().to_string()),
                method: &header.method,
                model_id: &header.model_id,
                summary: report.summary(),
                per_query: a.per_query.then_some(report.report.per_query.as_slice()),
            })?;
        }
    }
    sink.finish()
}

/// Conditions present in a store, in manifest order. A condition the
/// manifest does not declare means store and manifest do not belong together.
fn store_conditions(records: &[EmbeddingRecord], manifest: &DatasetManifest) -> Result<Vec<String>> {
    let present: HashSet<&str> = records.iter().map(|r| r.condition.as_str()).collect();
    if let Some(odd) = present.iter().find(|c| manifest.condition(c).is_none()) {
        return Err(DiorError::Consistency(format!(
            "store condition `{odd}` is not declared by manifest `{}`",
            manifest.dataset
        ))
        .into());
    }
    Ok(manifest
        .condition_names()
        .into_iter()
        .filter(|c| present.contains(c.as_str()))
        .collect())
}

fn evaluate_genecis_cmd(a: &EvaluateArgs, k: usize) -> Result<()> {
    let path = a.genecis.as_ref().context("genecis@k needs --genecis")?;
    let mut manifest = load_genecis_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for q in &mut manifest.queries {
        q.query.path = resolve(base, &q.query.path);
        for c in &mut q.candidates {
            c.path = resolve(base, &c.path);
        }
    }
    let backend = make_backend(&a.backend, a.backend_seed)?;
    let report = evaluate_genecis(backend.as_ref(), &manifest, &a.extract.config(), k)?;
    let mut sink = JsonLines::open(&a.output)?;
    sink.write(&EvalLine {
        store: None,
        method: "dior",
        model_id: &backend.info().model_id,
        summary: report.summary(),
        per_query: a.per_query.then_some(report.report.per_query.as_slice()),
    })?;
    sink.finish()
}

fn sweep_layers_cmd(a: SweepLayersArgs) -> Result<()> {
    let manifest = load_dataset(&a.manifest)?;
    let conditions = condition_list(a.conditions.as_deref(), &manifest)?;
    let metric = metric_spec(&a.metric, a.k)?;
    let backend = make_backend(&a.backend, a.seed)?;
    let config = a.extract.config();
    let mut sink = JsonLines::open(&a.output)?;
    for condition in &conditions {
        let mut score = |records: &[EmbeddingRecord]| retrieval_score(records, &manifest, condition, metric);
        let sweep = sweep_layers(backend.as_ref(), &manifest, condition, &config, &mut score)?;
        sink.write(&json!({
            "metric": metric.to_string(),
            "model_id": backend.info().model_id,
            "condition": sweep.condition,
            "scores": sweep.scores,
            "best_layer": sweep.best_layer,
        }))?;
    }
    sink.finish()
}

#[derive(Serialize)]
struct PromptLine {
    prompt_spec: String,
    template: String,
    #[serde(flatten)]
    summary: ReportSummary,
}

fn sweep_prompts(a: SweepPromptsArgs) -> Result<()> {
    let manifest = load_dataset(&a.manifest)?;
    let conditions = condition_list(a.conditions.as_deref(), &manifest)?;
    let metric = metric_spec(&a.metric, a.k)?;
    let backend = make_backend(&a.backend, a.seed)?;
    let mut sink = JsonLines::open(&a.output)?;
    for spec in variant_catalog() {
        let config = dior::ExtractionConfig {
            prompt: spec,
            ..a.extract.config()
        };
        let records = extract_all(backend.as_ref(), &manifest, &conditions, &config)?;
        for condition in &conditions {
            let report = evaluate_condition(&records, &manifest, condition, metric, 0)?;
            sink.write(&PromptLine {
                prompt_spec: spec.to_string(),
                template: spec.template(),
                summary: report.summary(),
            })?;
        }
    }
    sink.finish()
}

fn bench_cache(a: BenchCacheArgs) -> Result<()> {
    let manifest = load_dataset(&a.manifest)?;
    let conditions = condition_list(a.conditions.as_deref(), &manifest)?;
    let backend = make_backend(&a.backend, a.seed)?;
    let mut sink = JsonLines::open(&a.output)?;
    let limit = a.limit.unwrap_or(manifest.items.len());
    for item in manifest.items.iter().take(limit) {
        let report = timing_report(backend.as_ref(), &item.image, &conditions, &a.prompt_spec, a.repetitions)?;
        sink.write(&report)?;
    }
    sink.finish()
}

/// One condition's labeled records, in record order.
struct Labeled {
    vectors: Vec<Vec<f32>>,
    labels: Vec<String>,
    ids: Vec<String>,
}

fn labeled(records: &[EmbeddingRecord], manifest: &DatasetManifest, condition: &str) -> Result<Labeled> {
    let labels = manifest.labels_for(condition)?;
    let mut vectors = Vec::new();
    let mut classes = Vec::new();
    let mut ids = Vec::new();
    for r in records.iter().filter(|r| r.condition == condition) {
        if let Some(l) = labels.get(&r.image_id) {
            vectors.push(r.vector.clone());
            classes.push(l.clone());
            ids.push(r.image_id.clone());
        }
    }
    if vectors.is_empty() {
        bail!("no labeled embeddings under `{condition}`");
    }
    Ok(Labeled {
        vectors,
        labels: classes,
        ids,
    })
}

fn probe(a: ProbeArgs) -> Result<()> {
    let manifest = load_dataset(&a.manifest)?;
    let (header, records) = load_embeddings(&a.store)?;
    let conditions = match &a.conditions {
        Some(list) => condition_list(Some(list), &manifest)?,
        None => store_conditions(&records, &manifest)?,
    };
    let mut sink = JsonLines::open(&a.output)?;
    for condition in &conditions {
        let Labeled { vectors, labels, .. } = labeled(&records, &manifest, condition)?;
        let result = match a.protocol {
            ProbeKind::Linear => linear_probe_eval(&vectors, &labels, a.k, a.seed)?,
            ProbeKind::FewShot => few_shot_eval(&vectors, &labels, a.k, a.seed)?,
        };
        sink.write(&json!({
            "store": a.store.display().to_string(),
            "method": header.method,
            "model_id": header.model_id,
            "condition": condition,
            "result": result,
        }))?;
    }
    sink.finish()
}

fn plot_tsne(a: PlotTsneArgs) -> Result<()> {
    if a.out.exists() && !a.overwrite {
        return Err(DiorError::Refused(a.out.clone()).into());
    }
    let manifest = load_dataset(&a.manifest)?;
    let (_, records) = load_embeddings(&a.store)?;
    let Labeled { vectors, labels, ids } = labeled(&records, &manifest, &a.condition)?;
    let config = TsneConfig {
        perplexity: a.perplexity,
        iterations: a.iterations,
        seed: a.seed,
        ..TsneConfig::default()
    };
    let points = tsne_2d(&vectors, &config)?;
    let index = class_indices(&labels);
    let classes: Vec<usize> = labels.iter().map(|l| index[l]).collect();
    let img = scatter(&points, &classes, a.size);
    let mut file = BufWriter::new(create_output(&a.out, a.overwrite)?);
    img.write_to(&mut file, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(coords) = &a.coords {
        let mut sink = JsonLines::open(&OutputArgs {
            out: Some(coords.clone()),
            overwrite: a.overwrite,
        })?;
        for ((id, label), p) in ids.iter().zip(&labels).zip(&points) {
            sink.write(&json!({"image_id": id, "label": label, "class": index[label], "x": p[0], "y": p[1]}))?;
        }
        sink.finish()?;
    }
    log::info!("plotted {} points in {} classes to {}", points.len(), index.len(), a.out.display());
    Ok(())
}
