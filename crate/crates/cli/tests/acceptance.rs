//! Acceptance suite: one line per criterion, `PASS`, `FAIL` or `SKIP`.
//!
//! Criteria listed in `EXPECTED_FAILURES` are run and reported like every
//! other criterion but do not fail the run; if one of them starts passing the
//! run fails so the list gets updated.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dior::backend::{make_toy_backend, ToyBackend, VisionLanguageBackend};
use dior::baselines::{fit_subspace_from_vectors, indirect_project, ComponentRule};
use dior::eval::oracle::brute_force_from_scores;
use dior::eval::{
    ami_score, evaluate_condition, few_shot_eval, linear_probe_eval, map_at_k, map_at_r, rank_scores, recall_at_k,
    retrieval_score, MetricSpec, RankingResult,
};
use dior::extraction::{batch_extract, extract_conditional_embedding, plan_cache, timing_report};
use dior::manifest::{load_manifest, Condition, DatasetManifest, ImageRef, ManifestItem, Role};
use dior::prompting::{render_prompt, variant_catalog};
use dior::store::{load_embeddings, read_store, write_store, StoreHeader, StoreRecord, StoreRole, STORE_DTYPE};
use dior::{DiorError, EmbeddingRecord, ExtractionConfig, PromptSpec, TokenStrategy};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = fn() -> Result<String, String>;

const EXPECTED_FAILURES: &[u32] = &[3];

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn random_png(path: &Path, rng: &mut ChaCha8Rng) {
    let base: [u8; 3] = [rng.random(), rng.random(), rng.random()];
    let noise: Vec<u8> = (0..144).map(|_| rng.random_range(0..40)).collect();
    let img = image::RgbImage::from_fn(12, 12, |x, y| {
        let n = noise[(y * 12 + x) as usize];
        image::Rgb([base[0].saturating_add(n), base[1].saturating_sub(n), base[2] ^ (n & 0x0f)])
    });
    img.save(path).unwrap();
}

const CONDITION_POOL: [&str; 8] = [
    "color",
    "shape",
    "main car paint color",
    "main car body shape",
    "main car wheel rim size",
    "texture type",
    "background scene",
    "clothing category",
];

// ---------------------------------------------------------------- metrics

struct Instance {
    ids: Vec<String>,
    labels: HashMap<String, String>,
    scores: Vec<Vec<f64>>,
}

fn instances() -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..200)
        .map(|_| {
            let n = rng.random_range(2..=50);
            let classes = rng.random_range(1..=5);
            let ids: Vec<String> = (0..n).map(|i| format!("item{i:02}")).collect();
            let labels = ids
                .iter()
                .map(|id| (id.clone(), format!("c{}", rng.random_range(0..classes))))
                .collect();
            let scores = (0..n)
                .map(|_| (0..n).map(|_| f64::from(rng.random_range(0u8..12)) / 11.0).collect())
                .collect();
            Instance { ids, labels, scores }
        })
        .collect()
}

fn rankings(inst: &Instance) -> Vec<RankingResult> {
    inst.ids
        .iter()
        .zip(&inst.scores)
        .map(|(q, row)| rank_scores(q, inst.ids.iter().cloned().zip(row.iter().copied()).collect(), true).unwrap())
        .collect()
}

fn c1_oracle_equivalence() -> Result<String, String> {
    let metrics = [
        MetricSpec::MapAtR,
        MetricSpec::MapAtK(1),
        MetricSpec::MapAtK(10),
        MetricSpec::RecallAtK(1),
        MetricSpec::RecallAtK(10),
    ];
    let mut worst = 0f64;
    let all = instances();
    for (i, inst) in all.iter().enumerate() {
        let r = rankings(inst);
        for metric in metrics {
            let fast = match metric {
                MetricSpec::MapAtR => map_at_r(&r, &inst.labels),
                MetricSpec::MapAtK(k) => map_at_k(&r, &inst.labels, k),
                MetricSpec::RecallAtK(k) => recall_at_k(&r, &inst.labels, k),
                _ => unreachable!(),
            }
            .map_err(|e| e.to_string())?;
            let oracle = brute_force_from_scores(&inst.ids, &inst.ids, &inst.scores, &inst.labels, true, metric)
                .map_err(|e| e.to_string())?;
            ensure(fast.n_skipped == oracle.n_skipped, || format!("instance {i} {metric}: skip counts differ"))?;
            match (fast.aggregate, oracle.aggregate) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return Err(format!("instance {i} {metric}: one aggregate missing")),
            }
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e} > 1e-9"))?;
    Ok(format!("{} instances x 5 metrics, max |diff| = {worst:e}", all.len()))
}

fn c2_map1_equals_recall1() -> Result<String, String> {
    let mut worst = 0f64;
    let all = instances();
    for (i, inst) in all.iter().enumerate() {
        let r = rankings(inst);
        let a = map_at_k(&r, &inst.labels, 1).unwrap().aggregate;
        let b = recall_at_k(&r, &inst.labels, 1).unwrap().aggregate;
        match (a, b) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => return Err(format!("instance {i}: one aggregate missing")),
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e} > 1e-12"))?;
    Ok(format!("{} instances, max |MAP@1 - Recall@1| = {worst:e}", all.len()))
}

fn c3_hand_checked_value() -> Result<String, String> {
    // Relevant items at ranks 1 and 3, R = 2.
    let labels: HashMap<String, String> = [("q", "a"), ("x1", "a"), ("x2", "b"), ("x3", "a"), ("x4", "b")]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let scores = vec![
        ("x1".to_string(), 0.9),
        ("x2".to_string(), 0.8),
        ("x3".to_string(), 0.7),
        ("x4".to_string(), 0.6),
    ];
    let ranking = rank_scores("q", scores, true).unwrap();
    let got = map_at_r(&[ranking], &labels).unwrap().aggregate.unwrap();
    let expected = 5.0 / 6.0;
    ensure((got - expected).abs() <= 1e-9, || {
        format!(
            "MAP@R = {got}, expected {expected:.4}; precision is summed over ranks 1..=R = 2 only, \
             so the hit at rank 3 does not count; {expected:.4} is untruncated average precision"
        )
    })?;
    Ok(format!("MAP@R = {got}"))
}

// ------------------------------------------------------------- extraction

fn c4_extraction_definition() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let backends: Vec<ToyBackend> = (0..5).map(|s| make_toy_backend(s, 24, 3, 64, 4).unwrap()).collect();
    for case in 0..100 {
        let backend = &backends[case % backends.len()];
        let path = dir.path().join(format!("img{case}.png"));
        random_png(&path, &mut rng);
        let image = ImageRef::new(format!("img{case}"), path);
        let condition = CONDITION_POOL[rng.random_range(0..CONDITION_POOL.len())];
        let cfg = |strategy| ExtractionConfig {
            strategy,
            ..ExtractionConfig::default()
        };
        let last = extract_conditional_embedding(backend, &image, condition, &cfg(TokenStrategy::LastInput), None)
            .map_err(|e| e.to_string())?;
        let first = extract_conditional_embedding(backend, &image, condition, &cfg(TokenStrategy::FirstOutput), None)
            .map_err(|e| e.to_string())?;

        let patches = backend.encode_image_patches(&image).unwrap();
        let tokens = backend.tokenize(&backend.render_input(&last.prompt)).unwrap();
        let (hidden, _) = backend.forward_hidden_states(&patches, &tokens, None).unwrap();
        let layers = backend.info().layer_count;
        let position = patches.len() + tokens.len() - 1;
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(&last.vector) == bits(hidden.at(layers, position)), || {
            format!("case {case}: last_input differs from hidden state at (L, M+N)")
        })?;
        let decoded = backend.greedy_decode(&patches, &tokens, 1).unwrap();
        ensure(decoded[0].token == backend.next_token(&last.vector), || {
            format!("case {case}: first generated token is not predicted from the last-input state")
        })?;
        ensure(bits(&first.vector) == bits(&decoded[0].hidden), || {
            format!("case {case}: first_output embedding differs from the decoded token's state")
        })?;
    }
    Ok("100 seeded cases, bit-exact".into())
}

fn one_item_manifest(image: &ImageRef, conditions: &[String]) -> DatasetManifest {
    DatasetManifest {
        dataset: "single".into(),
        conditions: conditions.iter().map(Condition::new).collect(),
        items: vec![ManifestItem {
            image: image.clone(),
            role: Role::Both,
            labels: conditions.iter().map(|c| (c.clone(), "x".to_string())).collect(),
        }],
    }
}

fn c5_cache_neutrality() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let backend = make_toy_backend(9, 32, 4, 64, 4).unwrap();
    let strategies = [TokenStrategy::LastInput, TokenStrategy::FirstOutput, TokenStrategy::MeanOutput];
    let mut worst = 0f32;
    let mut reductions = Vec::new();
    for case in 0..50 {
        let path = dir.path().join(format!("img{case}.png"));
        random_png(&path, &mut rng);
        let image = ImageRef::new(format!("img{case}"), path);
        let mut pool = CONDITION_POOL.to_vec();
        pool.shuffle(&mut rng);
        let conditions: Vec<String> = pool[..3].iter().map(|s| s.to_string()).collect();
        let config = ExtractionConfig {
            strategy: strategies[case % 3],
            ..ExtractionConfig::default()
        };

        let plan = plan_cache(&backend, &image, &conditions, &config.prompt).map_err(|e| e.to_string())?;
        let m_p = (plan.patch_count + plan.shared_len()) as u64;
        let suffixes: Vec<u64> = plan.suffix_ids.iter().map(|s| s.len() as u64).collect();
        let without: u64 = suffixes.iter().map(|s| m_p + s).sum();
        let with = m_p + suffixes.iter().sum::<u64>();
        ensure(plan.positions_without_cache == without && plan.positions_with_cache == with, || {
            format!("case {case}: plan counts do not follow the position formula")
        })?;
        let formula = (m_p * 2) as f64 / without as f64;
        ensure((plan.reduction() - formula).abs() < 1e-12, || format!("case {case}: reduction mismatch"))?;
        reductions.push(formula);

        let before = backend.computed_positions();
        let cached = batch_extract(&backend, &one_item_manifest(&image, &conditions), &conditions, &config)
            .map_err(|e| e.to_string())?;
        let cached_positions = backend.computed_positions() - before;
        ensure(cached.errors.is_empty(), || format!("case {case}: cached extraction failed"))?;

        let before = backend.computed_positions();
        let uncached: Vec<EmbeddingRecord> = conditions
            .iter()
            .map(|c| extract_conditional_embedding(&backend, &image, c, &config, None).unwrap())
            .collect();
        let uncached_positions = backend.computed_positions() - before;

        if config.strategy == TokenStrategy::LastInput {
            ensure(cached_positions == with && uncached_positions == without, || {
                format!(
                    "case {case}: counted {cached_positions}/{uncached_positions} positions, plan says {with}/{without}"
                )
            })?;
        }
        for (a, b) in cached.records.iter().zip(&uncached) {
            for (x, y) in a.vector.iter().zip(&b.vector) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max |cached - uncached| = {worst:e} > 1e-5"))?;

    let report = timing_report(
        &backend,
        &ImageRef::new("img0", dir.path().join("img0.png")),
        &CONDITION_POOL[2..5].iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        &PromptSpec::default(),
        5,
    )
    .map_err(|e| e.to_string())?;
    let mean_reduction = reductions.iter().sum::<f64>() / reductions.len() as f64;
    Ok(format!(
        "50 cases, max |diff| = {worst:e}, mean position reduction {:.1}%; toy wall clock {:.3} -> {:.3} ms (not asserted)",
        mean_reduction * 100.0,
        report.median_ms_without_cache,
        report.median_ms_with_cache
    ))
}

// -------------------------------------------------------------- prompting

fn c6_prompt_bytes() -> Result<String, String> {
    let conditions = [
        "color",
        "shape",
        "texture type",
        "fabric type",
        "fit type",
        "clothing category",
        "main car model",
        "main car paint color",
        "background scene",
        "art style",
        "artist",
        "genre",
        "movie genre",
        "country of origin",
        "primary object",
        "number of people",
        "season",
        "time of day",
        "material",
        "dominant hue",
    ];
    for c in conditions {
        let got = render_prompt(&PromptSpec::default(), Some(c)).map_err(|e| e.to_string())?;
        let expected = format!("Describe the image in one word regarding {c}:");
        ensure(got.as_bytes() == expected.as_bytes(), || format!("`{got}` != `{expected}`"))?;
    }
    let expected = [
        "Describe the image in one word regarding {condition}:",
        "Describe the image in one word:",
        "Describe the image regarding {condition}:",
        "Express the image in one word in terms of {condition}:",
        "Summarize the image in one word regarding {condition}:",
        "Capture the image in one word based on {condition}:",
        "Depict the image in one word, considering {condition}:",
    ];
    let catalog = variant_catalog();
    ensure(catalog.len() == 7, || format!("catalog has {} entries", catalog.len()))?;
    for (spec, template) in catalog.iter().zip(expected) {
        ensure(spec.template() == template, || format!("`{}` != `{template}`", spec.template()))?;
        let rendered = render_prompt(spec, spec.with_condition.then_some("texture type")).unwrap();
        let want = template.replace("{condition}", "texture type");
        ensure(rendered == want, || format!("`{rendered}` != `{want}`"))?;
    }
    Ok("20 conditions and 7 catalog variants byte-exact".into())
}

// -------------------------------------------------------------- baselines

fn basis(i: usize) -> Vec<f32> {
    let mut v = vec![0f32; 16];
    v[i] = 1.0;
    v
}

fn axpy(out: &mut [f32], a: f32, x: &[f32]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn c7_indirect() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let tiny = Normal::new(0f32, 1e-5).unwrap();
    let noise = Normal::new(0f32, 0.05).unwrap();
    let (u, a1, a2, b1, b2) = (basis(15), basis(0), basis(1), basis(4), basis(5));

    // (a) Label vectors for attribute A: a common offset plus points on a
    // circle in the A plane, so the centered normalized set has rank 2.
    let labels: Vec<Vec<f32>> = (0..12)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / 12.0;
            let mut v = u.clone();
            axpy(&mut v, 0.5 * t.cos() as f32, &a1);
            axpy(&mut v, 0.5 * t.sin() as f32, &a2);
            v.iter_mut().for_each(|x| *x += tiny.sample(&mut rng));
            v
        })
        .collect();
    let names: Vec<String> = (0..12).map(|i| format!("a{i}")).collect();
    let model = fit_subspace_from_vectors(&labels, ComponentRule::Fixed(2), "A", names, "{label}")
        .map_err(|e| e.to_string())?;
    let explained: f64 = model.explained_variance.iter().take(2).sum();
    ensure(explained >= 0.999, || format!("explained variance of planted rank = {explained}"))?;

    // (b) Images mix a weak A signal with a strong B signal.
    let mut items = Vec::new();
    let mut raw = Vec::new();
    let mut projected = Vec::new();
    for ca in 0..4 {
        for cb in 0..4 {
            for rep in 0..5 {
                let id = format!("x{ca}{cb}{rep}");
                let ta = PI / 2.0 * ca as f64;
                let tb = PI / 2.0 * cb as f64 + 0.3;
                let mut v = u.clone();
                axpy(&mut v, 0.5 * ta.cos() as f32, &a1);
                axpy(&mut v, 0.5 * ta.sin() as f32, &a2);
                axpy(&mut v, 2.0 * tb.cos() as f32, &b1);
                axpy(&mut v, 2.0 * tb.sin() as f32, &b2);
                v.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
                let record = |vector: Vec<f32>| EmbeddingRecord {
                    image_id: id.clone(),
                    condition: "A".into(),
                    model_id: "synthetic".into(),
                    prompt: String::new(),
                    layer: 0,
                    strategy: TokenStrategy::LastInput,
                    vector,
                };
                projected.push(record(indirect_project(&model, &v).map_err(|e| e.to_string())?));
                raw.push(record(v));
                items.push(ManifestItem {
                    image: ImageRef::new(id.clone(), format!("{id}.png")),
                    role: Role::Both,
                    labels: [("A".to_string(), format!("a{ca}"))].into(),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        dataset: "planted".into(),
        conditions: vec![Condition::new("A")],
        items,
    };
    let raw_score = retrieval_score(&raw, &manifest, "A", MetricSpec::MapAtR).map_err(|e| e.to_string())?;
    let sub_score = retrieval_score(&projected, &manifest, "A", MetricSpec::MapAtR).map_err(|e| e.to_string())?;
    ensure(sub_score > raw_score, || format!("subspace MAP@R {sub_score} <= raw {raw_score}"))?;

    // (c) Full-rank projection preserves distances of centered normalized points.
    let std = Normal::new(0f32, 1.0).unwrap();
    let points: Vec<Vec<f32>> = (0..10).map(|_| (0..16).map(|_| std.sample(&mut rng)).collect()).collect();
    let full = fit_subspace_from_vectors(&points, ComponentRule::Fixed(16), "P", vec![], "{label}")
        .map_err(|e| e.to_string())?;
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let n = p.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            p.iter().zip(&full.mean).map(|(x, m)| f64::from(*x) / n - m).collect()
        })
        .collect();
    let proj: Vec<Vec<f32>> = points.iter().map(|p| indirect_project(&full, p).unwrap()).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let as64 = |v: &[f32]| v.iter().map(|x| f64::from(*x)).collect::<Vec<_>>();
    let mut worst = 0f64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d0 = dist(&centered[i], &centered[j]);
            let d1 = dist(&as64(&proj[i]), &as64(&proj[j]));
            worst = worst.max((d0 - d1).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("isometry error {worst:e} > 1e-6"))?;
    Ok(format!(
        "explained {explained:.6}, MAP@R raw {raw_score:.3} -> subspace {sub_score:.3}, rank {} isometry error {worst:e}",
        full.rank
    ))
}

// ------------------------------------------------------------ evaluation

fn c8_ami() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let a: Vec<u32> = (0..300).map(|_| rng.random_range(0..6)).collect();
    let same = ami_score(&a, &a).map_err(|e| e.to_string())?;
    ensure((same - 1.0).abs() < 1e-12, || format!("identical partitions: {same}"))?;
    let mut perm: Vec<u32> = (0..6).collect();
    perm.shuffle(&mut rng);
    let relabeled: Vec<u32> = a.iter().map(|&x| perm[x as usize] + 100).collect();
    let permuted = ami_score(&a, &relabeled).map_err(|e| e.to_string())?;
    ensure((permuted - 1.0).abs() < 1e-12, || format!("permuted labels: {permuted}"))?;
    let mut worst = 0f64;
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<u32> = (0..1000).map(|_| r.random_range(0..10)).collect();
        let y: Vec<u32> = (0..1000).map(|_| r.random_range(0..10)).collect();
        worst = worst.max(ami_score(&x, &y).map_err(|e| e.to_string())?.abs());
    }
    ensure(worst < 0.05, || format!("independent partitions: max |AMI| = {worst}"))?;
    Ok(format!("identical 1.0, permuted 1.0, independent max |AMI| = {worst:.4}"))
}

fn c9_probes() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let spread = Normal::new(0f32, 0.3).unwrap();
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..40 {
            let mut v: Vec<f32> = (0..8).map(|_| spread.sample(&mut rng)).collect();
            v[c] += 5.0;
            vectors.push(v);
            labels.push(format!("blob{c}"));
        }
    }
    let mut parts = Vec::new();
    for k in [1usize, 5] {
        let lp = linear_probe_eval(&vectors, &labels, k, 3).map_err(|e| e.to_string())?.accuracy;
        let fs = few_shot_eval(&vectors, &labels, k, 3).map_err(|e| e.to_string())?.accuracy;
        ensure(lp >= 0.99 && fs >= 0.99, || format!("k={k}: linear {lp}, few-shot {fs}"))?;
        parts.push(format!("k={k} {lp:.3}/{fs:.3}"));
    }
    let std = Normal::new(0f32, 1.0).unwrap();
    let noise: Vec<Vec<f32>> = (0..1000).map(|_| (0..16).map(|_| std.sample(&mut rng)).collect()).collect();
    let mut shuffled: Vec<String> = (0..1000).map(|i| format!("c{}", i % 10)).collect();
    shuffled.shuffle(&mut rng);
    let lp = linear_probe_eval(&noise, &shuffled, 10, 4).map_err(|e| e.to_string())?.accuracy;
    let fs = few_shot_eval(&noise, &shuffled, 10, 4).map_err(|e| e.to_string())?.accuracy;
    ensure((lp - 0.1).abs() <= 0.05 && (fs - 0.1).abs() <= 0.05, || {
        format!("shuffled labels: linear {lp}, few-shot {fs}, chance 0.1")
    })?;
    Ok(format!("separable {}; shuffled {lp:.3}/{fs:.3} vs chance 0.100", parts.join(", ")))
}

// ------------------------------------------------------------------ store

fn c10_store_round_trip() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let dim = 12;
    let records: Vec<StoreRecord> = (0..10_000)
        .map(|i| StoreRecord {
            image_id: format!("img{i:05}"),
            condition: ["color", "shape", "texture type"][i % 3].to_string(),
            vector: (0..dim)
                .map(|_| loop {
                    let v = f32::from_bits(rng.random());
                    if v.is_finite() {
                        break v;
                    }
                })
                .collect(),
        })
        .collect();
    let header = StoreHeader {
        schema_version: dior::store::STORE_SCHEMA_VERSION,
        role: StoreRole::Embeddings,
        method: "dior".into(),
        model_id: "roundtrip".into(),
        prompt: "Describe the image in one word regarding {condition}:".into(),
        layer: Some(4),
        strategy: Some("last_input".into()),
        dim,
        dtype: STORE_DTYPE.into(),
        count: records.len(),
        extra: BTreeMap::new(),
    };
    let path = dir.path().join("big.store");
    let written = write_store(&path, &header, &records, false).map_err(|e| e.to_string())?;
    let (h, back) = read_store(&path).map_err(|e| e.to_string())?;
    ensure(h == header, || "header changed".into())?;
    ensure(back.len() == records.len(), || "record count changed".into())?;
    for (a, b) in back.iter().zip(&records) {
        let same = a.image_id == b.image_id
            && a.condition == b.condition
            && a.vector.iter().map(|x| x.to_bits()).eq(b.vector.iter().map(|x| x.to_bits()));
        ensure(same, || format!("record `{}` changed", b.image_id))?;
    }

    let bytes = std::fs::read(&path).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[..8].copy_from_slice(b"XXXXXXXX");
    let bad = dir.path().join("bad.store");
    std::fs::write(&bad, &bad_magic).unwrap();
    match read_store(&bad) {
        Err(DiorError::StoreFormat(_)) => {}
        other => return Err(format!("bad magic gave {other:?}")),
    }
    let cut = bytes.len() - dim * 4 / 2;
    let truncated = dir.path().join("cut.store");
    std::fs::write(&truncated, &bytes[..cut]).unwrap();
    let offset = match read_store(&truncated) {
        Err(DiorError::Corruption { offset, .. }) => offset,
        other => return Err(format!("truncation gave {other:?}")),
    };
    ensure(offset <= cut as u64, || format!("corruption offset {offset} beyond file end {cut}"))?;
    Ok(format!(
        "10000 records ({written} bytes) bit-exact; bad magic -> format error; cut at {cut} -> corruption at {offset}"
    ))
}

// ---------------------------------------------------------------- fixture

fn c11_fixture_reproduction() -> Result<String, String> {
    let fixtures = fixtures_dir();
    let store = fixtures.join("fixture.store");
    let manifest_path = fixtures.join("manifest.jsonl");
    let expected_text = std::fs::read_to_string(fixtures.join("expected_report.jsonl")).map_err(|e| e.to_string())?;
    let expected: Vec<serde_json::Value> =
        expected_text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let manifest = load_manifest(&manifest_path).map_err(|e| e.to_string())?;
    let (_, records) = load_embeddings(&store).map_err(|e| e.to_string())?;

    let dir = tempfile::tempdir().unwrap();
    let mut worst = 0f64;
    let mut checked = 0;
    for (i, want) in expected.iter().enumerate() {
        let metric = want["metric"].as_str().unwrap();
        let condition = want["condition"].as_str().unwrap();
        let out = dir.path().join(format!("report{i}.jsonl"));
        let mut argv = vec![
            "dior".to_string(),
            "evaluate".into(),
            "--manifest".into(),
            manifest_path.display().to_string(),
            "--store".into(),
            store.display().to_string(),
            "--metric".into(),
            metric.into(),
            "--conditions".into(),
            condition.into(),
            "--out".into(),
            out.display().to_string(),
        ];
        if let Some(k) = want["k"].as_u64() {
            argv.extend(["--k".to_string(), k.to_string()]);
        }
        let code = dior_cli::run_cli(argv);
        ensure(code == 0, || format!("evaluate exited with {code}"))?;
        let line: serde_json::Value =
            serde_json::from_str(std::fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
        let got = line["aggregate"].as_f64().unwrap();
        let target = want["aggregate"].as_f64().unwrap();
        worst = worst.max((got - target).abs());
        ensure((got - target).abs() <= 1e-12, || format!("{metric} {condition}: {got} vs {target}"))?;
        for field in ["n_queries", "n_skipped"] {
            ensure(line[field] == want[field], || format!("{metric} {condition}: {field} differs"))?;
        }
        let spec = MetricSpec::parse(metric, want["k"].as_u64().map(|k| k as usize)).unwrap();
        let direct = evaluate_condition(&records, &manifest, condition, spec, 0).map_err(|e| e.to_string())?;
        ensure(line["config_fingerprint"] == direct.config_fingerprint.as_str(), || {
            format!("{metric} {condition}: CLI and direct fingerprints differ")
        })?;
        checked += 1;
    }
    Ok(format!("{checked} recorded aggregates reproduced, max |diff| = {worst:e}"))
}

fn c12_real_model() -> Result<String, String> {
    Err("SKIP".into())
}

fn main() {
    let criteria: [(u32, &str, Check); 12] = [
        (1, "metric oracle equivalence", c1_oracle_equivalence),
        (2, "MAP@1 = Recall@1", c2_map1_equals_recall1),
        (3, "hand-checked MAP@R value", c3_hand_checked_value),
        (4, "extraction definition", c4_extraction_definition),
        (5, "prefix cache neutrality", c5_cache_neutrality),
        (6, "prompt byte-exactness", c6_prompt_bytes),
        (7, "subspace baseline correctness", c7_indirect),
        (8, "AMI properties", c8_ami),
        (9, "probe sanity", c9_probes),
        (10, "store round trip", c10_store_round_trip),
        (11, "fixture metric reproduction", c11_fixture_reproduction),
        (12, "real-model conditioning (optional)", c12_real_model),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut unexpected = Vec::new();
    for (id, name, check) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let expected_failure = EXPECTED_FAILURES.contains(&id);
        match outcome {
            Err(msg) if msg == "SKIP" => {
                println!("SKIP {id:>2} {name}: no local instruction-tuned vision-language model configured");
            }
            Ok(detail) => {
                println!("PASS {id:>2} {name} ({secs:.2} s): {detail}");
                if expected_failure {
                    unexpected.push(format!("{id} passed but is listed as an expected failure"));
                }
            }
            Err(msg) => {
                let note = if expected_failure { " [expected failure]" } else { "" };
                println!("FAIL {id:>2} {name} ({secs:.2} s){note}: {msg}");
                if !expected_failure {
                    unexpected.push(format!("{id} failed"));
                }
            }
        }
    }
    let _ = panic::take_hook();
    if !unexpected.is_empty() {
        eprintln!("acceptance: {}", unexpected.join("; "));
        std::process::exit(1);
    }
}
