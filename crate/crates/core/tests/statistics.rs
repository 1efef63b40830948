//! Monte-Carlo checks of metric and probe behaviour on random data.

use std::collections::HashMap;

use dior::eval::{
    ami_score, cluster_embeddings, few_shot_eval, genecis_recall, linear_probe_eval, rank_scores, recall_at_k,
    tsne_2d, TsneConfig,
};
use dior::manifest::{GeneCisManifest, GeneCisQuery, ImageRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn recall_at_k_on_random_labels_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, classes) = (2000usize, 5usize);
    let labels: HashMap<String, String> =
        (0..n).map(|i| (format!("i{i}"), format!("c{}", rng.random_range(0..classes)))).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
    let rankings: Vec<_> = ids
        .iter()
        .map(|q| {
            let scores = ids.iter().map(|id| (id.clone(), rng.random::<f64>())).collect();
            rank_scores(q, scores, true).unwrap()
        })
        .collect();
    let mut class_sizes: HashMap<&str, usize> = HashMap::new();
    for l in labels.values() {
        *class_sizes.entry(l.as_str()).or_default() += 1;
    }
    for k in [1usize, 3, 10] {
        let got = recall_at_k(&rankings, &labels, k).unwrap().aggregate.unwrap();
        // Per query, the top k is a uniform draw without replacement from
        // n - 1 candidates of which R are relevant.
        let expected = ids
            .iter()
            .map(|q| {
                let relevant = class_sizes[labels[q].as_str()] - 1;
                let miss: f64 = (0..k).map(|j| (n - 1 - relevant - j) as f64 / (n - 1 - j) as f64).product();
                1.0 - miss
            })
            .sum::<f64>()
            / n as f64;
        assert!((got - expected).abs() < 0.02, "k={k}: {got} vs {expected}");
    }
}

#[test]
fn genecis_random_scores_give_one_in_ten() {
    let queries: Vec<GeneCisQuery> = (0..5000)
        .map(|q| GeneCisQuery {
            id: format!("q{q}"),
            query: ImageRef::new(format!("q{q}"), format!("q{q}")),
            condition: "color".into(),
            candidates: (0..10).map(|c| ImageRef::new(format!("q{q}c{c}"), format!("q{q}c{c}"))).collect(),
            answer: q % 10,
        })
        .collect();
    let manifest = GeneCisManifest {
        dataset: "random".into(),
        queries,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut embed = |_: &ImageRef, _: &str| Ok((0..8).map(|_| normal.sample(&mut rng)).collect::<Vec<f32>>());
    let rep = genecis_recall(&manifest, &mut embed, 1).unwrap();
    let r1 = rep.aggregate.unwrap();
    assert!((r1 - 0.1).abs() < 0.02, "{r1}");
}

#[test]
fn ami_of_independent_partitions_is_near_zero() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u32> = (0..1000).map(|_| rng.random_range(0..10)).collect();
        let b: Vec<u32> = (0..1000).map(|_| rng.random_range(0..10)).collect();
        let v = ami_score(&a, &b).unwrap();
        assert!(v.abs() < 0.05, "seed {seed}: {v}");
    }
}

fn blobs(per_class: usize, classes: usize, dim: usize, spread: f32, seed: u64) -> (Vec<Vec<f32>>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, spread).unwrap();
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..per_class {
            let mut v: Vec<f32> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
            v[c % dim] += 5.0;
            vectors.push(v);
            labels.push(format!("class{c}"));
        }
    }
    (vectors, labels)
}

#[test]
fn separable_blobs_are_classified_and_clustered() {
    let (vectors, labels) = blobs(30, 2, 6, 0.3, 1);
    for k in [1usize, 5] {
        assert!(linear_probe_eval(&vectors, &labels, k, 9).unwrap().accuracy >= 0.99);
        assert!(few_shot_eval(&vectors, &labels, k, 9).unwrap().accuracy >= 0.99);
    }
    let assignments = cluster_embeddings(&vectors, 2, 4, 5).unwrap();
    assert!((ami_score(&assignments, &labels).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let vectors: Vec<Vec<f32>> = (0..1000).map(|_| (0..16).map(|_| normal.sample(&mut rng)).collect()).collect();
    let labels: Vec<String> = (0..1000).map(|i| format!("c{}", i % 10)).collect();
    let lp = linear_probe_eval(&vectors, &labels, 10, 2).unwrap();
    let fs = few_shot_eval(&vectors, &labels, 10, 2).unwrap();
    assert!((lp.accuracy - 0.1).abs() <= 0.05, "{}", lp.accuracy);
    assert!((fs.accuracy - 0.1).abs() <= 0.05, "{}", fs.accuracy);
}

#[test]
fn tsne_cardinality_and_perplexity_bound() {
    let (vectors, _) = blobs(25, 4, 8, 0.5, 2);
    let config = TsneConfig {
        perplexity: 30.0,
        iterations: 250,
        seed: 5,
        ..TsneConfig::default()
    };
    let points = tsne_2d(&vectors, &config).unwrap();
    assert_eq!(points.len(), 100);
    assert_eq!(points, tsne_2d(&vectors, &config).unwrap());
    let too_wide = TsneConfig {
        perplexity: 50.0,
        ..config
    };
    assert!(tsne_2d(&vectors, &too_wide).is_err());
}
