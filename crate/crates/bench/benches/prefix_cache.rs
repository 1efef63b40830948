use criterion::{criterion_group, criterion_main, Criterion};
use dior::backend::make_toy_backend;
use dior::extraction::{batch_extract, extract_conditional_embedding};
use dior::manifest::{Condition, DatasetManifest, ImageRef, ManifestItem, Role};
use dior::ExtractionConfig;
use std::hint::black_box;

fn bench_prefix_cache(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.png");
    image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([(x * 8) as u8, (y * 8) as u8, 90])).save(&path).unwrap();
    let image = ImageRef::new("img", &path);
    let conditions: Vec<String> = ["main car paint color", "main car body shape", "main car wheel rim size"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let manifest = DatasetManifest {
        dataset: "bench".into(),
        conditions: conditions.iter().map(Condition::new).collect(),
        items: vec![ManifestItem {
            image: image.clone(),
            role: Role::Both,
            labels: conditions.iter().map(|c| (c.clone(), "x".to_string())).collect(),
        }],
    };
    let backend = make_toy_backend(7, 64, 4, 64, 16).unwrap();
    let config = ExtractionConfig::default();

    let mut group = c.benchmark_group("three_conditions");
    group.bench_function("without_cache", |b| {
        b.iter(|| {
            for cond in &conditions {
                black_box(extract_conditional_embedding(&backend, &image, cond, &config, None).unwrap());
            }
        })
    });
    group.bench_function("with_cache", |b| {
        b.iter(|| black_box(batch_extract(&backend, &manifest, &conditions, &config).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_prefix_cache);
criterion_main!(benches);
