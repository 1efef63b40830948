use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::similarity::l2_normalized;
use crate::error::{DiorError, Result};

const MAX_ITERATIONS: usize = 300;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding.
fn init_centers(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = weights.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centers.push(points[next].clone());
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<usize>, f64) {
    let dim = points[0].len();
    let k = centers.len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (p, a) in points.iter().zip(assign.iter_mut()) {
            let (c, _) = nearest(p, &centers);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the point farthest from its center.
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        sq_dist(&points[i], &centers[assign[i]])
                            .total_cmp(&sq_dist(&points[j], &centers[assign[j]]))
                    })
                    .expect("non-empty");
                centers[c] = points[far].clone();
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assign)
        .map(|(p, &a)| sq_dist(p, &centers[a]))
        .sum();
    (assign, inertia)
}

/// k-means on L2-normalized vectors; keeps the restart with the lowest
/// inertia. Deterministic for a fixed seed.
pub fn cluster_embeddings(vectors: &[Vec<f32>], clusters: usize, seed: u64, restarts: usize) -> Result<Vec<usize>> {
    if clusters < 2 {
        return Err(DiorError::Input("need at least 2 clusters".into()));
    }
    if vectors.len() < clusters {
        return Err(DiorError::Input(format!(
            "{} points cannot form {clusters} clusters",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(DiorError::Input("vectors differ in dimension".into()));
    }
    let points: Vec<Vec<f64>> = vectors.iter().map(|v| l2_normalized(v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let centers = init_centers(&points, clusters, &mut rng);
        let run = lloyd(&points, centers);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ami::ami_score;

    #[test]
    fn separated_blobs_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vectors = Vec::new();
        let mut truth = Vec::new();
        for i in 0..60 {
            let class = i % 2;
            let base = if class == 0 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            vectors.push(base.iter().map(|b| b + rng.random_range(-0.05..0.05)).collect());
            truth.push(class);
        }
        let assign = cluster_embeddings(&vectors, 2, 3, 5).unwrap();
        assert_eq!(ami_score(&assign, &truth).unwrap(), 1.0);
    }

    #[test]
    fn duplicates_and_determinism() {
        let vectors = vec![vec![1.0f32, 0.0]; 6];
        let a = cluster_embeddings(&vectors, 2, 9, 3).unwrap();
        let b = cluster_embeddings(&vectors, 2, 9, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn too_few_points() {
        assert!(cluster_embeddings(&[vec![1.0]], 2, 0, 1).is_err());
        assert!(cluster_embeddings(&[vec![1.0], vec![2.0]], 1, 0, 1).is_err());
    }
}
