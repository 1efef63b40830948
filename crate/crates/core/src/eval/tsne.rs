//! Exact t-SNE for 2-D visualization of a few hundred embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DiorError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            seed: 0,
        }
    }
}

/// Conditional affinities for one row, with the Gaussian precision found by
/// bisection so the row entropy matches `ln(perplexity)`.
fn row_affinities(dist: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
    let mut p = vec![0f64; dist.len()];
    for _ in 0..100 {
        let mut sum = 0.0;
        for (j, (&d, pj)) in dist.iter().zip(p.iter_mut()).enumerate() {
            *pj = if j == i { 0.0 } else { (-beta * d).exp() };
            sum += *pj;
        }
        let sum = sum.max(f64::MIN_POSITIVE);
        let mut entropy = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= sum;
            if j != i && *pj > 0.0 {
                entropy -= *pj * pj.ln();
            }
        }
        let diff = entropy - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Projects `vectors` to 2-D. Requires more than `3 · perplexity` points.
pub fn tsne_2d(vectors: &[Vec<f32>], config: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = vectors.len();
    if config.perplexity.is_nan() || config.perplexity <= 0.0 || (n as f64) <= 3.0 * config.perplexity {
        return Err(DiorError::Input(format!(
            "t-SNE needs more than 3 x perplexity points ({n} points, perplexity {})",
            config.perplexity
        )));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(DiorError::Input("vectors differ in dimension".into()));
    }

    let mut dist = vec![vec![0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                .sum();
            dist[i][j] = s;
            dist[j][i] = s;
        }
    }
    let cond: Vec<Vec<f64>> = (0..n).map(|i| row_affinities(&dist[i], i, config.perplexity)).collect();
    let mut p = vec![vec![0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            p[i][j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid standard deviation");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut velocity = vec![[0f64; 2]; n];
    let mut gains = vec![[1f64; 2]; n];

    let mut num = vec![vec![0f64; n]; n];
    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.exaggeration_iterations { 0.5 } else { 0.8 };

        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i][j] = q;
                num[j][i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut grad = [0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exaggeration * p[i][j] - num[i][j] / z) * num[i][j];
                grad[0] += 4.0 * w * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                gains[i][a] = if (grad[a] > 0.0) != (velocity[i][a] > 0.0) {
                    gains[i][a] + 0.2
                } else {
                    (gains[i][a] * 0.8).max(0.01)
                };
                velocity[i][a] = momentum * velocity[i][a] - config.learning_rate * gains[i][a] * grad[a];
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let mean = y.iter().fold([0.0, 0.0], |m, v| [m[0] + v[0], m[1] + v[1]]);
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
    }
    if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(DiorError::Numeric("t-SNE diverged".into()));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blobs() -> Vec<Vec<f32>> {
        (0..24)
            .map(|i| {
                let c = if i < 12 { 0.0 } else { 10.0 };
                vec![c + (i % 5) as f32 * 0.1, c - (i % 3) as f32 * 0.1, (i % 7) as f32 * 0.05]
            })
            .collect()
    }

    fn config() -> TsneConfig {
        TsneConfig {
            perplexity: 5.0,
            iterations: 300,
            ..TsneConfig::default()
        }
    }

    #[test]
    fn rejects_too_few_points() {
        let v = vec![vec![0.0f32; 2]; 15];
        assert!(tsne_2d(&v, &config()).is_err());
    }

    #[test]
    fn seeded_and_separates_blobs() {
        let v = two_blobs();
        let a = tsne_2d(&v, &config()).unwrap();
        assert_eq!(a, tsne_2d(&v, &config()).unwrap());
        let centroid = |r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            a[r].iter().fold([0.0, 0.0], |m, p| [m[0] + p[0] / n, m[1] + p[1] / n])
        };
        let (c0, c1) = (centroid(0..12), centroid(12..24));
        let between = ((c0[0] - c1[0]).powi(2) + (c0[1] - c1[1]).powi(2)).sqrt();
        let spread = a[..12]
            .iter()
            .map(|p| ((p[0] - c0[0]).powi(2) + (p[1] - c0[1]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        assert!(between > spread, "between {between} spread {spread}");
    }
}
