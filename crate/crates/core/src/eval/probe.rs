//! Classification probes on frozen embeddings: a regularized multinomial
//! logistic regression (linear probe) and nearest class centroid under cosine
//! (few-shot). Both use the same seeded k-shot-per-class split.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::similarity::l2_normalized;
use crate::error::{DiorError, Result};

/// Inverse regularization strength of the linear probe.
pub const PROBE_INVERSE_REGULARIZATION: f64 = 1.0;

const MAX_ITERATIONS: usize = 500;
const HISTORY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeProtocol {
    LinearProbe,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub protocol: ProbeProtocol,
    pub shots: usize,
    pub accuracy: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Only set for the linear probe.
    pub inverse_regularization: Option<f64>,
}

struct Split {
    classes: Vec<String>,
    train: Vec<(usize, usize)>,
    test: Vec<(usize, usize)>,
}

/// `k` items per class for training, the rest for testing. Pairs are
/// (item index, class index); classes are in ascending label order.
fn split(labels: &[String], shots: usize, seed: u64) -> Result<Split> {
    if shots == 0 {
        return Err(DiorError::Input("shots must be at least 1".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Split {
        classes: Vec::new(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (c, (label, mut members)) in by_class.into_iter().enumerate() {
        if members.len() < shots + 1 {
            return Err(DiorError::Split {
                class: label.to_string(),
                message: format!("{} items, need at least {}", members.len(), shots + 1),
            });
        }
        members.shuffle(&mut rng);
        out.train.extend(members[..shots].iter().map(|&i| (i, c)));
        out.test.extend(members[shots..].iter().map(|&i| (i, c)));
        out.classes.push(label.to_string());
    }
    Ok(out)
}

fn check_inputs(vectors: &[Vec<f32>], labels: &[String]) -> Result<()> {
    if vectors.len() != labels.len() {
        return Err(DiorError::Input(format!(
            "{} vectors but {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    if vectors.is_empty() {
        return Err(DiorError::Input("no items to probe".into()));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(DiorError::Input("vectors differ in dimension".into()));
    }
    Ok(())
}

fn accuracy(test: &[(usize, usize)], predict: impl Fn(usize) -> usize) -> f64 {
    let correct = test.iter().filter(|&&(i, c)| predict(i) == c).count();
    correct as f64 / test.len() as f64
}

/// Multinomial logistic regression objective `C·Σ CE + ½‖W‖²` (bias not
/// penalized). Parameters are laid out as `k` rows of `d` weights followed by
/// `k` biases.
struct Objective<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    k: usize,
    d: usize,
    c: f64,
}

impl Objective<'_> {
    fn logits(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|j| {
                let w = &theta[j * self.d..(j + 1) * self.d];
                w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + theta[self.k * self.d + j]
            })
            .collect()
    }

    fn value_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (k, d) = (self.k, self.d);
        let mut grad = vec![0f64; theta.len()];
        let mut loss = 0.0;
        for (x, &y) in self.x.iter().zip(self.y) {
            let z = self.logits(theta, x);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += self.c * (lse - z[y]);
            for j in 0..k {
                let g = self.c * ((z[j] - lse).exp() - if j == y { 1.0 } else { 0.0 });
                for (gw, xv) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gw += g * xv;
                }
                grad[k * d + j] += g;
            }
        }
        for (i, t) in theta[..k * d].iter().enumerate() {
            loss += 0.5 * t * t;
            grad[i] += t;
        }
        (loss, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L-BFGS with backtracking (Armijo) line search.
fn minimize(obj: &Objective<'_>, dim: usize) -> Vec<f64> {
    let mut theta = vec![0f64; dim];
    let (mut f, mut g) = obj.value_grad(&theta);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    for _ in 0..MAX_ITERATIONS {
        if g.iter().fold(0f64, |m, v| m.max(v.abs())) < 1e-6 {
            break;
        }
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            history.clear();
        }

        let mut step = 1.0;
        let (next, f_next, g_next) = loop {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let (fc, gc) = obj.value_grad(&cand);
            if fc <= f + 1e-4 * step * slope || step < 1e-12 {
                break (cand, fc, gc);
            }
            step *= 0.5;
        };
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == HISTORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let converged = (f - f_next).abs() <= 1e-12 * f.abs().max(1.0);
        theta = next;
        f = f_next;
        g = g_next;
        if converged {
            break;
        }
    }
    theta
}

/// Linear probe: fit a multinomial logistic regression on `shots` items per
/// class and report test accuracy.
pub fn linear_probe_eval(vectors: &[Vec<f32>], labels: &[String], shots: usize, seed: u64) -> Result<ProbeResult> {
    check_inputs(vectors, labels)?;
    let split = split(labels, shots, seed)?;
    let k = split.classes.len();
    let d = vectors[0].len();
    let accuracy = if k == 1 {
        1.0
    } else {
        let x: Vec<Vec<f64>> = split
            .train
            .iter()
            .map(|&(i, _)| vectors[i].iter().map(|&v| f64::from(v)).collect())
            .collect();
        let y: Vec<usize> = split.train.iter().map(|&(_, c)| c).collect();
        let obj = Objective {
            x: &x,
            y: &y,
            k,
            d,
            c: PROBE_INVERSE_REGULARIZATION,
        };
        let theta = minimize(&obj, k * d + k);
        accuracy(&split.test, |i| {
            let xi: Vec<f64> = vectors[i].iter().map(|&v| f64::from(v)).collect();
            let z = obj.logits(&theta, &xi);
            (0..k).fold(0, |best, j| if z[j] > z[best] { j } else { best })
        })
    };
    Ok(ProbeResult {
        protocol: ProbeProtocol::LinearProbe,
        shots,
        accuracy,
        seed,
        n_train: split.train.len(),
        n_test: split.test.len(),
        inverse_regularization: Some(PROBE_INVERSE_REGULARIZATION),
    })
}

/// Few-shot: classify by the most cosine-similar centroid of L2-normalized
/// training vectors. Ties go to the smaller class label.
pub fn few_shot_eval(vectors: &[Vec<f32>], labels: &[String], shots: usize, seed: u64) -> Result<ProbeResult> {
    check_inputs(vectors, labels)?;
    let split = split(labels, shots, seed)?;
    let d = vectors[0].len();
    let mut centroids = vec![vec![0f64; d]; split.classes.len()];
    for &(i, c) in &split.train {
        for (s, v) in centroids[c].iter_mut().zip(l2_normalized(&vectors[i])) {
            *s += v;
        }
    }
    let centroids: Vec<Vec<f64>> = centroids
        .into_iter()
        .map(|c| {
            let norm = dot(&c, &c).sqrt();
            if norm == 0.0 {
                c
            } else {
                c.iter().map(|v| v / norm).collect()
            }
        })
        .collect();
    let accuracy = accuracy(&split.test, |i| {
        let x = l2_normalized(&vectors[i]);
        let mut best = (0, f64::NEG_INFINITY);
        for (c, centroid) in centroids.iter().enumerate() {
            let s = dot(&x, centroid);
            if s > best.1 {
                best = (c, s);
            }
        }
        best.0
    });
    Ok(ProbeResult {
        protocol: ProbeProtocol::FewShot,
        shots,
        accuracy,
        seed,
        n_train: split.train.len(),
        n_test: split.test.len(),
        inverse_regularization: None,
    })
}
