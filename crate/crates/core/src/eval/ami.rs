//! Adjusted mutual information with the expected-MI correction under the
//! permutation (hypergeometric) model and arithmetic-mean normalization.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{DiorError, Result};

fn encode<T: Eq + Hash + Ord + Clone>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<T> = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    let index: HashMap<&T, usize> = distinct.iter().enumerate().map(|(i, l)| (l, i)).collect();
    (labels.iter().map(|l| index[l]).collect(), distinct.len())
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// AMI between two labelings of the same items. Symmetric; 1.0 for
/// identical partitions up to relabeling; near 0 for independent ones.
pub fn ami_score<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Eq + Hash + Ord + Clone,
    B: Eq + Hash + Ord + Clone,
{
    if a.len() != b.len() {
        return Err(DiorError::Input(format!(
            "labelings differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(DiorError::Input("AMI needs at least two items".into()));
    }
    let n = a.len();
    let (ea, ka) = encode(a);
    let (eb, kb) = encode(b);

    let mut table = vec![vec![0usize; kb]; ka];
    for (&i, &j) in ea.iter().zip(&eb) {
        table[i][j] += 1;
    }
    // Same partition up to relabeling.
    if ka == kb
        && table.iter().all(|row| row.iter().filter(|&&c| c > 0).count() == 1)
        && (0..kb).all(|j| table.iter().filter(|row| row[j] > 0).count() == 1)
    {
        return Ok(1.0);
    }

    let row: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<usize> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let nf = n as f64;

    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / nf * (nf * c / (row[i] as f64 * col[j] as f64)).ln();
            }
        }
    }

    let mut log_fact = vec![0f64; n + 1];
    for i in 1..=n {
        log_fact[i] = log_fact[i - 1] + (i as f64).ln();
    }
    let mut emi = 0.0;
    for &ai in &row {
        for &bj in &col {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let term = nij as f64 / nf * (nf * nij as f64 / (ai as f64 * bj as f64)).ln();
                let log_p = log_fact[ai] + log_fact[bj] + log_fact[n - ai] + log_fact[n - bj]
                    - log_fact[n]
                    - log_fact[nij]
                    - log_fact[ai - nij]
                    - log_fact[bj - nij]
                    - log_fact[n + nij - ai - bj];
                emi += term * log_p.exp();
            }
        }
    }

    let normalizer = (entropy(&row, nf) + entropy(&col, nf)) / 2.0;
    let mut denom = normalizer - emi;
    if denom < 0.0 {
        denom = denom.min(-f64::EPSILON);
    } else {
        denom = denom.max(f64::EPSILON);
    }
    Ok((mi - emi) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_permuted() {
        let a = [0, 0, 1, 1, 2, 2, 2];
        assert_eq!(ami_score(&a, &a).unwrap(), 1.0);
        let b = ["z", "z", "x", "x", "y", "y", "y"];
        assert_eq!(ami_score(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn known_value() {
        // Reference value from the standard expected-MI formula
        // (scikit-learn adjusted_mutual_info_score, arithmetic mean).
        let a = [0, 0, 0, 1, 1, 1];
        let b = [0, 0, 1, 1, 2, 2];
        let v = ami_score(&a, &b).unwrap();
        assert!((v - 0.298_792_458_170_890_1).abs() < 1e-9, "{v}");
    }

    #[test]
    fn symmetric() {
        let a = [0, 1, 2, 0, 1, 2, 0, 0, 1, 3];
        let b = [1, 1, 0, 0, 2, 2, 1, 0, 0, 1];
        let ab = ami_score(&a, &b).unwrap();
        let ba = ami_score(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(ami_score(&[0, 1], &[0]).is_err());
        assert!(ami_score(&[0], &[0]).is_err());
    }
}
