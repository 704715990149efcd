//! Abundance error, classification agreement and cluster alignment.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::LabelField;

/// Root global mean square error `sqrt(||A_hat - A||_F^2 / (P R))`.
pub fn rgmse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::dims(format!(
            "abundance shapes differ: {:?} vs {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    if truth.is_empty() {
        return Err(Error::dims("empty abundance matrix"));
    }
    let sq: f64 = estimate.iter().zip(truth.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sq / truth.len() as f64).sqrt())
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|r| r.len() != n) {
            return Err(Error::dims("confusion matrix must be square and non-empty"));
        }
        Ok(Self { counts })
    }

    /// Tally `(truth[p], prediction[p])` over `pixels`, or over every pixel when `None`.
    pub fn from_labels(truth: &[u32], prediction: &[u32], classes: usize, pixels: Option<&[usize]>) -> Result<Self> {
        if truth.len() != prediction.len() {
            return Err(Error::dims(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                prediction.len()
            )));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        let mut add = |p: usize| -> Result<()> {
            let (t, e) = (truth[p] as usize, prediction[p] as usize);
            if t >= classes || e >= classes {
                return Err(Error::dims(format!("label outside 1..={classes} at pixel {p}")));
            }
            counts[t][e] += 1;
            Ok(())
        };
        match pixels {
            Some(set) => {
                for &p in set {
                    if p >= truth.len() {
                        return Err(Error::dims(format!("pixel {p} outside the image")));
                    }
                    add(p)?;
                }
            }
            None => (0..truth.len()).try_for_each(&mut add)?,
        }
        Self::from_counts(counts)
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total() as f64
    }
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)`.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Undefined("kappa of an empty confusion matrix".into()));
    }
    let nf = n as f64;
    let k = cm.classes();
    let observed = (0..k).map(|i| cm.counts[i][i]).sum::<u64>() as f64 / nf;
    let expected: f64 = (0..k)
        .map(|i| {
            let row: u64 = cm.counts[i].iter().sum();
            let col: u64 = cm.counts.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (nf * nf);
    if (1.0 - expected).abs() < 1e-15 {
        return if (observed - 1.0).abs() < 1e-15 {
            Ok(1.0)
        } else {
            Err(Error::Undefined("chance agreement is 1".into()))
        };
    }
    Ok((observed - expected) / (1.0 - expected))
}

/// Minimum-cost perfect assignment on a square cost matrix
/// (Hungarian method with potentials). Returns `assign[row] = col`.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays, index 0 is the virtual start column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assign[row_of[j] - 1] = j - 1;
        }
    }
    assign
}

/// `K_hat x K_true` co-occurrence counts of two label fields.
pub fn cooccurrence(estimate: &LabelField, truth: &LabelField) -> Result<Vec<Vec<u64>>> {
    if estimate.labels().len() != truth.labels().len() {
        return Err(Error::dims("label fields differ in size"));
    }
    let mut m = vec![vec![0u64; truth.domain_size()]; estimate.domain_size()];
    for (&a, &b) in estimate.labels().iter().zip(truth.labels()) {
        m[a as usize][b as usize] += 1;
    }
    Ok(m)
}

/// Relabeling of the estimated clusters that maximizes the number of pixels
/// agreeing with `truth`: `perm[k_hat] = k_true`. When the estimate has more
/// clusters than the truth, surplus clusters map to indices `>= K_true`.
pub fn align_clusters(estimate: &LabelField, truth: &LabelField) -> Result<Vec<usize>> {
    let co = cooccurrence(estimate, truth)?;
    let n = estimate.domain_size().max(truth.domain_size());
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| -(co.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0) as f64))
                .collect()
        })
        .collect();
    let assign = solve_assignment(&cost);
    Ok(assign[..estimate.domain_size()].to_vec())
}

/// Fraction of pixels whose relabeled estimate equals the truth.
pub fn matched_fraction(estimate: &LabelField, truth: &LabelField, perm: &[usize]) -> f64 {
    let hits = estimate
        .labels()
        .iter()
        .zip(truth.labels())
        .filter(|(&a, &b)| perm[a as usize] == b as usize)
        .count();
    hits as f64 / truth.labels().len() as f64
}
