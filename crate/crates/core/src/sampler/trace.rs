use nalgebra::DMatrix;

use super::ChainState;
use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::model::{AbundanceMatrix, LabelField};

/// Running sums and label counts over the recorded (post-burn-in) sweeps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub a_sum: DMatrix<f64>,
    pub s2_sum: f64,
    pub psi_sum: DMatrix<f64>,
    pub sigma2_sum: DMatrix<f64>,
    pub q_sum: DMatrix<f64>,
    /// `K x P` counts of each cluster label per pixel.
    pub z_counts: DMatrix<u32>,
    /// `J x P` counts of each class label per pixel.
    pub omega_counts: DMatrix<u32>,
    pub n_recorded: usize,
    /// Sequence of noise variances, one per recorded sweep.
    pub s2_samples: Vec<f64>,
}

/// Posterior-mean and marginal-mode estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimates {
    pub abundances: AbundanceMatrix,
    pub s2: f64,
    pub psi: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub z: LabelField,
    pub omega: LabelField,
    /// `J x P` fraction of recorded sweeps in which pixel `p` had class `j`.
    pub omega_freq: DMatrix<f64>,
}

fn mode_per_column(counts: &DMatrix<u32>) -> Vec<u32> {
    counts
        .column_iter()
        .map(|c| {
            // first maximum wins on ties
            let mut best = 0;
            for (i, &n) in c.iter().enumerate() {
                if n > c[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

impl Trace {
    pub fn new(state: &ChainState) -> Self {
        let (r, p) = state.a.data().shape();
        let (k, _) = state.clusters.psi.shape();
        let j = state.q.q.ncols();
        Self {
            a_sum: DMatrix::zeros(r, p),
            s2_sum: 0.0,
            psi_sum: DMatrix::zeros(k, r),
            sigma2_sum: DMatrix::zeros(k, r),
            q_sum: DMatrix::zeros(k, j),
            z_counts: DMatrix::zeros(k, p),
            omega_counts: DMatrix::zeros(j, p),
            n_recorded: 0,
            s2_samples: Vec::new(),
        }
    }

    pub fn record(&mut self, state: &ChainState) {
        self.a_sum += state.a.data();
        self.s2_sum += state.noise.s2;
        self.psi_sum += &state.clusters.psi;
        self.sigma2_sum += &state.clusters.sigma2;
        self.q_sum += &state.q.q;
        for (p, &k) in state.z.labels().iter().enumerate() {
            self.z_counts[(k as usize, p)] += 1;
        }
        for (p, &j) in state.omega.labels().iter().enumerate() {
            self.omega_counts[(j as usize, p)] += 1;
        }
        self.s2_samples.push(state.noise.s2);
        self.n_recorded += 1;
    }

    pub fn estimates(&self, lattice: &Lattice) -> Result<Estimates> {
        if self.n_recorded == 0 {
            return Err(Error::config("no recorded iterations"));
        }
        let n = self.n_recorded as f64;
        let k = self.z_counts.nrows();
        let j = self.omega_counts.nrows();
        Ok(Estimates {
            abundances: AbundanceMatrix::new(&self.a_sum / n)?,
            s2: self.s2_sum / n,
            psi: &self.psi_sum / n,
            sigma2: &self.sigma2_sum / n,
            q: &self.q_sum / n,
            z: LabelField::new(mode_per_column(&self.z_counts), k, *lattice)?,
            omega: LabelField::new(mode_per_column(&self.omega_counts), j, *lattice)?,
            omega_freq: self.omega_counts.map(|c| f64::from(c) / n),
        })
    }
}
