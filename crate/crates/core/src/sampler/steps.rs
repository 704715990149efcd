//! Conditional draws of every block of the chain state.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;

use super::{ChainState, Problem};
use crate::distributions::{
    sample_categorical_log, sample_dirichlet, sample_gaussian_simplex_truncated_from, sample_inverse_gamma,
    sample_std_normal, SeedStream,
};
use crate::error::{Error, Result};
use crate::model::SweepSchedule;

/// Lower bound applied to every drawn cluster variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Lower bound on the inverse-gamma scale of the noise variance.
pub const RESIDUAL_FLOOR: f64 = 1e-300;

/// Stream tags, one per block of the sweep.
pub(crate) mod phase {
    pub const INIT: u64 = 0;
    pub const ABUNDANCE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const MEANS: u64 = 3;
    pub const VARIANCES: u64 = 4;
    pub const CLUSTER_LABELS: u64 = 5;
    pub const INTERACTION: u64 = 6;
    pub const CLASS_LABELS: u64 = 7;
}

/// Posterior precision factor of the abundances of one cluster:
/// `B_k = M^T M / s2 + diag(1 / sigma2_k)`.
pub(crate) struct AbundanceFactor {
    chol: Cholesky<f64, Dyn>,
    lower: DMatrix<f64>,
    prior_term: DVector<f64>,
}

impl AbundanceFactor {
    pub(crate) fn new(problem: &Problem, state: &ChainState, k: usize) -> Result<Self> {
        let s2 = state.noise.s2;
        let r = problem.endmembers().count();
        let mut precision = problem.gram() / s2;
        let mut prior_term = DVector::zeros(r);
        for i in 0..r {
            let inv = 1.0 / state.clusters.sigma2[(k, i)];
            precision[(i, i)] += inv;
            prior_term[i] = state.clusters.psi[(k, i)] * inv;
        }
        let chol = Cholesky::new(precision).ok_or_else(|| {
            Error::degenerate(format!(
                "abundance precision of cluster {} is not positive definite",
                k + 1
            ))
        })?;
        let lower = chol.l();
        Ok(Self {
            chol,
            lower,
            prior_term,
        })
    }

    /// Posterior mean for pixel `p`, written into `buf`.
    fn mean_into(&self, problem: &Problem, s2: f64, p: usize, buf: &mut DVector<f64>) {
        buf.copy_from(&problem.mty().column(p));
        *buf /= s2;
        *buf += &self.prior_term;
        self.chol.solve_mut(buf);
    }

    fn draw(&self, problem: &Problem, s2: f64, p: usize, rng: &mut impl Rng) -> DVector<f64> {
        let r = self.prior_term.len();
        let mut mean = DVector::zeros(r);
        self.mean_into(problem, s2, p, &mut mean);
        let mut eps = DVector::from_fn(r, |_, _| sample_std_normal(rng));
        // L^T x = eps gives x ~ N(0, B^-1)
        self.lower.tr_solve_lower_triangular_mut(&mut eps);
        mean + eps
    }
}

/// Mean and covariance of the Gaussian conditional of `a_p`.
pub fn abundance_posterior(problem: &Problem, state: &ChainState, p: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = state.z.get(p);
    let factor = AbundanceFactor::new(problem, state, k)?;
    let mut mean = DVector::zeros(problem.endmembers().count());
    factor.mean_into(problem, state.noise.s2, p, &mut mean);
    Ok((mean, factor.chol.inverse()))
}

/// Draw `a_p` from its conditional given its cluster, the cluster parameters
/// and the noise variance.
pub fn sample_abundance(problem: &Problem, state: &ChainState, p: usize, rng: &mut impl Rng) -> Result<DVector<f64>> {
    let k = state.z.get(p);
    let factor = AbundanceFactor::new(problem, state, k).map_err(|e| e.with_context(format!("pixel {p}")))?;
    Ok(factor.draw(problem, state.noise.s2, p, rng))
}

/// Redraw every abundance vector. Rows of the lattice use separate streams
/// and run in parallel.
pub fn sample_abundances(problem: &Problem, state: &mut ChainState, seeds: &SeedStream, iter: u64) -> Result<()> {
    let factors = (0..state.clusters.clusters())
        .map(|k| AbundanceFactor::new(problem, state, k))
        .collect::<Result<Vec<_>>>()?;
    let lat = *problem.lattice();
    let width = lat.width();
    let s2 = state.noise.s2;
    let z = &state.z;
    let r = problem.endmembers().count();
    let rows: Vec<Vec<f64>> = (0..lat.height())
        .into_par_iter()
        .map(|row| {
            let mut rng = seeds.rng(&[iter, phase::ABUNDANCE, row as u64]);
            let mut out = Vec::with_capacity(width * r);
            for col in 0..width {
                let p = row * width + col;
                out.extend(factors[z.get(p)].draw(problem, s2, p, &mut rng).iter());
            }
            out
        })
        .collect();
    let a = state.a.data_mut();
    let dst = a.as_mut_slice();
    for (row, values) in rows.iter().enumerate() {
        let start = row * width * r;
        dst[start..start + values.len()].copy_from_slice(values);
    }
    Ok(())
}

/// `sum_p ||y_p - M a_p||^2` computed from precomputed Gram quantities.
pub fn total_squared_residual(problem: &Problem, a: &DMatrix<f64>) -> f64 {
    let gram = problem.gram();
    let mty = problem.mty();
    // per-pixel terms in parallel, summed in a fixed order for reproducibility
    let terms: Vec<f64> = (0..a.ncols())
        .into_par_iter()
        .map(|p| {
            let ap = a.column(p);
            let quad = (gram * ap).dot(&ap);
            problem.y_norms()[p] - 2.0 * ap.dot(&mty.column(p)) + quad
        })
        .collect();
    terms.iter().sum::<f64>().max(0.0)
}

/// Shape and scale of the inverse-gamma conditional of the noise variance.
pub fn noise_variance_posterior(problem: &Problem, a: &DMatrix<f64>) -> (f64, f64) {
    let pd = (problem.pixels() * problem.bands()) as f64;
    let scale = 0.5 * total_squared_residual(problem, a);
    (1.0 + 0.5 * pd, scale.max(RESIDUAL_FLOOR))
}

pub fn sample_noise_variance(problem: &Problem, state: &ChainState, rng: &mut impl Rng) -> Result<f64> {
    let (shape, scale) = noise_variance_posterior(problem, state.a.data());
    sample_inverse_gamma(rng, shape, scale)
}

/// Per-cluster sufficient statistics of the abundances.
pub(crate) struct ClusterStats {
    pub counts: Vec<usize>,
    /// `K x R` sums of `a_p` over each cluster.
    pub sums: DMatrix<f64>,
}

pub(crate) fn cluster_stats(state: &ChainState) -> ClusterStats {
    let k = state.clusters.clusters();
    let a = state.a.data();
    let mut counts = vec![0usize; k];
    let mut sums = DMatrix::zeros(k, a.nrows());
    for (p, col) in a.column_iter().enumerate() {
        let c = state.z.get(p);
        counts[c] += 1;
        for (r, x) in col.iter().enumerate() {
            sums[(c, r)] += x;
        }
    }
    ClusterStats { counts, sums }
}

/// Shape and scale of the inverse-gamma conditional of every `sigma2[k, r]`.
pub fn cluster_variance_posteriors(state: &ChainState, xi: f64, gamma: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (k, r) = state.clusters.sigma2.shape();
    let mut shape = DMatrix::zeros(k, r);
    let mut scale = DMatrix::from_element(k, r, gamma);
    let mut counts = vec![0usize; k];
    for (p, col) in state.a.data().column_iter().enumerate() {
        let c = state.z.get(p);
        counts[c] += 1;
        for (i, x) in col.iter().enumerate() {
            let d = x - state.clusters.psi[(c, i)];
            scale[(c, i)] += 0.5 * d * d;
        }
    }
    for c in 0..k {
        for i in 0..r {
            shape[(c, i)] = 0.5 * counts[c] as f64 + xi;
        }
    }
    (shape, scale)
}

pub fn sample_cluster_variances(state: &mut ChainState, xi: f64, gamma: f64, rng: &mut impl Rng) -> Result<()> {
    let (shape, scale) = cluster_variance_posteriors(state, xi, gamma);
    for (i, v) in state.clusters.sigma2.iter_mut().enumerate() {
        *v = sample_inverse_gamma(rng, shape[i], scale[i])?.max(VARIANCE_FLOOR);
    }
    Ok(())
}

/// Redraw every cluster mean from its simplex-truncated Gaussian conditional,
/// starting the inner scans at the current value. Empty clusters draw from
/// the uniform prior on the simplex.
pub fn sample_cluster_means(state: &mut ChainState, inner_iters: usize, rng: &mut impl Rng) -> Result<()> {
    let stats = cluster_stats(state);
    let r = state.clusters.dim();
    for k in 0..state.clusters.clusters() {
        let n = stats.counts[k];
        let draw = if n == 0 {
            sample_dirichlet(rng, &vec![1.0; r])?
        } else {
            let nf = n as f64;
            let mean: Vec<f64> = (0..r).map(|i| stats.sums[(k, i)] / nf).collect();
            let var: Vec<f64> = (0..r).map(|i| state.clusters.sigma2[(k, i)] / nf).collect();
            let current: Vec<f64> = state.clusters.psi.row(k).iter().copied().collect();
            sample_gaussian_simplex_truncated_from(rng, &mean, &var, &current, inner_iters)?
        };
        for (i, x) in draw.into_iter().enumerate() {
            state.clusters.psi[(k, i)] = x;
        }
    }
    Ok(())
}

/// Log conditional weights of `z_p = k` for every `k`:
/// `log N(a_p; psi_k, Sigma_k) + log q[k, omega_p] + beta1 * #{neighbors with label k}`.
pub fn cluster_label_log_weights(state: &ChainState, p: usize, beta1: f64, out: &mut [f64]) {
    let a = state.a.data().column(p);
    let j = state.omega.get(p);
    let mut hist = vec![0u32; out.len()];
    if beta1 != 0.0 {
        state.z.neighbor_histogram(p, &mut hist);
    }
    for (k, w) in out.iter_mut().enumerate() {
        let q = state.q.q[(k, j)];
        *w = if q > 0.0 {
            state.clusters.log_density(k, a.as_slice()) + q.ln() + beta1 * f64::from(hist[k])
        } else {
            f64::NEG_INFINITY
        };
    }
}

/// Log conditional weights of `omega_p = j` for every `j`.
///
/// `log q[z_p, j] + log prior_p(j) + beta2 * #{neighbors with class j}
///  - log sum_k q[k, j] exp(beta1 * #{neighbors with cluster k})`.
/// The last term vanishes when `beta1 = 0` and is skipped.
pub fn class_label_log_weights(
    problem: &Problem,
    state: &ChainState,
    p: usize,
    beta1: f64,
    beta2: f64,
    out: &mut [f64],
) {
    let sup = problem.supervision();
    let zp = state.z.get(p);
    let mut class_hist = vec![0u32; out.len()];
    state.omega.neighbor_histogram(p, &mut class_hist);
    let mut cluster_hist = Vec::new();
    if beta1 != 0.0 {
        cluster_hist = vec![0u32; state.clusters.clusters()];
        state.z.neighbor_histogram(p, &mut cluster_hist);
    }
    for (j, w) in out.iter_mut().enumerate() {
        let q = state.q.q[(zp, j)];
        let prior = sup.log_prior_class(p, j);
        if q <= 0.0 || prior == f64::NEG_INFINITY {
            *w = f64::NEG_INFINITY;
            continue;
        }
        let mut value = q.ln() + prior + beta2 * f64::from(class_hist[j]);
        if beta1 != 0.0 {
            let denom: f64 = cluster_hist
                .iter()
                .enumerate()
                .map(|(k, &n)| state.q.q[(k, j)] * (beta1 * f64::from(n)).exp())
                .sum();
            value -= denom.ln();
        }
        *w = value;
    }
}

/// Run a single-site sweep over a label field. `weights` fills the log
/// conditional weights of pixel `p` given the current state; `apply` writes
/// the drawn label.
#[allow(clippy::too_many_arguments)]
fn label_sweep<W, A>(
    state: &mut ChainState,
    lat: &crate::lattice::Lattice,
    domain: usize,
    schedule: SweepSchedule,
    seeds: &SeedStream,
    tags: [u64; 2],
    weights: W,
    mut apply: A,
) -> Result<()>
where
    W: Fn(&ChainState, usize, &mut [f64]) + Sync,
    A: FnMut(&mut ChainState, usize, usize),
{
    let [iter, tag] = tags;
    let draw = |state: &ChainState, p: usize, rng: &mut crate::distributions::ChainRng, buf: &mut [f64]| {
        weights(state, p, buf);
        sample_categorical_log(rng, buf)
            .map_err(|_| Error::degenerate(format!("every label has zero conditional probability at pixel {p}")))
    };
    match schedule {
        SweepSchedule::Raster => {
            let mut rng = seeds.rng(&[iter, tag]);
            let mut buf = vec![0.0; domain];
            for p in 0..lat.len() {
                let v = draw(state, p, &mut rng, &mut buf)?;
                apply(state, p, v);
            }
        }
        SweepSchedule::Checkerboard => {
            let width = lat.width();
            for color in 0..2usize {
                let snapshot: &ChainState = state;
                let updates: Vec<Vec<(usize, usize)>> = (0..lat.height())
                    .into_par_iter()
                    .map(|row| {
                        let mut rng = seeds.rng(&[iter, tag, color as u64, row as u64]);
                        let mut buf = vec![0.0; domain];
                        let first = (row + color) % 2;
                        (first..width)
                            .step_by(2)
                            .map(|col| {
                                let p = row * width + col;
                                draw(snapshot, p, &mut rng, &mut buf).map(|v| (p, v))
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (p, v) in updates.into_iter().flatten() {
                    apply(state, p, v);
                }
            }
        }
    }
    Ok(())
}

pub fn sample_cluster_labels(
    problem: &Problem,
    state: &mut ChainState,
    schedule: SweepSchedule,
    seeds: &SeedStream,
    iter: u64,
) -> Result<()> {
    let beta1 = state.effective_beta1;
    let k = state.clusters.clusters();
    label_sweep(
        state,
        problem.lattice(),
        k,
        schedule,
        seeds,
        [iter, phase::CLUSTER_LABELS],
        |s, p, buf| cluster_label_log_weights(s, p, beta1, buf),
        |s, p, v| s.z.set(p, v),
    )
}

pub fn sample_class_labels(
    problem: &Problem,
    state: &mut ChainState,
    beta2: f64,
    schedule: SweepSchedule,
    seeds: &SeedStream,
    iter: u64,
) -> Result<()> {
    let beta1 = state.effective_beta1;
    let j = problem.supervision().num_classes();
    label_sweep(
        state,
        problem.lattice(),
        j,
        schedule,
        seeds,
        [iter, phase::CLASS_LABELS],
        |s, p, buf| class_label_log_weights(problem, s, p, beta1, beta2, buf),
        |s, p, v| s.omega.set(p, v),
    )
}

/// `K x J` co-occurrence counts `n[k, j] = #{p : z_p = k, omega_p = j}`.
pub fn joint_counts(state: &ChainState) -> DMatrix<usize> {
    let mut n = DMatrix::zeros(state.z.domain_size(), state.omega.domain_size());
    for (&k, &j) in state.z.labels().iter().zip(state.omega.labels()) {
        n[(k as usize, j as usize)] += 1;
    }
    n
}

/// Redraw each column `q_j ~ Dir(n[., j] + zeta)`.
pub fn sample_interaction_matrix(state: &mut ChainState, zeta: &[f64], rng: &mut impl Rng) -> Result<()> {
    let counts = joint_counts(state);
    for j in 0..counts.ncols() {
        let alpha: Vec<f64> = zeta
            .iter()
            .enumerate()
            .map(|(k, z)| counts[(k, j)] as f64 + z)
            .collect();
        let col = sample_dirichlet(rng, &alpha)?;
        for (k, x) in col.into_iter().enumerate() {
            state.q.q[(k, j)] = x;
        }
    }
    Ok(())
}
