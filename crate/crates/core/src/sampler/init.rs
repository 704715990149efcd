use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::steps::phase;
use super::{ChainState, Problem};
use crate::distributions::{project_to_simplex, sample_categorical_log, sample_dirichlet, SeedStream};
use crate::error::{Error, Result};
use crate::model::{AbundanceMatrix, ClusterParams, InteractionMatrix, LabelField, ModelConfig, NoiseModel};

const INIT_VARIANCE_FLOOR: f64 = 1e-6;
const KMEANS_MAX_ITERS: usize = 50;
const KMEANS_RESTARTS: usize = 20;

/// Column-wise ridge least-squares abundances clipped to `[0, 1]`.
pub fn ridge_abundances(problem: &Problem) -> Result<DMatrix<f64>> {
    let r = problem.endmembers().count();
    let mut reg = problem.gram().clone();
    let lambda = 1e-6 * reg.trace() / r as f64;
    for i in 0..r {
        reg[(i, i)] += lambda;
    }
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::degenerate("endmember Gram matrix is singular"))?;
    let mut a = chol.solve(problem.mty());
    a.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    Ok(a)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means with k-means++ seeding on the columns of `points`, keeping the
/// lowest-inertia result over several restarts. Returns the cluster of every
/// column.
pub fn kmeans_plus_plus(points: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = points.ncols();
    if k == 0 || k > n {
        return Err(Error::config(format!("cannot form {k} clusters from {n} points")));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (inertia, assign) = kmeans_once(points, k, rng)?;
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    Ok(best.map(|(_, a)| a).unwrap_or_default())
}

fn kmeans_once(points: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> Result<(f64, Vec<usize>)> {
    let (dim, n) = points.shape();
    let col = |i: usize| points.column(i);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(col(rng.random_range(0..n)).iter().copied().collect());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(col(i).as_slice(), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let logw: Vec<f64> = d2.iter().map(|d| d.ln()).collect();
            sample_categorical_log(rng, &logw)?
        } else {
            rng.random_range(0..n)
        };
        let c: Vec<f64> = col(next).iter().copied().collect();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(col(i).as_slice(), &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let x = col(i);
            let best = (0..k)
                .map(|c| (c, sq_dist(x.as_slice(), &centers[c])))
                .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
                .0;
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        update_centers(points, &assign, &mut centers, dim);
    }
    let inertia = assign
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(col(i).as_slice(), &centers[c]))
        .sum();
    Ok((inertia, assign))
}

fn update_centers(points: &DMatrix<f64>, assign: &[usize], centers: &mut [Vec<f64>], dim: usize) {
    let k = centers.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(points.column(i).iter()) {
            *s += x;
        }
    }
    for c in 0..k {
        // an emptied cluster keeps its previous center
        if counts[c] > 0 {
            centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
}

/// Starting point of the chain.
///
/// Abundances from a clipped ridge fit, noise variance from its residuals,
/// clusters from k-means++ on the abundances, cluster means projected onto the
/// simplex, variances from within-cluster spread, interaction columns drawn
/// from their prior, class labels set to the expert labels on the training set
/// and drawn from the class proportions elsewhere.
pub fn initialize_state(problem: &Problem, config: &ModelConfig, seeds: &SeedStream) -> Result<ChainState> {
    problem.check_config(config)?;
    let mut rng = seeds.rng(&[u64::MAX, phase::INIT]);
    let lat = *problem.lattice();
    let (k, j, r) = (config.k, config.j, config.r);
    let n = problem.pixels();

    let a = ridge_abundances(problem)?;
    let rss = super::total_squared_residual(problem, &a);
    let s2 = (rss / (n * problem.bands()) as f64).max(super::VARIANCE_FLOOR);

    let assign = kmeans_plus_plus(&a, k, &mut rng)?;
    let mut counts = vec![0usize; k];
    let mut sums = DMatrix::<f64>::zeros(k, r);
    for (p, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for i in 0..r {
            sums[(c, i)] += a[(i, p)];
        }
    }
    let overall: DVector<f64> = a.column_mean();
    let mut psi = DMatrix::zeros(k, r);
    let mut means = DMatrix::zeros(k, r);
    for c in 0..k {
        let m: Vec<f64> = if counts[c] > 0 {
            (0..r).map(|i| sums[(c, i)] / counts[c] as f64).collect()
        } else {
            overall.iter().copied().collect()
        };
        for (i, x) in project_to_simplex(&m).into_iter().enumerate() {
            psi[(c, i)] = x;
        }
        for (i, x) in m.into_iter().enumerate() {
            means[(c, i)] = x;
        }
    }
    let mut sigma2 = DMatrix::zeros(k, r);
    for (p, &c) in assign.iter().enumerate() {
        for i in 0..r {
            sigma2[(c, i)] += (a[(i, p)] - means[(c, i)]).powi(2);
        }
    }
    let overall_var: Vec<f64> = (0..r)
        .map(|i| a.row(i).iter().map(|x| (x - overall[i]).powi(2)).sum::<f64>() / n as f64)
        .collect();
    for c in 0..k {
        for i in 0..r {
            let v = if counts[c] > 0 {
                sigma2[(c, i)] / counts[c] as f64
            } else {
                overall_var[i]
            };
            sigma2[(c, i)] = v.max(INIT_VARIANCE_FLOOR);
        }
    }

    let zeta = config.zeta();
    let mut q = DMatrix::zeros(k, j);
    for jj in 0..j {
        for (c, x) in sample_dirichlet(&mut rng, &zeta)?.into_iter().enumerate() {
            q[(c, jj)] = x;
        }
    }

    let sup = problem.supervision();
    let log_pi: Vec<f64> = sup.pi().iter().map(|x| x.ln()).collect();
    let mut omega = Vec::with_capacity(n);
    for p in 0..n {
        let label = match sup.label_of(p) {
            Some((c, _)) => c,
            None => sample_categorical_log(&mut rng, &log_pi)?,
        };
        omega.push(label as u32);
    }

    Ok(ChainState {
        a: AbundanceMatrix::new(a)?,
        noise: NoiseModel::new(s2)?,
        clusters: ClusterParams::new(psi, sigma2)?,
        z: LabelField::new(assign.into_iter().map(|c| c as u32).collect(), k, lat)?,
        q: InteractionMatrix::new(q)?,
        omega: LabelField::new(omega, j, lat)?,
        iteration: 0,
        effective_beta1: config.beta1,
    })
}
