//! Seeded sampling primitives used by the Gibbs sampler and the scene generator.
//!
//! All randomness flows from [`SeedStream`], which wraps a 64-bit master seed and
//! hands out ChaCha8 generators. A generator for a given stream id is built as
//! `ChaCha8Rng::seed_from_u64(seed)` followed by `set_stream(id)`, where `id` is
//! the splitmix64 hash chain of a tuple of integers (iteration, phase, chunk, ...).
//! Distinct tuples therefore give independent, reproducible streams regardless
//! of how many worker threads consume them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// The generator used everywhere in the crate.
pub type ChainRng = ChaCha8Rng;

/// Master seed from which independent generator streams are derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hash a tuple of ids into one 64-bit value.
pub fn hash_ids(ids: &[u64]) -> u64 {
    ids.iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &id| splitmix64(acc ^ splitmix64(id)))
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for the stream identified by `ids`.
    pub fn rng(&self, ids: &[u64]) -> ChainRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(hash_ids(ids));
        rng
    }

    /// A new master seed derived from this one, e.g. one per trial.
    pub fn derive_seed(&self, ids: &[u64]) -> u64 {
        splitmix64(self.seed ^ hash_ids(ids))
    }
}

fn gamma_unit(rng: &mut impl Rng, shape: f64) -> f64 {
    // shape > 0 is checked by the callers
    Gamma::new(shape, 1.0).expect("positive shape").sample(rng)
}

/// Draw from `Dir(alpha)` by normalizing independent `Gamma(alpha_k, 1)` draws.
pub fn sample_dirichlet(rng: &mut impl Rng, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::invalid_param("Dirichlet needs at least one component"));
    }
    if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::invalid_param(format!(
            "Dirichlet parameters must be positive, got {a}"
        )));
    }
    if alpha.len() == 1 {
        return Ok(vec![1.0]);
    }
    let mut draws: Vec<f64> = alpha.iter().map(|&a| gamma_unit(rng, a)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|x| *x /= total);
    } else {
        // every gamma draw underflowed (tiny alphas): put the mass on the largest alpha
        let best = argmax(alpha);
        draws
            .iter_mut()
            .enumerate()
            .for_each(|(k, x)| *x = f64::from(k == best));
    }
    Ok(draws)
}

/// Draw from the inverse-gamma distribution with density
/// `x^(-shape-1) exp(-scale / x)`, i.e. `scale / Gamma(shape, 1)`.
pub fn sample_inverse_gamma(rng: &mut impl Rng, shape: f64, scale: f64) -> Result<f64> {
    if !(shape.is_finite() && shape > 0.0 && scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid_param(format!(
            "inverse-gamma needs positive shape and scale, got ({shape}, {scale})"
        )));
    }
    let g = gamma_unit(rng, shape);
    Ok(scale / g.max(f64::MIN_POSITIVE))
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Draw an index with probability proportional to `exp(log_weights[k])`.
///
/// Consumes exactly one uniform variate per call.
pub fn sample_categorical_log(rng: &mut impl Rng, log_weights: &[f64]) -> Result<usize> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::invalid_param("categorical needs at least one finite log-weight"));
    }
    let total: f64 = log_weights.iter().map(|w| (w - max).exp()).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, w) in log_weights.iter().enumerate() {
        let weight = (w - max).exp();
        if weight > 0.0 {
            acc += weight;
            last = k;
            if u < acc {
                return Ok(k);
            }
        }
    }
    Ok(last)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_quantile(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

/// Tail threshold beyond which inverse-CDF sampling loses precision.
const TAIL_CUTOFF: f64 = 6.0;

/// Standard normal restricted to `[lo, hi]` with `lo >= TAIL_CUTOFF`.
/// Robert (1995) translated-exponential rejection.
fn std_normal_upper_tail(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let rate = 0.5 * (lo + (lo * lo + 4.0).sqrt());
    loop {
        // 1 - u lies in (0, 1]
        let e = -(1.0 - rng.random::<f64>()).ln();
        let x = lo + e / rate;
        if x > hi {
            continue;
        }
        let accept = (-0.5 * (x - rate).powi(2)).exp();
        if rng.random::<f64>() <= accept {
            return x;
        }
    }
}

/// Standard normal truncated to `[lo, hi]`.
fn std_normal_truncated(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return lo;
    }
    // reflect so that the interval does not sit entirely in the upper tail
    if lo > 0.0 {
        return -std_normal_truncated(rng, -hi, -lo);
    }
    // now lo <= 0
    if hi < -TAIL_CUTOFF {
        return -std_normal_upper_tail(rng, -hi, -lo);
    }
    if hi - lo < 1e-9 {
        return lo + (hi - lo) * rng.random::<f64>();
    }
    let cl = std_normal_cdf(lo);
    let ch = std_normal_cdf(hi);
    let u = cl + (ch - cl) * rng.random::<f64>();
    std_normal_quantile(u).clamp(lo, hi)
}

/// Draw from `N(mean, sd^2)` truncated to `[lo, hi]`.
///
/// Inverse-CDF in the bulk (evaluated on the lower half of the CDF for
/// precision), exponential rejection when the whole interval lies more than
/// six standard deviations in a tail.
pub fn sample_truncated_normal(rng: &mut impl Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo <= hi);
    if sd <= 0.0 || !sd.is_finite() {
        return mean.clamp(lo, hi);
    }
    let z = std_normal_truncated(rng, (lo - mean) / sd, (hi - mean) / sd);
    (mean + sd * z).clamp(lo, hi)
}

/// Euclidean projection of `v` onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, x) in u.iter().enumerate() {
        css += x;
        let t = (css - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    fix_last_coordinate(&mut out);
    out
}

/// Recompute the last coordinate as one minus the others, renormalizing the
/// free coordinates first if they overshoot.
fn fix_last_coordinate(x: &mut [f64]) {
    let n = x.len();
    if n == 0 {
        return;
    }
    let head: f64 = x[..n - 1].iter().sum();
    if head > 1.0 {
        x[..n - 1].iter_mut().for_each(|v| *v /= head);
        x[n - 1] = 0.0;
    } else {
        x[n - 1] = 1.0 - head;
    }
}

/// Gaussian with diagonal covariance `var` restricted to the probability
/// simplex, sampled by `inner_iters` Gibbs scans over the first `R - 1`
/// coordinates starting from the projection of `mean`. The last coordinate is
/// always `1 - sum(others)`.
pub fn sample_gaussian_simplex_truncated(
    rng: &mut impl Rng,
    mean: &[f64],
    var: &[f64],
    inner_iters: usize,
) -> Result<Vec<f64>> {
    let init = project_to_simplex(mean);
    sample_gaussian_simplex_truncated_from(rng, mean, var, &init, inner_iters)
}

/// As [`sample_gaussian_simplex_truncated`] but starting the scans at `init`,
/// which must lie on the simplex. Used inside the outer chain with the current
/// value as `init`.
pub fn sample_gaussian_simplex_truncated_from(
    rng: &mut impl Rng,
    mean: &[f64],
    var: &[f64],
    init: &[f64],
    inner_iters: usize,
) -> Result<Vec<f64>> {
    let r = mean.len();
    if var.len() != r || init.len() != r || r == 0 {
        return Err(Error::invalid_param("mean, variance and init lengths differ"));
    }
    if let Some(v) = var.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::invalid_param(format!("variances must be positive, got {v}")));
    }
    if r == 1 {
        return Ok(vec![1.0]);
    }
    let mut x = init.to_vec();
    fix_last_coordinate(&mut x);
    let last = r - 1;
    let (m_last, v_last) = (mean[last], var[last]);
    for _ in 0..inner_iters.max(1) {
        for i in 0..last {
            // sum of the other free coordinates
            let rest: f64 = x[..last].iter().sum::<f64>() - x[i];
            let room = (1.0 - rest).max(0.0);
            let prec = 1.0 / var[i] + 1.0 / v_last;
            let cond_mean = (mean[i] / var[i] + (1.0 - rest - m_last) / v_last) / prec;
            x[i] = sample_truncated_normal(rng, cond_mean, prec.recip().sqrt(), 0.0, room);
            x[last] = (1.0 - rest - x[i]).max(0.0);
        }
    }
    fix_last_coordinate(&mut x);
    Ok(x)
}

/// Standard normal draw.
pub fn sample_std_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChainRng {
        SeedStream::new(seed).rng(&[0])
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = SeedStream::new(42);
        let a: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(s.rng(&[1, 2]), |r, _| Some(r.random()))
            .collect();
        let b: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(s.rng(&[1, 2]), |r, _| Some(r.random()))
            .collect();
        let c: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(s.rng(&[2, 1]), |r, _| Some(r.random()))
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn symmetric_dirichlet_mean_is_uniform() {
        let mut r = rng(1);
        let k = 4;
        let n = 100_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_dirichlet(&mut r, &[1.0; 4]).unwrap()).collect();
        for d in &draws {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d.iter().all(|x| *x >= 0.0));
        }
        for j in 0..k {
            let col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            let (m, se) = mean_and_se(&col);
            assert!((m - 0.25).abs() < 3.0 * se, "component {j}: {m} vs 0.25 (se {se})");
        }
    }

    #[test]
    fn count_dirichlet_mean_is_biased_empirical_frequency() {
        let counts = [5.0, 0.0, 2.0];
        let alpha: Vec<f64> = counts.iter().map(|n| n + 1.0).collect();
        let total: f64 = counts.iter().sum::<f64>() + counts.len() as f64;
        let mut r = rng(2);
        let draws: Vec<Vec<f64>> = (0..100_000)
            .map(|_| sample_dirichlet(&mut r, &alpha).unwrap())
            .collect();
        for (j, n) in counts.iter().enumerate() {
            let col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            let (m, se) = mean_and_se(&col);
            let expected = (n + 1.0) / total;
            assert!((m - expected).abs() < 3.0 * se, "{m} vs {expected}");
        }
    }

    #[test]
    fn dirichlet_edge_cases() {
        let mut r = rng(3);
        assert_eq!(sample_dirichlet(&mut r, &[5.0]).unwrap(), vec![1.0]);
        assert!(sample_dirichlet(&mut r, &[1.0, 0.0]).is_err());
        assert!(sample_dirichlet(&mut r, &[1.0, -2.0]).is_err());
        // shape < 1 must work
        let d = sample_dirichlet(&mut r, &[0.05, 0.05, 0.05]).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_gamma_means() {
        for (shape, scale, expected) in [(3.0, 2.0, 1.0), (2.0, 2.0, 2.0)] {
            let mut r = rng(4);
            let xs: Vec<f64> = (0..100_000)
                .map(|_| sample_inverse_gamma(&mut r, shape, scale).unwrap())
                .collect();
            assert!(xs.iter().all(|x| *x > 0.0));
            // IG(2, .) has infinite variance, so use the sample-based standard
            // error only where it exists and a relative bound otherwise
            let (m, se) = mean_and_se(&xs);
            if shape > 2.0 {
                assert!((m - expected).abs() < 3.0 * se, "{m} vs {expected}");
            } else {
                assert!((m - expected).abs() < 0.05 * expected, "{m} vs {expected}");
            }
        }
    }

    #[test]
    fn inverse_gamma_rejects_bad_parameters() {
        let mut r = rng(5);
        assert!(sample_inverse_gamma(&mut r, 0.0, 1.0).is_err());
        assert!(sample_inverse_gamma(&mut r, 1.0, -1.0).is_err());
    }

    #[test]
    fn categorical_edge_cases() {
        let mut r = rng(6);
        for _ in 0..1000 {
            assert_eq!(sample_categorical_log(&mut r, &[0.0, f64::NEG_INFINITY]).unwrap(), 0);
        }
        assert!(sample_categorical_log(&mut r, &[f64::NEG_INFINITY; 3]).is_err());
        assert!(sample_categorical_log(&mut r, &[]).is_err());
    }

    #[test]
    fn categorical_symmetry() {
        let mut r = rng(7);
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| sample_categorical_log(&mut r, &[-3.0, -3.0]).unwrap() == 1)
            .count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ones - 0.5 * n as f64).abs() < 3.0 * sigma);
    }

    #[test]
    fn categorical_shift_invariance() {
        let w = [0.0, -1.0, 2.0, -5.0];
        let shifted: Vec<f64> = w.iter().map(|x| x + 1000.0).collect();
        let mut a = rng(8);
        let mut b = rng(8);
        for _ in 0..10_000 {
            assert_eq!(
                sample_categorical_log(&mut a, &w).unwrap(),
                sample_categorical_log(&mut b, &shifted).unwrap()
            );
        }
    }

    #[test]
    fn truncated_normal_stays_in_bounds_in_tails() {
        let mut r = rng(9);
        for _ in 0..10_000 {
            let x = sample_truncated_normal(&mut r, 0.0, 1.0, 9.0, 9.5);
            assert!((9.0..=9.5).contains(&x));
            let y = sample_truncated_normal(&mut r, 0.0, 1.0, -20.0, -12.0);
            assert!((-20.0..=-12.0).contains(&y));
            let z = sample_truncated_normal(&mut r, 3.0, 0.01, 0.0, 1.0);
            assert!((0.0..=1.0).contains(&z));
        }
        // far upper tail concentrates at the lower bound
        let m: f64 = (0..10_000)
            .map(|_| sample_truncated_normal(&mut r, 0.0, 1.0, 10.0, f64::INFINITY))
            .sum::<f64>()
            / 10_000.0;
        // E[X | X > a] ~ a + 1/a
        assert!((m - 10.098).abs() < 0.01, "{m}");
    }

    #[test]
    fn simplex_sampler_singleton() {
        let mut r = rng(10);
        assert_eq!(
            sample_gaussian_simplex_truncated(&mut r, &[0.3], &[1.0], 5).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn simplex_sampler_concentrates_with_tiny_variance() {
        let mut r = rng(11);
        let center = [1.0 / 3.0; 3];
        for _ in 0..100 {
            let x = sample_gaussian_simplex_truncated(&mut r, &center, &[1e-8; 3], 5).unwrap();
            assert!(x.iter().zip(&center).all(|(a, b)| (a - b).abs() < 1e-3), "{x:?}");
        }
    }

    #[test]
    fn simplex_sampler_outputs_are_on_simplex() {
        let mut r = rng(12);
        for _ in 0..2000 {
            let x =
                sample_gaussian_simplex_truncated(&mut r, &[0.9, -0.4, 0.7, 0.1], &[0.5, 0.1, 2.0, 0.01], 3).unwrap();
            assert!(x.iter().all(|v| *v >= 0.0));
            assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(sample_gaussian_simplex_truncated(&mut r, &[0.5, 0.5], &[1.0, 0.0], 3).is_err());
    }

    #[test]
    fn projection_onto_simplex() {
        assert_eq!(project_to_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
        let p = project_to_simplex(&[2.0, 0.0, 0.0]);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = project_to_simplex(&[0.5, 0.5, 0.5]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
    }

    /// Kolmogorov-Smirnov statistic of `samples` against `cdf`.
    fn ks_statistic(mut samples: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        samples.sort_by(f64::total_cmp);
        let n = samples.len() as f64;
        samples
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    /// 1% critical value of the one-sample KS statistic.
    fn ks_critical(n: usize) -> f64 {
        1.628 / (n as f64).sqrt()
    }

    fn truncated_cdf(mean: f64, sd: f64, lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(mean, sd).unwrap();
        let (cl, ch) = (n.cdf(lo), n.cdf(hi));
        move |x| (n.cdf(x) - cl) / (ch - cl)
    }

    #[test]
    fn truncated_normal_ks() {
        let cases = [
            (0.0, 1.0, -1.0, 2.0),
            (0.3, 0.1, 0.0, 1.0),
            (2.0, 0.5, 0.0, 1.0),
            (-0.5, 0.2, 0.0, 1.0),
            (0.0, 1.0, 3.0, 5.0),
        ];
        for (i, &(m, sd, lo, hi)) in cases.iter().enumerate() {
            let mut rng = SeedStream::new(7).rng(&[i as u64]);
            let n = 20_000;
            let draws: Vec<f64> = (0..n)
                .map(|_| sample_truncated_normal(&mut rng, m, sd, lo, hi))
                .collect();
            assert!(draws.iter().all(|x| (lo..=hi).contains(x)));
            let d = ks_statistic(draws, truncated_cdf(m, sd, lo, hi));
            assert!(d < ks_critical(n), "case {i}: D = {d}");
        }
    }

    #[test]
    fn far_tail_truncated_normal_ks() {
        // entirely beyond the cutoff, so the exponential rejection path is used
        use statrs::function::erf::erfc;
        let (lo, hi) = (8.0, 9.0);
        let tail = |x: f64| 0.5 * erfc(x / std::f64::consts::SQRT_2);
        let cdf = move |x: f64| (tail(lo) - tail(x)) / (tail(lo) - tail(hi));
        let mut rng = SeedStream::new(32).rng(&[0]);
        let n = 20_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_truncated_normal(&mut rng, 0.0, 1.0, lo, hi))
            .collect();
        let d = ks_statistic(draws.clone(), cdf);
        assert!(d < ks_critical(n), "D = {d}");
        let neg: Vec<f64> = (0..n)
            .map(|_| -sample_truncated_normal(&mut rng, 0.0, 1.0, -hi, -lo))
            .collect();
        assert!(ks_statistic(neg, cdf) < ks_critical(n));
    }

    #[test]
    fn inverse_gamma_ks_via_gamma_duality() {
        use statrs::distribution::{ContinuousCDF, Gamma as GammaDist};
        for (i, &(shape, scale)) in [(1.5, 1.0), (3.0, 0.1), (52.0, 7.5)].iter().enumerate() {
            let mut rng = SeedStream::new(7).rng(&[100 + i as u64]);
            let n = 20_000;
            // x ~ IG(shape, scale)  <=>  scale / x ~ Gamma(shape, 1)
            let draws: Vec<f64> = (0..n)
                .map(|_| scale / sample_inverse_gamma(&mut rng, shape, scale).unwrap())
                .collect();
            let g = GammaDist::new(shape, 1.0).unwrap();
            let d = ks_statistic(draws, |x| g.cdf(x));
            assert!(d < ks_critical(n), "IG({shape}, {scale}): D = {d}");
        }
    }

    #[test]
    fn simplex_gaussian_two_dimensional_ks() {
        // on the 1-simplex the first coordinate is a 1-D normal with combined
        // precision, truncated to [0, 1]
        let mean = [0.7, 0.1];
        let var = [0.04, 0.09];
        let prec = 1.0 / var[0] + 1.0 / var[1];
        let m = (mean[0] / var[0] + (1.0 - mean[1]) / var[1]) / prec;
        let cdf = truncated_cdf(m, prec.recip().sqrt(), 0.0, 1.0);
        let mut rng = SeedStream::new(34).rng(&[0]);
        let n = 20_000;
        let mut current = vec![0.5, 0.5];
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            current = sample_gaussian_simplex_truncated_from(&mut rng, &mean, &var, &current, 1).unwrap();
            assert!((current[0] + current[1] - 1.0).abs() < 1e-12);
            draws.push(current[0]);
        }
        let d = ks_statistic(draws, cdf);
        assert!(d < ks_critical(n), "D = {d}");
    }
}
