//! Domain types of the hierarchical model and the prior terms evaluated on them.
//!
//! Matrices use `nalgebra::DMatrix` (column-major), so the spectrum of pixel `p`
//! is the contiguous column `p` of the observation matrix. Labels are 0-based
//! here; files store them 1-based (see [`crate::io`]).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Lattice;

const SIMPLEX_TOL: f64 = 1e-9;

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// `d x P` pixel spectra.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationMatrix {
    data: DMatrix<f64>,
    lattice: Lattice,
}

impl ObservationMatrix {
    pub fn new(data: DMatrix<f64>, lattice: Lattice) -> Result<Self> {
        if data.ncols() != lattice.len() {
            return Err(Error::dims(format!(
                "observation has {} pixels, lattice has {}",
                data.ncols(),
                lattice.len()
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::dims("observation has no spectral bands"));
        }
        if !all_finite(&data) {
            return Err(Error::invalid_param("observation contains non-finite values"));
        }
        Ok(Self { data, lattice })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn bands(&self) -> usize {
        self.data.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.data.ncols()
    }
}

/// `d x R` endmember signatures.
#[derive(Clone, Debug, PartialEq)]
pub struct EndmemberMatrix {
    data: DMatrix<f64>,
}

impl EndmemberMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        let (d, r) = data.shape();
        if r == 0 || r > d {
            return Err(Error::dims(format!("need 1 <= R <= d, got R = {r}, d = {d}")));
        }
        if !all_finite(&data) {
            return Err(Error::invalid_param("endmembers contain non-finite values"));
        }
        if let Some(c) = (0..r).find(|&c| data.column(c).iter().all(|x| *x == 0.0)) {
            return Err(Error::invalid_param(format!("endmember {c} is identically zero")));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn bands(&self) -> usize {
        self.data.nrows()
    }

    pub fn count(&self) -> usize {
        self.data.ncols()
    }
}

/// `R x P` abundance vectors, one column per pixel. Only finiteness is
/// enforced; the simplex constraint lives on the cluster means.
#[derive(Clone, Debug, PartialEq)]
pub struct AbundanceMatrix {
    data: DMatrix<f64>,
}

impl AbundanceMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if !all_finite(&data) {
            return Err(Error::invalid_param("abundances contain non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    /// Noise-free observation `M A`.
    pub fn mix(&self, endmembers: &EndmemberMatrix) -> DMatrix<f64> {
        endmembers.data() * &self.data
    }
}

/// White Gaussian noise variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub s2: f64,
}

impl NoiseModel {
    pub fn new(s2: f64) -> Result<Self> {
        if !(s2.is_finite() && s2 > 0.0) {
            return Err(Error::invalid_param(format!(
                "noise variance must be positive, got {s2}"
            )));
        }
        Ok(Self { s2 })
    }
}

/// Per-cluster Gaussian parameters: mean `psi` (rows on the simplex) and
/// diagonal variances `sigma2`, both `K x R`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterParams {
    pub psi: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
}

impl ClusterParams {
    pub fn new(psi: DMatrix<f64>, sigma2: DMatrix<f64>) -> Result<Self> {
        let params = Self { psi, sigma2 };
        params.validate().map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(params)
    }

    pub fn clusters(&self) -> usize {
        self.psi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.psi.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.psi.shape() != self.sigma2.shape() {
            return Err(Error::Invariant("psi and sigma2 shapes differ".into()));
        }
        for (k, row) in self.psi.row_iter().enumerate() {
            if row.iter().any(|x| x.is_nan() || *x < 0.0) || (row.sum() - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Invariant(format!("cluster mean {k} is off the simplex: {row}")));
            }
        }
        if let Some(v) = self.sigma2.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Invariant(format!("non-positive cluster variance {v}")));
        }
        Ok(())
    }

    /// `log N(a; psi_k, diag(sigma2_k))`.
    pub fn log_density(&self, k: usize, a: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (r, x) in a.iter().enumerate() {
            let v = self.sigma2[(k, r)];
            let diff = x - self.psi[(k, r)];
            acc -= 0.5 * (diff * diff / v + (std::f64::consts::TAU * v).ln());
        }
        acc
    }
}

/// Discrete labels on a lattice, stored 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelField {
    labels: Vec<u32>,
    domain_size: usize,
    lattice: Lattice,
}

impl LabelField {
    pub fn new(labels: Vec<u32>, domain_size: usize, lattice: Lattice) -> Result<Self> {
        let field = Self {
            labels,
            domain_size,
            lattice,
        };
        field.validate().map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(field)
    }

    pub fn constant(value: u32, domain_size: usize, lattice: Lattice) -> Result<Self> {
        Self::new(vec![value; lattice.len()], domain_size, lattice)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, p: usize) -> usize {
        self.labels[p] as usize
    }

    pub fn set(&mut self, p: usize, value: usize) {
        debug_assert!(value < self.domain_size);
        self.labels[p] = value as u32;
    }

    pub fn domain_size(&self) -> usize {
        self.domain_size
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain_size == 0 {
            return Err(Error::Invariant("label domain is empty".into()));
        }
        if self.labels.len() != self.lattice.len() {
            return Err(Error::Invariant(format!(
                "{} labels for {} pixels",
                self.labels.len(),
                self.lattice.len()
            )));
        }
        if let Some(p) = self.labels.iter().position(|&l| l as usize >= self.domain_size) {
            return Err(Error::Invariant(format!(
                "label {} at pixel {p} outside 1..={}",
                self.labels[p] + 1,
                self.domain_size
            )));
        }
        Ok(())
    }

    /// Number of neighbors of `p` carrying `value`. Multiply by the Potts
    /// granularity to get the pairwise potential.
    pub fn potts_neighbor_count(&self, p: usize, value: usize) -> usize {
        self.lattice
            .neighbors(p)
            .filter(|&q| self.labels[q] as usize == value)
            .count()
    }

    /// Neighbor counts for every value at once.
    pub fn neighbor_histogram(&self, p: usize, out: &mut [u32]) {
        out.iter_mut().for_each(|c| *c = 0);
        for q in self.lattice.neighbors(p) {
            out[self.labels[q] as usize] += 1;
        }
    }
}

/// `K x J` matrix whose column `j` is the distribution of clusters within class `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    pub q: DMatrix<f64>,
}

impl InteractionMatrix {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        let m = Self { q };
        m.validate().map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(m)
    }

    pub fn uniform(k: usize, j: usize) -> Self {
        Self {
            q: DMatrix::from_element(k, j, 1.0 / k as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (j, col) in self.q.column_iter().enumerate() {
            if col.iter().any(|x| x.is_nan() || *x < 0.0) || (col.sum() - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Invariant(format!(
                    "interaction column {j} is off the simplex: {}",
                    col.transpose()
                )));
            }
        }
        Ok(())
    }
}

/// Expert labels on a subset of pixels, with per-pixel confidence and the
/// class proportions used as prior on unlabeled pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionData {
    num_pixels: usize,
    num_classes: usize,
    labeled: Vec<usize>,
    labels: Vec<u32>,
    eta: Vec<f64>,
    pi: Vec<f64>,
    slot: Vec<Option<u32>>,
}

impl SupervisionData {
    /// Build from labeled pixel indices, 0-based class labels and confidences.
    /// `pi` is taken from the label proportions. Every class in `0..num_classes`
    /// must appear at least once.
    pub fn new(
        num_pixels: usize,
        num_classes: usize,
        labeled: Vec<usize>,
        labels: Vec<u32>,
        eta: Vec<f64>,
    ) -> Result<Self> {
        if labeled.len() != labels.len() || labeled.len() != eta.len() {
            return Err(Error::dims("labeled set, labels and confidences differ in length"));
        }
        if labeled.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        if num_classes == 0 {
            return Err(Error::config("need at least one class"));
        }
        let mut slot = vec![None; num_pixels];
        for (i, &p) in labeled.iter().enumerate() {
            if p >= num_pixels {
                return Err(Error::config(format!("labeled pixel {p} outside 0..{num_pixels}")));
            }
            if slot[p].replace(i as u32).is_some() {
                return Err(Error::config(format!("pixel {p} labeled twice")));
            }
        }
        if let Some(&c) = labels.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::config(format!(
                "class label {} outside 1..={num_classes}",
                c + 1
            )));
        }
        if let Some(e) = eta.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(Error::config(format!("confidence must lie in (0, 1), got {e}")));
        }
        let mut counts = vec![0usize; num_classes];
        labels.iter().for_each(|&c| counts[c as usize] += 1);
        if let Some(j) = counts.iter().position(|&n| n == 0) {
            return Err(Error::config(format!(
                "class {} never appears in the training labels",
                j + 1
            )));
        }
        let n = labels.len() as f64;
        let pi = counts.iter().map(|&c| c as f64 / n).collect();
        Ok(Self {
            num_pixels,
            num_classes,
            labeled,
            labels,
            eta,
            pi,
            slot,
        })
    }

    /// Replace the class proportions used on unlabeled pixels.
    pub fn with_pi(mut self, pi: Vec<f64>) -> Result<Self> {
        if pi.len() != self.num_classes {
            return Err(Error::config(format!(
                "pi has {} entries for {} classes",
                pi.len(),
                self.num_classes
            )));
        }
        if pi.iter().any(|x| x.is_nan() || *x < 0.0) || (pi.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::config("pi must lie on the simplex"));
        }
        self.pi = pi;
        Ok(self)
    }

    pub fn num_pixels(&self) -> usize {
        self.num_pixels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// Expert label and confidence of `p`, if `p` is in the training set.
    pub fn label_of(&self, p: usize) -> Option<(usize, f64)> {
        self.slot[p].map(|i| (self.labels[i as usize] as usize, self.eta[i as usize]))
    }

    pub fn is_labeled(&self, p: usize) -> bool {
        self.slot[p].is_some()
    }

    /// Pixels outside the training set, in increasing order.
    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.num_pixels).filter(|&p| !self.is_labeled(p)).collect()
    }

    /// Log prior weight of class `j` at pixel `p` (the single-site term of the
    /// class-label field).
    ///
    /// Labeled pixels get `log eta_p` for their expert label and
    /// `log((1 - eta_p) / (J - 1))` otherwise; unlabeled pixels get `log pi_j`,
    /// which is `-inf` for a class with zero proportion.
    pub fn log_prior_class(&self, p: usize, j: usize) -> f64 {
        assert!(j < self.num_classes, "class {j} outside 0..{}", self.num_classes);
        match self.label_of(p) {
            Some((c, eta)) if c == j => eta.ln(),
            Some((_, eta)) => {
                if self.num_classes == 1 {
                    f64::NEG_INFINITY
                } else {
                    ((1.0 - eta) / (self.num_classes - 1) as f64).ln()
                }
            }
            None => self.pi[j].ln(),
        }
    }
}

/// Visiting order of the single-site label updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepSchedule {
    /// Two half-sweeps over the colors of a checkerboard; pixels of one color
    /// are updated in parallel.
    #[default]
    Checkerboard,
    /// Row-major scan, fully sequential.
    Raster,
}

fn default_xi() -> f64 {
    1.0
}

fn default_gamma() -> f64 {
    0.1
}

fn default_inner_iters() -> usize {
    5
}

/// Sampler configuration. Deserializes from JSON with unknown keys rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of clusters.
    pub k: usize,
    /// Number of classes.
    pub j: usize,
    /// Number of endmembers.
    pub r: usize,
    /// Potts granularity of the cluster field, applied during burn-in only.
    pub beta1: f64,
    /// Potts granularity of the class field.
    pub beta2: f64,
    /// Dirichlet hyperparameters of the interaction columns; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<Vec<f64>>,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Iterations recorded after burn-in.
    pub n_mc: usize,
    pub n_burnin: usize,
    pub seed: u64,
    /// Gibbs scans of the simplex-truncated Gaussian per cluster-mean update.
    #[serde(default = "default_inner_iters")]
    pub inner_iters: usize,
    #[serde(default)]
    pub schedule: SweepSchedule,
    /// Class proportions on unlabeled pixels; taken from the training labels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    /// Check every state invariant after each sweep.
    #[serde(default)]
    pub debug_validate: bool,
}

impl ModelConfig {
    /// The settings of the synthetic experiments: `beta1 = beta2 = 0.8`,
    /// 300 iterations of which 50 are burn-in.
    pub fn new(k: usize, j: usize, r: usize, seed: u64) -> Self {
        Self {
            k,
            j,
            r,
            beta1: 0.8,
            beta2: 0.8,
            zeta: None,
            xi: default_xi(),
            gamma: default_gamma(),
            n_mc: 250,
            n_burnin: 50,
            seed,
            inner_iters: default_inner_iters(),
            schedule: SweepSchedule::default(),
            pi: None,
            debug_validate: false,
        }
    }

    pub fn zeta(&self) -> Vec<f64> {
        self.zeta.clone().unwrap_or_else(|| vec![1.0; self.k])
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.j == 0 || self.r == 0 {
            return Err(Error::config("k, j and r must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {b}")));
            }
        }
        if let Some(z) = &self.zeta {
            if z.len() != self.k {
                return Err(Error::config(format!(
                    "zeta has {} entries for k = {}",
                    z.len(),
                    self.k
                )));
            }
            if z.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::config("zeta entries must be positive"));
            }
        }
        if !(self.xi.is_finite() && self.xi > 0.0 && self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::config("xi and gamma must be positive"));
        }
        if self.n_mc == 0 {
            return Err(Error::config("n_mc must be at least 1"));
        }
        if self.inner_iters == 0 {
            return Err(Error::config("inner_iters must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat3() -> Lattice {
        Lattice::new(3, 3).unwrap()
    }

    #[test]
    fn neighbor_count_examples() {
        let lat = lat3();
        let flat = LabelField::constant(1, 2, lat).unwrap();
        assert_eq!(flat.potts_neighbor_count(4, 1), 4);
        assert_eq!(flat.potts_neighbor_count(4, 0), 0);

        let checker: Vec<u32> = (0..9).map(|p| lat.color(p) as u32).collect();
        let checker = LabelField::new(checker, 2, lat).unwrap();
        assert_eq!(checker.potts_neighbor_count(4, checker.get(4)), 0);
        assert_eq!(checker.potts_neighbor_count(4, 1 - checker.get(4)), 4);

        let mut hist = [0u32; 2];
        checker.neighbor_histogram(0, &mut hist);
        assert_eq!(hist, [0, 2]);
    }

    #[test]
    fn label_range_enforced() {
        assert!(LabelField::new(vec![0, 3, 1, 1, 1, 1, 1, 1, 1], 3, lat3()).is_err());
        assert!(LabelField::new(vec![0; 8], 3, lat3()).is_err());
    }

    fn supervision() -> SupervisionData {
        // pixels 0,1 labeled class 0 and 1 with eta 0.95, out of 4 pixels, J = 2
        SupervisionData::new(4, 2, vec![0, 1], vec![0, 1], vec![0.95, 0.95]).unwrap()
    }

    #[test]
    fn log_prior_class_examples() {
        let sup = supervision();
        assert!((sup.log_prior_class(0, 0) - 0.95f64.ln()).abs() < 1e-15);
        assert!((sup.log_prior_class(0, 1) - 0.05f64.ln()).abs() < 1e-12);
        assert_eq!(sup.pi(), &[0.5, 0.5]);
        for j in 0..2 {
            assert!((sup.log_prior_class(3, j) - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn labeled_prior_sums_to_one() {
        let sup = SupervisionData::new(10, 4, vec![2, 3, 7, 9], vec![0, 1, 2, 3], vec![0.6, 0.9, 0.75, 0.99]).unwrap();
        for &p in sup.labeled() {
            let total: f64 = (0..4).map(|j| sup.log_prior_class(p, j).exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_proportion_gives_minus_infinity() {
        let sup = supervision().with_pi(vec![1.0, 0.0]).unwrap();
        assert_eq!(sup.log_prior_class(2, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn supervision_rejects_missing_class_and_bad_eta() {
        assert!(SupervisionData::new(4, 3, vec![0, 1], vec![0, 1], vec![0.9, 0.9]).is_err());
        assert!(SupervisionData::new(4, 2, vec![0, 1], vec![0, 1], vec![1.0, 0.9]).is_err());
        assert!(SupervisionData::new(4, 2, vec![0, 0], vec![0, 1], vec![0.9, 0.9]).is_err());
        assert!(SupervisionData::new(4, 2, vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn cluster_params_invariants() {
        let psi = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 1.0, 0.0]);
        let s2 = DMatrix::from_element(2, 2, 0.1);
        assert!(ClusterParams::new(psi.clone(), s2.clone()).is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[0.3, 0.6, 1.0, 0.0]);
        assert!(ClusterParams::new(bad, s2.clone()).is_err());
        let mut s2_bad = s2;
        s2_bad[(1, 1)] = 0.0;
        assert!(ClusterParams::new(psi, s2_bad).is_err());
    }

    #[test]
    fn gaussian_log_density_matches_closed_form() {
        let psi = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let s2 = DMatrix::from_row_slice(1, 2, &[0.25, 1.0]);
        let params = ClusterParams::new(psi, s2).unwrap();
        let a = [1.0, 0.0];
        let expected = -0.5 * (0.25 / 0.25 + 0.25 / 1.0)
            - 0.5 * ((std::f64::consts::TAU * 0.25).ln() + std::f64::consts::TAU.ln());
        assert!((params.log_density(0, &a) - expected).abs() < 1e-12);
    }

    #[test]
    fn interaction_matrix_columns_on_simplex() {
        assert!(InteractionMatrix::new(DMatrix::from_row_slice(2, 1, &[0.4, 0.6])).is_ok());
        assert!(InteractionMatrix::new(DMatrix::from_row_slice(2, 1, &[0.4, 0.5])).is_err());
        assert!(InteractionMatrix::uniform(3, 2).validate().is_ok());
    }

    #[test]
    fn config_json_defaults_and_unknown_keys() {
        let cfg: ModelConfig =
            serde_json::from_str(r#"{"k":3,"j":2,"r":3,"beta1":0.8,"beta2":0.8,"n_mc":250,"n_burnin":50,"seed":1}"#)
                .unwrap();
        assert_eq!(cfg, ModelConfig::new(3, 2, 3, 1));
        assert_eq!(cfg.zeta(), vec![1.0; 3]);
        let err = serde_json::from_str::<ModelConfig>(
            r#"{"k":3,"j":2,"r":3,"beta1":0.8,"beta2":0.8,"n_mc":250,"n_burnin":50,"seed":1,"betaa":2}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("betaa"));
        let err = serde_json::from_str::<ModelConfig>(r#"{"k":3}"#).unwrap_err();
        assert!(err.to_string().contains("missing field"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(3, 2, 3, 0);
        assert!(cfg.validate().is_ok());
        cfg.beta1 = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(3, 2, 3, 0);
        cfg.zeta = Some(vec![1.0, 1.0]);
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(3, 2, 3, 0);
        cfg.n_mc = 0;
        assert!(cfg.validate().is_err());
    }
}
