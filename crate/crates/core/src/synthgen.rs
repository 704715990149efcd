//! Synthetic scenes: Potts cluster maps, classes formed by merging clusters,
//! Dirichlet abundances per cluster, and linear mixing with white Gaussian
//! noise at a target SNR.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{sample_categorical_log, sample_dirichlet, sample_std_normal, SeedStream};
use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::model::{AbundanceMatrix, EndmemberMatrix, LabelField, ObservationMatrix, SupervisionData};

/// Number of spectral bands of the synthetic endmember library.
pub const DEFAULT_BANDS: usize = 413;

/// Smallest pairwise spectral angle accepted between generated endmembers.
pub const MIN_ENDMEMBER_ANGLE_DEG: f64 = 5.0;

const ENDMEMBER_ATTEMPTS: usize = 100;
const MAP_ATTEMPTS: u64 = 200;

/// Confidence cap applied to corrupted training labels.
pub const MAX_CONFIDENCE: f64 = 0.95;

/// How the training pixels are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainingSpec {
    /// The top `round(height * fraction)` rows.
    TopRows(f64),
    /// Each pixel independently with probability `fraction`.
    Random { fraction: f64, seed: u64 },
}

fn default_bands() -> usize {
    DEFAULT_BANDS
}

fn default_concentration() -> f64 {
    30.0
}

fn default_eta() -> f64 {
    MAX_CONFIDENCE
}

/// Scene description. Class labels in `cluster_to_class` are 1-based, as in
/// every file written by this crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub j: usize,
    pub r: usize,
    #[serde(default = "default_bands")]
    pub bands: usize,
    /// Class (1-based) of every cluster; must hit every class.
    pub cluster_to_class: Vec<usize>,
    /// `K x R` per-cluster abundance means, each row on the simplex.
    pub dirichlet_means: Vec<Vec<f64>>,
    /// Dirichlet parameters are `concentration * mean`.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    pub snr_db: f64,
    /// Skip the noise entirely (infinite SNR).
    #[serde(default)]
    pub noiseless: bool,
    pub potts_beta: f64,
    pub potts_sweeps: usize,
    pub seed: u64,
    pub training: TrainingSpec,
    /// Confidence assigned to every training label.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// When set, cluster maps are redrawn until the total-variation distance
    /// between the class proportions of the training set and of the whole
    /// image is at most this value.
    #[serde(default)]
    pub max_training_shift: Option<f64>,
}

impl SceneSpec {
    /// 100 x 100 pixels, 3 endmembers, 3 clusters, 2 classes (clusters 1 and 2
    /// form class 1), 30 dB, top quarter used for training.
    pub fn image1(seed: u64) -> Self {
        Self {
            height: 100,
            width: 100,
            k: 3,
            j: 2,
            r: 3,
            bands: DEFAULT_BANDS,
            cluster_to_class: vec![1, 1, 2],
            dirichlet_means: vec![vec![0.6, 0.2, 0.2], vec![0.2, 0.6, 0.2], vec![0.2, 0.2, 0.6]],
            concentration: default_concentration(),
            snr_db: 30.0,
            noiseless: false,
            potts_beta: 1.2,
            potts_sweeps: 60,
            seed,
            training: TrainingSpec::TopRows(0.25),
            eta: MAX_CONFIDENCE,
            max_training_shift: Some(0.02),
        }
    }

    /// 200 x 200 pixels, 9 endmembers, 12 clusters, 5 classes, 30 dB.
    pub fn image2(seed: u64) -> Self {
        let (k, r) = (12, 9);
        let means = (0..k)
            .map(|c| {
                let primary = c % r;
                let secondary = (c + 1 + 3 * (c / r)) % r;
                let mut row = vec![0.1 / (r - 2) as f64; r];
                row[primary] = 0.6;
                row[secondary] = 0.3;
                row
            })
            .collect();
        Self {
            height: 200,
            width: 200,
            k,
            j: 5,
            r,
            bands: DEFAULT_BANDS,
            cluster_to_class: vec![1, 1, 1, 2, 2, 3, 3, 3, 4, 4, 5, 5],
            dirichlet_means: means,
            concentration: default_concentration(),
            snr_db: 30.0,
            noiseless: false,
            potts_beta: 1.6,
            potts_sweeps: 60,
            seed,
            training: TrainingSpec::TopRows(0.25),
            eta: MAX_CONFIDENCE,
            max_training_shift: Some(0.02),
        }
    }

    pub fn lattice(&self) -> Result<Lattice> {
        Lattice::new(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        self.lattice()?;
        if self.k == 0 || self.j == 0 || self.r == 0 {
            return Err(Error::config("k, j and r must be at least 1"));
        }
        if self.r > self.bands {
            return Err(Error::config(format!("r = {} exceeds bands = {}", self.r, self.bands)));
        }
        if self.cluster_to_class.len() != self.k {
            return Err(Error::config(format!(
                "cluster_to_class has {} entries for k = {}",
                self.cluster_to_class.len(),
                self.k
            )));
        }
        let mut hit = vec![false; self.j];
        for &c in &self.cluster_to_class {
            if c == 0 || c > self.j {
                return Err(Error::config(format!(
                    "cluster_to_class entry {c} outside 1..={}",
                    self.j
                )));
            }
            hit[c - 1] = true;
        }
        if let Some(c) = hit.iter().position(|h| !h) {
            return Err(Error::config(format!("no cluster maps to class {}", c + 1)));
        }
        if self.dirichlet_means.len() != self.k || self.dirichlet_means.iter().any(|m| m.len() != self.r) {
            return Err(Error::config(format!(
                "dirichlet_means must be {} x {}",
                self.k, self.r
            )));
        }
        if self
            .dirichlet_means
            .iter()
            .flatten()
            .any(|x| !(x.is_finite() && *x > 0.0))
        {
            return Err(Error::config("dirichlet_means entries must be positive"));
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return Err(Error::config("concentration must be positive"));
        }
        if !self.noiseless && !self.snr_db.is_finite() {
            return Err(Error::config("snr_db must be finite unless noiseless is set"));
        }
        if !(self.potts_beta.is_finite() && self.potts_beta >= 0.0) {
            return Err(Error::config("potts_beta must be finite and >= 0"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::config("eta must lie in (0, 1)"));
        }
        if let Some(t) = self.max_training_shift {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config(format!("max_training_shift must lie in (0, 1], got {t}")));
            }
        }
        match self.training {
            TrainingSpec::TopRows(f) | TrainingSpec::Random { fraction: f, .. } if !(f > 0.0 && f <= 1.0) => {
                Err(Error::config(format!("training fraction must lie in (0, 1], got {f}")))
            }
            _ => Ok(()),
        }
    }

    /// 0-based class of 0-based cluster `k`.
    pub fn class_of(&self, k: usize) -> usize {
        self.cluster_to_class[k] - 1
    }
}

/// K-state Potts field after `sweeps` raster Gibbs sweeps at inverse
/// temperature `beta`, starting from i.i.d. uniform labels.
pub fn generate_potts_field(
    lattice: Lattice,
    k: usize,
    beta: f64,
    sweeps: usize,
    rng: &mut impl Rng,
) -> Result<LabelField> {
    if k == 0 {
        return Err(Error::invalid_param("Potts field needs at least one state"));
    }
    let labels = (0..lattice.len()).map(|_| rng.random_range(0..k as u32)).collect();
    let mut field = LabelField::new(labels, k, lattice)?;
    let mut hist = vec![0u32; k];
    let mut logw = vec![0.0; k];
    for _ in 0..sweeps {
        for p in 0..lattice.len() {
            field.neighbor_histogram(p, &mut hist);
            for (w, &n) in logw.iter_mut().zip(&hist) {
                *w = beta * f64::from(n);
            }
            let v = sample_categorical_log(rng, &logw)?;
            field.set(p, v);
        }
    }
    Ok(field)
}

/// Mean over pixels of the fraction of neighbors sharing the pixel's label.
pub fn same_label_neighbor_fraction(field: &LabelField) -> f64 {
    let lat = field.lattice();
    let total: f64 = (0..lat.len())
        .map(|p| {
            let n = lat.neighbors(p).count();
            if n == 0 {
                1.0
            } else {
                field.potts_neighbor_count(p, field.get(p)) as f64 / n as f64
            }
        })
        .sum();
    total / lat.len() as f64
}

/// Spectral angle in degrees between two spectra.
pub fn spectral_angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

fn smooth_spectrum(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let baseline = rng.random_range(0.05..0.25);
    let slope = rng.random_range(-0.15..0.15);
    let bumps: Vec<(f64, f64, f64)> = (0..rng.random_range(2..6))
        .map(|_| {
            let center = rng.random_range(0.0..1.0);
            let width = rng.random_range(0.03..0.2);
            let amp = rng.random_range(0.1..0.7);
            (center, width, amp)
        })
        .collect();
    let t = |i: usize| if d > 1 { i as f64 / (d - 1) as f64 } else { 0.0 };
    let mut s: Vec<f64> = (0..d)
        .map(|i| {
            let x = t(i);
            let bump: f64 = bumps
                .iter()
                .map(|(c, w, a)| a * (-0.5 * ((x - c) / w).powi(2)).exp())
                .sum();
            (baseline + slope * (x - 0.5) + bump).max(0.01)
        })
        .collect();
    let max = s.iter().copied().fold(0.0, f64::max);
    if max > 0.95 {
        s.iter_mut().for_each(|v| *v *= 0.95 / max);
    }
    s
}

/// `R` smooth nonnegative spectra in `[0, 1]` over `d` bands (baseline, tilt
/// and a few Gaussian absorption/reflection bumps), resampled until every pair
/// is at least [`MIN_ENDMEMBER_ANGLE_DEG`] apart.
pub fn make_endmembers(d: usize, r: usize, rng: &mut impl Rng) -> Result<EndmemberMatrix> {
    if r == 0 || r > d {
        return Err(Error::invalid_param(format!("need 1 <= R <= d, got R = {r}, d = {d}")));
    }
    for _ in 0..ENDMEMBER_ATTEMPTS {
        let spectra: Vec<Vec<f64>> = (0..r).map(|_| smooth_spectrum(d, rng)).collect();
        let separated =
            (0..r).all(|a| (a + 1..r).all(|b| spectral_angle_deg(&spectra[a], &spectra[b]) >= MIN_ENDMEMBER_ANGLE_DEG));
        if separated {
            let flat: Vec<f64> = spectra.into_iter().flatten().collect();
            return EndmemberMatrix::new(DMatrix::from_column_slice(d, r, &flat));
        }
    }
    Err(Error::invalid_param(format!(
        "could not draw {r} endmembers separated by {MIN_ENDMEMBER_ANGLE_DEG} degrees in {ENDMEMBER_ATTEMPTS} attempts"
    )))
}

/// A generated scene and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub observations: ObservationMatrix,
    pub abundances: AbundanceMatrix,
    pub clusters: LabelField,
    pub classes: LabelField,
    /// Variance of the added noise (0 when noiseless).
    pub noise_variance: f64,
}

mod stream {
    pub const ENDMEMBERS: u64 = 1;
    pub const POTTS: u64 = 2;
    pub const ABUNDANCES: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const TRAINING: u64 = 5;
}

/// Noise variance giving `10 log10(||MA||_F^2 / (P d s2)) = snr_db`.
pub fn noise_variance_for_snr(clean: &DMatrix<f64>, snr_db: f64) -> f64 {
    clean.norm_squared() / (clean.len() as f64 * 10f64.powf(snr_db / 10.0))
}

/// Draw a scene for `spec` with the given endmembers. The Potts map, the
/// abundances and the noise each use their own stream of `seeds`.
pub fn generate_scene(spec: &SceneSpec, endmembers: &EndmemberMatrix, seeds: &SeedStream) -> Result<Scene> {
    generate_scene_attempt(spec, endmembers, seeds, 0)
}

fn generate_scene_attempt(
    spec: &SceneSpec,
    endmembers: &EndmemberMatrix,
    seeds: &SeedStream,
    attempt: u64,
) -> Result<Scene> {
    spec.validate()?;
    if endmembers.count() != spec.r {
        return Err(Error::dims(format!(
            "scene expects {} endmembers, got {}",
            spec.r,
            endmembers.count()
        )));
    }
    let lat = spec.lattice()?;
    let mut rng = seeds.rng(&[stream::POTTS, attempt]);
    let z = generate_potts_field(lat, spec.k, spec.potts_beta, spec.potts_sweeps, &mut rng)?;
    let omega_labels = z.labels().iter().map(|&k| spec.class_of(k as usize) as u32).collect();
    let omega = LabelField::new(omega_labels, spec.j, lat)?;

    let alphas: Vec<Vec<f64>> = spec
        .dirichlet_means
        .iter()
        .map(|m| m.iter().map(|x| x * spec.concentration).collect())
        .collect();
    let mut rng = seeds.rng(&[stream::ABUNDANCES]);
    let mut a = DMatrix::zeros(spec.r, lat.len());
    for p in 0..lat.len() {
        let draw = sample_dirichlet(&mut rng, &alphas[z.get(p)])?;
        a.column_mut(p).copy_from_slice(&draw);
    }
    let abundances = AbundanceMatrix::new(a)?;
    let mut y = abundances.mix(endmembers);
    let noise_variance = if spec.noiseless {
        0.0
    } else {
        let s2 = noise_variance_for_snr(&y, spec.snr_db);
        let sd = s2.sqrt();
        let mut rng = seeds.rng(&[stream::NOISE]);
        y.iter_mut().for_each(|v| *v += sd * sample_std_normal(&mut rng));
        s2
    };
    Ok(Scene {
        observations: ObservationMatrix::new(y, lat)?,
        abundances,
        clusters: z,
        classes: omega,
        noise_variance,
    })
}

/// Everything [`generate`] produces.
#[derive(Clone, Debug)]
pub struct GeneratedScene {
    pub endmembers: EndmemberMatrix,
    pub scene: Scene,
    pub supervision: SupervisionData,
}

/// Full generation from a spec: endmembers (unless supplied), scene, and
/// training set, all seeded from `spec.seed`.
pub fn generate(spec: &SceneSpec, endmembers: Option<EndmemberMatrix>) -> Result<GeneratedScene> {
    spec.validate()?;
    let seeds = SeedStream::new(spec.seed);
    let endmembers = match endmembers {
        Some(m) => {
            if m.bands() != spec.bands {
                return Err(Error::dims(format!(
                    "scene expects {} bands, endmember file has {}",
                    spec.bands,
                    m.bands()
                )));
            }
            m
        }
        None => make_endmembers(spec.bands, spec.r, &mut seeds.rng(&[stream::ENDMEMBERS]))?,
    };
    for attempt in 0..MAP_ATTEMPTS {
        let scene = generate_scene_attempt(spec, &endmembers, &seeds, attempt)?;
        // a training set missing a class is rejected like an unbalanced one
        let Ok(supervision) = split_training(&scene.classes, &spec.training, spec.eta, &seeds) else {
            continue;
        };
        let accepted = match spec.max_training_shift {
            Some(tol) => training_shift(&scene.classes, &supervision) <= tol,
            None => true,
        };
        if accepted {
            return Ok(GeneratedScene {
                endmembers,
                scene,
                supervision,
            });
        }
    }
    Err(Error::config(format!(
        "no cluster map in {MAP_ATTEMPTS} attempts gave a training set with every class in the stated proportions"
    )))
}

/// Total-variation distance between the class proportions of the training
/// labels and those of the full class map.
pub fn training_shift(classes: &LabelField, supervision: &SupervisionData) -> f64 {
    let j = classes.domain_size();
    let mut all = vec![0.0; j];
    for &c in classes.labels() {
        all[c as usize] += 1.0;
    }
    let n = classes.labels().len() as f64;
    all.iter()
        .zip(supervision.pi())
        .map(|(a, t)| (a / n - t).abs())
        .sum::<f64>()
        / 2.0
}

/// Select the training pixels and copy their true class as expert label,
/// with confidence `eta` everywhere.
pub fn split_training(
    classes: &LabelField,
    training: &TrainingSpec,
    eta: f64,
    seeds: &SeedStream,
) -> Result<SupervisionData> {
    let lat = *classes.lattice();
    let labeled: Vec<usize> = match *training {
        TrainingSpec::TopRows(fraction) => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::config(format!(
                    "training fraction must lie in (0, 1], got {fraction}"
                )));
            }
            let rows = (lat.height() as f64 * fraction).round() as usize;
            (0..rows * lat.width()).collect()
        }
        TrainingSpec::Random { fraction, seed } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::config(format!(
                    "training fraction must lie in (0, 1], got {fraction}"
                )));
            }
            let mut rng = seeds.rng(&[stream::TRAINING, seed]);
            (0..lat.len()).filter(|_| rng.random::<f64>() < fraction).collect()
        }
    };
    if labeled.is_empty() {
        return Err(Error::config("training region is empty"));
    }
    let labels = labeled.iter().map(|&p| classes.labels()[p]).collect();
    let eta = vec![eta; labeled.len()];
    SupervisionData::new(lat.len(), classes.domain_size(), labeled, labels, eta)
}

/// Replace each expert label, with probability `alpha`, by one of the other
/// classes drawn uniformly; confidence becomes `min(1 - alpha, 0.95)` and the
/// class proportions are recomputed from the corrupted labels.
pub fn corrupt_labels(sup: &SupervisionData, alpha: f64, rng: &mut impl Rng) -> Result<SupervisionData> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid_param(format!(
            "corruption probability must lie in [0, 1), got {alpha}"
        )));
    }
    let j = sup.num_classes();
    let labels = sup
        .labels()
        .iter()
        .map(|&c| {
            if j > 1 && rng.random::<f64>() < alpha {
                let other = rng.random_range(0..j as u32 - 1);
                if other >= c {
                    other + 1
                } else {
                    other
                }
            } else {
                c
            }
        })
        .collect();
    let eta = vec![(1.0 - alpha).min(MAX_CONFIDENCE); sup.labeled().len()];
    SupervisionData::new(sup.num_pixels(), j, sup.labeled().to_vec(), labels, eta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        let mut s = SceneSpec::image1(3);
        s.height = 20;
        s.width = 30;
        s.bands = 50;
        s
    }

    #[test]
    fn presets_validate() {
        SceneSpec::image1(0).validate().unwrap();
        SceneSpec::image2(0).validate().unwrap();
        let m = SceneSpec::image2(0).dirichlet_means;
        for row in &m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for a in 0..m.len() {
            for b in a + 1..m.len() {
                assert_ne!(m[a], m[b]);
            }
        }
    }

    #[test]
    fn spec_rejects_unmapped_class() {
        let mut s = small_spec();
        s.cluster_to_class = vec![1, 1, 1];
        assert!(s.validate().is_err());
    }

    #[test]
    fn potts_at_zero_beta_is_uniform() {
        let lat = Lattice::new(100, 100).unwrap();
        let f = generate_potts_field(lat, 4, 0.0, 3, &mut SeedStream::new(1).rng(&[0])).unwrap();
        let n = lat.len() as f64;
        let sigma = (n * 0.25 * 0.75).sqrt();
        for k in 0..4 {
            let c = f.labels().iter().filter(|&&l| l as usize == k).count() as f64;
            assert!((c - n / 4.0).abs() < 3.0 * sigma, "label {k}: {c}");
        }
    }

    #[test]
    fn potts_is_reproducible() {
        let lat = Lattice::new(30, 30).unwrap();
        let a = generate_potts_field(lat, 3, 1.0, 10, &mut SeedStream::new(9).rng(&[0])).unwrap();
        let b = generate_potts_field(lat, 3, 1.0, 10, &mut SeedStream::new(9).rng(&[0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn endmembers_are_bounded_and_separated() {
        let m = make_endmembers(413, 9, &mut SeedStream::new(2).rng(&[0])).unwrap();
        assert!(m.data().iter().all(|x| (0.0..=1.0).contains(x)));
        for a in 0..9 {
            for b in a + 1..9 {
                let ca: Vec<f64> = m.data().column(a).iter().copied().collect();
                let cb: Vec<f64> = m.data().column(b).iter().copied().collect();
                assert!(spectral_angle_deg(&ca, &cb) >= MIN_ENDMEMBER_ANGLE_DEG);
            }
        }
        let one = make_endmembers(10, 1, &mut SeedStream::new(2).rng(&[0])).unwrap();
        assert_eq!(one.count(), 1);
        let again = make_endmembers(413, 9, &mut SeedStream::new(2).rng(&[0])).unwrap();
        assert_eq!(m, again);
        assert!(make_endmembers(3, 4, &mut SeedStream::new(2).rng(&[0])).is_err());
    }

    #[test]
    fn scene_shapes_and_truth_consistency() {
        let spec = small_spec();
        let g = generate(&spec, None).unwrap();
        let s = &g.scene;
        assert_eq!(s.observations.data().shape(), (50, 600));
        assert_eq!(s.abundances.data().shape(), (3, 600));
        for p in 0..600 {
            assert_eq!(s.classes.get(p), spec.class_of(s.clusters.get(p)));
            let col = s.abundances.data().column(p);
            assert!((col.sum() - 1.0).abs() < 1e-12);
            assert!(col.iter().all(|x| *x >= 0.0));
        }
        assert_eq!(g.supervision.labeled().len(), 5 * 30);
    }

    #[test]
    fn noiseless_scene_is_exact_mixture() {
        let mut spec = small_spec();
        spec.noiseless = true;
        let g = generate(&spec, None).unwrap();
        let clean = g.scene.abundances.mix(&g.endmembers);
        assert_eq!(g.scene.observations.data(), &clean);
        assert_eq!(g.scene.noise_variance, 0.0);
    }

    #[test]
    fn realized_snr_matches_target() {
        let mut spec = small_spec();
        spec.height = 50;
        spec.width = 50;
        spec.bands = 100; // P d = 250_000
        let g = generate(&spec, None).unwrap();
        let clean = g.scene.abundances.mix(&g.endmembers);
        let noise = g.scene.observations.data() - &clean;
        let snr = 10.0 * (clean.norm_squared() / noise.norm_squared()).log10();
        assert!((snr - 30.0).abs() < 0.1, "{snr}");
    }

    #[test]
    fn top_quarter_training() {
        let lat = Lattice::new(100, 100).unwrap();
        let classes: Vec<u32> = (0..lat.len()).map(|p| (p % 2) as u32).collect();
        let f = LabelField::new(classes, 2, lat).unwrap();
        let sup = split_training(&f, &TrainingSpec::TopRows(0.25), 0.95, &SeedStream::new(0)).unwrap();
        assert_eq!(sup.labeled().len(), 2500);
        assert!(sup.eta().iter().all(|&e| e == 0.95));
        assert!(split_training(&f, &TrainingSpec::TopRows(0.0), 0.95, &SeedStream::new(0)).is_err());
        let constant = LabelField::constant(0, 2, lat).unwrap();
        assert!(split_training(&constant, &TrainingSpec::TopRows(0.25), 0.95, &SeedStream::new(0)).is_err());
    }

    fn sup_with(n: usize, j: usize) -> SupervisionData {
        let labels: Vec<u32> = (0..n).map(|i| (i % j) as u32).collect();
        SupervisionData::new(n, j, (0..n).collect(), labels, vec![0.95; n]).unwrap()
    }

    #[test]
    fn corruption_zero_is_identity() {
        let sup = sup_with(200, 2);
        let c = corrupt_labels(&sup, 0.0, &mut SeedStream::new(1).rng(&[0])).unwrap();
        assert_eq!(c.labels(), sup.labels());
        assert!(c.eta().iter().all(|&e| e == 0.95));
    }

    #[test]
    fn corruption_rate_binary() {
        let n = 10_000;
        let sup = sup_with(n, 2);
        let c = corrupt_labels(&sup, 0.4, &mut SeedStream::new(2).rng(&[0])).unwrap();
        let flipped = c.labels().iter().zip(sup.labels()).filter(|(a, b)| a != b).count() as f64;
        let sigma = (n as f64 * 0.4 * 0.6).sqrt();
        assert!((flipped - 0.4 * n as f64).abs() < 3.0 * sigma, "{flipped}");
        assert!(c.eta().iter().all(|&e| (e - 0.6).abs() < 1e-15));
    }

    #[test]
    fn corruption_wrong_labels_equiprobable() {
        let n = 50_000;
        let j = 5;
        let sup = SupervisionData::new(
            n,
            j,
            (0..n).collect(),
            (0..n).map(|i| if i < j { i as u32 } else { 0 }).collect(),
            vec![0.9; n],
        )
        .unwrap();
        let c = corrupt_labels(&sup, 0.2, &mut SeedStream::new(3).rng(&[0])).unwrap();
        let mut counts = [0f64; 5];
        for (i, (&new, &old)) in c.labels().iter().zip(sup.labels()).enumerate() {
            if i >= j && new != old {
                counts[new as usize] += 1.0;
            }
        }
        assert_eq!(counts[0], 0.0);
        let total: f64 = counts[1..].iter().sum();
        let expected = total / 4.0;
        let chi2: f64 = counts[1..].iter().map(|c| (c - expected).powi(2) / expected).sum();
        // chi-square with 3 degrees of freedom, 1% critical value
        assert!(chi2 < 11.345, "chi2 = {chi2}");
    }
}
