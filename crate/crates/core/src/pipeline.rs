//! End-to-end operations on scene bundles and result directories, shared by
//! the command-line tool and the acceptance tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::SeedStream;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{align_clusters, cohen_kappa, matched_fraction, rgmse, ConfusionMatrix};
use crate::model::{EndmemberMatrix, ModelConfig};
use crate::sampler::{run_chain, ChainOutput, Estimates, Problem};
use crate::synthgen::{corrupt_labels, generate, GeneratedScene, SceneSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Wall-clock seconds per phase.
pub type Timings = BTreeMap<String, f64>;

const SWEEP_TRIAL_TAG: u64 = 0x5157_4545_5001;
const CORRUPTION_TAG: u64 = 0x434f_5252_5550;

/// Which pixels kappa and accuracy are computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSet {
    /// Pixels outside the training set.
    Unlabeled,
    All,
}

impl EvalSet {
    pub fn from_flag(eval_all: bool) -> Self {
        if eval_all {
            EvalSet::All
        } else {
            EvalSet::Unlabeled
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateManifest {
    pub command: String,
    pub version: String,
    pub scene: SceneSpec,
    /// Endmember file used instead of synthetic spectra.
    pub endmembers_file: Option<PathBuf>,
    pub scene_id: String,
    pub outputs: Vec<PathBuf>,
    pub timings: Timings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub eval_set: EvalSet,
    pub rgmse: f64,
    pub kappa: f64,
    pub runtime_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub bundle: PathBuf,
    pub scene_id: String,
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub outputs: Vec<PathBuf>,
    pub timings: Timings,
    pub summary: RunSummary,
}

fn seconds_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Generate a scene bundle in `out` and write its manifest.
pub fn generate_bundle(spec: &SceneSpec, endmembers_file: Option<&Path>, out: &Path) -> Result<GenerateManifest> {
    let start = Instant::now();
    let mut timings = Timings::new();
    let endmembers = match endmembers_file {
        Some(path) => Some(EndmemberMatrix::new(io::read_matrix(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?),
        None => None,
    };
    let t = Instant::now();
    let g = generate(spec, endmembers)?;
    timings.insert("generate".into(), seconds_since(t));
    let t = Instant::now();
    let outputs = io::write_bundle(out, spec, &g)?;
    timings.insert("write".into(), seconds_since(t));
    timings.insert("total".into(), seconds_since(start));
    let manifest = GenerateManifest {
        command: "generate".into(),
        version: VERSION.into(),
        scene: spec.clone(),
        endmembers_file: endmembers_file.map(Path::to_path_buf),
        scene_id: io::scene_id(&g.scene.observations),
        outputs,
        timings,
    };
    io::write_json(&out.join(io::bundle::MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Check that `config` can be run on the scene and build the sampler input.
pub fn build_problem(g: &GeneratedScene, config: &ModelConfig) -> Result<Problem> {
    if config.j != g.supervision.num_classes() {
        return Err(Error::dims(format!(
            "model has j = {}, scene has {} classes",
            config.j,
            g.supervision.num_classes()
        )));
    }
    if config.r != g.endmembers.count() {
        return Err(Error::dims(format!(
            "model has r = {}, scene has {} endmembers",
            config.r,
            g.endmembers.count()
        )));
    }
    let supervision = match &config.pi {
        Some(pi) => g.supervision.clone().with_pi(pi.clone())?,
        None => g.supervision.clone(),
    };
    let problem = Problem::new(g.scene.observations.clone(), g.endmembers.clone(), supervision)?;
    problem.check_config(config)?;
    Ok(problem)
}

/// Run the sampler on a scene held in memory.
pub fn run_scene(g: &GeneratedScene, config: &ModelConfig) -> Result<ChainOutput> {
    run_chain(&build_problem(g, config)?, config, None)
}

/// Run the sampler on the bundle in `bundle_dir` and write results and a
/// manifest to `out`.
pub fn run_bundle(bundle_dir: &Path, config: &ModelConfig, out: &Path, eval_set: EvalSet) -> Result<RunManifest> {
    let start = Instant::now();
    let mut timings = Timings::new();
    let t = Instant::now();
    let (spec, g) = io::read_bundle(bundle_dir)?;
    let problem = build_problem(&g, config)?;
    timings.insert("read".into(), seconds_since(t));
    let t = Instant::now();
    let output = run_chain(&problem, config, None)?;
    let runtime_seconds = seconds_since(t);
    timings.insert("sample".into(), runtime_seconds);
    let t = Instant::now();
    let outputs = io::write_results(out, &output.estimates, &output.trace)?;
    timings.insert("write".into(), seconds_since(t));
    let eval = evaluate(&output.estimates, &g, eval_set)?;
    timings.insert("total".into(), seconds_since(start));
    let manifest = RunManifest {
        command: "run".into(),
        version: VERSION.into(),
        bundle: bundle_dir.to_path_buf(),
        scene_id: io::scene_id(&g.scene.observations),
        scene: spec,
        model: config.clone(),
        outputs,
        timings,
        summary: RunSummary {
            eval_set,
            rgmse: eval.rgmse,
            kappa: eval.kappa,
            runtime_seconds,
        },
    };
    io::write_json(&out.join(io::results::MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Metrics of a set of estimates against the scene ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub eval_set: EvalSet,
    pub pixels_evaluated: usize,
    pub rgmse: f64,
    pub kappa: f64,
    pub accuracy: f64,
    /// Fraction of pixels whose cluster matches the truth after alignment.
    pub cluster_accuracy: f64,
    /// `cluster_map[k]` is the true cluster (1-based) matched to estimated
    /// cluster `k + 1`; 0 when it is matched to none.
    pub cluster_map: Vec<usize>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    /// Estimated interaction matrix, `K x J`, in estimated cluster order.
    pub q_hat: Vec<Vec<f64>>,
    /// The same rows reordered to the true cluster order; rows of true
    /// clusters without a match are zero.
    pub q_hat_aligned: Vec<Vec<f64>>,
}

impl Evaluation {
    /// `key=value` records, one per scalar metric.
    pub fn records(&self) -> Vec<(String, String)> {
        vec![
            ("eval_set".into(), format!("{:?}", self.eval_set).to_lowercase()),
            ("pixels".into(), self.pixels_evaluated.to_string()),
            ("rgmse".into(), format!("{:.6e}", self.rgmse)),
            ("kappa".into(), format!("{:.6}", self.kappa)),
            ("accuracy".into(), format!("{:.6}", self.accuracy)),
            ("cluster_accuracy".into(), format!("{:.6}", self.cluster_accuracy)),
        ]
    }
}

/// Compare estimates with the ground truth of the scene.
pub fn evaluate(est: &Estimates, g: &GeneratedScene, eval_set: EvalSet) -> Result<Evaluation> {
    let truth = &g.scene;
    if est.omega.lattice() != truth.classes.lattice() {
        return Err(Error::dims("estimates and scene have different image sizes"));
    }
    if est.omega.domain_size() != truth.classes.domain_size() {
        return Err(Error::dims(format!(
            "estimates have {} classes, scene has {}",
            est.omega.domain_size(),
            truth.classes.domain_size()
        )));
    }
    let pixels = match eval_set {
        EvalSet::Unlabeled => Some(g.supervision.unlabeled()),
        EvalSet::All => None,
    };
    let cm = ConfusionMatrix::from_labels(
        truth.classes.labels(),
        est.omega.labels(),
        truth.classes.domain_size(),
        pixels.as_deref(),
    )?;
    let kappa = cohen_kappa(&cm)?;
    let perm = align_clusters(&est.z, &truth.clusters)?;
    let k_hat = est.z.domain_size();
    let k_true = truth.clusters.domain_size();
    let cluster_map = (0..k_hat)
        .map(|k| if perm[k] < k_true { perm[k] + 1 } else { 0 })
        .collect();
    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    };
    let q_hat = rows(&est.q);
    let mut q_hat_aligned = vec![vec![0.0; est.q.ncols()]; k_true];
    for (k, row) in q_hat.iter().enumerate() {
        if perm[k] < k_true {
            q_hat_aligned[perm[k]] = row.clone();
        }
    }
    Ok(Evaluation {
        eval_set,
        pixels_evaluated: cm.total() as usize,
        rgmse: rgmse(est.abundances.data(), truth.abundances.data())?,
        kappa,
        accuracy: cm.accuracy(),
        cluster_accuracy: matched_fraction(&est.z, &truth.clusters, &perm),
        cluster_map,
        confusion: cm.counts().to_vec(),
        q_hat,
        q_hat_aligned,
    })
}

/// Evaluate a results directory against a bundle. When the results carry a
/// manifest, its scene checksum must match the bundle.
pub fn evaluate_dirs(results_dir: &Path, bundle_dir: &Path, eval_set: EvalSet) -> Result<Evaluation> {
    let (_, g) = io::read_bundle(bundle_dir)?;
    let manifest_path = results_dir.join(io::results::MANIFEST);
    if manifest_path.exists() {
        let manifest: RunManifest = io::read_json(&manifest_path)?;
        let id = io::scene_id(&g.scene.observations);
        if manifest.scene_id != id {
            return Err(Error::config(format!(
                "results in {} were produced from scene {}, bundle {} is scene {}",
                results_dir.display(),
                manifest.scene_id,
                bundle_dir.display(),
                id
            )));
        }
    }
    let est = io::read_results(results_dir)?;
    evaluate(&est, &g, eval_set)
}

/// Seed of trial `t`; trial 0 uses the master seed itself.
pub fn trial_seed(master: u64, t: usize) -> u64 {
    if t == 0 {
        master
    } else {
        SeedStream::new(master).derive_seed(&[SWEEP_TRIAL_TAG, t as u64])
    }
}

/// Kappa statistics of one corruption level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub mean_kappa: f64,
    /// Sample standard deviation over trials (0 for a single trial).
    pub std_kappa: f64,
    pub kappas: Vec<f64>,
}

/// For each `alpha`, corrupt the training labels and rerun the chain in
/// `trials` independent trials. Trials run in parallel.
pub fn sweep_corruption(
    g: &GeneratedScene,
    config: &ModelConfig,
    alphas: &[f64],
    trials: usize,
    eval_set: EvalSet,
) -> Result<Vec<SweepRow>> {
    if trials == 0 {
        return Err(Error::config("trials must be at least 1"));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(Error::config(format!("corruption level {a} outside [0, 1)")));
    }
    let jobs: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|i| (0..trials).map(move |t| (i, t)))
        .collect();
    let kappas: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(i, t)| {
            let alpha = alphas[i];
            let seed = trial_seed(config.seed, t);
            let mut rng = SeedStream::new(seed).rng(&[CORRUPTION_TAG, alpha.to_bits()]);
            let mut trial = g.clone();
            trial.supervision = corrupt_labels(&g.supervision, alpha, &mut rng)?;
            let cfg = ModelConfig { seed, ..config.clone() };
            let out = run_scene(&trial, &cfg)?;
            // kappa is measured against the true classes and the clean split
            let mut clean = trial;
            clean.supervision = g.supervision.clone();
            Ok(evaluate(&out.estimates, &clean, eval_set)?.kappa)
        })
        .collect();
    let mut rows = Vec::with_capacity(alphas.len());
    let mut it = kappas.into_iter();
    for &alpha in alphas {
        let ks = (0..trials)
            .map(|_| it.next().expect("one result per job"))
            .collect::<Result<Vec<f64>>>()?;
        let n = ks.len() as f64;
        let mean = ks.iter().sum::<f64>() / n;
        let std = if ks.len() > 1 {
            (ks.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(SweepRow {
            alpha,
            mean_kappa: mean,
            std_kappa: std,
            kappas: ks,
        });
    }
    Ok(rows)
}

/// The corruption grid 0, 0.05, ..., 0.4.
pub fn default_alphas() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.05).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::TrainingSpec;

    fn tiny_spec(seed: u64) -> SceneSpec {
        let mut s = SceneSpec::image1(seed);
        s.height = 16;
        s.width = 16;
        s.bands = 30;
        s.potts_beta = 1.0;
        s.potts_sweeps = 10;
        s.training = TrainingSpec::TopRows(0.25);
        s.max_training_shift = None;
        s
    }

    fn tiny_config(seed: u64) -> ModelConfig {
        let mut c = ModelConfig::new(3, 2, 3, seed);
        c.n_burnin = 3;
        c.n_mc = 4;
        c
    }

    #[test]
    fn trial_zero_uses_master_seed() {
        assert_eq!(trial_seed(42, 0), 42);
        let seeds: std::collections::HashSet<u64> = (0..20).map(|t| trial_seed(42, t)).collect();
        assert_eq!(seeds.len(), 20);
    }

    #[test]
    fn default_grid() {
        let a = default_alphas();
        assert_eq!(a.len(), 9);
        assert_eq!(a[0], 0.0);
        assert!((a[8] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn truth_evaluates_perfectly() {
        let g = generate(&tiny_spec(1), None).unwrap();
        let est = Estimates {
            abundances: g.scene.abundances.clone(),
            s2: g.scene.noise_variance,
            psi: nalgebra::DMatrix::from_element(3, 3, 1.0 / 3.0),
            sigma2: nalgebra::DMatrix::from_element(3, 3, 0.01),
            q: nalgebra::DMatrix::from_element(3, 2, 1.0 / 3.0),
            z: g.scene.clusters.clone(),
            omega: g.scene.classes.clone(),
            omega_freq: nalgebra::DMatrix::zeros(2, 256),
        };
        let e = evaluate(&est, &g, EvalSet::All).unwrap();
        assert_eq!(e.kappa, 1.0);
        assert_eq!(e.rgmse, 0.0);
        assert_eq!(e.cluster_accuracy, 1.0);
        assert_eq!(e.pixels_evaluated, 256);
        let u = evaluate(&est, &g, EvalSet::Unlabeled).unwrap();
        assert_eq!(u.pixels_evaluated, 256 - 64);
    }

    #[test]
    fn single_zero_alpha_trial_matches_plain_run() {
        let g = generate(&tiny_spec(2), None).unwrap();
        let cfg = tiny_config(5);
        let rows = sweep_corruption(&g, &cfg, &[0.0], 1, EvalSet::Unlabeled).unwrap();
        let out = run_scene(&g, &cfg).unwrap();
        let direct = evaluate(&out.estimates, &g, EvalSet::Unlabeled).unwrap();
        assert_eq!(rows[0].kappas, vec![direct.kappa]);
        assert_eq!(rows[0].std_kappa, 0.0);
    }

    #[test]
    fn run_rejects_mismatched_classes() {
        let g = generate(&tiny_spec(3), None).unwrap();
        let mut cfg = tiny_config(1);
        cfg.j = 3;
        assert!(matches!(run_scene(&g, &cfg), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn bundle_round_trip_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let b1 = dir.path().join("b1");
        let b2 = dir.path().join("b2");
        let res = dir.path().join("res");
        let m = generate_bundle(&tiny_spec(4), None, &b1).unwrap();
        generate_bundle(&tiny_spec(5), None, &b2).unwrap();
        let (spec, g) = io::read_bundle(&b1).unwrap();
        assert_eq!(spec, tiny_spec(4));
        assert_eq!(io::scene_id(&g.scene.observations), m.scene_id);
        let fresh = generate(&tiny_spec(4), None).unwrap();
        assert_eq!(g.scene, fresh.scene);
        assert_eq!(g.supervision, fresh.supervision);

        let run = run_bundle(&b1, &tiny_config(1), &res, EvalSet::Unlabeled).unwrap();
        let e = evaluate_dirs(&res, &b1, EvalSet::Unlabeled).unwrap();
        assert_eq!(e.kappa, run.summary.kappa);
        assert!(matches!(
            evaluate_dirs(&res, &b2, EvalSet::Unlabeled),
            Err(Error::InvalidConfig(_))
        ));
    }
}
