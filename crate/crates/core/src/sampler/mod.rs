//! Gibbs sampler over abundances, noise variance, cluster parameters, cluster
//! labels, interaction matrix and class labels.
//!
//! One sweep updates, in order: `A`, `s2`, `psi`, `sigma2`, `z`, `Q`, `omega`.
//! During burn-in the cluster field uses the configured `beta1`; afterwards
//! `beta1` is set to zero so the interaction matrix conditional is exact.
//! Estimates are posterior means of the continuous blocks and per-pixel modes
//! of the label fields over the post-burn-in iterations.

mod init;
mod steps;
mod trace;

use nalgebra::DMatrix;

pub use init::{initialize_state, kmeans_plus_plus, ridge_abundances};
pub use steps::{
    abundance_posterior, class_label_log_weights, cluster_label_log_weights, cluster_variance_posteriors, joint_counts,
    noise_variance_posterior, sample_abundance, sample_abundances, sample_class_labels, sample_cluster_labels,
    sample_cluster_means, sample_cluster_variances, sample_interaction_matrix, sample_noise_variance,
    total_squared_residual, RESIDUAL_FLOOR, VARIANCE_FLOOR,
};
pub use trace::{Estimates, Trace};

use crate::distributions::SeedStream;
use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::model::{
    AbundanceMatrix, ClusterParams, EndmemberMatrix, InteractionMatrix, LabelField, ModelConfig, NoiseModel,
    ObservationMatrix, SupervisionData,
};
use steps::phase;

/// Observed data together with the quantities every sweep reuses.
#[derive(Clone, Debug)]
pub struct Problem {
    observations: ObservationMatrix,
    endmembers: EndmemberMatrix,
    supervision: SupervisionData,
    /// `M^T Y`, `R x P`.
    mty: DMatrix<f64>,
    /// `M^T M`, `R x R`.
    gram: DMatrix<f64>,
    /// `||y_p||^2` per pixel.
    y_norms: Vec<f64>,
}

impl Problem {
    pub fn new(
        observations: ObservationMatrix,
        endmembers: EndmemberMatrix,
        supervision: SupervisionData,
    ) -> Result<Self> {
        if observations.bands() != endmembers.bands() {
            return Err(Error::dims(format!(
                "observations have {} bands, endmembers {}",
                observations.bands(),
                endmembers.bands()
            )));
        }
        if supervision.num_pixels() != observations.pixels() {
            return Err(Error::dims(format!(
                "supervision covers {} pixels, image has {}",
                supervision.num_pixels(),
                observations.pixels()
            )));
        }
        let m = endmembers.data();
        let y = observations.data();
        let mty = m.tr_mul(y);
        let gram = m.tr_mul(m);
        let y_norms = y.column_iter().map(|c| c.norm_squared()).collect();
        Ok(Self {
            observations,
            endmembers,
            supervision,
            mty,
            gram,
            y_norms,
        })
    }

    pub fn observations(&self) -> &ObservationMatrix {
        &self.observations
    }

    pub fn endmembers(&self) -> &EndmemberMatrix {
        &self.endmembers
    }

    pub fn supervision(&self) -> &SupervisionData {
        &self.supervision
    }

    pub fn lattice(&self) -> &Lattice {
        self.observations.lattice()
    }

    pub fn mty(&self) -> &DMatrix<f64> {
        &self.mty
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn y_norms(&self) -> &[f64] {
        &self.y_norms
    }

    pub fn pixels(&self) -> usize {
        self.observations.pixels()
    }

    pub fn bands(&self) -> usize {
        self.observations.bands()
    }

    /// Check that `config` matches the data dimensions.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        if config.r != self.endmembers.count() {
            return Err(Error::dims(format!(
                "config has r = {}, endmember matrix has {} columns",
                config.r,
                self.endmembers.count()
            )));
        }
        if config.j != self.supervision.num_classes() {
            return Err(Error::dims(format!(
                "config has j = {}, training labels have {} classes",
                config.j,
                self.supervision.num_classes()
            )));
        }
        if config.k > self.pixels() {
            return Err(Error::config(format!(
                "k = {} exceeds the number of pixels {}",
                config.k,
                self.pixels()
            )));
        }
        Ok(())
    }
}

/// Current values of every unknown of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub a: AbundanceMatrix,
    pub noise: NoiseModel,
    pub clusters: ClusterParams,
    pub z: LabelField,
    pub q: InteractionMatrix,
    pub omega: LabelField,
    /// Completed sweeps.
    pub iteration: usize,
    /// Potts granularity currently applied to the cluster field.
    pub effective_beta1: f64,
}

impl ChainState {
    /// Check every invariant of the state.
    pub fn validate(&self) -> Result<()> {
        let k = self.clusters.clusters();
        let (r, p) = self.a.data().shape();
        if self.a.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Invariant("non-finite abundance".into()));
        }
        if !(self.noise.s2.is_finite() && self.noise.s2 > 0.0) {
            return Err(Error::Invariant(format!("noise variance {}", self.noise.s2)));
        }
        if self.clusters.dim() != r {
            return Err(Error::Invariant("cluster dimension differs from abundances".into()));
        }
        self.clusters.validate()?;
        self.z.validate()?;
        self.omega.validate()?;
        self.q.validate()?;
        if self.z.domain_size() != k || self.q.q.nrows() != k {
            return Err(Error::Invariant("cluster count mismatch".into()));
        }
        if self.q.q.ncols() != self.omega.domain_size() {
            return Err(Error::Invariant("class count mismatch".into()));
        }
        if self.z.labels().len() != p || self.omega.labels().len() != p {
            return Err(Error::Invariant("label field size mismatch".into()));
        }
        if self.effective_beta1 < 0.0 {
            return Err(Error::Invariant("negative beta1".into()));
        }
        Ok(())
    }
}

/// Result of a full chain.
#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub estimates: Estimates,
    pub trace: Trace,
    pub final_state: ChainState,
}

/// A Gibbs chain that can be advanced one sweep at a time.
pub struct Chain<'a> {
    problem: &'a Problem,
    config: ModelConfig,
    zeta: Vec<f64>,
    seeds: SeedStream,
    state: ChainState,
    trace: Trace,
}

impl<'a> Chain<'a> {
    /// Start a chain from `init`, or from [`initialize_state`] when `None`.
    pub fn new(problem: &'a Problem, config: &ModelConfig, init: Option<ChainState>) -> Result<Self> {
        problem.check_config(config)?;
        let problem_ref = problem;
        let seeds = SeedStream::new(config.seed);
        let mut state = match init {
            Some(s) => s,
            None => initialize_state(problem_ref, config, &seeds)?,
        };
        state.validate()?;
        state.effective_beta1 = if config.n_burnin > 0 { config.beta1 } else { 0.0 };
        let trace = Trace::new(&state);
        Ok(Self {
            problem,
            config: config.clone(),
            zeta: config.zeta(),
            seeds,
            state,
            trace,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn total_iterations(&self) -> usize {
        self.config.n_burnin + self.config.n_mc
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.total_iterations()
    }

    /// Run one sweep and record it if past burn-in.
    pub fn sweep(&mut self) -> Result<()> {
        let t = self.state.iteration;
        let burning = t < self.config.n_burnin;
        self.state.effective_beta1 = if burning { self.config.beta1 } else { 0.0 };
        let it = t as u64;
        let problem = self.problem;
        let seeds = &self.seeds;
        let cfg = &self.config;
        let ctx = |e: Error| e.with_context(format!("iteration {}", t + 1));

        sample_abundances(problem, &mut self.state, seeds, it).map_err(ctx)?;
        let s2 = sample_noise_variance(problem, &self.state, &mut seeds.rng(&[it, phase::NOISE])).map_err(ctx)?;
        self.state.noise = NoiseModel { s2 };
        sample_cluster_means(&mut self.state, cfg.inner_iters, &mut seeds.rng(&[it, phase::MEANS])).map_err(ctx)?;
        sample_cluster_variances(
            &mut self.state,
            cfg.xi,
            cfg.gamma,
            &mut seeds.rng(&[it, phase::VARIANCES]),
        )
        .map_err(ctx)?;
        sample_cluster_labels(problem, &mut self.state, cfg.schedule, seeds, it).map_err(ctx)?;
        sample_interaction_matrix(&mut self.state, &self.zeta, &mut seeds.rng(&[it, phase::INTERACTION]))
            .map_err(ctx)?;
        sample_class_labels(problem, &mut self.state, cfg.beta2, cfg.schedule, seeds, it).map_err(ctx)?;

        self.state.iteration += 1;
        if cfg.debug_validate {
            self.state
                .validate()
                .map_err(|e| Error::Invariant(format!("after sweep {}: {e}", t + 1)))?;
        }
        if !burning {
            self.trace.record(&self.state);
        }
        Ok(())
    }

    /// Run the remaining sweeps, calling `observer` after each one.
    pub fn run_with(mut self, mut observer: impl FnMut(&ChainState)) -> Result<ChainOutput> {
        while !self.is_done() {
            self.sweep()?;
            observer(&self.state);
        }
        let estimates = self.trace.estimates(self.problem.lattice())?;
        Ok(ChainOutput {
            estimates,
            trace: self.trace,
            final_state: self.state,
        })
    }

    pub fn run(self) -> Result<ChainOutput> {
        self.run_with(|_| {})
    }
}

/// Run `n_burnin + n_mc` sweeps and return the estimates and the trace.
pub fn run_chain(problem: &Problem, config: &ModelConfig, init: Option<ChainState>) -> Result<ChainOutput> {
    Chain::new(problem, config, init)?.run()
}
