//! `hbum`: generate synthetic scenes, run the sampler, evaluate results and
//! sweep training-label corruption.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hbum::io;
use hbum::model::ModelConfig;
use hbum::pipeline::{self, EvalSet, Evaluation, GenerateManifest, RunManifest};
use hbum::synthgen::SceneSpec;
use hbum::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "hbum",
    version,
    about = "Bayesian unmixing and robust classification of hyperspectral images"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "HBUM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle from a scene description.
    Generate {
        /// Scene description (JSON).
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the scene seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Endmember matrix (HBUM1, bands x R) used instead of synthetic spectra.
        #[arg(long)]
        endmembers: Option<PathBuf>,
    },
    /// Run the sampler on a scene bundle.
    Run {
        bundle: PathBuf,
        /// Model configuration (JSON).
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Report kappa on every pixel instead of the unlabeled ones.
        #[arg(long)]
        eval_all: bool,
    },
    /// Compare results with the ground truth of their bundle.
    Evaluate {
        results: PathBuf,
        bundle: PathBuf,
        /// Where to write the JSON summary (default: <results>/metrics.json).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        eval_all: bool,
    },
    /// Kappa as a function of the training-label corruption probability.
    SweepCorruption {
        bundle: PathBuf,
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated corruption probabilities (default 0, 0.05, ..., 0.4).
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        eval_all: bool,
    },
    /// Re-execute the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    /// Total iterations, burn-in included.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
}

impl Overrides {
    fn apply(&self, mut c: ModelConfig) -> hbum::Result<ModelConfig> {
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(b) = self.beta1 {
            c.beta1 = b;
        }
        if let Some(b) = self.beta2 {
            c.beta2 = b;
        }
        let total = self.iters.unwrap_or(c.n_burnin + c.n_mc);
        if let Some(b) = self.burnin {
            c.n_burnin = b;
        }
        if self.iters.is_some() || self.burnin.is_some() {
            if total <= c.n_burnin {
                return Err(Error::InvalidConfig(format!(
                    "{total} total iterations leave none after {} burn-in iterations",
                    c.n_burnin
                )));
            }
            c.n_mc = total - c.n_burnin;
        }
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Degenerate(_) | Error::Invariant(_) => EXIT_DEGENERATE,
        Error::Io { .. } | Error::Checksum { .. } => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn print_records(records: &[(String, String)]) {
    for (k, v) in records {
        println!("{k}={v}");
    }
}

fn print_evaluation(e: &Evaluation) {
    print_records(&e.records());
    eprintln!("confusion (rows: true class, columns: estimated class)");
    for (i, row) in e.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>8}")).collect();
        eprintln!("  class {:>2} {}", i + 1, cells.join(""));
    }
    eprintln!("estimated Q (rows: true cluster after alignment, columns: class)");
    for (k, row) in e.q_hat_aligned.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|q| format!("{q:>8.3}")).collect();
        eprintln!("  cluster {:>2} {}", k + 1, cells.join(""));
    }
}

fn generate(scene: &SceneSpec, endmembers: Option<&Path>, out: &Path) -> hbum::Result<()> {
    let m = pipeline::generate_bundle(scene, endmembers, out)?;
    print_records(&[
        ("scene_id".into(), m.scene_id),
        ("pixels".into(), (scene.height * scene.width).to_string()),
        ("bands".into(), scene.bands.to_string()),
        ("out".into(), out.display().to_string()),
    ]);
    Ok(())
}

fn run(bundle: &Path, config: &ModelConfig, out: &Path, eval_set: EvalSet) -> hbum::Result<()> {
    let m = pipeline::run_bundle(bundle, config, out, eval_set)?;
    print_records(&[
        ("rgmse".into(), format!("{:.6e}", m.summary.rgmse)),
        ("kappa".into(), format!("{:.6}", m.summary.kappa)),
        ("eval_set".into(), format!("{:?}", m.summary.eval_set).to_lowercase()),
        ("runtime_seconds".into(), format!("{:.3}", m.summary.runtime_seconds)),
        ("out".into(), out.display().to_string()),
    ]);
    Ok(())
}

/// The `command` field of a manifest, read before committing to a type.
#[derive(serde::Deserialize)]
struct ManifestKind {
    command: String,
}

fn replay(manifest: &Path, out: &Path) -> hbum::Result<()> {
    let kind: ManifestKind = io::read_json(manifest)?;
    match kind.command.as_str() {
        "generate" => {
            let m: GenerateManifest = io::read_json(manifest)?;
            generate(&m.scene, m.endmembers_file.as_deref(), out)
        }
        "run" => {
            let m: RunManifest = io::read_json(manifest)?;
            run(&m.bundle, &m.model, out, m.summary.eval_set)
        }
        other => Err(Error::Format {
            path: manifest.to_path_buf(),
            message: format!("unknown command {other:?}"),
        }),
    }
}

fn execute(command: Command) -> hbum::Result<()> {
    match command {
        Command::Generate {
            scene,
            out,
            seed,
            endmembers,
        } => {
            let mut spec: SceneSpec = io::read_json(&scene)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            spec.validate()?;
            generate(&spec, endmembers.as_deref(), &out)
        }
        Command::Run {
            bundle,
            config,
            out,
            overrides,
            eval_all,
        } => {
            let config = overrides.apply(io::read_json(&config)?)?;
            run(&bundle, &config, &out, EvalSet::from_flag(eval_all))
        }
        Command::Evaluate {
            results,
            bundle,
            out,
            eval_all,
        } => {
            let e = pipeline::evaluate_dirs(&results, &bundle, EvalSet::from_flag(eval_all))?;
            let path = out.unwrap_or_else(|| results.join("metrics.json"));
            io::write_json(&path, &e)?;
            print_evaluation(&e);
            Ok(())
        }
        Command::SweepCorruption {
            bundle,
            config,
            out,
            alphas,
            trials,
            overrides,
            eval_all,
        } => {
            let config = overrides.apply(io::read_json(&config)?)?;
            let (_, g) = io::read_bundle(&bundle)?;
            let alphas = alphas.unwrap_or_else(pipeline::default_alphas);
            let rows = pipeline::sweep_corruption(&g, &config, &alphas, trials, EvalSet::from_flag(eval_all))?;
            io::create_dir(&out)?;
            io::write_json(&out.join("sweep.json"), &rows)?;
            for r in &rows {
                println!(
                    "alpha={:.3} mean_kappa={:.6} std_kappa={:.6}",
                    r.alpha, r.mean_kappa, r.std_kappa
                );
            }
            Ok(())
        }
        Command::Replay { manifest, out } => replay(&manifest, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
