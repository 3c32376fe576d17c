//! Command-line front end. Exit codes: 0 success, 1 runtime failure, 2 usage.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Parser, Subcommand};

use crate::checkpoint::{latest_checkpoint, load_generator};
use crate::colorspace::{BlendWeight, ValueRange};
use crate::data::{ingest_with, load_hints, DatasetManifest, Split, MANIFEST_FILE};
use crate::error::Error;
use crate::pipeline::{
    colorize, evaluate, finish, gradcheck, train, EvalConfig, GradcheckConfig, InferenceRequest, Priors,
    TrainConfig, TrainOptions,
};
use crate::priors::{external_prior_adapter, PriorRole};
use crate::raster;
use crate::service::{self, AppState, ServiceConfig};

pub const CHECKPOINT_ENV: &str = "MANGA_COLORIZE_CHECKPOINT";

#[derive(Debug, Parser)]
#[command(name = "manga-colorize", version, about = "User-guided manga colorization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a folder of color pages and write its dataset manifest.
    Ingest {
        root: PathBuf,
        /// Every n-th image (by content hash) goes to the eval split; 0 disables it.
        #[arg(long, default_value_t = 10)]
        eval_every: u64,
        /// Defaults to `<root>/manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train from a TOML config.
    Train {
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Colorize one black-and-white page.
    Colorize {
        image: PathBuf,
        #[arg(long)]
        hints: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        lambda_ab: f64,
        /// Checkpoint file, or a directory whose latest checkpoint is used.
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use the posterior mean instead of a seeded sample.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write x_g, x_col and the raw generator output here.
        #[arg(long)]
        stages_dir: Option<PathBuf>,
        /// HTTP endpoint of an external shading model.
        #[arg(long)]
        shading_endpoint: Option<String>,
        /// HTTP endpoint of an external rough colorization model.
        #[arg(long)]
        rough_color_endpoint: Option<String>,
    },
    /// Re-blend chroma of a generator output with a rough colorization.
    Blend {
        y_hat: PathBuf,
        x_col: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        lambda_ab: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean L1 and perceptual distance of a checkpoint over a manifest split.
    Eval {
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Autodiff vs finite-difference check of the adaptive-weight gradients.
    Gradcheck {
        /// Training config whose model and loss settings are checked; the tiny
        /// model is used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080", env = "MANGA_COLORIZE_BIND")]
        bind: SocketAddr,
        #[arg(long, default_value_t = 32 * 1024 * 1024)]
        max_upload_bytes: usize,
        #[arg(long, default_value_t = 2)]
        workers: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
        }
    }
}

/// Outcome of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

impl CommandResult {
    fn ok(summary: impl Into<String>, artifacts: Vec<PathBuf>) -> Self {
        Self {
            exit_code: 0,
            summary: summary.into(),
            artifacts,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult = Result<CommandResult, CliError>;

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn resolve_checkpoint(flag: Option<&Path>) -> Result<PathBuf, CliError> {
    let path = flag.ok_or_else(|| {
        CliError::Usage(format!("no checkpoint given (pass --checkpoint or set {CHECKPOINT_ENV})"))
    })?;
    require_file(path, "checkpoint")?;
    if path.is_dir() {
        latest_checkpoint(path)?
            .ok_or_else(|| CliError::Usage(format!("no checkpoints in {}", path.display())))
    } else {
        Ok(path.to_path_buf())
    }
}

fn blend_weight(lambda_ab: f64) -> Result<BlendWeight, CliError> {
    BlendWeight::new(lambda_ab).map_err(|e| CliError::Usage(format!("--lambda-ab: {e}")))
}

pub fn cmd_ingest(root: &Path, eval_every: u64, manifest: Option<&Path>) -> CliResult {
    require_file(root, "dataset root")?;
    let m = ingest_with(root, eval_every)?;
    let out = manifest.map(Path::to_path_buf).unwrap_or_else(|| root.join(MANIFEST_FILE));
    m.save(&out)?;
    let eval = m.split(Split::Eval).count();
    Ok(CommandResult::ok(
        format!(
            "{} images ({} train, {eval} eval), {} rejected -> {}",
            m.entries.len(),
            m.entries.len() - eval,
            m.rejected.len(),
            out.display()
        ),
        vec![out],
    ))
}

pub fn cmd_train(config: &Path, manifest: &Path, out: &Path, resume: Option<&Path>) -> CliResult {
    require_file(config, "config")?;
    require_file(manifest, "manifest")?;
    if let Some(r) = resume {
        require_file(r, "resume checkpoint")?;
    }
    let cfg = TrainConfig::load(config)?;
    let m = DatasetManifest::load(manifest)?;
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        resume: resume.map(Path::to_path_buf),
    };
    let state = train(cfg, &m, &opts)?;
    let last = latest_checkpoint(out)?;
    Ok(CommandResult::ok(
        format!("trained to step {}", state.step),
        last.into_iter().chain([out.join(crate::pipeline::TRAIN_LOG)]).collect(),
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_colorize(
    image: &Path,
    hints: Option<&Path>,
    reference: Option<&Path>,
    lambda_ab: f64,
    checkpoint: Option<&Path>,
    out: &Path,
    deterministic: bool,
    seed: u64,
    stages_dir: Option<&Path>,
    priors: Priors,
) -> CliResult {
    let lambda = blend_weight(lambda_ab)?;
    let ckpt = resolve_checkpoint(checkpoint)?;
    require_file(image, "image")?;
    let hints = match hints {
        Some(p) => {
            require_file(p, "hints")?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(load_hints(&text)?)
        }
        None => None,
    };
    let reference = match reference {
        Some(p) => {
            require_file(p, "reference")?;
            Some(raster::load_stack(p)?)
        }
        None => None,
    };
    let model = load_generator(&ckpt, DType::F32)?;
    let mut req = InferenceRequest::new(raster::load_plane(image)?);
    req.hints = hints;
    req.reference = reference;
    req.lambda_ab = lambda;
    req.deterministic = deterministic;
    req.seed = seed;
    let result = colorize(&req, &priors, &model)?;
    raster::save_stack(&result.y, out)?;
    let mut artifacts = vec![out.to_path_buf()];
    if let Some(dir) = stages_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (g, c, y) = (dir.join("x_g.png"), dir.join("x_col.png"), dir.join("y_hat.png"));
        raster::save_plane(&result.x_g, &g)?;
        raster::save_stack(&result.x_col, &c)?;
        raster::save_stack(&result.y_hat, &y)?;
        artifacts.extend([g, c, y]);
    }
    Ok(CommandResult::ok(
        format!("colorized {} -> {} ({} pixels gamut-clipped)", image.display(), out.display(), result.clipped),
        artifacts,
    ))
}

pub fn cmd_blend(y_hat: &Path, x_col: &Path, lambda_ab: f64, out: &Path) -> CliResult {
    let lambda = blend_weight(lambda_ab)?;
    require_file(y_hat, "y_hat")?;
    require_file(x_col, "x_col")?;
    let a = raster::load_stack(y_hat)?;
    let b = raster::load_stack(x_col)?;
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("y_hat {:?} vs x_col {:?}", a.dims(), b.dims())).into());
    }
    let mapped = finish(&a, &b, lambda)?;
    raster::save_stack(&mapped.image.to_range(ValueRange::Unit)?, out)?;
    Ok(CommandResult::ok(
        format!("blended at lambda_ab = {} -> {}", lambda.get(), out.display()),
        vec![out.to_path_buf()],
    ))
}

pub fn cmd_eval(checkpoint: Option<&Path>, manifest: &Path, split: Split, seed: u64) -> CliResult {
    let ckpt = resolve_checkpoint(checkpoint)?;
    require_file(manifest, "manifest")?;
    let cfg = crate::checkpoint::read_manifest(&ckpt)?.config;
    let model = load_generator(&ckpt, DType::F32)?;
    let m = DatasetManifest::load(manifest)?;
    let eval_cfg = EvalConfig {
        split,
        degradation: cfg.degradation,
        prepare: cfg.prepare,
        seed,
    };
    let metrics = evaluate(&model, &m, &eval_cfg)?;
    Ok(CommandResult::ok(serde_json::to_string(&metrics).map_err(Error::from)?, vec![]))
}

pub fn cmd_gradcheck(config: Option<&Path>, tolerance: f64) -> CliResult {
    let cfg = match config {
        Some(p) => {
            require_file(p, "config")?;
            GradcheckConfig::from(&TrainConfig::load(p)?)
        }
        None => GradcheckConfig::default(),
    };
    let report = gradcheck(&cfg)?;
    let summary = format!(
        "{} weights; reconstruction rel. error {:.3e}, adversarial rel. error {:.3e}; max relative error {:.3e}",
        report.entries,
        report.reconstruction_rel_error,
        report.adversarial_rel_error,
        report.max_relative_error()
    );
    if report.max_relative_error() >= tolerance {
        return Err(Error::Contract(format!("{summary} exceeds tolerance {tolerance}")).into());
    }
    Ok(CommandResult::ok(summary, vec![]))
}

pub fn cmd_serve(checkpoint: Option<&Path>, bind: SocketAddr, config: ServiceConfig, priors: Priors) -> CliResult {
    let ckpt = resolve_checkpoint(checkpoint)?;
    let model = load_generator(&ckpt, DType::F32)?;
    service::run(bind, AppState::new(model, priors, config))?;
    Ok(CommandResult::ok("server stopped", vec![]))
}

fn priors_from(shading: Option<&str>, rough: Option<&str>) -> Result<Priors, CliError> {
    let mut p = Priors::default();
    if let Some(url) = shading {
        p.shading = std::sync::Arc::new(
            external_prior_adapter(url, PriorRole::Shading).map_err(|e| CliError::Usage(e.to_string()))?,
        );
    }
    if let Some(url) = rough {
        p.rough_color = std::sync::Arc::new(
            external_prior_adapter(url, PriorRole::RoughColor).map_err(|e| CliError::Usage(e.to_string()))?,
        );
    }
    Ok(p)
}

pub fn execute(cli: Cli) -> CliResult {
    match cli.command {
        Command::Ingest {
            root,
            eval_every,
            manifest,
        } => cmd_ingest(&root, eval_every, manifest.as_deref()),
        Command::Train {
            config,
            manifest,
            out,
            resume,
        } => cmd_train(&config, &manifest, &out, resume.as_deref()),
        Command::Colorize {
            image,
            hints,
            reference,
            lambda_ab,
            checkpoint,
            out,
            deterministic,
            seed,
            stages_dir,
            shading_endpoint,
            rough_color_endpoint,
        } => {
            let priors = priors_from(shading_endpoint.as_deref(), rough_color_endpoint.as_deref())?;
            cmd_colorize(
                &image,
                hints.as_deref(),
                reference.as_deref(),
                lambda_ab,
                checkpoint.as_deref(),
                &out,
                deterministic,
                seed,
                stages_dir.as_deref(),
                priors,
            )
        }
        Command::Blend {
            y_hat,
            x_col,
            lambda_ab,
            out,
        } => cmd_blend(&y_hat, &x_col, lambda_ab, &out),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            seed,
        } => cmd_eval(checkpoint.as_deref(), &manifest, split.into(), seed),
        Command::Gradcheck { config, tolerance } => cmd_gradcheck(config.as_deref(), tolerance),
        Command::Serve {
            checkpoint,
            bind,
            max_upload_bytes,
            workers,
        } => cmd_serve(
            checkpoint.as_deref(),
            bind,
            ServiceConfig {
                max_upload_bytes,
                workers,
                ..ServiceConfig::default()
            },
            Priors::default(),
        ),
    }
}

/// Parses `args` (including the program name), runs the command and reports
/// to stdout/stderr. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(r) => {
            println!("{}", r.summary);
            r.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}
