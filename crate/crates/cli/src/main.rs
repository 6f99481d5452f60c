use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use caft_core::maskops::{gaussian_smooth, read_mask, BoxPolicy};
use caft_core::merge::MergeRatios;
use caft_core::pipeline::{
    cmd_cluster, cmd_diagnose, cmd_eval, cmd_predict, cmd_refine, cmd_train, load_predictions, load_predictor,
    run_pipeline, PipelineConfig,
};
use caft_core::synth::{
    direct_convolution_oracle, exact_kmeans_oracle, gaussian_kernel_2d, generate_synthetic, write_synthetic, SynthConfig,
};
use caft_core::token_io::{load_manifest, DatasetManifest};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Weakly supervised localization from vision-transformer tokens.
#[derive(Parser, Debug)]
#[command(name = "caft", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Phase (a): cluster tokens into pseudo masks.
    Cluster(StageArgs),
    /// Train a filter on masks named `<id>.mask` in a directory.
    Train {
        #[command(flatten)]
        stage: StageArgs,
        /// Directory holding one `<id>.mask` per manifest image.
        #[arg(long)]
        masks: PathBuf,
    },
    /// Phase (c) data preparation: refined targets from quadrant predictions.
    Refine {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Predict one box per image.
    Predict {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        model: PathBuf,
        /// Skip smoothing of predicted masks.
        #[arg(long)]
        no_denoise: bool,
    },
    /// Score predictions against the manifest's ground truth.
    Eval {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Similarity maps and clustering metrics per image.
    Diagnose(StageArgs),
    /// All three phases followed by prediction and evaluation.
    Run(StageArgs),
    /// Synthetic data and reference oracles.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
}

#[derive(Args, Debug)]
struct StageArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Largest,
    All,
}

/// Overrides applied on top of `--config` (or the defaults).
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON file mirroring the pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Derive every component seed from this value.
    #[arg(long)]
    seed: Option<u64>,
    /// Merge ratios `a0,a1,a2,ap`.
    #[arg(long)]
    alpha: Option<MergeRatios>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    filter_radius: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum)]
    box_policy: Option<PolicyArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    blocks: Option<usize>,
    /// First-block kernel size, 1 or 3.
    #[arg(long)]
    kernel: Option<usize>,
}

/// Invalid option values; reported with the usage exit code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let cfg = self.apply()?;
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }

    fn apply(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(a) = self.alpha {
            cfg.ratios = a;
        }
        if let Some(k) = self.k {
            cfg.kmeans.k = k;
        }
        if let Some(s) = self.sigma {
            cfg.filter.sigma = s;
        }
        if let Some(r) = self.filter_radius {
            cfg.filter.radius = r;
        }
        if let Some(t) = self.threshold {
            cfg.filter.threshold = t;
        }
        if let Some(p) = self.box_policy {
            cfg.box_policy = match p {
                PolicyArg::Largest => BoxPolicy::LargestComponent,
                PolicyArg::All => BoxPolicy::AllForeground,
            };
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr0 = lr;
        }
        if let Some(b) = self.blocks {
            cfg.atf.n_hidden_blocks = b;
        }
        if let Some(k) = self.kernel {
            cfg.atf.first_kernel = k;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum SynthCommand {
    /// Write a planted-truth dataset (CTM files, masks, manifest).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_images: usize,
        #[arg(long, default_value_t = 24)]
        height: usize,
        #[arg(long, default_value_t = 24)]
        width: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 8.0)]
        separation: f64,
        #[arg(long, default_value_t = 0.02)]
        flip: f64,
        #[arg(long, default_value_t = 0.1)]
        rect_min: f64,
        #[arg(long, default_value_t = 0.4)]
        rect_max: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reference computations for spot checks.
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
}

#[derive(Subcommand, Debug)]
enum OracleCommand {
    /// Exact k-means optimum of a JSON array of points (at most 12, k <= 3).
    Kmeans {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        k: usize,
    },
    /// Largest gap between separable and direct smoothing of a mask file.
    Smooth {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 2)]
        radius: usize,
    },
}

fn manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn report_failures(stage: &str, n: usize) {
    if n > 0 {
        log::warn!("{stage}: {n} image(s) failed; see the summary file");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Cluster(a) => {
            let cfg = a.config.resolve()?;
            let s = cmd_cluster(&manifest(&a.manifest)?, &cfg, &a.out)?;
            report_failures("cluster", s.failures.len());
            println!("{} masks written, {} empty", s.n_images, s.fallback_count);
        }
        Command::Train { stage, masks } => {
            let cfg = stage.config.resolve()?;
            let (model, log) = cmd_train(&manifest(&stage.manifest)?, &masks, &cfg, &stage.out)?;
            println!(
                "trained {} parameters for {} epochs, final loss {:.5}",
                model.parameter_count(),
                log.epochs(),
                log.loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Refine { stage, model } => {
            let cfg = stage.config.resolve()?;
            let model = load_predictor(&model)?;
            let s = cmd_refine(&manifest(&stage.manifest)?, &model, &cfg, &stage.out)?;
            report_failures("refine", s.failures.len());
            println!(
                "{} targets written, {} without quadrants",
                s.written.len(),
                s.missing_quadrants.len()
            );
        }
        Command::Predict {
            stage,
            model,
            no_denoise,
        } => {
            let mut cfg = stage.config.resolve()?;
            cfg.denoise_predictions &= !no_denoise;
            let model = load_predictor(&model)?;
            let s = cmd_predict(&manifest(&stage.manifest)?, &model, &cfg, &stage.out)?;
            report_failures("predict", s.failures.len());
            println!("{} boxes, {} fallbacks", s.predictions.len(), s.fallback_count);
        }
        Command::Eval { stage, predictions } => {
            let cfg = stage.config.resolve()?;
            let preds = load_predictions(&predictions)?;
            let r = cmd_eval(&manifest(&stage.manifest)?, &preds, &cfg, &stage.out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Diagnose(a) => {
            let cfg = a.config.resolve()?;
            let (records, failures) = cmd_diagnose(&manifest(&a.manifest)?, &cfg, &a.out)?;
            report_failures("diagnose", failures.len());
            println!("{} images diagnosed", records.len());
        }
        Command::Run(a) => {
            let cfg = a.config.resolve()?;
            let r = run_pipeline(&manifest(&a.manifest)?, &cfg, &a.out)?;
            println!("{}", serde_json::to_string_pretty(&r.report)?);
        }
        Command::Synth { command } => synth(command)?,
    }
    Ok(())
}

fn synth(command: SynthCommand) -> Result<()> {
    match command {
        SynthCommand::Generate {
            out,
            n_images,
            height,
            width,
            dim,
            separation,
            flip,
            rect_min,
            rect_max,
            seed,
        } => {
            let cfg = SynthConfig {
                height,
                width,
                dim,
                n_images,
                rect_fraction: (rect_min, rect_max),
                separation,
                noise_flip_rate: flip,
                seed,
                ..Default::default()
            };
            let ds = generate_synthetic(&cfg)?;
            write_synthetic(&ds, &out)?;
            println!("{} images written to {}", ds.images.len(), out.display());
        }
        SynthCommand::Oracle { command } => match command {
            OracleCommand::Kmeans { points, k } => {
                let text = std::fs::read_to_string(&points).with_context(|| format!("reading {}", points.display()))?;
                let rows: Vec<Vec<f64>> = serde_json::from_str(&text).context("points must be a JSON array of arrays")?;
                let dim = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != dim) {
                    bail!("points have differing dimensions");
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                let (inertia, labels) = exact_kmeans_oracle(&flat, dim, k)?;
                println!("{}", serde_json::json!({ "inertia": inertia, "labels": labels }));
            }
            OracleCommand::Smooth { mask, sigma, radius } => {
                if !(sigma > 0.0) {
                    bail!("sigma must be positive");
                }
                let m = read_mask(&mask)?.to_soft();
                let fast = gaussian_smooth(&m, sigma, radius);
                let side = 2 * radius + 1;
                let direct = direct_convolution_oracle(
                    &m.values,
                    m.height,
                    m.width,
                    &gaussian_kernel_2d(sigma, radius),
                    side,
                    side,
                )?;
                let gap = fast
                    .values
                    .iter()
                    .zip(&direct)
                    .map(|(a, b)| (a - b.clamp(0.0, 1.0)).abs())
                    .fold(0.0, f64::max);
                println!("{}", serde_json::json!({ "max_abs_diff": gap }));
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.is::<UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// The error chain joined by `: `, skipping causes the outer messages
/// already quote.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}
