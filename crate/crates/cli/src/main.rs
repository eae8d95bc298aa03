use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use writer_retrieval::vit::VitConfig;
use writer_retrieval_cli::commands::{self, SweepParam, SynthSpec, WeightsSpec};
use writer_retrieval_cli::config::PipelineConfig;
use writer_retrieval_cli::manifest::{Manifest, Split};
use writer_retrieval_cli::pipeline::{RunDir, Session};

#[derive(Parser)]
#[command(name = "wretrieve", version, about = "Writer retrieval on binarized handwriting")]
struct Cli {
    /// Run directory holding caches and artifacts.
    #[arg(long, global = true, env = "WRETRIEVE_RUN_DIR", default_value = "run")]
    run_dir: PathBuf,
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset applied before the config file: default or best.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override a config key, e.g. `--set t_fg=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArg {
    /// JSONL manifest with path, doc_id, writer_id and split per line.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct WeightsArg {
    /// ViT weights container (defaults to `<run-dir>/weights.wrv`).
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Binarize documents to PBM and write a manifest pointing at them.
    Binarize {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        split: Option<Split>,
        /// Swap foreground and background (for light ink on dark paper).
        #[arg(long)]
        invert: bool,
        /// Inputs are already binary; skip thresholding.
        #[arg(long)]
        binary: bool,
    },
    /// Build the codebook from the training split.
    Codebook {
        #[command(flatten)]
        manifest: ManifestArg,
        #[command(flatten)]
        weights: WeightsArg,
        /// Refit even when the stored codebook matches the inputs.
        #[arg(long)]
        force: bool,
    },
    /// Encode a split into page descriptors (fits PCA on the training split if needed).
    Encode {
        #[command(flatten)]
        manifest: ManifestArg,
        #[command(flatten)]
        weights: WeightsArg,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        refit_pca: bool,
    },
    /// Rank every document against the rest of its split and report mAP and Top-1.
    Evaluate {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long, default_value = "test")]
        split: Split,
        /// none, krnn or graph.
        #[arg(long)]
        rerank: Option<String>,
        /// Neighborhood size for krnn.
        #[arg(long)]
        k: Option<usize>,
        /// Metrics CSV path (defaults to `<run-dir>/metrics_<split>.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the pipeline for several values of one parameter.
    Sweep {
        #[command(flatten)]
        manifest: ManifestArg,
        #[command(flatten)]
        weights: WeightsArg,
        /// t_fg, stride, clusters or dim.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write randomly initialized ViT weights.
    InitWeights {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        std: f32,
        #[arg(long, default_value_t = 16)]
        patch_size: usize,
        #[arg(long, default_value_t = 384)]
        embed_dim: usize,
        #[arg(long, default_value_t = 12)]
        depth: usize,
        #[arg(long, default_value_t = 6)]
        heads: usize,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
    },
    /// Generate a synthetic corpus of PBM pages with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        train_writers: usize,
        #[arg(long, default_value_t = 4)]
        train_pages: usize,
        #[arg(long, default_value_t = 10)]
        test_writers: usize,
        #[arg(long, default_value_t = 4)]
        test_pages: usize,
        #[arg(long, default_value_t = 448)]
        width: usize,
        #[arg(long, default_value_t = 448)]
        height: usize,
        #[arg(long, default_value_t = 0.01)]
        flip: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a manifest from files named `<writer>-<doc>.<ext>`.
    Import {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Add to an existing manifest instead of replacing it.
        #[arg(long)]
        append: bool,
    },
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::preset(cli.preset.as_deref().unwrap_or("default"))?;
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("`--set {o}` is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let mut cfg = build_config(&cli)?;
    let run = RunDir::new(&cli.run_dir);
    let weights_path = |w: &WeightsArg| w.weights.clone().unwrap_or_else(|| run.weights());
    match &cli.command {
        Command::Binarize { manifest, split, invert, binary } => {
            cfg.invert |= invert;
            cfg.already_binary |= binary;
            commands::binarize(&run, &Manifest::load(&manifest.manifest)?, &cfg, *split)
        }
        Command::Codebook { manifest, weights, force } => {
            let session = Session::new(run.clone(), cfg, Manifest::load(&manifest.manifest)?, &weights_path(weights))?;
            commands::codebook(&session, *force)
        }
        Command::Encode { manifest, weights, split, refit_pca } => {
            let session = Session::new(run.clone(), cfg, Manifest::load(&manifest.manifest)?, &weights_path(weights))?;
            commands::encode(&session, *split, *refit_pca)
        }
        Command::Evaluate { manifest, split, rerank, k, out } => {
            if let Some(r) = rerank {
                cfg.set("rerank", r)?;
            }
            if let Some(k) = k {
                cfg.krnn_k = *k;
            }
            commands::evaluate(&run, &Manifest::load(&manifest.manifest)?, &cfg, *split, out.as_deref())
        }
        Command::Sweep { manifest, weights, param, values, split, out } => {
            let session = Session::new(run.clone(), cfg, Manifest::load(&manifest.manifest)?, &weights_path(weights))?;
            commands::sweep(&session, *param, values, *split, out.as_deref())
        }
        Command::InitWeights { out, seed, std, patch_size, embed_dim, depth, heads, input_size } => {
            let vit = VitConfig {
                patch_size: *patch_size,
                embed_dim: *embed_dim,
                depth: *depth,
                heads: *heads,
                mlp_ratio: 4,
                input_size: *input_size,
            };
            let out = out.clone().unwrap_or_else(|| run.weights());
            commands::init_weights(&WeightsSpec { vit, seed: *seed, std: *std }, &out)
        }
        Command::Synth { out, train_writers, train_pages, test_writers, test_pages, width, height, flip, seed } => {
            let spec = SynthSpec {
                train_writers: *train_writers,
                train_pages: *train_pages,
                test_writers: *test_writers,
                test_pages: *test_pages,
                width: *width,
                height: *height,
                flip_fraction: *flip,
                seed: *seed,
            };
            commands::synth(&spec, out)
        }
        Command::Import { dir, split, out, append } => commands::import(dir, *split, out, *append),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
