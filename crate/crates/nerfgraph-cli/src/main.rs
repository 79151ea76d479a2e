//! `nerfgraph`: generate NeRF datasets, train the weight-space encoder,
//! and evaluate embeddings on classification and retrieval.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use nerfgraph::config::RunConfig;
use nerfgraph::pipeline;
use nerfgraph::training::LossMode;

#[derive(Parser)]
#[command(name = "nerfgraph", version, about = "NeRF weight-space embeddings across architectures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes and fit one NeRF per (scene, family).
    Gen {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
        /// Also fit the reduced unseen-architecture variant set.
        #[arg(long)]
        unseen_variants: bool,
    },
    /// Fit checkpoints missing from an existing dataset (all with --force).
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Train the encoder/decoder framework.
    Train {
        #[command(flatten)]
        common: Common,
        /// Loss mode: r (rendering), rc (combined), c (contrastive).
        #[arg(long)]
        mode: Option<String>,
        /// Resume from the mode's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Embed every checkpoint with a trained encoder.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train a classifier on one family set and test on another.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
        /// Training family: MLP, TRI, HASH or ALL.
        #[arg(long, default_value = "ALL")]
        train_on: String,
        #[arg(long, default_value = "MLP")]
        test_on: String,
    },
    /// Cross-architecture instance retrieval between two families.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        query: String,
        #[arg(long)]
        gallery: String,
        /// Comma-separated k values.
        #[arg(long, default_value = "1,5,10")]
        k: String,
    },
    /// Full evaluation: classification matrix plus all retrieval pairs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
    },
}

fn parse_mode(cfg: &RunConfig, flag: &Option<String>) -> Result<LossMode> {
    Ok(match flag {
        Some(s) => LossMode::parse(s)?,
        None => cfg.framework.mode,
    })
}

fn init_threads() {
    #[cfg(feature = "parallel")]
    if let Ok(n) = std::env::var("NERFGRAPH_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn run() -> Result<()> {
    init_threads();
    match Cli::parse().command {
        Command::Gen { common, force, unseen_variants } => {
            let cfg = common.load()?;
            let s = pipeline::cmd_gen(&cfg, force, unseen_variants)?;
            println!(
                "generated {} scenes, {} checkpoints (mean held-out PSNR {:.2} dB)",
                s.scenes, s.checkpoints, s.mean_psnr_db
            );
            if !s.excluded_scenes.is_empty() {
                println!("excluded scenes: {:?}", s.excluded_scenes);
            }
            println!("manifest: {}", s.manifest_path.display());
        }
        Command::Fit { common, force } => {
            let cfg = common.load()?;
            let s = pipeline::cmd_fit(&cfg, force)?;
            println!("fitted {} checkpoints ({} already present)", s.refitted, s.present);
        }
        Command::Train { common, mode, resume } => {
            let cfg = common.load()?;
            let mode = parse_mode(&cfg, &mode)?;
            let s = pipeline::cmd_train(&cfg, Some(mode), resume)?;
            println!(
                "trained mode {} for {} steps: loss {:.6} (render {:.6}, contrastive {:.6})",
                s.mode, s.steps, s.final_loss, s.final_render_loss, s.final_contrastive_loss
            );
            println!("best: {}", s.best_path.display());
        }
        Command::Embed { common, mode } => {
            let cfg = common.load()?;
            let mode = parse_mode(&cfg, &mode)?;
            let path = pipeline::cmd_embed(&cfg, mode)?;
            println!("embeddings: {}", path.display());
        }
        Command::Classify { common, mode, train_on, test_on } => {
            let cfg = common.load()?;
            let mode = parse_mode(&cfg, &mode)?;
            let acc = pipeline::cmd_classify(&cfg, mode, &train_on, &test_on)?;
            println!("classify train-on {train_on} test-on {test_on}: {acc:.1}%");
        }
        Command::Retrieve { common, mode, query, gallery, k } => {
            let cfg = common.load()?;
            let mode = parse_mode(&cfg, &mode)?;
            let ks: Vec<usize> = k
                .split(',')
                .map(|s| s.trim().parse::<usize>().context("parsing k list"))
                .collect::<Result<_>>()?;
            let s = pipeline::cmd_retrieve(&cfg, mode, &query, &gallery, &ks)?;
            println!("retrieval {}/{} over {} gallery items:", s.query, s.gallery, s.result.gallery_size);
            for k in &ks {
                println!(
                    "  recall@{k:<3} {:>7.2}%   random {:>6.2}%",
                    s.result.recall[k], s.result.random_baseline[k]
                );
            }
            if s.result.excluded_queries > 0 {
                println!("  ({} queries had no same-scene gallery item)", s.result.excluded_queries);
            }
        }
        Command::Eval { common, mode } => {
            let cfg = common.load()?;
            let mode = parse_mode(&cfg, &mode)?;
            let report = pipeline::cmd_eval(&cfg, mode)?;
            let mut out = Vec::new();
            pipeline::render_text_report(&report, &mut out)?;
            print!("{}", String::from_utf8_lossy(&out));
            println!("\nreports under {}", pipeline::report_dir(&cfg, mode).display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
