//! Command-line front end: `gen`, `train`, `run` and `bench`.

mod commands;
mod config;
mod render;

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_bench, cmd_gen, cmd_run, cmd_train, GenSummary, RunSummary, MODEL_FILE};
pub use config::{
    BudgetKind, DatasetConfig, DatasetManifest, ManifestEntry, RunConfig, Split, StreamConfig,
    MANIFEST_FILE,
};
pub use render::{heat_map, ramp_color, HEAT_RANGES};

use crate::error::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "ohslic",
    version,
    about = "Online clustering and classification of hyperspectral push-broom lines"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed (dataset, grouping and training).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Use the full-size dataset geometry (180 scenes, 1024 x 1024 x 224).
        #[arg(long)]
        full: bool,
        /// Write the manifest without generating cubes.
        #[arg(long)]
        dry_run: bool,
        /// Overrides the number of cubes.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the cluster classifier on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Stream one cube through the online pipeline.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score all methods on the test split of a dataset.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Benchmark even if the model was trained on another dataset.
        #[arg(long)]
        force: bool,
    },
}

fn load_config(common: &Common, full: bool) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&common.config, full) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, true) => RunConfig::full_preset(),
        (None, false) => RunConfig::default(),
    };
    if full && common.config.is_some() {
        let preset = RunConfig::full_preset();
        cfg.scene = preset.scene;
        cfg.dataset = preset.dataset;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.rng_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen {
            common,
            full,
            dry_run,
            count,
        } => {
            let mut cfg = load_config(&common, full)?;
            if let Some(n) = count {
                cfg.dataset.count = n;
                cfg.dataset.test_count = cfg.dataset.test_count.min(n);
                cfg.validate()?;
            }
            let s = cmd_gen(&cfg, &common.out, dry_run)
                .with_context(|| format!("generating into {}", common.out.display()))?;
            println!("{} cubes written, {} already present", s.written, s.skipped);
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common, false)?;
            let bundle = cmd_train(&cfg, &data, &common.out)
                .with_context(|| format!("training on {}", data.display()))?;
            println!(
                "model written to {} ({} parameters)",
                common.out.join(MODEL_FILE).display(),
                bundle.network().params().len()
            );
        }
        Command::Run {
            common,
            model,
            input,
        } => {
            let cfg = load_config(&common, false)?;
            let s = cmd_run(&cfg, &model, &input, &common.out).with_context(|| {
                format!("streaming {} through {}", input.display(), model.display())
            })?;
            println!(
                "{} lines, {:.3} ms/line, {} tree pixels",
                s.height, s.mean_line_ms, s.tree_pixels
            );
        }
        Command::Bench {
            common,
            model,
            data,
            force,
        } => {
            let cfg = load_config(&common, false)?;
            let report = cmd_bench(&cfg, &model, &data, &common.out, force).with_context(|| {
                format!("benchmarking {} on {}", model.display(), data.display())
            })?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

/// 2 for configuration problems, 3 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_DATA
            };
        }
    }
    EXIT_DATA
}
