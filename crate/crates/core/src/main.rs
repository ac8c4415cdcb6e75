use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use geossl::commands::{
    cmd_fixtures, cmd_pretrain, cmd_probe, cmd_sample, cmd_visualize, load_config, Overrides,
    VisualizeMode,
};
use geossl::error::Result;

#[derive(Parser)]
#[command(
    name = "geossl",
    version,
    about = "Stratified sampling, self-supervised ViT pre-training and frozen-backbone evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Backbone size: small, base, large, huge, giant or custom.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra configuration override, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            model: self.model.clone(),
            out: self.out.clone(),
            set: self.set.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Stratified sampling of grid cells into a manifest.
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Teacher-student pre-training from a manifest.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Manifest of sample groups (overrides `manifest`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen class-token features.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Checkpoint whose teacher backbone is probed.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of class subdirectories, optionally under train/ and test/.
        images: PathBuf,
    },
    /// Patch-feature maps (pca3, cluster) or training curves (curves).
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "pca3")]
        mode: VisualizeMode,
        /// Checkpoint for feature maps.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image (PPM) for maps, metrics CSV for curves.
        input: PathBuf,
    },
    /// Write a synthetic fixture tree: rasters, pre-training manifest and probe images.
    Fixtures {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        groups: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 100)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sample { common } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides())?;
            let report = cmd_sample(&cfg)?;
            print!("{}", report.table());
            println!(
                "wrote {} records to {}",
                report.records,
                report.manifest.display()
            );
        }
        Command::Pretrain {
            common,
            manifest,
            resume,
        } => {
            let mut o = common.overrides();
            if let Some(m) = manifest {
                o.set.push(format!("manifest={}", m.display()));
            }
            let cfg = load_config(common.config.as_deref(), &o)?;
            let outcome = cmd_pretrain(&cfg, resume.as_deref())?;
            if let Some((step, r, _)) = outcome.reports.last() {
                println!(
                    "step {step}: loss {:.6}, teacher entropy {:.4}",
                    r.l_total, r.teacher_entropy
                );
            }
            println!("metrics: {}", outcome.metrics.display());
            println!("checkpoint: {}", outcome.final_checkpoint.display());
        }
        Command::Probe {
            common,
            checkpoint,
            images,
        } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides())?;
            print!("{}", cmd_probe(&cfg, &checkpoint, &images)?.render());
        }
        Command::Visualize {
            common,
            mode,
            checkpoint,
            input,
        } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides())?;
            println!(
                "wrote {}",
                cmd_visualize(&cfg, mode, &input, checkpoint.as_deref())?.display()
            );
        }
        Command::Fixtures {
            common,
            groups,
            image_size,
            train_per_class,
            test_per_class,
        } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides())?;
            let out = cfg
                .out
                .clone()
                .ok_or_else(|| geossl::error::Error::Config("fixtures need --out".into()))?;
            let tree = cmd_fixtures(
                &out,
                groups,
                image_size,
                (train_per_class, test_per_class),
                cfg.train.seed,
            )?;
            println!("manifest: {}", tree.manifest.display());
            println!("probe images: {}", tree.probe_dir.display());
            println!(
                "rasters: {}, {}, {}",
                tree.landcover.display(),
                tree.elevation.display(),
                tree.region.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
