use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use nucparc_cli::{pipeline, Baseline, RunConfig};

/// Fine-scale nucleus parcellation from streamline-cluster connectivity.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args, Debug)]
struct Shared {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    baseline: Option<Baseline>,
    /// Overwrite an existing stage directory.
    #[arg(long, global = true)]
    force: bool,
    /// Omit timestamps from manifests.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic subjects with known parcels.
    Phantom,
    /// Cluster streamlines near the nucleus across training subjects.
    Cluster,
    /// Build per-voxel connectivity features.
    Features,
    /// Train the clustering network.
    Train,
    /// Label every subject and compute metrics.
    Parcellate {
        /// Checkpoint stem, or centroid CSV for the k-means baseline.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the pipeline over the configured (k, c) grid.
    Sweep,
    /// Cluster, features, train and parcellate in one go.
    Run,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let s = &cli.shared;
    let mut cfg = match &s.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig { deterministic: false, ..Default::default() },
    };
    if let Some(seed) = s.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &s.out {
        cfg.paths.out = out.clone();
    }
    if let Some(b) = s.baseline {
        cfg.baseline = b;
    }
    cfg.deterministic |= s.deterministic;

    match &cli.command {
        Command::Phantom => {
            pipeline::cmd_phantom(&cfg, s.force)?;
        }
        Command::Cluster => {
            pipeline::cmd_cluster(&cfg, s.force)?;
        }
        Command::Features => {
            pipeline::cmd_features(&cfg, s.force)?;
        }
        Command::Train => {
            let t = pipeline::cmd_train(&cfg, s.force)?;
            println!("rescues: {}", t.rescues);
        }
        Command::Parcellate { checkpoint } => {
            let o = pipeline::cmd_parcellate(&cfg, checkpoint.as_deref(), s.force)?;
            for (id, r) in &o.recovery {
                println!("{id}: ARI {:.4} Dice {:.4}", r.ari, r.mean_dice);
            }
        }
        Command::Sweep => {
            let rows = pipeline::cmd_sweep(&cfg, s.force)?;
            println!("{} sweep cells", rows.len());
        }
        Command::Run => {
            pipeline::run_pipeline(&cfg, s.force)?;
        }
    }
    Ok(())
}
