//! `airsat`: synthetic corpora, data preparation, SimSiam pre-training,
//! single runs, the results matrix and reports.

use std::path::{Path, PathBuf};

use airsat_core::backbone::{Backbone, ResNetConfig};
use airsat_core::dataset::{ImageType, Split};
use airsat_core::nn::file_sha256;
use airsat_core::runner::{self, ExperimentConfig, RunArtifacts};
use airsat_core::synthgen::{self, SynthConfig};
use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "airsat", version, about = "Air quality from satellite image patches and meteorology")]
struct Cli {
    /// Config file: an experiment TOML, or a synthetic-corpus TOML for `synth`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (output file for `init-weights`).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth {
        /// Calibrate the noise to this signal-to-noise ratio.
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Ingest and filter the data, then write splits, the filter audit and image statistics.
    Prepare,
    /// Pre-train a SimSiam backbone on the config's corpus.
    Pretrain,
    /// Train and evaluate one config.
    Train,
    /// Run every results-table row for every target.
    Matrix {
        /// Seeds to run (default: the config's).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Image types to run (default: the config's).
        #[arg(long, value_delimiter = ',')]
        image_types: Vec<ImageType>,
    },
    /// Aggregate finished runs into tables and plots.
    Report {
        /// Run directories, or directories containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Write a randomly initialised backbone archive and print its sha256.
    InitWeights {
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, value_delimiter = ',', default_value = "3,4,6,3")]
        blocks: Vec<usize>,
    },
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().context("--config <experiment.toml> is required")?;
    let mut config = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn print_run(run: &RunArtifacts) {
    for split in Split::ALL {
        if let Some(m) = run.metrics(split) {
            let m = &m.metrics;
            println!(
                "{split:>5}: n={:<4} R2={} RMSE={} NMAE={}",
                m.n,
                airsat_core::eval::sig4(m.r2),
                airsat_core::eval::sig4(m.rmse),
                airsat_core::eval::sig4(m.nmae)
            );
        }
    }
    println!("artifacts: {}", run.dir.display());
}

fn collect_runs(paths: &[PathBuf]) -> Result<Vec<RunArtifacts>> {
    let mut runs = Vec::new();
    let mut visit = |dir: &Path| -> Result<()> {
        if dir.join("run.json").is_file() {
            runs.push(RunArtifacts::load(dir)?);
        }
        Ok(())
    };
    for p in paths {
        if p.join("run.json").is_file() {
            visit(p)?;
            continue;
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(p)
            .with_context(|| format!("reading {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.is_dir())
            .collect();
        children.sort();
        for c in children {
            visit(&c)?;
        }
    }
    if runs.is_empty() {
        bail!("no run.json found under {paths:?}");
    }
    Ok(runs)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth { snr } => {
            let mut config = match &cli.config {
                Some(p) => SynthConfig::load(p)?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            if let Some(snr) = snr {
                config.noise_sd = synthgen::noise_sd_for_snr(&config, *snr)?;
            }
            let truth = synthgen::write_corpus(&config, &cli.out)?;
            println!(
                "wrote {} station-days to {} (signal-to-noise {:.3})",
                truth.rows.len(),
                cli.out.display(),
                truth.snr()
            );
        }
        Command::Prepare => {
            for f in runner::write_preparation(&experiment(&cli)?, &cli.out)? {
                println!("{}", f.display());
            }
        }
        Command::Pretrain => {
            let path = runner::pretrain(&experiment(&cli)?, &cli.out)?;
            println!("{} sha256={}", path.display(), file_sha256(&path)?);
        }
        Command::Train => print_run(&runner::run_experiment(&experiment(&cli)?, &cli.out)?),
        Command::Matrix { seeds, image_types } => {
            let base = experiment(&cli)?;
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.clone() };
            let images = if image_types.is_empty() { vec![base.image_type] } else { image_types.clone() };
            let mut configs = Vec::new();
            for &seed in &seeds {
                for &image_type in &images {
                    let c = ExperimentConfig {
                        seed,
                        image_type,
                        ..base.clone()
                    };
                    configs.extend(runner::matrix_configs(&c));
                }
            }
            for c in &configs {
                c.validate()
                    .with_context(|| format!("matrix entry {}", c.run_name()))?;
            }
            let runs = runner::run_matrix(&configs, &cli.out.join("runs"))?;
            let files = runner::emit_report(&runs, &cli.out.join("report"))?;
            for t in files.tables.iter().chain(&files.mean_tables) {
                println!("{}", t.display());
            }
        }
        Command::Report { runs } => {
            let files = runner::emit_report(&collect_runs(runs)?, &cli.out)?;
            for t in files.tables.iter().chain(&files.mean_tables).chain([&files.long, &files.intervals]) {
                println!("{}", t.display());
            }
        }
        Command::InitWeights {
            channels,
            width,
            blocks,
        } => {
            let blocks: [usize; 4] = blocks
                .as_slice()
                .try_into()
                .context("--blocks takes four comma-separated counts")?;
            let seed = cli.seed.unwrap_or(0);
            let b = Backbone::random(ResNetConfig { width: *width, blocks }, *channels, seed, DType::F32)?;
            if let Some(dir) = cli.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            b.save(&cli.out, &[("seed".to_string(), seed.to_string())].into())?;
            println!("{} sha256={}", cli.out.display(), file_sha256(&cli.out)?);
        }
    }
    Ok(())
}
