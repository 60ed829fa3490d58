use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use vq2_core::codec::Level;
use vq2_core::pipeline::config::RunConfig;
use vq2_core::pipeline::data::{ingest, synthetic_dataset, write_labels, write_raw};
use vq2_core::pipeline::diagnostics::gradcheck_suite;
use vq2_core::pipeline::generate::{evaluate, generate, reconstruction_detail, GenerateOptions};
use vq2_core::pipeline::train::{load_codec, load_datasets, run_classifier, run_extract, run_stage1, run_stage2};
use vq2_core::pipeline::RunDir;

/// Two-stage hierarchical VQ-VAE: train the codec, fit autoregressive priors over its codes,
/// then sample new images.
#[derive(Parser)]
#[command(name = "vq2", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration (defaults to the built-in desk preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (defaults to the configured `output_dir`, then `runs/default`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, RunDir)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let root = self.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs/default"));
        Ok((cfg, RunDir::new(root)))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert a PGM/PPM directory (or the built-in generator) into a raw dataset file.
    Ingest {
        /// Directory of PGM/PPM files or a raw file; omit to use `--synthetic`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// One integer label per line, in file order.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Generate this many synthetic images instead of reading `--input`.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for `dataset.vq2i` and `labels.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the hierarchical codec.
    TrainVqvae {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from this stage-1 checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Encode the training and validation images into code grids.
    ExtractCodes {
        #[command(flatten)]
        run: RunArgs,
        /// Stage-1 checkpoint (defaults to the run directory's).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Stage 2: train the prior of one level on the extracted codes.
    TrainPrior {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        level: Level,
    },
    /// Train the toy classifier used for rejection sampling.
    TrainClassifier {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sample codes top-down, decode them and write images plus `scores.csv`.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 1.0)]
        keep_fraction: f64,
        /// Classifier checkpoint for rejection (required when keep fraction < 1).
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Class of every sample; by default samples cycle through the classes.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Report train/validation MSE and per-level NLL as JSON and CSV.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print the resolved configuration as JSON.
    ShowConfig {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Check analytic gradients of every op and of the composed models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write partial reconstructions that decode only the upper levels of the hierarchy.
    DemoReconstructionDetail {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
}

fn cmd_ingest(
    input: Option<&Path>,
    labels: Option<&Path>,
    synthetic: Option<usize>,
    (classes, size, channels, seed): (usize, usize, usize, u64),
    out: &Path,
) -> Result<()> {
    let ds = match (input, synthetic) {
        (Some(p), None) => ingest(p, labels)?,
        (None, Some(n)) => synthetic_dataset(n, classes, size, channels, seed)?,
        _ => bail!("give exactly one of --input and --synthetic"),
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_raw(&ds, &out.join("dataset.vq2i"))?;
    write_labels(&ds.labels, &out.join("labels.txt"))?;
    println!("{} images of {}×{}×{} → {}", ds.len(), ds.height, ds.width, ds.channels, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Ingest { input, labels, synthetic, classes, size, channels, seed, out } => {
            cmd_ingest(input.as_deref(), labels.as_deref(), synthetic, (classes, size, channels, seed), &out)?;
        }
        Command::TrainVqvae { run, checkpoint } => {
            let (cfg, dir) = run.load()?;
            let t = run_stage1(&cfg, &dir, checkpoint.as_deref())?;
            info!("stage 1 finished at step {}", t.step);
            println!("{}", dir.stage1_checkpoint().display());
        }
        Command::ExtractCodes { run, checkpoint } => {
            let (cfg, dir) = run.load()?;
            let (train, val) = run_extract(&cfg, &dir, checkpoint.as_deref())?;
            println!("{} train / {} validation code sets → {}", train.len(), val.len(), dir.codes().display());
        }
        Command::TrainPrior { run, level } => {
            let (cfg, dir) = run.load()?;
            let (_, fit) = run_stage2(&cfg, &dir, level)?;
            let show = |n: Option<vq2_core::prior::Nll>| n.map_or("n/a".into(), |n| format!("{:.5} nats ({:.5} bits)", n.nats, n.bits));
            println!("{level} prior: train NLL {} | validation NLL {}", show(fit.train), show(fit.val));
        }
        Command::TrainClassifier { run } => {
            let (cfg, dir) = run.load()?;
            let (_, acc) = run_classifier(&cfg, &dir)?;
            println!("classifier train accuracy {acc:.3} → {}", dir.classifier_checkpoint().display());
        }
        Command::Sample { run, n, temperature, keep_fraction, classifier, class } => {
            let (cfg, dir) = run.load()?;
            let opts = GenerateOptions { n, class_label: class, temperature, keep_fraction, seed: cfg.seed, classifier };
            let g = generate(&cfg, &dir, &opts, &dir.samples())?;
            println!("kept {} of {n} samples → {}", g.kept.len(), dir.samples().display());
        }
        Command::Evaluate { run } => {
            let (cfg, dir) = run.load()?;
            let report = evaluate(&cfg, &dir)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ShowConfig { run } => {
            let (cfg, _) = run.load()?;
            println!("{}", cfg.to_json());
        }
        Command::Gradcheck { seed } => {
            let entries = gradcheck_suite(seed)?;
            let mut ok = true;
            for e in &entries {
                let status = if e.passed() { "ok" } else { "FAIL" };
                ok &= e.passed();
                println!("{status:4} {:<60} checked {:>4}  max rel err {:.2e}", e.name, e.report.checked, e.report.max_rel_err);
            }
            return Ok(ok);
        }
        Command::DemoReconstructionDetail { run, n } => {
            let (cfg, dir) = run.load()?;
            let codec = load_codec(&dir.stage1_checkpoint())?;
            let (train, _) = load_datasets(&cfg)?;
            let rows = reconstruction_detail(&codec, &train, n, Some(&dir.detail()))?;
            let names = cfg.codec.level_names();
            let header: Vec<String> = names.iter().map(|l| format!("from_{l}")).collect();
            println!("image  {}", header.join("  "));
            for r in rows {
                let cells: Vec<String> = r.mse.iter().map(|m| format!("{m:.6}")).collect();
                println!("{:5}  {}", r.image, cells.join("  "));
            }
            println!("images written to {}", dir.detail().display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
