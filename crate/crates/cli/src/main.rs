//! `drcn`: train, reconstruct and evaluate reconstruction-classification
//! networks from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drcn::checkpoint;
use drcn::experiment::{
    check_run_dir, dump_reconstruction_grid, load_path, run_experiment, ExperimentConfig, RunReport,
};
use drcn::data::{preprocess, Normalize};
use drcn::train::evaluate;
use drcn::Error;

#[derive(Parser)]
#[command(name = "drcn", version, about = "Deep reconstruction-classification networks for domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Write a reconstruction grid for images using a checkpoint.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX image file, USPS container or dataset directory.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of images to tile.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Report the accuracy of a checkpoint on labeled data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX image file, USPS container or dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// IDX label file, when it is not the sibling of the image file.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// drcn, drcn_s, drcn_st, convnet_src or convnet_tgt.
    #[arg(long)]
    flavor: Option<String>,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run k times with seeds seed, seed+1, ... into out/seed-<n>.
    #[arg(long, default_value_t = 1)]
    repeat: u64,
    /// Extra config overrides, e.g. `--set max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Config(String),
    Diverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn overrides(args: &TrainArgs) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    push("lambda", args.lambda.map(|x| x.to_string()));
    push("seed", args.seed.map(|x| x.to_string()));
    push("baseline", args.flavor.clone());
    push("source", args.source.clone());
    push("target", args.target.clone());
    push("out", args.out.as_ref().map(|p| p.display().to_string()));
    Ok(out)
}

fn summary(r: &RunReport) -> String {
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}%", 100.0 * x));
    format!(
        "{} seed={} epochs={} stop={} target_acc={} source_val_acc={} config={}",
        r.baseline.as_str(),
        r.seed,
        r.epochs,
        r.stop_reason,
        pct(r.target_accuracy),
        pct(r.source_val_accuracy),
        &r.config_hash[..12]
    )
}

fn train(args: &TrainArgs) -> Result<(), Failure> {
    if args.repeat == 0 {
        return Err(Failure::Config("--repeat must be at least 1".into()));
    }
    let base = ExperimentConfig::resolve(args.config.as_deref(), &overrides(args)?)?;
    let mut accuracies = Vec::new();
    for k in 0..args.repeat {
        let mut cfg = base.clone();
        if args.repeat > 1 {
            cfg.train.seed = base.train.seed + k;
            cfg.out = base.out.join(format!("seed-{}", cfg.train.seed));
        }
        let report = run_experiment(&cfg)?;
        println!("{}", summary(&report));
        if report.diverged() {
            return Err(Failure::Diverged(report.diagnostic.unwrap_or_default()));
        }
        check_run_dir(&cfg.out, cfg.baseline.has_decoder())?;
        accuracies.extend(report.target_accuracy);
    }
    if accuracies.len() > 1 {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let sd = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        println!("target accuracy over {} runs: {:.2} ± {:.2}", accuracies.len(), 100.0 * mean, 100.0 * sd);
    }
    Ok(())
}

fn reconstruct(ckpt: &Path, images: &Path, out: &Path, count: usize) -> Result<(), Failure> {
    let model = checkpoint::load(ckpt)?;
    if !model.has_decoder() {
        return Err(Failure::Config(format!(
            "{} holds a model without a reconstruction pipeline",
            ckpt.display()
        )));
    }
    let [_, h, w] = model.spec().input;
    let data = preprocess(&load_path(images, None)?, (h, w), Normalize::UnitRange).take(count.max(1));
    dump_reconstruction_grid(&model, &data.images, out)?;
    println!("wrote {} ({} images)", out.display(), data.len());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, labels: Option<&Path>) -> Result<(), Failure> {
    let model = checkpoint::load(ckpt)?;
    let [_, h, w] = model.spec().input;
    let ds = preprocess(&load_path(data, labels)?, (h, w), Normalize::UnitRange);
    let acc = evaluate(&model, &ds)?;
    println!("accuracy {:.4} on {} images", acc, ds.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => train(args),
        Command::Reconstruct {
            checkpoint,
            images,
            out,
            count,
        } => reconstruct(checkpoint, images, out, *count),
        Command::Eval { checkpoint, data, labels } => eval(checkpoint, data, labels.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("diverged: {msg}");
            ExitCode::from(2)
        }
    }
}
