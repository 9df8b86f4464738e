//! Command-line front end for the landmark pipeline, plus the HTTP service
//! used by the annotation UI.

pub mod service;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mangamark::config::PipelineConfig;
use mangamark::dataset::BoundingBox;
use mangamark::pipeline::{self, PredictRequest};
use mangamark::synth::{write_dataset, SynthOptions};
use mangamark::Error;

#[derive(Debug, Parser)]
#[command(name = "mangamark", version, about = "Facial landmark pipeline for manga faces")]
pub struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the manifest and copy accepted records into the work dir.
    Ingest,
    /// Merge double labels that agree within the tolerance.
    Merge,
    /// Fill missing landmark groups of merged records.
    Complete,
    /// Apply the selection filters.
    Filter,
    /// Split selected records into train/val/test.
    Split,
    /// Compute the mean shape and the augmentation plan.
    Augment,
    /// Train one experiment, or every experiment in the config.
    Train(ExperimentArg),
    /// Evaluate trained experiments on the test split.
    Eval(ExperimentArg),
    /// Predict landmarks for one face box.
    Predict(PredictArgs),
    /// Serve the annotation API.
    Serve(ServeArgs),
    /// Write a synthetic dataset (images and manifest).
    Synth(SynthArgs),
    /// Run every step from ingest to eval.
    Run,
}

#[derive(Debug, Args)]
pub struct ExperimentArg {
    #[arg(long)]
    pub experiment: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub experiment: String,
    #[arg(long)]
    pub image: PathBuf,
    /// Face box as x,y,w,h in image pixels.
    #[arg(long, value_delimiter = ',', required = true)]
    pub bbox: Vec<f64>,
    #[arg(long, default_value = "face")]
    pub id: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Trained experiment whose checkpoint backs the predictions endpoint.
    #[arg(long)]
    pub experiment: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub count: usize,
}

/// One-line JSON error for scripts: `{"error":"<kind>","message":"..."}`.
pub fn error_line(e: &Error) -> String {
    let kind = match e {
        Error::MissingArtifact { .. } => "missing-artifact",
        Error::Config(_) => "config",
        Error::Parse { .. } => "parse",
        Error::Checkpoint(_) => "checkpoint",
        Error::Diverged { .. } => "diverged",
        Error::Io(_) => "io",
        Error::Image(_) => "image",
        Error::Json(_) => "json",
        _ => "invalid-input",
    };
    serde_json::json!({ "error": kind, "message": e.to_string() }).to_string()
}

fn load_config(cli: &Cli) -> mangamark::Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) -> mangamark::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn run(cli: Cli) -> mangamark::Result<()> {
    if let Command::Synth(args) = &cli.command {
        let opts = SynthOptions {
            count: args.count,
            seed: cli.seed.unwrap_or(0),
            ..Default::default()
        };
        let records = write_dataset(&args.out, &opts)?;
        return print(&serde_json::json!({ "records": records.len(), "dir": args.out }));
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Ingest => print(&pipeline::ingest(&cfg)?),
        Command::Merge => print(&pipeline::merge(&cfg)?),
        Command::Complete => print(&pipeline::complete(&cfg)?),
        Command::Filter => print(&pipeline::filter(&cfg)?),
        Command::Split => print(&pipeline::split(&cfg)?),
        Command::Augment => print(&pipeline::augment(&cfg)?),
        Command::Train(a) => print(&pipeline::train_models(&cfg, a.experiment.as_deref())?),
        Command::Eval(a) => {
            let reports = pipeline::eval(&cfg, a.experiment.as_deref())?;
            print!("{}", pipeline::summary_csv(&reports));
            Ok(())
        }
        Command::Predict(a) => {
            let bbox = match a.bbox.as_slice() {
                &[x, y, w, h] => BoundingBox { x, y, w, h },
                _ => return Err(Error::Config("--bbox takes x,y,w,h".into())),
            };
            let request = PredictRequest {
                id: a.id.clone(),
                image: a.image.clone(),
                bbox,
            };
            print(&pipeline::predict(&cfg, &a.experiment, &[request])?)
        }
        Command::Serve(a) => {
            let state = service::ServiceState::open(&cfg, a.experiment.as_deref())?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(service::serve(state, a.addr))
        }
        Command::Run => print(&pipeline::run_all(&cfg)?),
        Command::Synth(_) => unreachable!("handled above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_artifact_error_is_machine_readable() {
        let e = Error::MissingArtifact {
            path: "work/split.json".into(),
            producer: "split",
        };
        let v: serde_json::Value = serde_json::from_str(&error_line(&e)).unwrap();
        assert_eq!(v["error"], "missing-artifact");
        assert!(v["message"].as_str().unwrap().contains("run `split` first"));
    }

    #[test]
    fn global_flags_parse_after_the_subcommand() {
        let cli = Cli::try_parse_from(["mangamark", "train", "--experiment", "a", "--seed", "4", "--config", "c.toml"])
            .unwrap();
        assert_eq!(cli.seed, Some(4));
        assert!(matches!(cli.command, Command::Train(ExperimentArg { experiment: Some(ref e) }) if e == "a"));
    }
}
