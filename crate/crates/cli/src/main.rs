//! `handmesh` command-line tool.

mod eval;
mod fit;
mod io;
mod model;
mod net;

use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "handmesh", version, about = "Hand mesh recovery: model assets, fitting, training and evaluation")]
struct Cli {
    /// Seed for every random choice; overrides seeds in config files.
    #[arg(long, global = true, env = "HANDMESH_SEED")]
    seed: Option<u64>,

    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true, env = "HANDMESH_WORKERS")]
    workers: Option<usize>,

    /// One of off, error, warn, info, debug, trace.
    #[arg(long, global = true, env = "HANDMESH_LOG", default_value = "warn")]
    log_level: log::LevelFilter,

    /// Also print a short human-readable summary to stderr.
    #[arg(long, global = true)]
    summary: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hand model asset directory.
    SynthModel(model::SynthModelArgs),
    /// Build the mesh hierarchy by repeated decimation.
    Decimate(model::DecimateArgs),
    /// Precompute spiral tables for every level of a hierarchy.
    Spirals(model::SpiralsArgs),
    /// Render random hands to image/mesh pairs plus a keypoint file.
    SynthData(net::SynthDataArgs),
    /// Fit the hand model to 2D keypoints.
    Fit(fit::FitArgs),
    /// Fit, filter and cap keypoint files into a mesh-annotated dataset.
    FilterDataset(fit::FilterArgs),
    /// Train the image-to-mesh network.
    Train(net::TrainArgs),
    /// Predict meshes from images with a trained checkpoint.
    Infer(net::InferArgs),
    /// Compare predicted meshes against ground truth.
    Evaluate(eval::EvaluateArgs),
    /// Draw keypoints and a mesh wireframe over an image.
    RenderOverlay(eval::OverlayArgs),
}

pub struct Globals {
    pub seed: Option<u64>,
    pub summary: bool,
}

impl Globals {
    pub fn seed_or(&self, fallback: u64) -> u64 {
        self.seed.unwrap_or(fallback)
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use handmesh::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Io { .. }) => "io",
        Some(E::Parse { .. }) => "parse",
        Some(E::InvalidMesh(_) | E::NonManifold { .. } | E::InconsistentWinding(..)) => "invalid_mesh",
        Some(E::Shape(_)) => "shape",
        Some(E::InvalidArgument(_)) => "invalid_argument",
        Some(E::NonFinite(_)) => "non_finite",
        Some(E::Decimation { .. }) => "decimation",
        Some(E::Degenerate(_)) => "degenerate",
        Some(E::BehindCamera { .. }) => "behind_camera",
        Some(E::Divergence { .. }) => "divergence",
        Some(E::Checkpoint(_)) => "checkpoint",
        Some(E::Json(_)) => "json",
        Some(E::Image(_)) => "image",
        None if e.downcast_ref::<serde_json::Error>().is_some() => "json",
        None if e.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "usage",
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
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

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        anyhow::ensure!(n > 0, "--workers must be at least 1");
        pool = pool.num_threads(n);
    }
    pool.build_global()?;
    let g = Globals {
        seed: cli.seed,
        summary: cli.summary,
    };
    match cli.command {
        Command::SynthModel(a) => model::synth_model(a, &g),
        Command::Decimate(a) => model::decimate(a, &g),
        Command::Spirals(a) => model::spirals(a, &g),
        Command::SynthData(a) => net::synth_data(a, &g),
        Command::Fit(a) => fit::fit(a, &g),
        Command::FilterDataset(a) => fit::filter_dataset(a, &g),
        Command::Train(a) => net::train(a, &g),
        Command::Infer(a) => net::infer(a, &g),
        Command::Evaluate(a) => eval::evaluate(a, &g),
        Command::RenderOverlay(a) => eval::overlay(a, &g),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(out) => {
            let text = serde_json::to_string_pretty(&out).expect("serializable output");
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let err = json!({
                "error": {
                    "kind": error_kind(&e),
                    "message": message(&e),
                }
            });
            eprintln!("{}", serde_json::to_string_pretty(&err).expect("serializable error"));
            ExitCode::FAILURE
        }
    }
}
