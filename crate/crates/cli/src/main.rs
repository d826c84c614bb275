//! `imageome`: generate synthetic specimens, train the codec, and run the
//! analysis pipeline from the command line. One JSON config drives a run;
//! flags override individual fields. Every subcommand writes a manifest.json
//! with the config hash, seed, and artifact checksums, and two runs with the
//! same config and seed produce byte-identical artifacts.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imageome_core::analysis::Segment;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "imageome", version, about = "Phylogeny-structured quantized embeddings pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for the run
    #[arg(long)]
    seed: Option<u64>,
    /// Directory artifacts are written to
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Newick phylogeny file
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Dataset directory (or its manifest.csv)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Trained model directory
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Imageome segment: phylo | level:i | nonphylo
    #[arg(long, default_value = "phylo")]
    segment: String,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Source specimen id
    #[arg(long)]
    src: String,
    /// Target specimen id
    #[arg(long)]
    tgt: String,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Species whose sequence distribution to sample from
    #[arg(long)]
    class: String,
    /// Number of sequences to draw (config sample.count if omitted)
    #[arg(long)]
    count: Option<usize>,
    /// Additive smoothing (config sample.alpha if omitted)
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic specimen dataset from a phylogeny
    Synth(CommonArgs),
    /// Train the phylo codec on a dataset
    Train(CommonArgs),
    /// Encode a dataset into imageome sequences (JSONL)
    Encode(CommonArgs),
    /// Histograms, entropies, distance matrices, and GT correlations
    Analyze(CommonArgs),
    /// Stepwise code translation between two specimens
    Translate(TranslateArgs),
    /// Rank seen species by distance to each held-out species
    PlaceUnseen(SegmentArgs),
    /// Draw new imageome sequences from a per-class sampler
    Sample(SampleArgs),
    /// Export continuous embeddings with per-level labels (CSV)
    ExportEmbeddings(CommonArgs),
}

fn effective_config(common: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &common.out_dir {
        cfg.paths.out_dir = Some(p.clone());
    }
    if let Some(p) = &common.tree {
        cfg.paths.tree = Some(p.clone());
    }
    if let Some(p) = &common.manifest {
        cfg.paths.manifest = Some(p.clone());
    }
    if let Some(p) = &common.checkpoint {
        cfg.paths.checkpoint = Some(p.clone());
    }
    Ok(cfg)
}

fn run(cmd: &Cmd) -> Result<(), RunError> {
    let ctx = |common: &CommonArgs, name: &'static str| -> anyhow::Result<commands::Ctx> {
        Ok(commands::Ctx {
            cfg: effective_config(common)?,
            command: name,
        })
    };
    match cmd {
        Cmd::Synth(a) => commands::synth(&ctx(a, "synth")?)?,
        Cmd::Train(a) => commands::train(&ctx(a, "train")?)?,
        Cmd::Encode(a) => commands::encode(&ctx(a, "encode")?)?,
        Cmd::Analyze(a) => commands::analyze(&ctx(a, "analyze")?)?,
        Cmd::Translate(a) => {
            commands::translate_cmd(&ctx(&a.common, "translate")?, &a.src, &a.tgt)?
        }
        Cmd::PlaceUnseen(a) => {
            let segment = Segment::parse(&a.segment).ok_or_else(|| {
                RunError::Usage(format!(
                    "invalid --segment {:?}: expected phylo, level:i, or nonphylo",
                    a.segment
                ))
            })?;
            commands::place_unseen_cmd(&ctx(&a.common, "place-unseen")?, segment)?
        }
        Cmd::Sample(a) => {
            let ctx = ctx(&a.common, "sample")?;
            let count = a.count.unwrap_or(ctx.cfg.sample.count);
            let alpha = a.alpha.unwrap_or(ctx.cfg.sample.alpha);
            commands::sample_cmd(&ctx, &a.class, count, alpha)?
        }
        Cmd::ExportEmbeddings(a) => commands::export_embeddings_cmd(&ctx(a, "export-embeddings")?)?,
    }
    Ok(())
}

enum RunError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for RunError {
    fn from(e: anyhow::Error) -> Self {
        RunError::Runtime(e)
    }
}

fn main() -> ExitCode {
    // clap itself exits 2 with usage text on stderr for malformed invocations
    let cli = Cli::parse();
    match run(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(RunError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
