//! `cig`: run pipeline stages and host annotation sessions.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use cig_core::annotation::{AnnotationService, SystemClock};
use cig_core::gateway::CachePolicy;
use cig_core::pipeline::{
    parse_conditions, Overrides, Pipeline, ProviderMode, ResolvedConfig, Stage, StageOutcome,
};
use cig_server::{router, serve, ServerConfig};

#[derive(Debug, Parser)]
#[command(
    name = "cig",
    version,
    about = "Conversational information gain pipeline"
)]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "cig.toml")]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `file` uses the configured providers, `mock` routes everything offline.
    #[arg(long, global = true, default_value = "file")]
    providers: ProviderMode,
    /// Comma-separated context conditions, overriding the config.
    #[arg(long, global = true)]
    conditions: Option<String>,
    /// Response cache behaviour.
    #[arg(long, global = true, value_enum, default_value_t = CacheArg::Use)]
    cache: CacheArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CacheArg {
    Use,
    Refresh,
    Off,
}

impl From<CacheArg> for CachePolicy {
    fn from(c: CacheArg) -> Self {
        match c {
            CacheArg::Use => CachePolicy::Use,
            CacheArg::Refresh => CachePolicy::Refresh,
            CacheArg::Off => CachePolicy::Off,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate and normalise the input transcripts.
    Preprocess,
    /// Segment episodes and pick the annotation segments.
    Segment,
    /// Build the semantic memory of every episode.
    Consolidate,
    /// Build the context bundles for every segment and condition.
    Summarise,
    /// Collect model ratings and load human ratings.
    Rate,
    /// Compute the proxy features.
    Features,
    /// Run the statistical analyses.
    Stats,
    /// Write the CSV report tables.
    Report,
    /// Run every stage in order.
    Run,
    /// Host the annotation sessions over HTTP.
    ServeAnnotation {
        /// Listen address, overriding the config.
        #[arg(long)]
        bind: Option<SocketAddr>,
    },
}

fn print_outcome(o: &StageOutcome) {
    println!(
        "{:<12} {:>4} artifacts  {:>6} provider calls  {:>8.2}s",
        o.stage.as_str(),
        o.outputs.len(),
        o.provider_calls,
        o.wall_seconds
    );
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        out_dir: cli.out,
        seed: cli.seed,
        conditions: cli
            .conditions
            .as_deref()
            .map(parse_conditions)
            .transpose()?,
        providers: cli.providers,
    };
    let cfg = ResolvedConfig::load(&cli.config, &overrides)?;
    let pipeline = Pipeline::new(cfg, cli.cache.into())?;
    let stage = match cli.command {
        Command::Preprocess => Stage::Preprocess,
        Command::Segment => Stage::Segment,
        Command::Consolidate => Stage::Consolidate,
        Command::Summarise => Stage::Summarise,
        Command::Rate => Stage::Rate,
        Command::Features => Stage::Features,
        Command::Stats => Stage::Stats,
        Command::Report => Stage::Report,
        Command::Run => {
            for o in pipeline.run_all()? {
                print_outcome(&o);
            }
            println!(
                "run {} complete in {}",
                pipeline.run_id(),
                pipeline.out_dir().display()
            );
            return Ok(());
        }
        Command::ServeAnnotation { bind } => return serve_annotation(&pipeline, bind),
    };
    print_outcome(&pipeline.run_stage(stage)?);
    Ok(())
}

fn serve_annotation(pipeline: &Pipeline, bind: Option<SocketAddr>) -> anyhow::Result<()> {
    let settings = &pipeline.config().config.annotation;
    let addr = match bind {
        Some(a) => a,
        None => settings
            .bind
            .parse()
            .with_context(|| format!("invalid bind address `{}`", settings.bind))?,
    };
    let log = pipeline.out_dir().join(&settings.log);
    if let Some(dir) = log.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let sessions = pipeline.annotation_sessions()?;
    println!("{} sessions, ratings log {}", sessions.len(), log.display());
    let service = AnnotationService::new(sessions, Arc::new(SystemClock)).with_log(&log)?;
    let app = router(
        Arc::new(service),
        ServerConfig {
            tokens: settings.tokens.clone(),
            prescreen_pass: settings.prescreen_pass,
            prescreen_tolerance: settings.prescreen_tolerance,
        },
    );
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(serve(addr, app))
        .with_context(|| format!("serving on {addr}"))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<cig_core::Error>())
        .map(|e| e.exit_code() as u8)
        .unwrap_or(1)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("CIG_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
