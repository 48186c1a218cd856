//! Command-line front door: every pipeline stage as a subcommand, driven by a
//! JSON run configuration. Stages write artifacts plus versioned reports under
//! the output directory and are individually re-runnable; `pipeline` chains
//! them all. Errors go to stderr as one JSON object and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use splatseg::pipeline::{
    load_report, resolve_out_dir, run_pipeline, run_stage, PipelineError, RunConfig,
};

#[derive(Parser)]
#[command(name = "splatseg", version, about = "Instance segmentation on 2D Gaussian splat scenes")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,
    /// Output directory; overrides SPLATSEG_OUT_DIR, which overrides the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Cap worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or copy in) the scene artifact.
    Generate,
    /// Render every view to PPM images.
    Render,
    /// Rasterize per-view ground-truth instance maps.
    Gtmaps,
    /// Corrupt the GT masks per view and build patch maps.
    Inject,
    /// Attribute splat mass to patches (weight matrix).
    Trace,
    /// Vote patches into globally consistent instance labels.
    Merge,
    /// Split/prune label-ambiguous Gaussians, then refit.
    Refine,
    /// Train per-Gaussian features contrastively against the labels.
    Lift,
    /// Query-grow each object from its reference-view mask.
    Segment,
    /// Select each object's Gaussians by mask-majority voting.
    Extract,
    /// Propagate prompts around the view ring with a mask oracle.
    Selfprompt,
    /// Aggregate metrics across all artifacts.
    Eval,
    /// Run every stage in order.
    Pipeline,
    /// Pretty-print a stage report (schema-checked).
    Report {
        /// Stage whose report to read.
        #[arg(default_value = "pipeline")]
        stage: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", json!({ "error": err.to_string() }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    }
    let env_dir = std::env::var("SPLATSEG_OUT_DIR").ok();

    if let Command::Report { stage } = &cli.command {
        let dir = match (cli.out_dir, env_dir) {
            (Some(d), _) => d,
            (None, Some(d)) => PathBuf::from(d),
            (None, None) => RunConfig::load(&cli.config)?.out_dir,
        };
        let report = load_report(&dir, stage)?;
        print_json(&report)?;
        return Ok(());
    }

    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.out_dir = resolve_out_dir(cli.out_dir, env_dir, &cfg.out_dir.clone());
    cfg.validate()?;

    let report = match cli.command {
        Command::Pipeline => run_pipeline(&cfg)?,
        Command::Generate => run_stage(&cfg, "generate")?,
        Command::Render => run_stage(&cfg, "render")?,
        Command::Gtmaps => run_stage(&cfg, "gtmaps")?,
        Command::Inject => run_stage(&cfg, "inject")?,
        Command::Trace => run_stage(&cfg, "trace")?,
        Command::Merge => run_stage(&cfg, "merge")?,
        Command::Refine => run_stage(&cfg, "refine")?,
        Command::Lift => run_stage(&cfg, "lift")?,
        Command::Segment => run_stage(&cfg, "segment")?,
        Command::Extract => run_stage(&cfg, "extract")?,
        Command::Selfprompt => run_stage(&cfg, "selfprompt")?,
        Command::Eval => run_stage(&cfg, "eval")?,
        Command::Report { .. } => unreachable!("handled above"),
    };
    print_json(&report)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json {
        path: PathBuf::from("<stdout>"),
        source,
    })?;
    println!("{text}");
    Ok(())
}
