mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tct_core::TctError;

/// Zero-shot visual search with target- and context-modulated attention.
///
/// Exit codes: 0 success, 1 input error, 2 internal invariant violation.
#[derive(Debug, Parser)]
#[command(name = "tct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Concurrent trial evaluations (0 = one per core, 1 = sequential).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct SuiteArgs {
    /// Trial manifest; synthetic scenes are used when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of synthetic trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated variants, e.g. `tct,vit,random` or `target-from-middle`.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Curve length; defaults to the largest fixation budget.
    #[arg(long)]
    n_max: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search one image for one target and write the scanpath.
    Search {
        #[command(flatten)]
        common: Common,
        /// Search image (binary PPM or PGM).
        #[arg(long)]
        search: PathBuf,
        /// Target image (binary PPM or PGM).
        #[arg(long)]
        target: PathBuf,
        /// Target box in the search image as `x,y,w,h`.
        #[arg(long = "box")]
        target_box: String,
        /// Run one ablation variant instead of the full model.
        #[arg(long, default_value = "tct")]
        ablation: String,
        /// Write the attention map and per-fixation snapshots to this directory.
        #[arg(long)]
        dump_map: Option<PathBuf>,
    },
    /// Run variants over synthetic scenes or a manifest and write curve and summary tables.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        suite: SuiteArgs,
        /// `congruent`, `incongruent` or `n/a`.
        #[arg(long)]
        congruency: Option<String>,
    },
    /// Component and layer-group ablations on paired congruent and incongruent scenes.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        suite: SuiteArgs,
    },
    /// Write synthetic scenes as images plus a trial manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        congruency: Option<String>,
        /// Patch-aligned tiled scenes with an exact target copy.
        #[arg(long)]
        tiled: bool,
    },
    /// Print a weight file's header and tensor statistics.
    InspectWeights {
        /// Weight file to inspect. Without it, the configured encoder is built.
        file: Option<PathBuf>,
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Save the inspected weights to this file.
        #[arg(long)]
        save: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> tct_core::Result<()> {
    match cli.command {
        Command::Search {
            common,
            search,
            target,
            target_box,
            ablation,
            dump_map,
        } => commands::search(&common, &search, &target, &target_box, &ablation, dump_map.as_deref()),
        Command::Bench {
            common,
            suite,
            congruency,
        } => commands::bench(&common, &suite, congruency.as_deref()),
        Command::Ablate { common, suite } => commands::ablate(&common, &suite),
        Command::Synth {
            common,
            trials,
            congruency,
            tiled,
        } => commands::synth(&common, trials, congruency.as_deref(), tiled),
        Command::InspectWeights { file, config, save } => {
            commands::inspect_weights(file.as_deref(), config.as_deref(), save.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_invariant() { 2 } else { 1 })
        }
        Err(_) => {
            eprintln!("error: {}", TctError::Invariant("internal panic".into()));
            ExitCode::from(2)
        }
    }
}
