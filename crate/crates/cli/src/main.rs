use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qphase_cli::commands;
use qphase_cli::{resolve, CliError, Output, Preset};

#[derive(Parser)]
#[command(name = "qphase", version, about = "Classical-shadow phase classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Base preset; defaults depend on the command.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// JSON file overriding preset fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Multiply shadow and snapshot counts, e.g. 0.1 for a quick run.
    #[arg(long)]
    scale: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate labeled shadow datasets for both phases.
    Gen(Common),
    /// Ground states of the ANNNI chain over a (g, kappa) grid, measured as shadows.
    Ground(Common),
    /// Train the classifier.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Accuracy, AUC and per-state probabilities on labeled data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Use only the first n shadows of each state.
        #[arg(long)]
        n_s: Option<usize>,
    },
    /// Accuracy over the shadow-count grid and patch lengths.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Classifier output over the ground-state grid, with reference boundaries.
    PhaseDiagram {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Output directory of a previous `ground` run.
        #[arg(long)]
        ground: PathBuf,
        #[arg(long)]
        n_s: Option<usize>,
    },
    /// Mutual-information and GEM baselines with a threshold sweep.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common, default) = match &cli.cmd {
        Cmd::Gen(c) => ("gen", c, Preset::PaperTrain),
        Cmd::Ground(c) => ("ground", c, Preset::PaperAnnni),
        Cmd::Train { common, .. } => ("train", common, Preset::PaperTrain),
        Cmd::Eval { common, .. } => ("eval", common, Preset::PaperEval),
        Cmd::Heatmap { common, .. } => ("heatmap", common, Preset::PaperEval),
        Cmd::PhaseDiagram { common, .. } => ("phase-diagram", common, Preset::PaperAnnni),
        Cmd::Baseline { common, .. } => ("baseline", common, Preset::PaperEval),
    };
    let cfg = resolve(common.preset.unwrap_or(default), common.config.as_deref(), common.seed, common.scale)?;
    let mut out = Output::new(&common.out, name, &cfg)?;
    let result = match &cli.cmd {
        Cmd::Gen(_) => commands::gen(&cfg, &mut out).map(drop),
        Cmd::Ground(_) => commands::ground(&cfg, &mut out).map(drop),
        Cmd::Train { data, .. } => commands::train(&cfg, data, &mut out).map(drop),
        Cmd::Eval { model, data, n_s, .. } => commands::eval(&cfg, model, data, *n_s, &mut out).map(drop),
        Cmd::Heatmap { model, data, .. } => commands::heatmap(&cfg, model, data, &mut out).map(drop),
        Cmd::PhaseDiagram { model, ground, n_s, .. } => commands::phase_diagram(&cfg, model, ground, *n_s, &mut out).map(drop),
        Cmd::Baseline { data, .. } => commands::baseline(&cfg, data, &mut out).map(drop),
    };
    // the manifest is written even when some grid points failed
    let manifest = out.finish();
    result?;
    manifest?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
