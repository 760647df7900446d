//! `corrdetector`: command-line front end for the corrosion pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use corrdetector_core::config::{load_toml, PipelineConfig};
use corrdetector_core::pipeline::{Pipeline, Stage};
use corrdetector_core::synth::{pipeline_template, synth_generate, write_dataset, SyntheticSpec};
use corrdetector_core::{Error, Result};

#[derive(Parser)]
#[command(name = "corrdetector", version, about = "Grid-based corrosion detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate images and annotations and record them in the run directory
    Ingest(StageArgs),
    /// Seeded train/test split of the image ids
    Split(StageArgs),
    /// Build the balanced segment training set
    Ciss(StageArgs),
    /// Train the baseline segment scorer
    TrainScorer(StageArgs),
    /// Score every test segment
    Score(StageArgs),
    /// Import segment scores from an external classifier
    ImportScores(StageArgs),
    /// Import predicted object masks
    ImportMasks(StageArgs),
    /// Detect the object with the color-threshold baseline
    DetectBaseline(StageArgs),
    /// Build the FB/FC fusion feature sets
    Erc(StageArgs),
    /// Train and cross-validate the ensemble classifiers
    TrainEnsemble(StageArgs),
    /// Apply segment, image and object decision rules
    Decide(StageArgs),
    /// Write the evaluation report
    Evaluate(StageArgs),
    /// Write decision overlays
    Render(StageArgs),
    /// Run several stages (all by default) in dependency order
    Run {
        #[command(flatten)]
        args: StageArgs,
        /// Comma-separated stage names
        #[arg(long)]
        stages: Option<String>,
    },
    /// Generate a synthetic dataset and a matching pipeline configuration
    Synth(SynthArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Segments per image side
    #[arg(long)]
    n: Option<u32>,
    #[arg(long = "tau-s")]
    tau_s: Option<f64>,
    /// Image threshold, or `derive` for the mean training corrosion fraction
    #[arg(long = "tau-i")]
    tau_i: Option<String>,
    #[arg(long = "tau-o")]
    tau_o: Option<f64>,
    /// Run directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any configuration value by dotted name, e.g. `ensemble.folds=3`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Synthetic dataset specification (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<u32>,
    /// Number of images
    #[arg(long)]
    images: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

impl StageArgs {
    fn overrides(&self) -> Result<Vec<String>> {
        let mut o = Vec::new();
        if let Some(v) = self.seed {
            o.push(format!("seed={v}"));
        }
        if let Some(v) = self.n {
            o.push(format!("grid.n={v}"));
        }
        if let Some(v) = self.tau_s {
            o.push(format!("decision.tau_s={v}"));
        }
        if let Some(v) = &self.tau_i {
            if v == "derive" {
                o.push("decision.tau_i=\"derive\"".into());
            } else {
                let t: f64 = v
                    .parse()
                    .map_err(|_| Error::Config(format!("--tau-i: `{v}` is neither a number nor `derive`")))?;
                o.push(format!("decision.tau_i={t}"));
            }
        }
        if let Some(v) = self.tau_o {
            o.push(format!("decision.tau_o={v}"));
        }
        if let Some(v) = &self.out {
            let abs = absolute(v)?;
            o.push(format!("out={}", toml_string(&abs.display().to_string())));
        }
        o.extend(self.set.iter().cloned());
        Ok(o)
    }

    fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::new(PipelineConfig::from_file(&self.config, &self.overrides()?)?)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn synth(args: &SynthArgs) -> Result<()> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    if let Some(v) = args.seed {
        overrides.push(format!("seed={v}"));
    }
    if let Some(v) = args.n {
        overrides.push(format!("n={v}"));
    }
    if let Some(v) = args.images {
        overrides.push(format!("images={v}"));
    }
    overrides.extend(args.set.iter().cloned());
    let spec: SyntheticSpec = load_toml(&text, &overrides)?;
    let images = synth_generate(&spec)?;
    write_dataset(&images, &args.out)?;
    let cfg = args.out.join("pipeline.toml");
    std::fs::write(&cfg, pipeline_template(&spec)).map_err(|e| Error::Config(format!("{}: {e}", cfg.display())))?;
    log::info!("wrote {} images and {}", images.len(), cfg.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let (args, stages) = match &cli.command {
        Command::Synth(a) => return synth(a),
        Command::Run { args, stages } => {
            let p = args.pipeline()?;
            let list = match stages {
                Some(s) => Stage::parse_list(s)?,
                None => p.default_stages(),
            };
            return p.run(&list);
        }
        Command::Ingest(a) => (a, Stage::Ingest),
        Command::Split(a) => (a, Stage::Split),
        Command::Ciss(a) => (a, Stage::Ciss),
        Command::TrainScorer(a) => (a, Stage::TrainScorer),
        Command::Score(a) => (a, Stage::Score),
        Command::ImportScores(a) => (a, Stage::ImportScores),
        Command::ImportMasks(a) => (a, Stage::ImportMasks),
        Command::DetectBaseline(a) => (a, Stage::DetectBaseline),
        Command::Erc(a) => (a, Stage::Erc),
        Command::TrainEnsemble(a) => (a, Stage::TrainEnsemble),
        Command::Decide(a) => (a, Stage::Decide),
        Command::Evaluate(a) => (a, Stage::Evaluate),
        Command::Render(a) => (a, Stage::Render),
    };
    args.pipeline()?.run(&[stages])
}

/// Rewrites `--a.b value` and `--a.b=value` into `--set a.b=value`.
fn expand_dotted(argv: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = argv.into_iter().peekable();
    while let Some(arg) = it.next() {
        match arg.strip_prefix("--") {
            Some(flag) if flag.split('=').next().is_some_and(|k| k.contains('.')) => {
                out.push("--set".into());
                if flag.contains('=') {
                    out.push(flag.to_string());
                } else {
                    let value = it.next().unwrap_or_default();
                    out.push(format!("{flag}={value}"));
                }
            }
            _ => out.push(arg),
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse_from(expand_dotted(std::env::args()));
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::expand_dotted;

    #[test]
    fn dotted_flags_become_overrides() {
        let argv = ["x", "run", "--decision.tau_s", "0.3", "--ensemble.folds=4", "--seed", "1"];
        let out = expand_dotted(argv.iter().map(|s| s.to_string()));
        assert_eq!(
            out,
            ["x", "run", "--set", "decision.tau_s=0.3", "--set", "ensemble.folds=4", "--seed", "1"]
        );
    }
}
