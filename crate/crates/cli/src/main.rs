//! `xaimi`: run experiment stages from a TOML config.
//!
//! Failures exit nonzero with `{"error": {"kind", "message"}}` on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use xaimi::experiment::{paths, Experiment, ExperimentConfig, Stage, StageOutcome};
use xaimi::inversion::BreachStore;
use xaimi::xai::{normalize_min_max, Explanation, ExplanationKind};
use xaimi::{io, Error};

#[derive(Parser, Debug)]
#[command(name = "xaimi", version, about = "Explanation-aware model inversion experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `run.seed`. A different seed writes to `<output_dir>-seed<INT>`.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Stage to run when no subcommand is given (default: all stages).
    #[arg(long, global = true, value_name = "NAME")]
    stage: Option<String>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Runs `--stage`, or every stage in order.
    Run,
    TrainTarget,
    Breach,
    TrainInversion,
    TrainSurrogate,
    Evaluate,
    Analyze,
    Report,
    /// Renders a breached explanation as a PNG heatmap.
    RenderHeatmap {
        /// Source index of the queried image.
        #[arg(long)]
        instance: usize,
        #[arg(long, default_value = "grad_cam")]
        kind: String,
        #[arg(long, default_value = "attack_test", value_parser = ["attack_train", "attack_test"])]
        split: String,
        /// Map within a stack explanation.
        #[arg(long, default_value_t = 0)]
        slice: usize,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::TrainTarget => Stage::TrainTarget,
            Command::Breach => Stage::Breach,
            Command::TrainInversion => Stage::TrainInversion,
            Command::TrainSurrogate => Stage::TrainSurrogate,
            Command::Evaluate => Stage::Evaluate,
            Command::Analyze => Stage::Analyze,
            Command::Report => Stage::Report,
            Command::Run | Command::RenderHeatmap { .. } => return None,
        })
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(if kind == "usage" { 2 } else { 1 })
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed.filter(|&s| s != cfg.run.seed) {
        // a different seed is a different run: keep its artifacts apart
        let name = cfg.run.output_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        cfg.run.output_dir.set_file_name(format!("{name}-seed{seed}"));
        cfg.run.seed = seed;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn outcome_json(o: &StageOutcome) -> serde_json::Value {
    json!({
        "stage": o.stage,
        "skipped": o.skipped,
        "wall_clock_seconds": o.record.wall_clock_seconds,
        "artifacts": o.record.artifacts,
        "summary": o.record.summary,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    let command = cli.command.as_ref().unwrap_or(&Command::Run);
    let stages: Vec<Stage> = match (command, &cli.stage) {
        (Command::RenderHeatmap { instance, kind, split, slice, out }, _) => {
            return render_heatmap(&cfg, *instance, kind, split, *slice, out);
        }
        (Command::Run, Some(name)) => vec![Stage::parse(name)?],
        (Command::Run, None) => Stage::ALL.to_vec(),
        (c, Some(name)) if c.stage() != Some(Stage::parse(name)?) => {
            return Err(Error::Config(format!("--stage {name} conflicts with the subcommand")));
        }
        (c, _) => vec![c.stage().expect("stage subcommand")],
    };
    let mut exp = Experiment::open(cfg)?;
    for stage in stages {
        let o = exp.run_stage(stage)?;
        println!("{}", outcome_json(&o));
    }
    Ok(())
}

fn render_heatmap(
    cfg: &ExperimentConfig,
    instance: usize,
    kind: &str,
    split: &str,
    slice: usize,
    out: &std::path::Path,
) -> Result<(), Error> {
    let kind = ExplanationKind::parse(kind)?;
    let rel = if split == "attack_train" { paths::BREACH_TRAIN } else { paths::BREACH_TEST };
    let store = BreachStore::open(&cfg.run.output_dir.join(rel))?;
    let tuple = store
        .load()?
        .into_iter()
        .find(|t| t.source_index == Some(instance))
        .ok_or_else(|| Error::Invalid(format!("instance {instance} is not in the {split} breach store")))?;
    let e = tuple
        .explanation(kind)
        .ok_or_else(|| Error::UnsupportedExplanation(format!("the breach store holds no {} maps", kind.as_str())))?;
    let (h, w, values) = match e {
        Explanation::Map(m) => (m.height, m.width, m.values.clone()),
        Explanation::Stack(s) if slice < s.depth => (s.height, s.width, s.slice(slice).to_vec()),
        Explanation::Stack(s) => {
            return Err(Error::Invalid(format!("slice {slice} outside a stack of depth {}", s.depth)))
        }
    };
    io::write_heatmap_png(out, w, h, &normalize_min_max(&values))?;
    println!("{}", json!({ "heatmap": out, "instance": instance, "kind": kind.as_str(), "height": h, "width": w }));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
