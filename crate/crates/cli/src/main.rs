use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rlviz::config::{Preset, RunConfig};
use rlviz::pipeline::{run_all, run_stage, Stage, Workspace};
use rlviz::Error;

/// Train RL agents and generators, then synthesize and analyze states of interest.
#[derive(Parser, Debug)]
#[command(name = "probe", version)]
struct Cli {
    /// Hyperparameter preset: paper or desk.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// TOML file whose keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding checkpoints, datasets, reports and images.
    #[arg(long, global = true, default_value = "probe-run")]
    workdir: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Default)]
struct SynthArgs {
    /// action:<id>, t+, t-, t+-, s+ or s-.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Generator trained with this loss (full, lp-only, plain-vae).
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a double-DQN agent.
    TrainAgent,
    /// Record a frame dataset with the trained agent.
    Collect,
    /// Train the generator for one loss mode.
    TrainGenerator {
        #[arg(long)]
        loss: Option<String>,
    },
    /// Optimize latent codes towards a target function.
    Synthesize(SynthArgs),
    /// Score the agent on reconstructed observations.
    EvalRecon,
    /// Pixel-difference histogram of samples against the dataset.
    Novelty,
    /// Nearest dataset frames of each sample.
    Retrieve,
    /// Render saliency masks of dataset frames.
    Saliency,
    /// Every stage in order, all three loss modes.
    RunAll,
}

fn overrides(cmd: &Option<Command>) -> Vec<String> {
    let mut out = Vec::new();
    match cmd {
        Some(Command::TrainGenerator { loss: Some(l) }) => out.push(format!("loss={l}")),
        Some(Command::Synthesize(a)) => {
            let pairs = [
                ("target", a.target.clone().map(|t| format!("\"{t}\""))),
                ("beta", a.beta.map(|v| v.to_string())),
                ("alpha", a.alpha.map(|v| v.to_string())),
                ("synth_steps", a.steps.map(|v| v.to_string())),
                ("samples", a.samples.map(|v| v.to_string())),
                ("loss", a.loss.clone()),
                ("seed", a.seed.map(|v| v.to_string())),
            ];
            out.extend(pairs.into_iter().filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))));
        }
        _ => {}
    }
    out
}

fn resolve(cli: &Cli) -> rlviz::Result<RunConfig> {
    let preset: Preset = cli.preset.parse()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, preset)?,
        None => RunConfig::preset(preset),
    };
    for o in cli.overrides.iter().chain(&overrides(&cli.command)) {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> rlviz::Result<()> {
    let cfg = resolve(&cli)?;
    if cli.dump_config {
        print!("# preset {} hash {}\n{}", cli.preset, cfg.hash(), cfg.to_toml());
        return Ok(());
    }
    let ws = Workspace::new(&cli.workdir);
    let stage = match cli.command {
        None => return Err(Error::Input("no subcommand given (see --help)".into())),
        Some(Command::RunAll) => {
            for r in run_all(&cfg, &ws)? {
                println!("{}: {}", r.name, ws.report(&r.name).display());
            }
            return Ok(());
        }
        Some(Command::TrainAgent) => Stage::TrainAgent,
        Some(Command::Collect) => Stage::Collect,
        Some(Command::TrainGenerator { .. }) => Stage::TrainGenerator(cfg.loss),
        Some(Command::Synthesize(_)) => Stage::Synthesize,
        Some(Command::EvalRecon) => Stage::EvalRecon,
        Some(Command::Novelty) => Stage::Novelty,
        Some(Command::Retrieve) => Stage::Retrieve,
        Some(Command::Saliency) => Stage::Saliency,
    };
    let report = run_stage(stage, &cfg, &ws)?;
    print!("{}", report.render());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
