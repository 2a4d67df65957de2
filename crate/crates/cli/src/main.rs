use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use crma_cli::config::ExperimentConfig;
use crma_cli::experiment::{self, ExperimentError, ResultTable};

/// Multi-source domain adaptation experiments.
///
/// Any config key can be overridden with `--section.key=value`, e.g.
/// `--train.epochs=10`.
#[derive(Parser)]
#[command(name = "crma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the methods listed in `experiment.baselines` on every seed.
    Run(Common),
    /// Train all eight combinations of the three components.
    Ablate(Common),
    /// Compare adaptive and uniform pseudo-label weighting.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "uniform")]
        mode: Mode,
    },
    /// Validate per-run metrics and gather them under `<run-dir>/curves`.
    Curves { run_dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Uniform,
}

#[derive(clap::Args)]
struct Common {
    config: PathBuf,
    /// Base seed; seed i of the sweep uses `seed + i`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Splits `--section.key=value` (or `--section.key value`) overrides from the
/// arguments clap sees.
fn split_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(body) = arg
            .strip_prefix("--")
            .filter(|b| b.split('=').next().is_some_and(|k| k.contains('.')))
        else {
            rest.push(arg);
            continue;
        };
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = iter
                    .next()
                    .with_context(|| format!("missing value for --{body}"))?;
                overrides.push((body.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn load(common: &Common, overrides: &[(String, String)]) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))?;
    let mut config = ExperimentConfig::parse(&text)
        .with_context(|| format!("in {}", common.config.display()))?;
    for (k, v) in overrides {
        config.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        config.base_seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn report(
    result: Result<ResultTable, ExperimentError>,
    config: &ExperimentConfig,
) -> anyhow::Result<()> {
    let table = result?;
    print!("{}", table.render());
    println!("results written to {}", config.output_dir.display());
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> anyhow::Result<()> {
    if !overrides.is_empty() && matches!(cli.command, Command::Curves { .. }) {
        anyhow::bail!("config overrides do not apply to `curves`");
    }
    match cli.command {
        Command::Run(common) => {
            let config = load(&common, overrides)?;
            report(experiment::run(&config), &config)
        }
        Command::Ablate(common) => {
            let config = load(&common, overrides)?;
            report(experiment::ablation_sweep(&config), &config)
        }
        Command::Baseline {
            common,
            mode: Mode::Uniform,
        } => {
            let config = load(&common, overrides)?;
            report(experiment::uniform_ensemble_baseline(&config), &config)
        }
        Command::Curves { run_dir } => {
            let entries = experiment::emit_curves(&run_dir)?;
            println!(
                "{} curves written to {}",
                entries.len(),
                run_dir.join("curves").display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = matches!(
                e.downcast_ref::<ExperimentError>(),
                Some(ExperimentError::Diverged { .. })
            );
            ExitCode::from(if diverged { 2 } else { 1 })
        }
    }
}
