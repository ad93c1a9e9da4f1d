use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nmsloss::experiment::{run_experiment, Command, ExperimentConfig, RunOutcome};
use nmsloss::par::with_jobs;
use nmsloss::{Error, Execution};

/// Synthetic crowded-scene experiments for the NMS-aware pull/push loss.
#[derive(Debug, Parser)]
#[command(name = "nmsloss", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// JSON experiment config; omitted keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Override a config value by dotted path, e.g. `--set loss.nt=0.45`.
    /// Values are parsed as JSON, falling back to a plain string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads; 1 runs sequentially. Defaults to all cores.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Seed for scene generation and training (overrides both config seeds).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Cmd {
    /// Generate the scene suite and write scenes.json.
    Gen,
    /// Train and evaluate every configured mode.
    Train,
    /// Evaluate the scenes as given, without training.
    Eval,
    /// Train the full loss at each N_t in `nt_values`.
    Sweep,
    /// Run the geometry and NMS-loss gradient suites.
    Gradcheck,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Gen => Command::Gen,
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::Sweep => Command::Sweep,
            Cmd::Gradcheck => Command::Gradcheck,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let document = match &cli.config {
        Some(path) => {
            Some(fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?)
        }
        None => None,
    };
    let mut overrides = cli
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("scene.seed".into(), seed.to_string()));
        overrides.push(("train.seed".into(), seed.to_string()));
    }
    ExperimentConfig::load(document.as_deref(), &overrides)
}

fn run(cli: &Cli) -> Result<RunOutcome, Error> {
    let cfg = load_config(cli)?;
    let command = Command::from(cli.command);
    let go = |exec: Execution| run_experiment(&cfg, command, &cli.out, exec);
    match cli.jobs {
        Some(jobs) => with_jobs(jobs, go),
        None => go(Execution::default()),
    }
}

fn report(cli: &Cli, outcome: &RunOutcome) {
    let file = |name: &str| outcome.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str());
    match cli.command {
        Cmd::Gen => println!("wrote scenes.json to {}", cli.out.display()),
        Cmd::Gradcheck => print!("{}", file("gradcheck.txt").unwrap_or_default()),
        Cmd::Train | Cmd::Eval | Cmd::Sweep => print!("{}", file("summary.csv").unwrap_or_default()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NMSLOSS_LOG", "warn")).init();

    match run(&cli) {
        Ok(outcome) => {
            report(&cli, &outcome);
            if outcome.success {
                ExitCode::SUCCESS
            } else {
                log::error!("gradient checks failed");
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            let doc = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{doc}");
            ExitCode::from(2)
        }
    }
}
