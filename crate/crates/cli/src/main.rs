use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fsm_cli::{commands, CliError, CliResult, Config};

#[derive(Debug, Parser)]
#[command(name = "fsm", about = "Few-shot speech-image matching pipeline")]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides `experiment.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (overrides `FSM_THREADS` and `experiment.threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory (overrides `experiment.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Materialise synthetic or file-backed datasets.
    Prepare,
    /// Train encoders, one checkpoint per seed.
    Train,
    /// Mine or construct training pairs.
    MinePairs,
    /// Run the episodic benchmark and write report files.
    Eval {
        /// Raw-feature baseline: none, dtw+pixels or random.
        #[arg(long)]
        baseline: Option<String>,
        /// multimodal, unimodal-speech or unimodal-vision.
        #[arg(long)]
        task: Option<String>,
    },
}

fn resolve(args: &Args) -> CliResult<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for s in &args.set {
        cfg.set_assignment(s)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("experiment.seed", &seed.to_string())?;
    }
    if let Some(out) = &args.out {
        cfg.set("experiment.out", &out.to_string_lossy())?;
    }
    let threads = match (args.threads, std::env::var("FSM_THREADS")) {
        (Some(n), _) => Some(n.to_string()),
        (None, Ok(v)) if !v.is_empty() => Some(v),
        _ => None,
    };
    if let Some(n) = threads {
        cfg.set("experiment.threads", &n)?;
    }
    if let Command::Eval { baseline, task } = &args.command {
        if let Some(b) = baseline {
            cfg.set("eval.baseline", b)?;
        }
        if let Some(t) = task {
            cfg.set("eval.task", t)?;
        }
    }
    Ok(cfg)
}

fn run(args: &Args) -> CliResult<()> {
    let cfg = resolve(args)?;
    let threads: usize = cfg.parse("experiment.threads")?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match args.command {
        Command::Prepare => commands::prepare(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::MinePairs => commands::mine_cmd(&cfg),
        Command::Eval { .. } => commands::eval_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
