use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use convrec_service::commands::{self, CommandError, Dialogue, Dimension};
use convrec_service::config::ServiceConfig;
use convrec_service::runtime::Runtime;

#[derive(Parser)]
#[command(name = "convrec", version, about = "Conversational recommender agent")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, default_value = "convrec.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the catalog, interactions, knowledge graph and demonstrations.
    Ingest,
    /// Build the embedding index.
    Index {
        /// Write vectors as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chat with the agent in the terminal.
    Chat {
        #[arg(long, default_value = "local")]
        user: String,
    },
    /// Run one evaluation dimension over a JSONL case file.
    Eval {
        #[arg(long, value_enum)]
        dimension: Dimension,
        #[arg(long)]
        cases: PathBuf,
        /// Report path; defaults to the case file with a `.report.json` extension.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve,
    /// Replay dialogues and write (instruction, plan) pairs as JSON lines.
    ExportPlans {
        /// JSONL of {"user_id", "utterances": [...]}.
        #[arg(long)]
        dialogues: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CommandError> {
    let cfg = ServiceConfig::load(&cli.config).map_err(|e| CommandError(e.to_string()))?;
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Ingest => commands::ingest(&cfg, &mut stdout),
        Command::Index { out } => commands::index(&cfg, out.as_deref(), &mut stdout),
        Command::Chat { user } => {
            let rt = runtime(&cfg)?;
            commands::chat(rt.agent(), &user, &mut io::stdin().lock(), &mut stdout)
        }
        Command::Eval { dimension, cases, report } => {
            let result = commands::run_eval(&cfg, dimension, &cases)?;
            let path = report.unwrap_or_else(|| cases.with_extension("report.json"));
            commands::write_report(&result, &path)?;
            write!(stdout, "{result}").map_err(|e| CommandError(e.to_string()))
        }
        Command::Serve => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| CommandError(e.to_string()))?;
            rt.block_on(commands::serve(cfg))
        }
        Command::ExportPlans { dialogues, out } => {
            let dialogues: Vec<Dialogue> = commands::read_jsonl(&dialogues)?;
            let rt = runtime(&cfg)?;
            let failed = commands::export_plans(rt.agent(), &dialogues, &out)?;
            if failed > 0 {
                tracing::warn!("{failed} turns failed and were left out");
            }
            Ok(())
        }
    }
}

fn runtime(cfg: &ServiceConfig) -> Result<Runtime, CommandError> {
    Runtime::from_config(cfg).map_err(|e| CommandError(e.to_string()))
}
