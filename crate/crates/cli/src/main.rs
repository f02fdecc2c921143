mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "xflow", version, about = "Cross-component library call profiler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a command with the profiling agent preloaded.
    Run(RunArgs),
    /// Summarize the ledgers of a finished run.
    Report(ReportArgs),
}

#[derive(clap::Args, Debug)]
pub struct RunArgs {
    /// Ledger directory [env: XFLOW_OUT_DIR, default ./xflow-out]
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Time every Nth call per site [env: XFLOW_TIMING_RATE]
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub timing_rate: Option<u32>,

    /// Write a ledger snapshot when this signal arrives [env: XFLOW_DUMP_SIGNAL]
    #[arg(long, value_parser = parse_signal)]
    pub dump_signal: Option<String>,

    /// Never patch images whose path contains one of these [env: XFLOW_DENY_IMAGES]
    #[arg(long, value_delimiter = ',')]
    pub deny: Vec<String>,

    /// Per-thread shadow stack depth [env: XFLOW_SHADOW_DEPTH]
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub shadow_depth: Option<u32>,

    /// Agent shared object [env: XFLOW_AGENT, default: next to this binary]
    #[arg(long)]
    pub agent: Option<PathBuf>,

    #[arg(required = true, last = true, value_name = "CMD")]
    pub command: Vec<String>,
}

fn parse_signal(s: &str) -> Result<String, String> {
    xflow_core::config::parse_signal(s).map(|_| s.to_string()).ok_or_else(|| format!("unknown signal {s:?}"))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum View {
    Component,
    Api,
    Imbalance,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(clap::Args, Debug)]
pub struct ReportArgs {
    /// Ledger directory
    #[arg(long, default_value = xflow_core::config::DEFAULT_OUT_DIR)]
    pub out: PathBuf,

    /// View to show; without it, the application's component view and the
    /// API view of its largest callee.
    #[arg(long, value_enum)]
    pub view: Option<View>,

    /// Component (file name, path or unique substring)
    #[arg(long)]
    pub image: Option<String>,

    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,

    /// Group mean ratio above which imbalance is flagged
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(a) => run::run(&a),
        Command::Report(a) => report::report(&a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("xflow: {e:#}");
            ExitCode::from(1)
        }
    }
}
