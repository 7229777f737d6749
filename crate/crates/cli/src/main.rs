mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{PipelineConfig, BUNDLED_SYNTHETIC};
use error::CliError;
use stages::{AblateMode, Run};

#[derive(Parser)]
#[command(name = "factorgraph", version, about = "Quantization-built graphs for sequential recommendation")]
struct Cli {
    /// Pipeline config (TOML); the bundled synthetic config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load interactions and write the leave-one-out split.
    Ingest,
    /// Produce user and item semantic vectors.
    Embed,
    /// Train both quantizers and write factor assignments.
    Quantize,
    /// Build the heterogeneous graph and export its edges.
    Graph,
    /// Train the recommender and write a checkpoint.
    Train,
    /// Score the test split with the trained checkpoint.
    Eval,
    /// Run an ablation family.
    Ablate {
        #[arg(long, value_enum, default_value = "metapath")]
        mode: AblateMode,
    },
    /// Run gradient checks, metric oracles and format round trips.
    Check,
    /// Run ingest through eval in order.
    Pipeline,
    /// Print the resolved config and its run directory.
    Config,
}

fn load(cli: &Cli) -> Result<Run, CliError> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::parse(BUNDLED_SYNTHETIC)?,
    };
    Run::open(cfg.resolve(cli.seed, cli.out.clone())?)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("summaries serialize")
}

fn metric_line(r: &factorgraph::eval::MetricReport) -> String {
    format!(
        "NDCG@{k} {:.4}  HR@{k} {:.4}  MRR {:.4}  GAUC {:.4}  users {}",
        r.ndcg,
        r.hr,
        r.mrr,
        r.gauc,
        r.users,
        k = r.k
    )
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let run = load(cli)?;
    log::info!("run directory {}", run.dir.display());
    match &cli.command {
        Command::Ingest => {
            let s = stages::ingest(&run)?;
            println!("split fingerprint {}  users {}  items {}", s.fingerprint, s.users, s.items);
        }
        Command::Embed => println!("{}", to_json(&stages::embed(&run)?)),
        Command::Quantize => println!("{}", to_json(&stages::quantize(&run)?)),
        Command::Graph => println!("{}", to_json(&stages::graph(&run)?)),
        Command::Train => {
            let r = stages::train(&run)?;
            println!("best epoch {} valid NDCG {:.4}", r.best_epoch, r.best_valid_ndcg);
        }
        Command::Eval => println!("{}", metric_line(&stages::eval(&run)?)),
        Command::Ablate { mode } => print!("{}", stages::ablate(&run, *mode)?),
        Command::Check => {
            let outcomes = stages::check(&run)?;
            for o in &outcomes {
                let tag = if o.passed { "ok  " } else { "FAIL" };
                println!("{tag} {}: {} ({})", o.group, o.name, o.detail);
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                return Err(CliError::ChecksFailed(failed));
            }
        }
        Command::Pipeline => {
            let s = stages::ingest(&run)?;
            println!("split fingerprint {}", s.fingerprint);
            stages::embed(&run)?;
            stages::quantize(&run)?;
            stages::graph(&run)?;
            stages::train(&run)?;
            println!("{}", metric_line(&stages::eval(&run)?));
        }
        Command::Config => print!("{}", run.config.to_toml()),
    }
    println!("outputs in {}", run.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
