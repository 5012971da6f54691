//! `ncadapt`: generate data, train and adapt NCA segmentation models,
//! evaluate them stage by stage and write transfer reports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure. Errors go to standard error as
//! `error[<kind>]: <message>`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ncadapt::adapt::NqmRule;
use ncadapt::metrics::InferenceMode;
use ncadapt::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "ncadapt", version, about = "Domain-incremental NCA segmentation with per-domain adapters")]
struct Cli {
    /// Worker threads for training and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Configuration file plus explicit overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration (JSON). Built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of epochs per stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the data directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark domains and their splits.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the first stage of a continual run on one domain.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Domain to train on (a directory under the data directory).
        #[arg(long)]
        domain: String,
        /// New checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Add and train the next domain on an existing checkpoint.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint of the previous stage.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        domain: String,
        /// New checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single-task reference model on one domain.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every stage checkpoint on every domain's test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stage checkpoints in stage order.
        #[arg(long, value_delimiter = ',', required = true)]
        stages: Vec<PathBuf>,
        /// Single-task reference checkpoints, one per domain.
        #[arg(long, value_delimiter = ',', required = true)]
        baselines: Vec<PathBuf>,
        /// Domains in task order.
        #[arg(long, value_delimiter = ',', required = true)]
        domains: Vec<String>,
        /// How heads are chosen (oracle-id or nqm).
        #[arg(long)]
        mode: Option<ModeArg>,
        /// Evaluation result (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute transfer metrics from an evaluation and write the reports.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output of `eval`.
        #[arg(long)]
        eval: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image, choosing the head automatically or by id.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image in RTI format.
        #[arg(long)]
        image: PathBuf,
        /// `auto` or a domain id.
        #[arg(long, default_value = "auto")]
        domain: String,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = NqmRule::Min)]
        rule: NqmRule,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the predicted mask here (RTI).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter counts of the compared configurations.
    ParamAudit {
        /// `default2d`, `default3d` or an architecture JSON file.
        #[arg(long, default_value = "default3d")]
        arch: String,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ModeArg(pub InferenceMode);

impl std::str::FromStr for ModeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "oracle-id" | "oracle" => Ok(ModeArg(InferenceMode::OracleId)),
            "nqm" => Ok(ModeArg(InferenceMode::Nqm)),
            other => Err(format!("unknown inference mode '{other}' (oracle-id, nqm)")),
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData { cfg } => commands::gen_data(&cfg),
        Command::Train { cfg, domain, out } => commands::train(&cfg, &domain, &out),
        Command::Adapt { cfg, from, domain, out } => commands::adapt(&cfg, &from, &domain, &out),
        Command::Baseline { cfg, domain, out } => commands::baseline(&cfg, &domain, &out),
        Command::Eval {
            cfg,
            stages,
            baselines,
            domains,
            mode,
            out,
        } => commands::eval(&cfg, &stages, &baselines, &domains, mode.map(|m| m.0), &out),
        Command::Report { cfg, eval, out } => commands::report(&cfg, &eval, &out),
        Command::Infer {
            checkpoint,
            image,
            domain,
            samples,
            rule,
            seed,
            out,
        } => commands::infer(&checkpoint, &image, &domain, samples, rule, seed, out.as_deref()),
        Command::ParamAudit { arch } => commands::param_audit(&arch),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = match e.kind() {
                ErrorKind::Usage => ("usage", 1),
                ErrorKind::Data => ("data", 2),
                ErrorKind::Numerical => ("numerical", 3),
            };
            eprintln!("error[{tag}]: {e}");
            ExitCode::from(code)
        }
    }
}
