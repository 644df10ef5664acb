use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use omnisched::experiment::{self, Bundle, ExperimentConfig, Overrides, SEED_ENV};
use omnisched::packing::PackingPolicy;
use omnisched::sharding::{ParallelLayout, PlanPolicy};
use omnisched::workload::Modality;
use omnisched::Error;

#[derive(Parser)]
#[command(name = "omnisched", version, about = "Plan and simulate heterogeneous multimodal training pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack a trace into fixed-capacity batches and report fill statistics
    Pack(CommonArgs),
    /// Plan encoder/LLM stage placement for each layout
    Plan(CommonArgs),
    /// Simulate 1F1B schedules over every packing x plan cell
    Simulate(CommonArgs),
    /// Simulate MoE routing with per-modality routers and bias balancing
    Route(CommonArgs),
    /// Simulate allocator fragmentation for padded and packed batch streams
    Mem(CommonArgs),
    /// Run the shipped heterogeneous scenario end to end
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "runs/reproduce")]
    out: PathBuf,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file layered over the built-in scenario
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<command>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed; falls back to the config file, then $OMNISCHED_SEED
    #[arg(long)]
    seed: Option<u64>,
    /// Trace file (newline-delimited JSON)
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    capacity: Option<u64>,
    /// Packing policy: padding, stream, ffd or all
    #[arg(long, value_delimiter = ',')]
    policy: Option<Vec<String>>,
    /// Comma-separated DPxPPxTP layouts, e.g. 1x2x1,1x4x1
    #[arg(long, value_delimiter = ',')]
    layouts: Option<Vec<ParallelLayout>>,
    /// Plan policies: naive, balanced or all
    #[arg(long, value_delimiter = ',')]
    plans: Option<Vec<String>>,
    /// Cost model TOML file
    #[arg(long)]
    cost_model: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    comm_latency: Option<f64>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    aux_coefficient: Option<f64>,
    #[arg(long)]
    bias_step: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    modalities: Option<Vec<Modality>>,
    #[arg(long)]
    bytes_per_token: Option<u64>,
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

fn parse_all<T: std::str::FromStr<Err = String> + Copy>(values: &[String], all: &[T]) -> Result<Vec<T>, Failure> {
    if values.iter().any(|v| v == "all") {
        return Ok(all.to_vec());
    }
    values.iter().map(|v| v.parse::<T>().map_err(Failure::Usage)).collect()
}

impl CommonArgs {
    fn overrides(&self) -> Result<Overrides, Failure> {
        Ok(Overrides {
            seed: self.seed,
            trace: self.trace.clone(),
            capacity: self.capacity,
            layouts: self.layouts.clone(),
            packing: self.policy.as_deref().map(|v| parse_all(v, &PackingPolicy::ALL)).transpose()?,
            plans: self.plans.as_deref().map(|v| parse_all(v, &PlanPolicy::ALL)).transpose()?,
            cost_model: self.cost_model.clone(),
            beta: self.beta,
            comm_latency: self.comm_latency,
            num_experts: self.experts,
            top_k: self.top_k,
            aux_coefficient: self.aux_coefficient,
            bias_step: self.bias_step,
            steps: self.steps,
            tokens_per_step: self.tokens,
            offset_magnitude: self.offset,
            modalities: self.modalities.clone(),
            bytes_per_token: self.bytes_per_token,
        })
    }

    fn config(&self) -> Result<ExperimentConfig, Failure> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| Failure::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?),
            Err(_) => None,
        };
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), env_seed)?;
        cfg.apply(&self.overrides()?);
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<PathBuf, Failure> {
    let (bundle, out): (Bundle, PathBuf) = match cli.command {
        Command::Reproduce(args) => {
            let (bundle, summary) = experiment::run_reproduce(args.seed)?;
            eprintln!("throughput ratio (ffd+balanced / padding+naive): {:.3}", summary.throughput_ratio);
            (bundle, args.out)
        }
        Command::Pack(a) => (experiment::run_pack(&a.config()?)?, a.out.unwrap_or_else(|| "runs/pack".into())),
        Command::Plan(a) => (experiment::run_plan(&a.config()?)?, a.out.unwrap_or_else(|| "runs/plan".into())),
        Command::Simulate(a) => (experiment::run_simulate(&a.config()?)?, a.out.unwrap_or_else(|| "runs/simulate".into())),
        Command::Route(a) => (experiment::run_route(&a.config()?)?, a.out.unwrap_or_else(|| "runs/route".into())),
        Command::Mem(a) => (experiment::run_mem(&a.config()?)?, a.out.unwrap_or_else(|| "runs/mem".into())),
    };
    bundle.write_to(&out)?;
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let report = serde_json::json!({ "kind": "usage", "message": e.render().to_string(), "context": [] });
            eprintln!("{report}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(message)) => {
            eprintln!("{}", serde_json::json!({ "kind": "usage", "message": message, "context": [] }));
            ExitCode::from(1)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("{}", serde_json::to_string(&e.to_report()).expect("error report serializes"));
            ExitCode::from(2)
        }
    }
}
