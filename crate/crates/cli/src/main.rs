mod commands;
mod config;
mod error;
mod output;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{Command, Format};
use config::{normalize_key, read_config_file, Settings};
use error::CliError;

#[derive(Parser)]
#[command(name = "oprisk", version, about = "Operational-risk estimation on a bipartite loss network")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit GPD marginals and scaling constants to a loss CSV.
    Fit(Opts),
    /// Estimate VaR, CoTE and risk contributions from a fitted model.
    Risk(Opts),
    /// Same as `risk`, plus an allocation table.
    Allocate(Opts),
    /// Independence and comonotone bounds for a fitted model.
    Bounds(Opts),
    /// Run a seeded simulation study.
    Simulate(Opts),
    /// Distance-covariance permutation test of independence.
    TestIndependence(Opts),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Both,
}

#[derive(Args, Default)]
struct Opts {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Report encoding.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,

    /// Loss CSV (`date,amount,event_type,business_line`).
    #[arg(long)]
    input: Option<String>,
    /// model.json written by `fit`.
    #[arg(long)]
    model: Option<String>,
    /// `iso` or `anchored:YYYY-MM-DD`.
    #[arg(long)]
    week_rule: Option<String>,
    /// Losses below this amount are dropped.
    #[arg(long)]
    reporting_floor: Option<String>,
    /// `pot` or `mvr`.
    #[arg(long)]
    k_method: Option<String>,
    /// Number of extreme observations for the angular measure.
    #[arg(long)]
    k: Option<String>,
    /// `a,b,c` or `start:stop:step`.
    #[arg(long)]
    k_grid: Option<String>,
    /// Tail probabilities, comma separated.
    #[arg(long)]
    gammas: Option<String>,
    /// `empirical`, `identity` or `homogeneous`.
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    network_p: Option<String>,
    #[arg(long)]
    network_q: Option<String>,
    #[arg(long)]
    network_count: Option<String>,
    /// JSON array of fraction matrices.
    #[arg(long)]
    networks: Option<String>,
    /// Simulation scenario, 1 or 2.
    #[arg(long)]
    scenario: Option<String>,
    /// Observations per replication.
    #[arg(long)]
    n: Option<String>,
    /// Replications.
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    failure_budget: Option<String>,
    #[arg(long)]
    permutations: Option<String>,
    /// Numeric CSV for the first sample of `test-independence`.
    #[arg(long)]
    u: Option<String>,
    /// Numeric CSV for the second sample of `test-independence`.
    #[arg(long)]
    v: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

impl Opts {
    fn flags(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("input", &self.input),
            ("model", &self.model),
            ("week_rule", &self.week_rule),
            ("reporting_floor", &self.reporting_floor),
            ("k_method", &self.k_method),
            ("k", &self.k),
            ("k_grid", &self.k_grid),
            ("gammas", &self.gammas),
            ("network", &self.network),
            ("network_p", &self.network_p),
            ("network_q", &self.network_q),
            ("network_count", &self.network_count),
            ("networks", &self.networks),
            ("scenario", &self.scenario),
            ("n", &self.n),
            ("m", &self.m),
            ("failure_budget", &self.failure_budget),
            ("permutations", &self.permutations),
            ("u", &self.u),
            ("v", &self.v),
            ("seed", &self.seed),
        ]
    }
}

fn execute(cmd: Command, opts: &Opts) -> Result<Vec<PathBuf>, CliError> {
    let mut raw: BTreeMap<String, String> = match &opts.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    for (k, v) in opts.flags() {
        if let Some(v) = v {
            raw.insert(normalize_key(k), v.clone());
        }
    }
    let format = match opts.format {
        Some(FormatArg::Json) => Format::Json,
        Some(FormatArg::Csv) => Format::Csv,
        Some(FormatArg::Both) | None => Format::Both,
    };
    let mut settings = Settings::new(raw);
    let artifacts = match opts.threads {
        Some(0) => return Err(CliError::Validation("threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?
            .install(|| commands::run(cmd, &mut settings, format))?,
        None => commands::run(cmd, &mut settings, format)?,
    };
    for k in settings.unused() {
        log::warn!("setting `{k}` is not used by this command");
    }
    output::write_all(&opts.out, &artifacts)?;
    Ok(artifacts.iter().map(|a| opts.out.join(&a.name)).collect())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (cmd, opts) = match &cli.command {
        Cmd::Fit(o) => (Command::Fit, o),
        Cmd::Risk(o) => (Command::Risk, o),
        Cmd::Allocate(o) => (Command::Allocate, o),
        Cmd::Bounds(o) => (Command::Bounds, o),
        Cmd::Simulate(o) => (Command::Simulate, o),
        Cmd::TestIndependence(o) => (Command::TestIndependence, o),
    };
    match execute(cmd, opts) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
