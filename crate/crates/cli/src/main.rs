use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use hardy_signal::acceptance;
use hardy_signal::fock_optics::DetectorConfig;
use hardy_signal::harness::{run_batch, ScenarioKind, ScenarioSpec, DEFAULT_SEED, DEFAULT_TRIALS};
use hardy_signal::report::{render_csv, render_prediction, render_table};
use hardy_signal::signal_protocol::{IdentityMode, LeaderRule, PairingRule, Strategy, Version};

const EXIT_USAGE: u8 = 1;
const EXIT_BOUND: u8 = 2;
const EXIT_DEADLOCK: u8 = 3;

#[derive(Parser)]
#[command(name = "hardy-signal", version, about = "Hardy-state optics, exact predictions and signalling-protocol simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print exact quantum tables for one detector configuration (e1, e2, e3 or h).
    Predict { config: String },
    /// Run a Monte Carlo batch described by a scenario file.
    Simulate(SimulateArgs),
    /// Run the acceptance suite.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Report file. Without it the report goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "protocol-version")]
    version: Option<String>,
    #[arg(long)]
    leader_rule: Option<String>,
    #[arg(long)]
    identity_mode: Option<String>,
    #[arg(long)]
    pairing_rule: Option<String>,
}

/// Flat scenario file. Only `kind` is required.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    kind: ScenarioKind,
    config: Option<String>,
    configs: Option<Vec<String>>,
    version: Option<String>,
    leader_rule: Option<LeaderRule>,
    identity_mode: Option<IdentityMode>,
    pairing_rule: Option<PairingRule>,
    trials: Option<u64>,
    seed: Option<u64>,
}

#[derive(Default)]
struct StrategyOverrides {
    version: Option<Version>,
    leader_rule: Option<LeaderRule>,
    identity_mode: Option<IdentityMode>,
    pairing_rule: Option<PairingRule>,
}

fn parse_version(s: &str) -> Result<Version, String> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "v1" => Ok(Version::V1),
        "2" | "v2" => Ok(Version::V2),
        _ => Err(format!("unknown protocol version {s:?} (expected v1 or v2)")),
    }
}

fn parse_name<T: for<'de> Deserialize<'de>>(what: &str, s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown {what} {s:?}"))
}

fn parse_config(s: &str) -> Result<DetectorConfig, String> {
    DetectorConfig::from_selector(s).ok_or_else(|| format!("unknown configuration {s:?} (expected e1, e2, e3 or h)"))
}

fn base_spec(file: &ScenarioFile) -> Result<ScenarioSpec, String> {
    let configs = match (&file.config, &file.configs) {
        (Some(_), Some(_)) => return Err("give either config or configs, not both".into()),
        (Some(c), None) => Some(vec![parse_config(c)?]),
        (None, Some(cs)) => Some(cs.iter().map(|c| parse_config(c)).collect::<Result<Vec<_>, _>>()?),
        (None, None) => None,
    };
    let mut spec = match file.kind {
        ScenarioKind::SingleConfig => {
            let configs = configs.clone().ok_or("single_config needs a config")?;
            let first = *configs.first().ok_or("single_config needs a config")?;
            ScenarioSpec::single_config(first, Strategy::default())
        }
        ScenarioKind::IdentityClash => ScenarioSpec::identity_clash(LeaderRule::FixedYellow),
        ScenarioKind::DeadlockV1 => ScenarioSpec::deadlock_v1(DetectorConfig::E3),
        ScenarioKind::DoublePair => ScenarioSpec::double_pair(IdentityMode::PerPair, PairingRule::ByIdentity),
    };
    if let Some(configs) = configs {
        spec.configs = configs;
    }
    let overrides = StrategyOverrides {
        version: file.version.as_deref().map(parse_version).transpose()?,
        leader_rule: file.leader_rule,
        identity_mode: file.identity_mode,
        pairing_rule: file.pairing_rule,
    };
    apply(&mut spec.strategy, &overrides);
    spec.trials = file.trials.unwrap_or(DEFAULT_TRIALS);
    spec.seed = file.seed.unwrap_or(DEFAULT_SEED);
    Ok(spec)
}

fn apply(strategy: &mut Strategy, o: &StrategyOverrides) {
    if let Some(v) = o.version {
        strategy.version = v;
    }
    if let Some(v) = o.leader_rule {
        strategy.leader_rule = v;
    }
    if let Some(v) = o.identity_mode {
        strategy.identity_mode = v;
    }
    if let Some(v) = o.pairing_rule {
        strategy.pairing_rule = v;
    }
}

fn load_spec(args: &SimulateArgs) -> Result<ScenarioSpec, String> {
    let text = fs::read_to_string(&args.scenario)
        .map_err(|e| format!("cannot read {}: {e}", args.scenario.display()))?;
    let file: ScenarioFile = serde_json::from_str(&text)
        .map_err(|e| format!("cannot parse {}: {e}", args.scenario.display()))?;
    let mut spec = base_spec(&file)?;
    let overrides = StrategyOverrides {
        version: args.version.as_deref().map(parse_version).transpose()?,
        leader_rule: args.leader_rule.as_deref().map(|s| parse_name("leader rule", s)).transpose()?,
        identity_mode: args.identity_mode.as_deref().map(|s| parse_name("identity mode", s)).transpose()?,
        pairing_rule: args.pairing_rule.as_deref().map(|s| parse_name("pairing rule", s)).transpose()?,
    };
    apply(&mut spec.strategy, &overrides);
    if let Some(t) = args.trials {
        spec.trials = t;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), String> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| format!("cannot write {}: {e}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn simulate(args: &SimulateArgs) -> Result<u8, String> {
    let spec = load_spec(args)?;
    let result = run_batch(&spec).map_err(|e| e.to_string())?;
    let table = render_table(&result);
    let report = match args.format {
        Format::Json => result.to_json() + "\n",
        Format::Csv => render_csv(&result),
        Format::Table => table.clone(),
    };
    write_out(args.out.as_deref(), &report)?;
    if args.out.is_some() {
        print!("{table}");
    }
    if result.deadlock_flag && !spec.expects_deadlock() {
        eprintln!("unexpected deadlock");
        return Ok(EXIT_DEADLOCK);
    }
    if !result.within_oracle_bounds() {
        eprintln!("empirical rates outside the oracle bounds");
        return Ok(EXIT_BOUND);
    }
    Ok(0)
}

fn verify() -> u8 {
    let mut all = true;
    for result in acceptance::run_all() {
        println!("{}", result.line());
        all &= result.passed;
    }
    if all {
        0
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let code = match cli.command {
        Command::Predict { config } => match parse_config(&config).and_then(|c| render_prediction(c).map_err(|e| e.to_string())) {
            Ok(text) => {
                print!("{text}");
                0
            }
            Err(e) => {
                eprintln!("error: {e}\nusage: hardy-signal predict <e1|e2|e3|h>");
                EXIT_USAGE
            }
        },
        Command::Simulate(args) => simulate(&args).unwrap_or_else(|e| {
            eprintln!("error: {e}");
            EXIT_USAGE
        }),
        Command::Verify => verify(),
    };
    ExitCode::from(code)
}
