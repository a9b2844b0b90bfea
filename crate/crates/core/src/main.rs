use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rectiflow::coupling::ParticleCoupling;
use rectiflow::error::{Error, Result};
use rectiflow::experiment::{
    emit_report, override_config, parse_value, run_experiment, write_report, ExperimentConfig,
    ExperimentReport, ReportFormat,
};
use rectiflow::ot;
use rectiflow::rectify::{baseline_cost, Baseline};
use rectiflow::scenario::{build_scenario, ScenarioName, ScenarioSpec};

const EXIT_ERROR: u8 = 1;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "rectiflow", version, about = "Rectified flow matching laboratory")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "RECTIFLOW_THREADS")]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Built-in couplings.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
    /// Run one experiment and write its report.
    Run(RunArgs),
    /// Run an experiment once per value of a config key.
    Sweep(SweepArgs),
    /// Transport cost and optimality gap of a coupling file.
    Metrics(MetricsArgs),
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// List scenarios with their parameters.
    List,
    /// Sample a scenario and save the coupling.
    Build {
        name: ScenarioName,
        #[arg(long, short = 'n')]
        n_particles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scenario parameter, `key=value` with a JSON value.
        #[arg(long = "param", value_name = "KEY=VALUE")]
        params: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_particles: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Any config key, `dotted.key=value` with a JSON value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dotted config key, e.g. `schedule.harmonic` or `eps`.
    #[arg(long)]
    param: String,
    /// Comma separated JSON values.
    #[arg(long)]
    values: String,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    coupling: PathBuf,
    #[arg(long, default_value = "discrete_exact")]
    baseline: Baseline,
}

fn split_key_value(s: &str) -> Result<(&str, serde_json::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got '{s}'")))?;
    Ok((k.trim(), parse_value(v.trim())))
}

/// Split on commas outside brackets, braces and quotes.
fn split_values(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut quoted, mut start) = (0i32, false, 0);
    for (i, ch) in s.char_indices() {
        match ch {
            '"' => quoted = !quoted,
            '[' | '{' if !quoted => depth += 1,
            ']' | '}' if !quoted => depth -= 1,
            ',' if !quoted && depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(s[start..].trim());
    out.retain(|v| !v.is_empty());
    out
}

fn load_config(path: &Path, o: &Overrides, out: Option<&PathBuf>) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(path)?;
    for kv in &o.set {
        let (k, v) = split_key_value(kv)?;
        c = override_config(&c, k, v)?;
    }
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(n) = o.n_particles {
        c.n_particles = n;
    }
    if let Some(k) = o.steps {
        c.steps = k;
    }
    if let Some(e) = o.eps {
        c.eps = e;
    }
    if let Some(p) = out {
        c.output.path = Some(p.clone());
    }
    if let Some(f) = o.format {
        c.output.format = Some(f);
    }
    c.validate()?;
    Ok(c)
}

fn summary_line(r: &ExperimentReport) -> String {
    match r.final_record() {
        Some(s) => format!(
            "steps {} cost {:.6} distance {:.6} loss {:.6}{}",
            r.steps.len(),
            s.transport_cost,
            s.transport_distance,
            s.loss,
            s.optimality_gap.map(|g| format!(" gap {g:.6}")).unwrap_or_default()
        ),
        None => "no completed step".to_string(),
    }
}

/// Runs `config`, writes its report and returns whether it completed.
fn execute(config: &ExperimentConfig) -> Result<bool> {
    let run = run_experiment(config)?;
    let format = config.output.resolved_format();
    match &config.output.path {
        Some(p) => write_report(&run.report, p, format)?,
        None => emit_report(&run.report, format, io::stdout().lock())?,
    }
    eprintln!("{}", summary_line(&run.report));
    if let Some(e) = &run.error {
        eprintln!("aborted: {}", run.report.meta.abort_reason.as_deref().unwrap_or(""));
        log::debug!("{e:?}");
    }
    Ok(run.error.is_none())
}

fn scenario_command(cmd: ScenarioCommand) -> Result<u8> {
    match cmd {
        ScenarioCommand::List => {
            let mut out = io::stdout().lock();
            for name in ScenarioName::ALL {
                let params = name.params();
                writeln!(out, "{:<22} {}", name.as_str(), name.description())?;
                if !params.is_empty() {
                    writeln!(out, "{:<22} params: {}", "", params.join(", "))?;
                }
            }
        }
        ScenarioCommand::Build {
            name,
            n_particles,
            seed,
            params,
            out,
        } => {
            let mut spec = ScenarioSpec::new(name);
            for kv in &params {
                let (k, v) = split_key_value(kv)?;
                spec = spec.with_param(k, v);
            }
            spec.validate()?;
            let (c, meta) = build_scenario(&spec, n_particles, seed)?;
            c.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&meta.summary())?);
        }
    }
    Ok(0)
}

fn sweep(args: SweepArgs) -> Result<u8> {
    let base = load_config(&args.config, &args.overrides, None)?;
    let values = split_values(&args.values);
    if values.is_empty() {
        return Err(Error::Config("--values is empty".into()));
    }
    let configs = values
        .iter()
        .map(|v| override_config(&base, &args.param, parse_value(v)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out_dir)?;
    let format = base.output.format.unwrap_or(ReportFormat::Json);
    let stem = args.config.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    let mut status = 0;
    for (v, mut c) in values.iter().zip(configs) {
        let tag: String = v
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() || ".-_".contains(ch) { ch } else { '_' })
            .collect();
        let path = args
            .out_dir
            .join(format!("{stem}_{}={tag}.{}", args.param, format.extension()));
        c.output.path = Some(path.clone());
        c.output.format = Some(format);
        eprint!("{}={v}: ", args.param);
        match execute(&c) {
            Ok(true) => {}
            Ok(false) => status = status.max(EXIT_PARTIAL),
            Err(e) => {
                eprintln!("error: {e}");
                status = EXIT_ERROR;
            }
        }
        println!("{}", path.display());
    }
    Ok(status)
}

fn metrics(args: MetricsArgs) -> Result<u8> {
    let c = ParticleCoupling::load(&args.coupling)?;
    let cost = ot::transport_cost(&c);
    let base = baseline_cost(&c, args.baseline)?;
    let out = json!({
        "n": c.len(),
        "dim": c.dim(),
        "transport_cost": cost,
        "transport_distance": cost.sqrt(),
        "baseline": args.baseline,
        "baseline_cost": base,
        "optimality_gap": cost - base,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Scenario(cmd) => scenario_command(cmd),
        Command::Run(args) => {
            let c = load_config(&args.config, &args.overrides, args.out.as_ref())?;
            Ok(if execute(&c)? { 0 } else { EXIT_PARTIAL })
        }
        Command::Sweep(args) => sweep(args),
        Command::Metrics(args) => metrics(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
