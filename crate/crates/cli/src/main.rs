use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use fogmarket::audit::run_audit;
use fogmarket::experiments::{plotdata, run_sweep, write_csv, SweepSpec};
use fogmarket::game::{solve_game, write_summary_csv};
use fogmarket::scenario::{generate_scenario, Scenario, ScenarioConfig};

/// Success share a sweep needs to exit 0.
const SWEEP_SUCCESS: f64 = 0.9;

const EXIT_INVALID: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_SWEEP_FAILED: u8 = 3;
const EXIT_AUDIT_FAILED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "fogmarket", version, about = "Equilibrium solver for a vehicular fog computing market")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario file (JSON).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Sweep spec, or scenario config for gen-scenario (JSON).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for generated scenarios and sweeps.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override an input field, e.g. `params.f_e_max=200` or `solver.eps=1e-8`.
    #[arg(long = "set", value_name = "K=V", global = true)]
    set: Vec<String>,
    /// Run oracle audits on scenarios beyond the grid limits.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    #[arg(long, global = true)]
    eps: Option<f64>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Solve one market slot.
    Solve,
    /// Run a parameter sweep.
    Sweep,
    /// Check the solvers against brute-force oracles.
    Audit,
    /// Write a random scenario file.
    GenScenario,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Sweep => "sweep",
            Command::Audit => "audit",
            Command::GenScenario => "gen-scenario",
        }
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        if key.is_empty() {
            bail!("empty segment in override path `{path}`");
        }
        let Value::Object(map) = node else {
            bail!("override `{path}`: `{}` is not an object", parts[..i].join("."));
        };
        if i + 1 == parts.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert_with(|| json!({}));
    }
    Ok(())
}

/// Apply `K=V` overrides; `V` is parsed as JSON, falling back to a string.
fn apply_overrides(root: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .with_context(|| format!("override `{item}` is not of the form K=V"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(root, key.trim(), value)?;
    }
    Ok(())
}

fn solver_overrides(cli: &Cli) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(n) = cli.max_iters {
        out.push(format!("solver.max_iters={n}"));
    }
    if let Some(e) = cli.eps {
        out.push(format!("solver.eps={e:e}"));
    }
    out
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))
}

fn decode<T: serde::de::DeserializeOwned>(value: Value, path: &Path) -> Result<T> {
    serde_json::from_value(value).with_context(|| format!("invalid {}", path.display()))
}

/// Pretty JSON with sorted keys and a trailing newline.
fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let sorted = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&sorted)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_manifest(cli: &Cli, inputs: &[&Path]) -> Result<()> {
    let manifest = json!({
        "command": cli.command.name(),
        "inputs": inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "output_dir": cli.out.display().to_string(),
        "overrides": cli.set,
        "seed": cli.seed,
        "max_iters": cli.max_iters,
        "eps": cli.eps,
        "force": cli.force,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "timestamp": chrono::Utc::now().to_rfc3339(),
    });
    write_json(&cli.out.join("manifest.json"), &manifest)
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref().with_context(|| format!("{flag} PATH is required"))
}

fn load_scenario(cli: &Cli) -> Result<(Scenario, PathBuf)> {
    let path = required(&cli.scenario, "--scenario")?.to_path_buf();
    let mut value = read_json(&path)?;
    apply_overrides(&mut value, &cli.set)?;
    apply_overrides(&mut value, &solver_overrides(cli))?;
    let scenario: Scenario = decode(value, &path)?;
    scenario.validate().with_context(|| format!("invalid {}", path.display()))?;
    Ok((scenario, path))
}

fn cmd_solve(cli: &Cli) -> Result<u8> {
    let (scenario, path) = load_scenario(cli)?;
    let report = solve_game(&scenario)?;
    fs::create_dir_all(&cli.out)?;
    write_json(&cli.out.join("equilibrium_report.json"), &report)?;
    write_summary_csv(&report, fs::File::create(cli.out.join("summary.csv"))?)?;
    write_manifest(cli, &[&path])?;
    if report.converged {
        Ok(0)
    } else {
        eprintln!("warning: stage 1 did not converge; report written with flag not_converged");
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn cmd_sweep(cli: &Cli) -> Result<u8> {
    let path = required(&cli.spec, "--spec")?;
    let mut value = read_json(path)?;
    apply_overrides(&mut value, &cli.set)?;
    apply_overrides(&mut value, &solver_overrides(cli))?;
    if let Some(seed) = cli.seed {
        set_path(&mut value, "config.seed", json!(seed))?;
    }
    let spec: SweepSpec = decode(value, path)?;
    let results = run_sweep(&spec)?;
    fs::create_dir_all(&cli.out)?;
    write_csv(&results, fs::File::create(cli.out.join("results.csv"))?)?;
    write_json(&cli.out.join("plotdata.json"), &plotdata(&results))?;
    write_manifest(cli, &[path])?;
    for row in results.rows.iter().filter(|r| !r.ok) {
        eprintln!(
            "row value={} replication={} failed: {}",
            row.value,
            row.replication,
            row.error.as_deref().unwrap_or("unknown error")
        );
    }
    let share = results.success_fraction();
    if share >= SWEEP_SUCCESS {
        Ok(0)
    } else {
        eprintln!("only {:.0}% of sweep rows succeeded", share * 100.0);
        Ok(EXIT_SWEEP_FAILED)
    }
}

fn cmd_audit(cli: &Cli) -> Result<u8> {
    let (scenario, path) = load_scenario(cli)?;
    let report = run_audit(&scenario, cli.force)?;
    fs::create_dir_all(&cli.out)?;
    write_json(&cli.out.join("audit.json"), &report)?;
    write_manifest(cli, &[&path])?;
    for check in &report.checks {
        let status = if check.passed { "ok" } else { "FAILED" };
        println!("{:<22} {status:<6} {:.3e} (tol {:.1e})", check.name, check.value, check.tolerance);
    }
    Ok(if report.passed { 0 } else { EXIT_AUDIT_FAILED })
}

fn cmd_gen_scenario(cli: &Cli) -> Result<u8> {
    let mut value = match &cli.spec {
        Some(path) => read_json(path)?,
        None => serde_json::to_value(ScenarioConfig::default())?,
    };
    apply_overrides(&mut value, &cli.set)?;
    if let Some(seed) = cli.seed {
        set_path(&mut value, "seed", json!(seed))?;
    }
    let config: ScenarioConfig = serde_json::from_value(value).context("invalid scenario config")?;
    let mut scenario = generate_scenario(&config)?;
    if let Some(n) = cli.max_iters {
        scenario.solver.max_iters = n;
    }
    if let Some(e) = cli.eps {
        scenario.solver.eps = e;
    }
    fs::create_dir_all(&cli.out)?;
    let target = cli.out.join("scenario.json");
    write_json(&target, &scenario)?;
    let inputs: Vec<&Path> = cli.spec.as_deref().into_iter().collect();
    write_manifest(cli, &inputs)?;
    println!("{}", target.display());
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FOGMARKET_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve => cmd_solve(&cli),
        Command::Sweep => cmd_sweep(&cli),
        Command::Audit => cmd_audit(&cli),
        Command::GenScenario => cmd_gen_scenario(&cli),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}
