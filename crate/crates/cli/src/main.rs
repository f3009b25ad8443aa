//! `battsec`: simulate charging scenarios under voltage-sensor attack and
//! score the secure estimator against baselines.
//!
//! Exit status: 0 on success, 2 for configuration or input errors, 3 for
//! numerical failures.

mod plot;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use battsec::config::ScenarioConfig;
use battsec::correction::CorrectorMode;
use battsec::gpr::{load_datasets, save_datasets, GprBank, GprSettings};
use battsec::scenario::{
    emit_outputs, generate_gpr_data, read_scenario_csv, run_scenario, scenario_metrics,
};
use battsec::{Error, Exec, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "battsec", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the nominal (attack-free) charging trace.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate per-region GPR training data from a nominal charging sweep.
    GenGprData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the per-region GPR bank from generated data.
    TrainGpr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scenario config whose [gpr] section supplies the hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one or more attack scenarios and write trace.csv and report.txt.
    RunScenario {
        /// Scenario config; repeat to run several scenarios concurrently.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long, value_parser = parse_corrector)]
        corrector: Option<CorrectorMode>,
        /// GPR model directory (overrides the config).
        #[arg(long)]
        models: Option<PathBuf>,
        /// Output directory (overrides the config; single scenario only).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write plot.svg with the voltage traces.
        #[arg(long)]
        plot: bool,
    },
    /// Recompute the metrics report from a scenario trace.csv.
    Report {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn parse_corrector(s: &str) -> std::result::Result<CorrectorMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::load(p),
        None => Ok(ScenarioConfig::default()),
    }
}

fn simulate(config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.validate_without_models()?;
    let trace = battsec::scenario::simulate_nominal(&cfg)?;
    match out {
        Some(path) => {
            let f = File::create(path).map_err(|e| Error::io(path, e))?;
            trace
                .write_csv(BufWriter::new(f))
                .map_err(|e| Error::io(path, e))
        }
        None => trace
            .write_csv(io::stdout().lock())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn gen_gpr_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = ScenarioConfig::load(config)?;
    let datasets = generate_gpr_data(&cfg, Exec::default())?;
    save_datasets(&datasets, out)?;
    for ds in &datasets {
        println!("region {}: {} rows", ds.region, ds.rows.len());
    }
    Ok(())
}

fn train_gpr(data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let settings: GprSettings = load_config(config)?.gpr;
    let datasets = load_datasets(data)?;
    let bank = GprBank::train(&datasets, &settings, Exec::default())?;
    bank.save(out)?;
    for (region, m) in &bank.models {
        println!(
            "region {region}: n = {}, log marginal likelihood = {:.6e}",
            m.len(),
            m.log_marginal_likelihood()
        );
    }
    Ok(())
}

fn run_one(
    path: &Path,
    corrector: Option<CorrectorMode>,
    models: Option<&Path>,
    out: Option<&Path>,
    plot: bool,
) -> Result<String> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(c) = corrector {
        cfg.estimator.corrector = c;
    }
    if let Some(m) = models {
        cfg.estimator.models = Some(m.to_path_buf());
    }
    if let Some(o) = out {
        cfg.output.dir = o.to_path_buf();
    }
    let result = run_scenario(&cfg)?;
    emit_outputs(&result, &cfg.output.dir)?;
    if plot {
        plot::write_svg(&result.rows, &cfg.output.dir.join("plot.svg"))?;
    }
    Ok(format!(
        "== {} -> {}\n{}",
        path.display(),
        cfg.output.dir.display(),
        result.report.render()
    ))
}

#[cfg(feature = "parallel")]
fn run_all<F>(configs: &[PathBuf], f: F) -> Vec<Result<String>>
where
    F: Fn(&Path) -> Result<String> + Sync + Send,
{
    use rayon::prelude::*;
    configs.par_iter().map(|p| f(p)).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_all<F>(configs: &[PathBuf], f: F) -> Vec<Result<String>>
where
    F: Fn(&Path) -> Result<String>,
{
    configs.iter().map(|p| f(p)).collect()
}

fn run_scenarios(
    configs: &[PathBuf],
    corrector: Option<CorrectorMode>,
    models: Option<&Path>,
    out: Option<&Path>,
    plot: bool,
) -> Result<()> {
    if out.is_some() && configs.len() > 1 {
        return Err(Error::config("--out applies to a single --config only"));
    }
    let results = run_all(configs, |p| run_one(p, corrector, models, out, plot));
    let mut first_err = None;
    let mut stdout = io::stdout().lock();
    for (path, r) in configs.iter().zip(results) {
        match r {
            Ok(text) => {
                let _ = writeln!(stdout, "{text}");
            }
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn report(trace: &Path) -> Result<()> {
    let f = File::open(trace).map_err(|e| Error::io(trace, e))?;
    let rows = read_scenario_csv(io::BufReader::new(f), trace)?;
    print!("{}", scenario_metrics(&rows, "secure").render());
    Ok(())
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_config() {
        ExitCode::from(2)
    } else {
        ExitCode::from(3)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { config, out } => simulate(config.as_deref(), out.as_deref()),
        Command::GenGprData { config, out } => gen_gpr_data(config, out),
        Command::TrainGpr { data, out, config } => train_gpr(data, out, config.as_deref()),
        Command::RunScenario {
            config,
            corrector,
            models,
            out,
            plot,
        } => run_scenarios(config, *corrector, models.as_deref(), out.as_deref(), *plot),
        Command::Report { trace } => report(trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(cli.command, Command::RunScenario { .. }) {
                eprintln!("error: {e}");
            }
            exit_code(&e)
        }
    }
}
