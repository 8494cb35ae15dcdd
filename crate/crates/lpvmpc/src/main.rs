use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lpvmpc::compare::compare;
use lpvmpc::error::{Error, Result};
use lpvmpc::log::{write_csv, write_json, ClosedLoopLog};
use lpvmpc::metrics::{metrics, Metrics};
use lpvmpc::plot::write_script;
use lpvmpc::scenario::Scenario;
use lpvmpc::sim::{run_arm, Arm, Setup, WallClock};
use lpvmpc::terminal_io::{run_job, TerminalArtifact, TerminalJob};

#[derive(Parser)]
#[command(name = "lpvmpc", version, about = "Quasi-LPV model predictive control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Log format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Overrides the seed of the scenario or job.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write a matplotlib script next to each CSV log.
    #[arg(long, global = true)]
    plot: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario in closed loop.
    Simulate { scenario: PathBuf },
    /// Run several predictor/terminal arms of a scenario and compare them.
    Compare {
        scenario: PathBuf,
        /// Arms as `predictor[:terminal-mode]`; defaults to the scenario's list.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        arms: Vec<String>,
    },
    /// Synthesize terminal ingredients and write them with their certificate.
    SynthTerminal { job: PathBuf },
    /// Re-verify a terminal artifact on its grid, a denser grid and by sampling.
    VerifyTerminal {
        ingredients: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn load_scenario(path: &Path) -> Result<(Scenario, Setup)> {
    let scenario = Scenario::load(path)?;
    let setup = Setup::new(&scenario, path.parent())?;
    Ok((scenario, setup))
}

fn stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn write_json_file<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.into(), source })?;
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write_log(cli: &Cli, log: &ClosedLoopLog, name: &str) -> Result<PathBuf> {
    let path = match cli.format {
        Format::Csv => {
            let p = cli.out.join(format!("{name}.csv"));
            write_csv(log, &p)?;
            if cli.plot {
                write_script(log, &format!("{name}.csv"), &cli.out.join(format!("{name}_plot.py")))?;
            }
            p
        }
        Format::Json => {
            let p = cli.out.join(format!("{name}.json"));
            write_json(log, &p)?;
            if cli.plot {
                // the script reads the CSV columns
                write_csv(log, &cli.out.join(format!("{name}.csv")))?;
                write_script(log, &format!("{name}.csv"), &cli.out.join(format!("{name}_plot.py")))?;
            }
            p
        }
    };
    Ok(path)
}

fn print_metrics(m: &Metrics) {
    println!(
        "  samples {}  t_c mean {:.3} ms  std {:.3} ms  max {:.3} ms",
        m.samples,
        1e3 * m.mean_tc,
        1e3 * m.std_tc,
        1e3 * m.max_tc
    );
    println!("  optimal {:.2} %  softened {}  rmse {:?}", 100.0 * m.optimal_fraction, m.softened_samples, m.rmse);
    if let Some(e) = m.scheduling_error {
        println!("  scheduling error mean {e:.3e}  late max {:.3e}", m.late_scheduling_error.unwrap_or(f64::NAN));
    }
    for s in &m.segments {
        println!("  segment from {}: final error {:?} settled at {:?}", s.start, s.final_error, s.settling_sample);
    }
}

fn simulate(cli: &Cli, path: &Path) -> Result<()> {
    let (scenario, setup) = load_scenario(path)?;
    create_dir(&cli.out)?;
    let name = stem(&scenario.name);
    let arm = Arm::of(&scenario);
    let (log, err) = match run_arm(&setup, &arm, cli.seed, &WallClock::new()) {
        Ok(log) => (log, None),
        Err(e) => (e.log, Some(e.error)),
    };
    let file = write_log(cli, &log, &name)?;
    let m = metrics(&log);
    write_json_file(&m, &cli.out.join(format!("{name}_metrics.json")))?;
    println!("{}: {} samples written to {}", scenario.name, log.rows.len(), file.display());
    if !log.rows.is_empty() {
        print_metrics(&m);
    }
    err.map_or(Ok(()), Err)
}

fn run_compare(cli: &Cli, path: &Path, arms: &[String]) -> Result<()> {
    let (scenario, setup) = load_scenario(path)?;
    let names = if arms.is_empty() { scenario.arms.clone() } else { arms.to_vec() };
    if names.len() < 2 {
        return Err(Error::Config("compare needs at least two arms".into()));
    }
    let arms = names.iter().map(|a| Arm::parse(a)).collect::<Result<Vec<_>>>()?;
    create_dir(&cli.out)?;
    let report = compare(&setup, &arms, cli.seed);
    let base = stem(&scenario.name);
    for r in &report.arms {
        println!("{}:", r.arm);
        if let Some(log) = &r.log {
            write_log(cli, log, &format!("{base}_{}", stem(&r.arm)))?;
        }
        if let Some(m) = &r.metrics {
            print_metrics(m);
        }
        if let Some(e) = &r.error {
            println!("  failed: {e}");
        }
    }
    for d in &report.deltas {
        println!(
            "{} -> {}: d rmse {:?}  d mean t_c {:.3} ms  d scheduling error {:?}",
            d.a,
            d.b,
            d.rmse,
            1e3 * d.mean_tc,
            d.scheduling_error
        );
    }
    write_json_file(&report, &cli.out.join(format!("{base}_comparison.json")))?;
    if report.arms.iter().all(|r| r.error.is_some()) {
        return Err(Error::Aborted { k: 0, reason: "every arm failed".into() });
    }
    Ok(())
}

fn synth_terminal(cli: &Cli, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Read { path: path.into(), source })?;
    let mut job: TerminalJob =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
    if let Some(s) = cli.seed {
        job.seed = s;
    }
    let artifact = run_job(&job)?;
    create_dir(&cli.out)?;
    let out = cli.out.join("terminal.json");
    artifact.save(&out)?;
    let c = &artifact.certificate;
    println!("ingredients written to {}", out.display());
    println!("  grid: {} vertices, margin {:.3e}, valid {}", c.n_vertices, c.margin, c.valid);
    if let Some(d) = &artifact.dense_certificate {
        println!("  dense grid: {} vertices, margin {:.3e}, valid {}", d.n_vertices, d.margin, d.valid);
    }
    if let Some(mc) = &artifact.monte_carlo {
        println!(
            "  sampling: invariance {}/{}, decrease {}/{}, admissibility {}/{} violations",
            mc.invariance.violations,
            mc.invariance.samples,
            mc.lyapunov.violations,
            mc.lyapunov.samples,
            mc.admissibility.violations,
            mc.admissibility.samples
        );
    }
    let dense_ok = artifact.dense_certificate.as_ref().is_none_or(|d| d.valid);
    if !(c.valid && dense_ok && artifact.monte_carlo.as_ref().is_none_or(|m| m.passed())) {
        return Err(Error::Aborted { k: 0, reason: "ingredients failed verification".into() });
    }
    Ok(())
}

fn verify_terminal(cli: &Cli, path: &Path, samples: usize) -> Result<()> {
    let artifact = TerminalArtifact::load(path)?;
    let report = artifact.verify(samples, cli.seed.unwrap_or(0))?;
    println!(
        "grid: {} vertices, margin {:.3e}, valid {}",
        report.grid.n_vertices, report.grid.margin, report.grid.valid
    );
    println!(
        "dense grid: {} vertices, margin {:.3e}, valid {}",
        report.dense.n_vertices, report.dense.margin, report.dense.valid
    );
    if let Some(mc) = &report.monte_carlo {
        println!(
            "sampling: invariance {} decrease {} admissibility {} violations of {}",
            mc.invariance.violations, mc.lyapunov.violations, mc.admissibility.violations, mc.invariance.samples
        );
    }
    if !report.passed() {
        return Err(Error::Aborted { k: 0, reason: "verification failed".into() });
    }
    Ok(())
}

fn selftest(cli: &Cli) -> Result<()> {
    let checks = lpvmpc::selftest::run(cli.seed.unwrap_or(1));
    for c in &checks {
        println!("{} {:<11} {:>7.3} s  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.seconds, c.detail);
    }
    if checks.iter().any(|c| !c.passed) {
        return Err(Error::Aborted { k: 0, reason: "self-test failed".into() });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { scenario } => simulate(&cli, scenario),
        Command::Compare { scenario, arms } => run_compare(&cli, scenario, arms),
        Command::SynthTerminal { job } => synth_terminal(&cli, job),
        Command::VerifyTerminal { ingredients, samples } => verify_terminal(&cli, ingredients, *samples),
        Command::Selftest => selftest(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
