use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rmt_se::estimator::{EstimateRecord, Estimator, WlsConfig};
use rmt_se::grid::GridCase;
use rmt_se::harness::{emit_report, Experiment, ExperimentConfig, ReportFormat};
use rmt_se::noise::MeasurementWindow;
use rmt_se::powerflow::{solve_power_flow, MeasurementPlan};
use rmt_se::rmt::{clean_window, mp_density, mp_edges, CleanConfig};
use rmt_se::util::write_atomic;

#[derive(Parser)]
#[command(name = "rmt-se", version, about = "Random-matrix cleaning and WLS state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long, default_value = "both")]
        format: ReportFormat,
        /// Allow cases above 300 buses.
        #[arg(long)]
        extended: bool,
    },
    /// Export the measurement window of one trial (CSV plus JSON sidecar).
    Window {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "window.csv")]
        out: PathBuf,
        #[arg(long)]
        extended: bool,
    },
    /// Clean an exported window; with `--case`, also estimate the state.
    Clean {
        window: PathBuf,
        #[arg(long)]
        case: Option<PathBuf>,
        /// Seeds the random WLS start point.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Solve the AC power flow of a case file.
    Powerflow {
        case: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Eigenvalue diagnostics of an exported window.
    Spectrum {
        window: PathBuf,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            seed,
            trials,
            out_dir,
            format,
            extended,
        } => run(&config, seed, trials, &out_dir, format, extended),
        Command::Window {
            config,
            trial,
            seed,
            out,
            extended,
        } => window(&config, trial, seed, &out, extended),
        Command::Clean {
            window,
            case,
            seed,
            eta,
            out_dir,
        } => clean(&window, case.as_deref(), seed, eta, &out_dir),
        Command::Powerflow { case, out_dir } => powerflow(&case, &out_dir),
        Command::Spectrum { window, eta, out_dir } => spectrum(&window, eta, &out_dir),
    }
}

fn load_config(path: &Path, seed: Option<u64>, trials: Option<usize>, extended: bool) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    cfg.extended |= extended;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, body: &str) -> Result<()> {
    write_atomic(path, body.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn run(
    path: &Path,
    seed: Option<u64>,
    trials: Option<usize>,
    out_dir: &Path,
    format: ReportFormat,
    extended: bool,
) -> Result<()> {
    let cfg = load_config(path, seed, trials, extended)?;
    info!(
        "{} on {} ({} trials, seed {})",
        cfg.scenario.tag(),
        cfg.case_path.display(),
        cfg.trials,
        cfg.seed
    );
    let report = Experiment::prepare(&cfg)?.run()?;
    for g in &report.groups {
        match &g.aggregate {
            Some(a) => println!(
                "{:<24} wls {:.6}  rwls {:.6}  inc {:>6.1}%  ok {}/{}{}",
                g.label,
                a.wls_mae,
                a.rwls_mae,
                100.0 * a.inc_rat,
                a.n_ok,
                g.trials.len(),
                if g.degraded { "  degraded" } else { "" }
            ),
            None => println!("{:<24} no successful trials", g.label),
        }
    }
    for p in emit_report(&report, format, out_dir)? {
        info!("wrote {}", p.display());
    }
    Ok(())
}

fn window(path: &Path, trial: usize, seed: Option<u64>, out: &Path, extended: bool) -> Result<()> {
    let cfg = load_config(path, seed, None, extended)?;
    if trial >= cfg.trials {
        bail!("trial {trial} is out of range for {} trials", cfg.trials);
    }
    let w = Experiment::prepare(&cfg)?.synthetic_window(trial)?;
    w.write(out)?;
    println!("{} variables x {} samples -> {}", w.n_vars(), w.n_samples(), out.display());
    Ok(())
}

fn read_window(path: &Path) -> Result<MeasurementWindow> {
    MeasurementWindow::read(path).with_context(|| format!("reading window {}", path.display()))
}

fn clean_config(eta: Option<f64>) -> CleanConfig {
    CleanConfig {
        eta,
        ..CleanConfig::default()
    }
}

fn clean(path: &Path, case: Option<&Path>, seed: u64, eta: Option<f64>, out_dir: &Path) -> Result<()> {
    let w = read_window(path)?;
    let cfg = clean_config(eta);
    let cleaned = clean_window(&w, &cfg)?;
    let raw = w.raw_column(w.n_samples() - 1);
    let mut csv = String::from("variable,raw,cleaned\n");
    for (i, (r, c)) in raw.iter().zip(&cleaned.measurements).enumerate() {
        csv.push_str(&format!("{i},{r:e},{c:e}\n"));
    }
    write(&out_dir.join("cleaned.csv"), &csv)?;
    println!("cleaned {} variables (q = {:.4}, eta = {:.3e})", w.n_vars(), cleaned.q, cleaned.eta);

    if let Some(case_path) = case {
        let grid = GridCase::from_path(case_path).with_context(|| format!("reading {}", case_path.display()))?;
        let plan = MeasurementPlan::full_scada(&grid);
        if plan.content_hash() != w.meta().plan_hash {
            bail!("window was not built for the measurement plan of {}", case_path.display());
        }
        let est = Estimator::new(&grid, plan)?;
        let wls = WlsConfig::default();
        let start = est.initial_state(&wls.init, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let estimate = est.wls(&cleaned.measurements, w.sigma(), &wls, &start)?;
        println!(
            "state estimate: {} iterations, converged {}, objective {:.4e}",
            estimate.iterations, estimate.converged, estimate.objective
        );
        let record = EstimateRecord::new(&est, Some(seed), &wls, estimate);
        write(&out_dir.join("estimate.json"), &record.to_json())?;
    }
    Ok(())
}

fn powerflow(path: &Path, out_dir: &Path) -> Result<()> {
    let grid = GridCase::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let ybus = rmt_se::grid::build_admittance(&grid)?;
    let pf = solve_power_flow(&grid, &ybus)?;
    let mut csv = String::from("bus,vm,va\n");
    for (b, (vm, va)) in grid.buses.iter().zip(pf.state.vm().iter().zip(pf.state.va())) {
        csv.push_str(&format!("{},{vm:e},{va:e}\n", b.id));
    }
    write(&out_dir.join("powerflow.csv"), &csv)?;
    println!(
        "{} buses: converged in {} iterations, max mismatch {:.2e} p.u.",
        grid.n_bus(),
        pf.iterations,
        pf.max_mismatch
    );
    Ok(())
}

fn spectrum(path: &Path, eta: Option<f64>, out_dir: &Path) -> Result<()> {
    let w = read_window(path)?;
    let cleaned = clean_window(&w, &clean_config(eta))?;
    let q = cleaned.q;
    let (lo, hi) = mp_edges(q, 1.0);
    let mut csv = String::from("lambda,h,rho,xi,mp_density\n");
    for e in &cleaned.eigen {
        csv.push_str(&format!(
            "{:e},{:e},{:e},{:e},{:e}\n",
            e.lambda,
            e.h,
            e.rho,
            e.xi,
            mp_density(e.lambda, q, 1.0)
        ));
    }
    write(&out_dir.join("spectrum.csv"), &csv)?;
    let outliers = cleaned.eigen.iter().filter(|e| e.lambda > hi).count();
    println!(
        "N = {}, T = {}, q = {q:.4}; bulk edges [{lo:.4}, {hi:.4}]; {outliers} eigenvalues above the bulk",
        w.n_vars(),
        w.n_samples()
    );
    Ok(())
}
