use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stiffkit::eval::{
    fps_sweep, scenario_order_study, stability_sweep, sweep_csv_rows, Experiment, OrderStudy, ORDER_STEPS,
    ORDER_SUBSTEPS, SWEEP_COLUMNS,
};
use stiffkit::filters::{FilterKind, Outcome};
use stiffkit::io::write_csv;
use stiffkit::scenario::Scenario;
use stiffkit::sim::{simulate_truth, sample_measurements, write_measurements, write_truth};
use stiffkit::Error;

const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "stiffkit", version, about = "Unscented Kalman filtering for stiff power-system models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the truth trajectory and one measurement file per scenario rate.
    Simulate(Common),
    /// Run one filter at one sampling rate.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        filter: Method,
        #[arg(long)]
        fps: f64,
    },
    /// Jacobian eigenvalues at the operating point and RK4 region membership per rate.
    Stability {
        #[command(flatten)]
        common: Common,
        /// Rates to check; defaults to the scenario rates.
        #[arg(long, value_delimiter = ',')]
        fps: Vec<f64>,
    },
    /// Accuracy and cost of each method at each rate.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "sa,rk4,be")]
        methods: Vec<Method>,
        /// Rates to sweep; defaults to the scenario rates.
        #[arg(long, value_delimiter = ',')]
        fps: Vec<f64>,
    },
    /// Local error of the SA prediction against a sub-stepped reference.
    Order(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Sa,
    Rk4,
    Be,
}

impl From<Method> for FilterKind {
    fn from(m: Method) -> Self {
        match m {
            Method::Sa => FilterKind::Sa,
            Method::Rk4 => FilterKind::Rk4,
            Method::Be => FilterKind::Be,
        }
    }
}

enum Failure {
    Lib(Error),
    Input(String),
    Diverged(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => EXIT_INPUT,
            Failure::Diverged(_) => EXIT_DIVERGED,
            Failure::Numerical(_) => EXIT_NUMERICAL,
            Failure::Lib(e) if e.is_divergence() => EXIT_DIVERGED,
            Failure::Lib(e) => match e {
                Error::Scenario(_)
                | Error::UnknownParam(_)
                | Error::Io { .. }
                | Error::Parse { .. }
                | Error::OutOfRange(_)
                | Error::GridMismatch(_)
                | Error::TruthUnstable { .. } => EXIT_INPUT,
                _ => EXIT_NUMERICAL,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Lib(e) => e.to_string(),
            Failure::Input(m) | Failure::Diverged(m) | Failure::Numerical(m) => m.clone(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn fps_label(fps: f64) -> String {
    format!("{fps}")
}

fn prepare(common: &Common) -> std::result::Result<Scenario, Failure> {
    let scenario = Scenario::load(&common.scenario)?;
    fs::create_dir_all(&common.out)
        .map_err(|e| Failure::Input(format!("{}: {e}", common.out.display())))?;
    Ok(scenario)
}

fn simulate(common: &Common) -> CmdResult {
    let scenario = prepare(common)?;
    let truth = simulate_truth(&scenario)?;
    let path = common.out.join("truth.csv");
    write_truth(&path, &truth)?;
    println!("{}: {} rows", path.display(), truth.len());
    for &fps in &scenario.fps {
        let meas = sample_measurements(&truth, fps, &scenario.noise)?;
        let path = common.out.join(format!("meas_{}fps.csv", fps_label(fps)));
        write_measurements(&path, &meas)?;
        println!("{}: {} rows", path.display(), meas.len());
    }
    Ok(())
}

fn estimate(common: &Common, kind: FilterKind, fps: f64) -> CmdResult {
    let scenario = prepare(common)?;
    if !scenario.fps.contains(&fps) {
        return Err(Failure::Input(format!(
            "fps {fps} is not listed in the scenario (available: {})",
            scenario.fps.iter().map(|f| fps_label(*f)).collect::<Vec<_>>().join(", ")
        )));
    }
    let exp = Experiment::new(scenario)?;
    let meas = exp.measurements(fps, exp.scenario.noise.seed)?;
    let run = exp.run(kind, &meas)?;
    let trace = &run.trace;
    let path = common.out.join(format!("estimate_{kind}_{}fps.csv", fps_label(fps)));
    write_csv(&path, &trace.csv_header(), &trace.csv_rows())?;
    println!("{}: {} rows", path.display(), trace.len());
    match &trace.outcome {
        Outcome::Completed => {
            let rmse = run.rmse_all()?;
            for (name, e) in trace.state_names.iter().zip(rmse) {
                println!("  rmse {name:<12} {e:.6e}");
            }
            Ok(())
        }
        Outcome::Diverged { step, reason } => Err(Failure::Diverged(format!(
            "{kind} diverged at step {step} (t = {:.6} s): {reason}",
            *step as f64 / fps
        ))),
        Outcome::Failed { step, reason } => Err(Failure::Numerical(format!(
            "{kind} failed at step {step} (t = {:.6} s): {reason}",
            *step as f64 / fps
        ))),
    }
}

fn stability(common: &Common, fps: &[f64]) -> CmdResult {
    let scenario = prepare(common)?;
    let fps = if fps.is_empty() { scenario.fps.clone() } else { fps.to_vec() };
    if let Some(bad) = fps.iter().find(|f| f.is_nan() || **f <= 0.0 || f.is_infinite()) {
        return Err(Failure::Input(format!("fps must be positive and finite, got {bad}")));
    }
    let x = scenario.initial_state()?;
    let u = scenario.initial_input();
    let reports = stability_sweep(&scenario.model, &x, &u, &fps)?;
    let header = [
        "fps", "index", "re_lambda", "im_lambda", "re_hlambda", "im_hlambda", "abs_R", "inside",
    ];
    let mut rows = Vec::new();
    for (f, rep) in &reports {
        let outside: Vec<String> = (0..rep.eigenvalues.len())
            .filter(|i| !rep.inside[*i])
            .map(|i| format!("{:.4e}{:+.4e}i", rep.eigenvalues[i].re, rep.eigenvalues[i].im))
            .collect();
        if outside.is_empty() {
            println!("{:>10} fps: all inside", fps_label(*f));
        } else {
            println!("{:>10} fps: outside {}", fps_label(*f), outside.join(", "));
        }
        for i in 0..rep.eigenvalues.len() {
            let (l, z) = (rep.eigenvalues[i], rep.scaled[i]);
            rows.push(vec![
                fps_label(*f),
                i.to_string(),
                format!("{:.16e}", l.re),
                format!("{:.16e}", l.im),
                format!("{:.16e}", z.re),
                format!("{:.16e}", z.im),
                format!("{:.16e}", rep.abs_r[i]),
                rep.inside[i].to_string(),
            ]);
        }
    }
    let path = common.out.join("stability.csv");
    write_csv(&path, &header, &rows)?;
    println!("{}: {} rows", path.display(), rows.len());
    Ok(())
}

fn sweep(common: &Common, methods: &[Method], fps: &[f64]) -> CmdResult {
    let scenario = prepare(common)?;
    let fps = if fps.is_empty() { scenario.fps.clone() } else { fps.to_vec() };
    let methods: Vec<FilterKind> = methods.iter().map(|m| (*m).into()).collect();
    let exp = Experiment::new(scenario)?;
    let reports = fps_sweep(&exp, &methods, &fps, exp.scenario.noise.seed)?;
    for r in &reports {
        let worst = r.rmse.iter().copied().fold(f64::NAN, f64::max);
        println!(
            "{:<4} {:>8} fps  {:<9} max rmse {:.3e}  avg {:.3} ms",
            r.method.as_str(),
            fps_label(r.fps),
            r.outcome.as_str(),
            worst,
            r.avg_ms
        );
    }
    let path = common.out.join("sweep.csv");
    write_csv(&path, &SWEEP_COLUMNS, &sweep_csv_rows(&reports))?;
    println!("{}", path.display());
    Ok(())
}

fn order(common: &Common) -> CmdResult {
    let scenario = prepare(common)?;
    let exp = Experiment::new(scenario)?;
    let study = scenario_order_study(&exp, &ORDER_STEPS, ORDER_SUBSTEPS)?;
    println!("mean slope: {}", study.mean_slope);
    println!("covariance slope: {}", study.cov_slope);
    let path = common.out.join("order.csv");
    write_csv(&path, &OrderStudy::csv_header(), &study.csv_rows())?;
    println!("{}", path.display());
    Ok(())
}

fn dispatch(cmd: &Command) -> CmdResult {
    match cmd {
        Command::Simulate(c) => simulate(c),
        Command::Estimate { common, filter, fps } => estimate(common, (*filter).into(), *fps),
        Command::Stability { common, fps } => stability(common, fps),
        Command::Sweep { common, methods, fps } => sweep(common, methods, fps),
        Command::Order(c) => order(c),
    }
}

fn scenario_path(cmd: &Command) -> &Path {
    match cmd {
        Command::Simulate(c) | Command::Order(c) => &c.scenario,
        Command::Estimate { common, .. } | Command::Stability { common, .. } | Command::Sweep { common, .. } => {
            &common.scenario
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.message();
            let path = scenario_path(&cli.command).display().to_string();
            if msg.contains(&path) {
                eprintln!("error: {msg}");
            } else {
                eprintln!("error: {path}: {msg}");
            }
            ExitCode::from(f.code())
        }
    }
}
