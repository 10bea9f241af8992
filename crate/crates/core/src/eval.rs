//! Metrics and studies over filter runs: RMSE, NIS consistency, the
//! one-step order study, stability sweeps and the method/fps cost table.

use std::fmt;

use crate::discretize::{stability_report, StabilityReport};
use crate::error::{Error, Result};
use crate::filters::{
    fmt_f64, run_filter, sa_ukf_predict, FilterKind, FilterTrace, NewtonStats, NoiseSpec, Outcome, SigmaSet,
    StateEstimate,
};
use crate::models::Dynamics;
use crate::numkit::{chi2_quantile, Matrix, SpdMatrix, Vector};
use crate::scenario::{MeasurementNoise, Scenario};
use crate::sim::{propagate_substepped, sample_measurements, simulate_truth, MeasurementTrace, TruthTrace};

/// Probability mass of the two-sided NIS acceptance band.
pub const NIS_BAND_MASS: f64 = 0.95;

/// A completed run is "degraded" when some state RMSE exceeds this multiple
/// of the SA-UKF RMSE at the same rate.
pub const DEGRADED_FACTOR: f64 = 10.0;

/// Sub-steps per filter step used by the order-study reference.
pub const ORDER_SUBSTEPS: usize = 10_000;

/// Relative error level treated as rounding noise in the order study.
const ROUNDING_FLOOR: f64 = 1e-11;

/// `(χ²_{2.5%}, χ²_{97.5%})` for `dof` degrees of freedom.
pub fn nis_band(dof: u32) -> Result<(f64, f64)> {
    let tail = 0.5 * (1.0 - NIS_BAND_MASS);
    Ok((chi2_quantile(dof, tail)?, chi2_quantile(dof, 1.0 - tail)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NisSeries {
    pub values: Vec<f64>,
    pub dof: u32,
    pub band: (f64, f64),
    pub in_band_fraction: f64,
}

impl NisSeries {
    pub fn new(values: Vec<f64>, dof: u32) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::OutOfRange(format!("NIS value {v} is not a non-negative number")));
        }
        let band = nis_band(dof)?;
        let inside = values.iter().filter(|v| **v >= band.0 && **v <= band.1).count();
        let in_band_fraction = if values.is_empty() {
            0.0
        } else {
            inside as f64 / values.len() as f64
        };
        Ok(NisSeries {
            values,
            dof,
            band,
            in_band_fraction,
        })
    }

    /// Pools several runs into one series.
    pub fn pooled<'a>(runs: impl IntoIterator<Item = &'a [f64]>, dof: u32) -> Result<Self> {
        NisSeries::new(runs.into_iter().flatten().copied().collect(), dof)
    }
}

/// Root-mean-square error of `means` against `truth` for each selected state.
pub fn rmse(means: &[Vector], truth: &[Vector], states: &[usize]) -> Result<Vec<f64>> {
    if means.len() != truth.len() {
        return Err(Error::GridMismatch(format!(
            "{} estimates against {} truth samples",
            means.len(),
            truth.len()
        )));
    }
    if means.is_empty() {
        return Err(Error::GridMismatch("no samples to compare".into()));
    }
    let n = truth[0].len();
    if let Some(&s) = states.iter().find(|&&s| s >= n) {
        return Err(Error::Dimension(format!("state index {s} out of range for {n} states")));
    }
    if means.iter().chain(truth).any(|v| v.len() != n) {
        return Err(Error::Dimension("inconsistent state dimension across samples".into()));
    }
    Ok(states
        .iter()
        .map(|&s| {
            let sum: f64 = means.iter().zip(truth).map(|(a, b)| (a[s] - b[s]).powi(2)).sum();
            (sum / means.len() as f64).sqrt()
        })
        .collect())
}

/// Truth states at the time of each filter row.
pub fn aligned_truth(truth: &TruthTrace, meas: &MeasurementTrace, trace: &FilterTrace) -> Result<Vec<Vector>> {
    let index = meas.truth_index.as_ref().ok_or_else(|| {
        Error::GridMismatch(format!(
            "measurements at {} fps do not lie on the truth grid",
            meas.fps
        ))
    })?;
    trace
        .steps
        .iter()
        .map(|&k| {
            index
                .get(k)
                .and_then(|&i| truth.states.get(i))
                .cloned()
                .ok_or_else(|| Error::GridMismatch(format!("filter step {k} has no truth sample")))
        })
        .collect()
}

/// A scenario together with its ground truth, ready for repeated filter runs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub scenario: Scenario,
    pub truth: TruthTrace,
}

/// One filter run with its aligned truth.
#[derive(Debug, Clone)]
pub struct Run {
    pub trace: FilterTrace,
    pub truth: Vec<Vector>,
}

impl Run {
    pub fn rmse(&self, states: &[usize]) -> Result<Vec<f64>> {
        rmse(&self.trace.means, &self.truth, states)
    }

    pub fn rmse_all(&self) -> Result<Vec<f64>> {
        let n = self.trace.state_names.len();
        self.rmse(&(0..n).collect::<Vec<_>>())
    }
}

impl Experiment {
    pub fn new(scenario: Scenario) -> Result<Self> {
        let truth = simulate_truth(&scenario)?;
        Ok(Experiment { scenario, truth })
    }

    /// Measurements at `fps` with the noise seed replaced by `seed`.
    pub fn measurements(&self, fps: f64, seed: u64) -> Result<MeasurementTrace> {
        let mut noise = self.scenario.noise;
        noise.seed = seed;
        sample_measurements(&self.truth, fps, &noise)
    }

    pub fn noise_spec(&self, fps: f64) -> NoiseSpec {
        self.scenario.noise_spec(1.0 / fps)
    }

    pub fn run(&self, kind: FilterKind, meas: &MeasurementTrace) -> Result<Run> {
        let h = 1.0 / meas.fps;
        let init = self.scenario.initial_estimate()?;
        let trace = run_filter(
            kind,
            &self.scenario.model,
            &self.noise_spec(meas.fps),
            &init,
            &meas.inputs,
            &meas.outputs,
            h,
        )?;
        let truth = aligned_truth(&self.truth, meas, &trace)?;
        Ok(Run { trace, truth })
    }
}

/// Fitted log-log slope, or `Exact` when every error sits at rounding level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slope {
    Exact,
    Fitted(f64),
}

impl Slope {
    pub fn value(self) -> Option<f64> {
        match self {
            Slope::Exact => None,
            Slope::Fitted(s) => Some(s),
        }
    }
}

impl fmt::Display for Slope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slope::Exact => f.write_str("exact"),
            Slope::Fitted(s) => write!(f, "{s:.4}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderStudy {
    pub hs: Vec<f64>,
    /// Infinity norm of the predicted-mean error.
    pub mean_error: Vec<f64>,
    /// Frobenius norm of the predicted-covariance error.
    pub cov_error: Vec<f64>,
    pub mean_slope: Slope,
    pub cov_slope: Slope,
}

impl OrderStudy {
    pub fn csv_header() -> Vec<String> {
        ["h", "mean_error", "cov_error"].map(String::from).to_vec()
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        (0..self.hs.len())
            .map(|i| vec![fmt_f64(self.hs[i]), fmt_f64(self.mean_error[i]), fmt_f64(self.cov_error[i])])
            .collect()
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn fit(hs: &[f64], errors: &[f64], scale: f64) -> Slope {
    if errors.iter().all(|e| *e <= ROUNDING_FLOOR * scale) {
        Slope::Exact
    } else {
        Slope::Fitted(loglog_slope(hs, errors))
    }
}

/// One-step SA-UKF prediction error against sub-stepped propagation of the
/// same sigma points, for each `h`. Process noise is left out of both sides.
pub fn order_study<M: Dynamics + ?Sized>(
    model: &M,
    est: &StateEstimate,
    mu: &Vector,
    psi: &SpdMatrix,
    hs: &[f64],
    substeps: usize,
) -> Result<OrderStudy> {
    if hs.len() < 4 {
        return Err(Error::OutOfRange(format!("order study needs at least 4 step sizes, got {}", hs.len())));
    }
    let (lo, hi) = hs.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), h| (lo.min(*h), hi.max(*h)));
    if !(lo > 0.0) || hi / lo < 8.0 {
        return Err(Error::OutOfRange(format!(
            "order study step sizes must be positive and span at least 8x, got [{lo}, {hi}]"
        )));
    }
    let n = model.state_dim();
    let noise = NoiseSpec {
        q: SpdMatrix::zeros(n),
        r: SpdMatrix::identity(model.output_dim(), 1.0),
        psi: psi.clone(),
    };
    let sigma = SigmaSet::from_blocks(&est.mean, &est.cov, mu, psi)?;
    let mut mean_error = Vec::with_capacity(hs.len());
    let mut cov_error = Vec::with_capacity(hs.len());
    for &h in hs {
        let (pred, ..) = sa_ukf_predict(est, mu, &noise, model, h)?;
        let moved = (0..sigma.len())
            .map(|i| propagate_substepped(model, &sigma.states[i], &sigma.inputs[i], h, substeps))
            .collect::<Result<Vec<_>>>()?;
        let w = sigma.weight;
        let mean = moved.iter().fold(Vector::zeros(n), |acc, x| acc + x * w);
        let cov = moved.iter().fold(Matrix::zeros(n, n), |acc, x| {
            let e = x - &mean;
            acc + &e * e.transpose() * w
        });
        mean_error.push((&pred.mean - mean).amax());
        cov_error.push((pred.cov.as_matrix() - cov).norm());
    }
    let mean_scale = est.mean.amax().max(1.0);
    let cov_scale = est.cov.as_matrix().norm().max(f64::MIN_POSITIVE);
    Ok(OrderStudy {
        hs: hs.to_vec(),
        mean_slope: fit(hs, &mean_error, mean_scale),
        cov_slope: fit(hs, &cov_error, cov_scale),
        mean_error,
        cov_error,
    })
}

/// Step sizes of the default order study.
pub const ORDER_STEPS: [f64; 5] = [4e-3, 2e-3, 1e-3, 5e-4, 2.5e-4];

/// Operating point for the order study: the SA-UKF posterior on noise-free
/// measurements at the coarsest scenario rate, taken at the last sample
/// before the first scripted event. Returns the estimate with the input and
/// input covariance in force at that sample.
pub fn operating_estimate(exp: &Experiment) -> Result<(StateEstimate, Vector, SpdMatrix)> {
    let s = &exp.scenario;
    let fps = s.fps.iter().copied().fold(f64::INFINITY, f64::min);
    let clean = MeasurementNoise {
        input_std: 0.0,
        output_std: 0.0,
        seed: 0,
    };
    let meas = sample_measurements(&exp.truth, fps, &clean)?;
    let first_event = s.events.iter().map(|e| e.t).fold(f64::INFINITY, f64::min);
    let before = meas.times.iter().take_while(|t| **t < first_event - 1e-12).count();
    let k = before.saturating_sub(1).min(meas.len() - 1);
    let noise = exp.noise_spec(fps);
    let init = s.initial_estimate()?;
    let trace = run_filter(
        FilterKind::Sa,
        &s.model,
        &noise,
        &init,
        &meas.inputs[..=k],
        &meas.outputs[..=k],
        1.0 / fps,
    )?;
    if let Outcome::Diverged { reason, .. } | Outcome::Failed { reason, .. } = &trace.outcome {
        return Err(Error::Scenario(format!("operating estimate run stopped early: {reason}")));
    }
    Ok((trace.final_estimate, meas.inputs[k].clone(), noise.psi))
}

/// Order study of a scenario at its [`operating_estimate`].
pub fn scenario_order_study(exp: &Experiment, hs: &[f64], substeps: usize) -> Result<OrderStudy> {
    let (est, mu, psi) = operating_estimate(exp)?;
    order_study(&exp.scenario.model, &est, &mu, &psi, hs, substeps)
}

/// Stability report at one operating point for each sampling rate.
pub fn stability_sweep<M: Dynamics + ?Sized>(
    model: &M,
    x: &Vector,
    u: &Vector,
    fps: &[f64],
) -> Result<Vec<(f64, StabilityReport)>> {
    fps.iter()
        .map(|&f| stability_report(model, x, u, 1.0 / f).map(|r| (f, r)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepOutcome {
    Ok,
    Degraded,
    Divergent,
}

impl SweepOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepOutcome::Ok => "ok",
            SweepOutcome::Degraded => "degraded",
            SweepOutcome::Divergent => "divergent",
        }
    }
}

impl fmt::Display for SweepOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// RMSE and cost of one (method, fps) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub method: FilterKind,
    pub fps: f64,
    pub states: Vec<String>,
    /// Over the rows produced before any failure; NaN when there are none.
    pub rmse: Vec<f64>,
    pub avg_ms: f64,
    pub max_ms: f64,
    pub newton: Option<NewtonStats>,
    pub outcome: SweepOutcome,
    pub run_outcome: Outcome,
}

pub const SWEEP_COLUMNS: [&str; 9] = [
    "method",
    "fps",
    "state",
    "rmse",
    "avg_ms",
    "max_ms",
    "newton_avg",
    "newton_max",
    "outcome",
];

fn divergent_report(method: FilterKind, fps: f64, states: Vec<String>, reason: String) -> CostReport {
    let n = states.len();
    CostReport {
        method,
        fps,
        states,
        rmse: vec![f64::NAN; n],
        avg_ms: 0.0,
        max_ms: 0.0,
        newton: None,
        outcome: SweepOutcome::Divergent,
        run_outcome: Outcome::Failed { step: 0, reason },
    }
}

fn report_from_run(run: &Run, fps: f64) -> CostReport {
    let t = &run.trace;
    let rmse = if t.is_empty() {
        vec![f64::NAN; t.state_names.len()]
    } else {
        run.rmse_all().unwrap_or_else(|_| vec![f64::NAN; t.state_names.len()])
    };
    CostReport {
        method: t.kind,
        fps,
        states: t.state_names.clone(),
        rmse,
        avg_ms: t.avg_step_ms(),
        max_ms: t.max_step_ms(),
        newton: t.newton_summary(),
        outcome: if t.outcome.is_completed() {
            SweepOutcome::Ok
        } else {
            SweepOutcome::Divergent
        },
        run_outcome: t.outcome.clone(),
    }
}

/// Runs every (method, fps) cell on one shared noise realization. Cell
/// failures are recorded as divergent and the sweep carries on.
pub fn fps_sweep(exp: &Experiment, methods: &[FilterKind], fps: &[f64], seed: u64) -> Result<Vec<CostReport>> {
    let states = exp.scenario.model.state_names();
    let mut reports = Vec::with_capacity(methods.len() * fps.len());
    for &f in fps {
        let meas = exp.measurements(f, seed)?;
        let start = reports.len();
        for &kind in methods {
            let report = match exp.run(kind, &meas) {
                Ok(run) => report_from_run(&run, f),
                Err(e) => divergent_report(kind, f, states.clone(), e.to_string()),
            };
            reports.push(report);
        }
        classify_degraded(&mut reports[start..]);
    }
    Ok(reports)
}

fn classify_degraded(cells: &mut [CostReport]) {
    let Some(sa) = cells
        .iter()
        .find(|c| c.method == FilterKind::Sa && c.outcome == SweepOutcome::Ok)
        .map(|c| c.rmse.clone())
    else {
        return;
    };
    for c in cells.iter_mut().filter(|c| c.method != FilterKind::Sa && c.outcome == SweepOutcome::Ok) {
        if c.rmse.iter().zip(&sa).any(|(r, s)| *r > DEGRADED_FACTOR * s) {
            c.outcome = SweepOutcome::Degraded;
        }
    }
}

pub fn sweep_csv_rows(reports: &[CostReport]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in reports {
        let (navg, nmax) = match r.newton {
            Some(s) => (fmt_f64(s.avg), s.max.to_string()),
            None => (String::new(), String::new()),
        };
        for (state, e) in r.states.iter().zip(&r.rmse) {
            rows.push(vec![
                r.method.as_str().to_string(),
                format!("{}", r.fps),
                state.clone(),
                fmt_f64(*e),
                fmt_f64(r.avg_ms),
                fmt_f64(r.max_ms),
                navg.clone(),
                nmax.clone(),
                r.outcome.as_str().to_string(),
            ]);
        }
    }
    rows
}
