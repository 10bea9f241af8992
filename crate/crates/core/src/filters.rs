//! Sigma-point filters sharing one unscented engine and one correction step.
//!
//! The prediction step is where the three estimators differ: the
//! stiffness-aware filter fits an affine surrogate to `f` over the sigma
//! points and propagates it exactly, the other two push every sigma point
//! through a one-step integrator (explicit RK4 or backward Euler).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::discretize::{backward_euler_step, exp_discretize, rk4_step, DiscreteMap, NEWTON_MAX_ITER, NEWTON_TOL};
use crate::error::{Error, Result};
use crate::models::Dynamics;
use crate::numkit::{spd_solve, spd_sqrt, Matrix, SpdMatrix, Vector};

/// A run is declared divergent once any posterior variance exceeds this
/// multiple of its initial value.
pub const COV_GUARD_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub mean: Vector,
    pub cov: SpdMatrix,
    pub time_index: usize,
}

impl StateEstimate {
    pub fn new(mean: Vector, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::Dimension(format!(
                "estimate mean has {} entries, covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("estimate mean"));
        }
        Ok(StateEstimate {
            mean,
            cov,
            time_index: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub q: SpdMatrix,
    pub r: SpdMatrix,
    pub psi: SpdMatrix,
}

impl NoiseSpec {
    pub fn check<M: Dynamics + ?Sized>(&self, model: &M) -> Result<()> {
        let dims = [
            ("Q", self.q.dim(), model.state_dim()),
            ("R", self.r.dim(), model.output_dim()),
            ("Psi", self.psi.dim(), model.input_dim()),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::Dimension(format!("{name} is {got}x{got}, model needs {want}x{want}")));
            }
        }
        Ok(())
    }
}

/// Symmetric sigma set with `2N` points and equal weights, no central point.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSet {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub weight: f64,
}

impl SigmaSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Joint point `i` as one vector `[x; u]`.
    pub fn joint(&self, i: usize) -> Vector {
        let (x, u) = (&self.states[i], &self.inputs[i]);
        Vector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
    }

    /// Sigma points of `(x̄, ū)` with block covariance `diag(P, Ψ)`.
    ///
    /// Same points as [`unscented_transform`] on the joint distribution, but
    /// each block is factored on its own so that an exactly zero `Ψ` needs
    /// no jitter.
    pub fn from_blocks(x: &Vector, p: &SpdMatrix, u: &Vector, psi: &SpdMatrix) -> Result<Self> {
        let (n, m) = (x.len(), u.len());
        if p.dim() != n || psi.dim() != m {
            return Err(Error::Dimension(format!(
                "sigma points: {n} states with {}x{} covariance, {m} inputs with {}x{} covariance",
                p.dim(),
                p.dim(),
                psi.dim(),
                psi.dim()
            )));
        }
        let dim = n + m;
        if dim == 0 {
            return Err(Error::Dimension("sigma points of an empty distribution".into()));
        }
        let scale = dim as f64;
        let lp = spd_sqrt(&SpdMatrix::symmetrized(p.as_matrix() * scale))?;
        let lu = spd_sqrt(&SpdMatrix::symmetrized(psi.as_matrix() * scale))?;
        let mut states = Vec::with_capacity(2 * dim);
        let mut inputs = Vec::with_capacity(2 * dim);
        for sign in [1.0, -1.0] {
            for j in 0..n {
                states.push(x + lp.column(j) * sign);
                inputs.push(u.clone());
            }
            for j in 0..m {
                states.push(x.clone());
                inputs.push(u + lu.column(j) * sign);
            }
        }
        Ok(SigmaSet {
            states,
            inputs,
            weight: 1.0 / (2 * dim) as f64,
        })
    }
}

/// Points `mean ± columns of sqrt(N·cov)`; the first `n_state` coordinates
/// are the state part, the rest the input part.
pub fn unscented_transform(mean: &Vector, cov: &SpdMatrix, n_state: usize) -> Result<SigmaSet> {
    let dim = mean.len();
    if cov.dim() != dim || n_state > dim {
        return Err(Error::Dimension(format!(
            "sigma points: mean has {dim} entries, covariance is {}x{}, state part {n_state}",
            cov.dim(),
            cov.dim()
        )));
    }
    if dim == 0 {
        return Err(Error::Dimension("sigma points of an empty distribution".into()));
    }
    let scaled = SpdMatrix::symmetrized(cov.as_matrix() * dim as f64);
    let l = spd_sqrt(&scaled)?;
    let mut states = Vec::with_capacity(2 * dim);
    let mut inputs = Vec::with_capacity(2 * dim);
    for sign in [1.0, -1.0] {
        for j in 0..dim {
            let point = mean + l.column(j) * sign;
            states.push(point.rows(0, n_state).into_owned());
            inputs.push(point.rows(n_state, dim - n_state).into_owned());
        }
    }
    Ok(SigmaSet {
        states,
        inputs,
        weight: 1.0 / (2 * dim) as f64,
    })
}

/// Affine fit `f(x, u) ≈ F x + G u + d` with residual covariance `Ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    pub f: Matrix,
    pub g: Matrix,
    pub d: Vector,
    pub omega: SpdMatrix,
}

fn weighted_mean(points: &[Vector], w: f64) -> Vector {
    let mut acc = Vector::zeros(points[0].len());
    for p in points {
        acc += p;
    }
    acc * w
}

/// Columns `p_i − p̄`.
fn deviations(points: &[Vector], mean: &Vector) -> Matrix {
    Matrix::from_fn(mean.len(), points.len(), |r, c| points[c][r] - mean[r])
}

/// `Σ w (a_i − ā)(b_i − b̄)ᵀ`.
fn cross_cov(a: &[Vector], a_mean: &Vector, b: &[Vector], b_mean: &Vector, w: f64) -> Matrix {
    deviations(a, a_mean) * deviations(b, b_mean).transpose() * w
}

/// Regression coefficient `Σᵀ C⁻¹`, zero when `C` carries no uncertainty.
fn regress(c: &SpdMatrix, sigma: &Matrix, rows: usize) -> Result<Matrix> {
    if c.dim() == 0 || c.is_zero() {
        return Ok(Matrix::zeros(rows, c.dim()));
    }
    Ok(spd_solve(c, sigma)?.transpose())
}

/// Statistical linearization of `f` over a sigma set generated from
/// `(x̄, ū)` with `diag(P, Ψ)`.
pub fn statistical_linearize<M: Dynamics + ?Sized>(
    sigma: &SigmaSet,
    model: &M,
    p: &SpdMatrix,
    psi: &SpdMatrix,
    x_mean: &Vector,
    u_mean: &Vector,
) -> Result<LinearSurrogate> {
    let n = x_mean.len();
    let ys: Vec<Vector> = sigma
        .states
        .iter()
        .zip(&sigma.inputs)
        .enumerate()
        .map(|(i, (x, u))| {
            let y = model.f(x, u);
            if y.iter().all(|v| v.is_finite()) {
                Ok(y)
            } else {
                Err(Error::SigmaPoint {
                    index: i,
                    source: Box::new(Error::NonFinite("process map")),
                })
            }
        })
        .collect::<Result<_>>()?;
    let w = sigma.weight;
    let y_mean = weighted_mean(&ys, w);
    let dx = deviations(&sigma.states, x_mean);
    let du = deviations(&sigma.inputs, u_mean);
    let dy = deviations(&ys, &y_mean);
    let f = regress(p, &(&dx * dy.transpose() * w), n)?;
    let g = regress(psi, &(&du * dy.transpose() * w), n)?;
    let d = &y_mean - &f * x_mean - &g * u_mean;
    let resid = dy - &f * dx - &g * du;
    let omega = &resid * resid.transpose() * w;
    Ok(LinearSurrogate {
        f,
        g,
        d,
        omega: SpdMatrix::symmetrized(omega),
    })
}

fn sandwich(a: &Matrix, p: &SpdMatrix) -> Matrix {
    a * p.as_matrix() * a.transpose()
}

/// Stiffness-aware time update through the exact map of the fitted surrogate.
pub fn sa_ukf_predict<M: Dynamics + ?Sized>(
    est: &StateEstimate,
    mu: &Vector,
    noise: &NoiseSpec,
    model: &M,
    h: f64,
) -> Result<(StateEstimate, LinearSurrogate, DiscreteMap)> {
    let sigma = SigmaSet::from_blocks(&est.mean, &est.cov, mu, &noise.psi)?;
    let sur = statistical_linearize(&sigma, model, &est.cov, &noise.psi, &est.mean, mu)?;
    let map = exp_discretize(&sur.f, &sur.g, h)?;
    let mean = map.apply(&est.mean, mu, &sur.d);
    let cov = sandwich(&map.phi, &est.cov)
        + sandwich(&map.gamma, &noise.psi)
        + sandwich(&map.lambda, &sur.omega)
        + noise.q.as_matrix();
    let pred = finish_prediction(est, mean, cov)?;
    Ok((pred, sur, map))
}

fn finish_prediction(est: &StateEstimate, mean: Vector, cov: Matrix) -> Result<StateEstimate> {
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("predicted estimate"));
    }
    Ok(StateEstimate {
        mean,
        cov: SpdMatrix::symmetrized(cov),
        time_index: est.time_index + 1,
    })
}

fn recombine(est: &StateEstimate, points: &[Vector], w: f64, q: &SpdMatrix) -> Result<StateEstimate> {
    let mean = weighted_mean(points, w);
    let cov = cross_cov(points, &mean, points, &mean, w) + q.as_matrix();
    finish_prediction(est, mean, cov)
}

/// Time update with every sigma point advanced by one RK4 step.
pub fn rk4_ukf_predict<M: Dynamics + ?Sized>(
    est: &StateEstimate,
    mu: &Vector,
    noise: &NoiseSpec,
    model: &M,
    h: f64,
) -> Result<StateEstimate> {
    let sigma = SigmaSet::from_blocks(&est.mean, &est.cov, mu, &noise.psi)?;
    let next: Vec<Vector> = sigma
        .states
        .iter()
        .zip(&sigma.inputs)
        .enumerate()
        .map(|(i, (x, u))| {
            rk4_step(model, x, u, h).map_err(|e| Error::SigmaPoint {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    recombine(est, &next, sigma.weight, &noise.q)
}

/// Newton iteration counts over the sigma points of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonStats {
    pub avg: f64,
    pub max: usize,
}

/// Time update with every sigma point advanced by one backward-Euler step.
pub fn be_ukf_predict<M: Dynamics + ?Sized>(
    est: &StateEstimate,
    mu: &Vector,
    noise: &NoiseSpec,
    model: &M,
    h: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(StateEstimate, NewtonStats)> {
    let sigma = SigmaSet::from_blocks(&est.mean, &est.cov, mu, &noise.psi)?;
    let mut next = Vec::with_capacity(sigma.len());
    let (mut total, mut max) = (0usize, 0usize);
    for (i, (x, u)) in sigma.states.iter().zip(&sigma.inputs).enumerate() {
        let (xn, iters) = backward_euler_step(model, x, u, h, tol, max_iter).map_err(|e| Error::SigmaPoint {
            index: i,
            source: Box::new(e),
        })?;
        total += iters;
        max = max.max(iters);
        next.push(xn);
    }
    let stats = NewtonStats {
        avg: total as f64 / sigma.len() as f64,
        max,
    };
    Ok((recombine(est, &next, sigma.weight, &noise.q)?, stats))
}

/// Result of a measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub estimate: StateEstimate,
    pub innovation: Vector,
    pub s: SpdMatrix,
}

/// Unscented measurement update with sigma points regenerated from the
/// predicted estimate and the current measured input.
pub fn correct<M: Dynamics + ?Sized>(
    pred: &StateEstimate,
    mu: &Vector,
    z: &Vector,
    noise: &NoiseSpec,
    model: &M,
) -> Result<Correction> {
    let sigma = SigmaSet::from_blocks(&pred.mean, &pred.cov, mu, &noise.psi)?;
    let zs: Vec<Vector> = sigma.states.iter().zip(&sigma.inputs).map(|(x, u)| model.h(x, u)).collect();
    if zs.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("measurement map"));
    }
    let w = sigma.weight;
    let z_mean = weighted_mean(&zs, w);
    let s = SpdMatrix::symmetrized(cross_cov(&zs, &z_mean, &zs, &z_mean, w) + noise.r.as_matrix());
    let pxz = cross_cov(&sigma.states, &pred.mean, &zs, &z_mean, w);
    let gain = spd_solve(&s, &pxz.transpose())
        .map_err(|e| match e {
            Error::Singular(_) => Error::Singular("innovation covariance"),
            other => other,
        })?
        .transpose();
    let innovation = z - &z_mean;
    let mean = &pred.mean + &gain * &innovation;
    let cov = pred.cov.as_matrix() - &gain * s.as_matrix() * gain.transpose();
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("posterior estimate"));
    }
    Ok(Correction {
        estimate: StateEstimate {
            mean,
            cov: SpdMatrix::symmetrized(cov),
            time_index: pred.time_index,
        },
        innovation,
        s,
    })
}

/// `νᵀ S⁻¹ ν`.
pub fn nis(innovation: &Vector, s: &SpdMatrix) -> Result<f64> {
    let b = Matrix::from_column_slice(innovation.len(), 1, innovation.as_slice());
    let x = spd_solve(s, &b)?;
    Ok(innovation.dot(&x.column(0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterKind {
    Sa,
    Rk4,
    Be,
}

impl FilterKind {
    pub const ALL: [FilterKind; 3] = [FilterKind::Sa, FilterKind::Rk4, FilterKind::Be];

    pub fn as_str(self) -> &'static str {
        match self {
            FilterKind::Sa => "sa",
            FilterKind::Rk4 => "rk4",
            FilterKind::Be => "be",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sa" => Ok(FilterKind::Sa),
            "rk4" => Ok(FilterKind::Rk4),
            "be" => Ok(FilterKind::Be),
            other => Err(Error::OutOfRange(format!("unknown filter `{other}` (expected sa, rk4 or be)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed,
    /// Covariance guard trip or blow-up of the integrator at `step`.
    Diverged { step: usize, reason: String },
    /// Any other numerical failure at `step`.
    Failed { step: usize, reason: String },
}

impl Outcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, Outcome::Completed)
    }

    pub fn is_diverged(&self) -> bool {
        matches!(self, Outcome::Diverged { .. })
    }
}

/// Per-step posterior summary of one filter run. Row `k` holds the
/// estimate after the update with measurement `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    pub kind: FilterKind,
    pub state_names: Vec<String>,
    pub h: f64,
    pub steps: Vec<usize>,
    pub means: Vec<Vector>,
    pub variances: Vec<Vector>,
    pub nis: Vec<f64>,
    pub step_us: Vec<f64>,
    pub newton: Vec<NewtonStats>,
    pub outcome: Outcome,
    pub final_estimate: StateEstimate,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn time(&self, row: usize) -> f64 {
        self.steps[row] as f64 * self.h
    }

    pub fn avg_step_ms(&self) -> f64 {
        if self.step_us.is_empty() {
            return 0.0;
        }
        self.step_us.iter().sum::<f64>() / self.step_us.len() as f64 / 1e3
    }

    pub fn max_step_ms(&self) -> f64 {
        self.step_us.iter().copied().fold(0.0, f64::max) / 1e3
    }

    /// Mean and maximum Newton iterations per sigma point over the run.
    pub fn newton_summary(&self) -> Option<NewtonStats> {
        if self.newton.is_empty() {
            return None;
        }
        let avg = self.newton.iter().map(|s| s.avg).sum::<f64>() / self.newton.len() as f64;
        let max = self.newton.iter().map(|s| s.max).max().unwrap_or(0);
        Some(NewtonStats { avg, max })
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut cols = vec!["t".to_string()];
        cols.extend(self.state_names.iter().map(|s| format!("mean_{s}")));
        cols.extend(self.state_names.iter().map(|s| format!("var_{s}")));
        cols.push("nis".into());
        cols.push("step_us".into());
        if self.kind == FilterKind::Be {
            cols.push("newton_avg".into());
            cols.push("newton_max".into());
        }
        cols
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        (0..self.len())
            .map(|k| {
                let mut row = vec![fmt_f64(self.time(k))];
                row.extend(self.means[k].iter().map(|v| fmt_f64(*v)));
                row.extend(self.variances[k].iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(self.nis[k]));
                row.push(fmt_f64(self.step_us[k]));
                if self.kind == FilterKind::Be {
                    row.push(fmt_f64(self.newton[k].avg));
                    row.push(self.newton[k].max.to_string());
                }
                row
            })
            .collect()
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn guard(est: &StateEstimate, limit: &Vector) -> Option<String> {
    let cov = est.cov.as_matrix();
    if est.mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Some("non-finite estimate".into());
    }
    for i in 0..limit.len() {
        if cov[(i, i)] > limit[i] {
            return Some(format!(
                "variance of state {i} is {:.3e}, above {COV_GUARD_FACTOR:e} x its initial value",
                cov[(i, i)]
            ));
        }
    }
    None
}

/// Runs predict and correct over measurement indices `1..len`; index 0 is
/// the time of `init`.
pub fn run_filter<M: Dynamics + ?Sized>(
    kind: FilterKind,
    model: &M,
    noise: &NoiseSpec,
    init: &StateEstimate,
    inputs: &[Vector],
    outputs: &[Vector],
    h: f64,
) -> Result<FilterTrace> {
    if inputs.len() != outputs.len() {
        return Err(Error::Dimension(format!(
            "{} input samples but {} output samples",
            inputs.len(),
            outputs.len()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::OutOfRange(format!("step size must be > 0, got {h}")));
    }
    noise.check(model)?;
    if init.mean.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "initial estimate has {} states, model has {}",
            init.mean.len(),
            model.state_dim()
        )));
    }
    // Guard against zero initial variance by falling back to the largest one.
    let init_var = init.cov.diagonal();
    let floor = init_var.amax().max(f64::MIN_POSITIVE);
    let limit = init_var.map(|v| COV_GUARD_FACTOR * if v > 0.0 { v } else { floor });

    let mut trace = FilterTrace {
        kind,
        state_names: model.state_names(),
        h,
        steps: Vec::new(),
        means: Vec::new(),
        variances: Vec::new(),
        nis: Vec::new(),
        step_us: Vec::new(),
        newton: Vec::new(),
        outcome: Outcome::Completed,
        final_estimate: init.clone(),
    };
    let mut est = init.clone();
    for k in 1..inputs.len() {
        let started = Instant::now();
        let step = (|| -> Result<(Correction, f64, Option<NewtonStats>)> {
            let (pred, stats) = match kind {
                FilterKind::Sa => (sa_ukf_predict(&est, &inputs[k - 1], noise, model, h)?.0, None),
                FilterKind::Rk4 => (rk4_ukf_predict(&est, &inputs[k - 1], noise, model, h)?, None),
                FilterKind::Be => {
                    let (p, s) = be_ukf_predict(&est, &inputs[k - 1], noise, model, h, NEWTON_TOL, NEWTON_MAX_ITER)?;
                    (p, Some(s))
                }
            };
            let c = correct(&pred, &inputs[k], &outputs[k], noise, model)?;
            let q = nis(&c.innovation, &c.s)?;
            Ok((c, q, stats))
        })();
        let elapsed = started.elapsed().as_secs_f64() * 1e6;
        let (c, q, stats) = match step {
            Ok(v) => v,
            Err(e) => {
                trace.outcome = if e.is_divergence() {
                    Outcome::Diverged {
                        step: k,
                        reason: e.to_string(),
                    }
                } else {
                    Outcome::Failed {
                        step: k,
                        reason: e.to_string(),
                    }
                };
                break;
            }
        };
        est = c.estimate;
        trace.steps.push(k);
        trace.means.push(est.mean.clone());
        trace.variances.push(est.cov.diagonal());
        trace.nis.push(q);
        trace.step_us.push(elapsed);
        if let Some(s) = stats {
            trace.newton.push(s);
        }
        if let Some(reason) = guard(&est, &limit) {
            trace.outcome = Outcome::Diverged { step: k, reason };
            break;
        }
    }
    trace.final_estimate = est;
    Ok(trace)
}
