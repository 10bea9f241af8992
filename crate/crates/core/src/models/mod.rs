//! Dynamic components `ẋ = f(x, u)`, `z = h(x, u)`.
//!
//! The [`Dynamics`] trait is what the discretization schemes and filters
//! consume. [`ModelSpec`] wraps the three built-in power components; the
//! small [`FnModel`] and [`LinearModel`] types cover synthetic test systems.

pub mod gfl;
pub mod gfm;
pub mod ibr;
pub mod smib;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Vector};

pub use gfl::GflParams;
pub use gfm::GfmParams;
pub use ibr::CommonParams;
pub use smib::SmibParams;

pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// State derivative.
    fn f(&self, x: &Vector, u: &Vector) -> Vector;

    /// Measurement.
    fn h(&self, x: &Vector, u: &Vector) -> Vector;

    fn state_names(&self) -> Vec<String> {
        (0..self.state_dim()).map(|i| format!("x{i}")).collect()
    }

    fn input_names(&self) -> Vec<String> {
        (0..self.input_dim()).map(|i| format!("u{i}")).collect()
    }

    fn output_names(&self) -> Vec<String> {
        (0..self.output_dim()).map(|i| format!("z{i}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Smib,
    Gfm,
    Gfl,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Smib => "smib",
            ModelKind::Gfm => "gfm",
            ModelKind::Gfl => "gfl",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smib" => Ok(ModelKind::Smib),
            "gfm" => Ok(ModelKind::Gfm),
            "gfl" => Ok(ModelKind::Gfl),
            other => Err(Error::Scenario(format!(
                "model: unknown model `{other}` (expected smib, gfm or gfl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelParams {
    Smib(SmibParams),
    Gfm(GfmParams),
    Gfl(GflParams),
}

/// One of the built-in power components with its parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    params: ModelParams,
}

impl ModelSpec {
    pub fn new(params: ModelParams) -> Result<Self> {
        match &params {
            ModelParams::Smib(p) => p.validate()?,
            ModelParams::Gfm(p) => p.validate()?,
            ModelParams::Gfl(p) => p.validate()?,
        }
        Ok(ModelSpec { params })
    }

    pub fn smib(params: SmibParams) -> Result<Self> {
        Self::new(ModelParams::Smib(params))
    }

    pub fn gfm(params: GfmParams) -> Result<Self> {
        Self::new(ModelParams::Gfm(params))
    }

    pub fn gfl(params: GflParams) -> Result<Self> {
        Self::new(ModelParams::Gfl(params))
    }

    /// Default parameters of the given kind.
    pub fn default_for(kind: ModelKind) -> Self {
        let params = match kind {
            ModelKind::Smib => ModelParams::Smib(SmibParams::default()),
            ModelKind::Gfm => ModelParams::Gfm(GfmParams::default()),
            ModelKind::Gfl => ModelParams::Gfl(GflParams::default()),
        };
        ModelSpec { params }
    }

    pub fn kind(&self) -> ModelKind {
        match self.params {
            ModelParams::Smib(_) => ModelKind::Smib,
            ModelParams::Gfm(_) => ModelKind::Gfm,
            ModelParams::Gfl(_) => ModelKind::Gfl,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Applies a named parameter override and re-validates.
    pub fn set_param(&mut self, key: &str, value: f64) -> Result<()> {
        let mut params = self.params;
        match &mut params {
            ModelParams::Smib(p) => p.set(key, value)?,
            ModelParams::Gfm(p) => p.set(key, value)?,
            ModelParams::Gfl(p) => p.set(key, value)?,
        }
        *self = ModelSpec::new(params)?;
        Ok(())
    }

    pub fn state_labels(&self) -> &'static [&'static str] {
        match self.params {
            ModelParams::Smib(_) => &smib::STATE_NAMES,
            ModelParams::Gfm(_) => &gfm::STATE_NAMES,
            ModelParams::Gfl(_) => &gfl::STATE_NAMES,
        }
    }

    pub fn input_labels(&self) -> &'static [&'static str] {
        match self.params {
            ModelParams::Smib(_) => &smib::INPUT_NAMES,
            _ => &ibr::INPUT_NAMES,
        }
    }

    pub fn output_labels(&self) -> &'static [&'static str] {
        match self.params {
            ModelParams::Smib(_) => &smib::OUTPUT_NAMES,
            _ => &ibr::OUTPUT_NAMES,
        }
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_labels().iter().position(|s| *s == name)
    }

    pub fn input_index(&self, name: &str) -> Option<usize> {
        self.input_labels().iter().position(|s| *s == name)
    }

    /// Nominal port input: unit infinite-bus voltage, or `1 + j0` at the
    /// inverter terminal.
    pub fn nominal_input(&self) -> Vector {
        match self.params {
            ModelParams::Smib(_) => Vector::from_element(1, 1.0),
            _ => Vector::from_vec(vec![1.0, 0.0]),
        }
    }

    /// Starting point for the steady-state Newton iteration.
    pub fn initial_guess(&self, u: &Vector) -> Vector {
        match &self.params {
            ModelParams::Smib(p) => p.equilibrium(u[0]),
            ModelParams::Gfm(p) => p.phasor_guess(u),
            ModelParams::Gfl(p) => p.phasor_guess(u),
        }
    }

    /// Named groups of states used for per-block process-noise scaling.
    pub fn state_blocks(&self) -> &'static [(&'static str, Range<usize>)] {
        match self.params {
            ModelParams::Smib(_) => &[("all", 0..3)],
            ModelParams::Gfm(_) => &[("all", 0..13), ("outer", 0..3), ("inner", 3..13)],
            ModelParams::Gfl(_) => &[
                ("all", 0..15),
                ("pll", 0..3),
                ("outer", 3..7),
                ("inner", 7..11),
                ("filter", 11..15),
            ],
        }
    }
}

impl Dynamics for ModelSpec {
    fn state_dim(&self) -> usize {
        self.state_labels().len()
    }

    fn input_dim(&self) -> usize {
        self.input_labels().len()
    }

    fn output_dim(&self) -> usize {
        self.output_labels().len()
    }

    fn f(&self, x: &Vector, u: &Vector) -> Vector {
        match &self.params {
            ModelParams::Smib(p) => p.f(x, u),
            ModelParams::Gfm(p) => p.f(x, u),
            ModelParams::Gfl(p) => p.f(x, u),
        }
    }

    fn h(&self, x: &Vector, u: &Vector) -> Vector {
        match &self.params {
            ModelParams::Smib(p) => p.h(x, u),
            ModelParams::Gfm(p) => p.h(x, u),
            ModelParams::Gfl(p) => p.h(x, u),
        }
    }

    fn state_names(&self) -> Vec<String> {
        self.state_labels().iter().map(|s| s.to_string()).collect()
    }

    fn input_names(&self) -> Vec<String> {
        self.input_labels().iter().map(|s| s.to_string()).collect()
    }

    fn output_names(&self) -> Vec<String> {
        self.output_labels().iter().map(|s| s.to_string()).collect()
    }
}

type VecFn = Box<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;

/// Model defined by closures.
pub struct FnModel {
    n: usize,
    m: usize,
    p: usize,
    f: VecFn,
    h: VecFn,
}

impl FnModel {
    pub fn new<F, H>(n: usize, m: usize, p: usize, f: F, h: H) -> Self
    where
        F: Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
        H: Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
    {
        FnModel {
            n,
            m,
            p,
            f: Box::new(f),
            h: Box::new(h),
        }
    }
}

impl Dynamics for FnModel {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn output_dim(&self) -> usize {
        self.p
    }
    fn f(&self, x: &Vector, u: &Vector) -> Vector {
        (self.f)(x, u)
    }
    fn h(&self, x: &Vector, u: &Vector) -> Vector {
        (self.h)(x, u)
    }
}

/// `ẋ = A x + B u + c`, `z = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Vector,
    pub c_out: Matrix,
    pub d_out: Matrix,
}

impl LinearModel {
    /// Full-state measurement and zero offset.
    pub fn new(a: Matrix, b: Matrix) -> Self {
        let n = a.nrows();
        let m = b.ncols();
        LinearModel {
            c: Vector::zeros(n),
            c_out: Matrix::identity(n, n),
            d_out: Matrix::zeros(n, m),
            a,
            b,
        }
    }

    pub fn with_offset(mut self, c: Vector) -> Self {
        self.c = c;
        self
    }

    pub fn with_output(mut self, c_out: Matrix, d_out: Matrix) -> Self {
        self.c_out = c_out;
        self.d_out = d_out;
        self
    }
}

impl Dynamics for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn output_dim(&self) -> usize {
        self.c_out.nrows()
    }
    fn f(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u + &self.c
    }
    fn h(&self, x: &Vector, u: &Vector) -> Vector {
        &self.c_out * x + &self.d_out * u
    }
}

/// Forward-difference Jacobian `∂f/∂x` with steps `√ε·(1 + |x_j|)`.
pub fn numerical_jacobian<M: Dynamics + ?Sized>(model: &M, x: &Vector, u: &Vector) -> Matrix {
    let n = x.len();
    let f0 = model.f(x, u);
    let sqrt_eps = f64::EPSILON.sqrt();
    let mut jac = Matrix::zeros(f0.len(), n);
    let mut xp = x.clone();
    for j in 0..n {
        let step = sqrt_eps * (1.0 + x[j].abs());
        xp[j] = x[j] + step;
        // Use the representable step actually taken.
        let dx = xp[j] - x[j];
        let fj = model.f(&xp, u);
        for i in 0..f0.len() {
            jac[(i, j)] = (fj[i] - f0[i]) / dx;
        }
        xp[j] = x[j];
    }
    jac
}

pub const STEADY_STATE_TOL: f64 = 1e-10;
pub const STEADY_STATE_MAX_ITER: usize = 200;

/// Equilibrium `f(x*, u0) = 0` by damped Newton with step halving.
pub fn steady_state<M: Dynamics + ?Sized>(model: &M, u0: &Vector, guess: &Vector) -> Result<Vector> {
    if guess.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("steady-state guess"));
    }
    let mut x = guess.clone();
    let mut r = model.f(&x, u0);
    let mut res = r.amax();
    for _ in 0..STEADY_STATE_MAX_ITER {
        if res < STEADY_STATE_TOL {
            return Ok(x);
        }
        let jac = numerical_jacobian(model, &x, u0);
        let dx = jac.lu().solve(&(-&r)).ok_or(Error::Singular("steady-state Jacobian"))?;
        let mut lambda = 1.0;
        loop {
            let trial = &x + &dx * lambda;
            let r_trial = model.f(&trial, u0);
            let res_trial = r_trial.amax();
            if res_trial.is_finite() && (res_trial < res || lambda < 1e-6) {
                x = trial;
                r = r_trial;
                res = res_trial;
                break;
            }
            lambda *= 0.5;
        }
    }
    if res < STEADY_STATE_TOL {
        return Ok(x);
    }
    Err(Error::SteadyState {
        iterations: STEADY_STATE_MAX_ITER,
        residual: res,
    })
}
