//! Pieces shared by the grid-forming and grid-following inverter models:
//! the LCL filter parameters, the dq/grid-frame rotations and a phasor
//! operating-point solve used to seed the steady-state Newton iteration.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Complex;

use crate::error::{Error, Result};

pub const INPUT_NAMES: [&str; 2] = ["v_r_grid", "v_i_grid"];
pub const OUTPUT_NAMES: [&str; 2] = ["i_r_filt", "i_i_filt"];

/// Filter and current-loop parameters common to both inverter types.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommonParams {
    pub omega_s: f64,
    pub omega_b: f64,
    pub r_f: f64,
    pub ell_f: f64,
    pub c_f: f64,
    pub r_g: f64,
    pub ell_g: f64,
    pub k_p_c: f64,
    pub k_i_c: f64,
}

impl Default for CommonParams {
    fn default() -> Self {
        CommonParams {
            omega_s: 1.0,
            omega_b: 2.0 * PI * 60.0,
            r_f: 0.003,
            ell_f: 0.08,
            c_f: 0.074,
            r_g: 0.01,
            ell_g: 0.2,
            k_p_c: 0.3771,
            k_i_c: 335.1032,
        }
    }
}

impl CommonParams {
    /// Returns `Ok(false)` when `key` is not a common parameter.
    pub fn set(&mut self, key: &str, value: f64) -> Result<bool> {
        let slot = match key {
            "omega_s" => &mut self.omega_s,
            "omega_b" => &mut self.omega_b,
            "r_f" => &mut self.r_f,
            "ell_f" => &mut self.ell_f,
            "c_f" => &mut self.c_f,
            "r_g" => &mut self.r_g,
            "ell_g" => &mut self.ell_g,
            "k_p_c" => &mut self.k_p_c,
            "k_i_c" => &mut self.k_i_c,
            _ => return Ok(false),
        };
        *slot = value;
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ell_f", self.ell_f), ("c_f", self.c_f), ("ell_g", self.ell_g)] {
            if !(v > 0.0) {
                return Err(Error::Scenario(format!("parameter {name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("k_p_c", self.k_p_c), ("k_i_c", self.k_i_c)] {
            if !(v >= 0.0) {
                return Err(Error::Scenario(format!("gain {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `(sin(θ+π/2), cos(θ+π/2))`, the rotation coefficients of the measurement
/// and grid-voltage transforms.
#[inline]
pub fn rotation(theta: f64) -> (f64, f64) {
    let a = theta + FRAC_PI_2;
    (a.sin(), a.cos())
}

/// dq-frame quantity to the grid (r, i) frame.
#[inline]
pub fn dq_to_grid(theta: f64, d: f64, q: f64) -> (f64, f64) {
    let (s, c) = rotation(theta);
    (s * d + c * q, -c * d + s * q)
}

/// Grid (r, i) frame quantity to the dq frame.
#[inline]
pub fn grid_to_dq(theta: f64, r: f64, i: f64) -> (f64, f64) {
    let (s, c) = rotation(theta);
    (s * r - c * i, c * r + s * i)
}

/// Steady-state phasors at the filter terminal for a given complex power
/// `s = p + jq` delivered at the capacitor node.
pub struct TerminalPhasors {
    pub v_filt: Complex<f64>,
    pub i_filt: Complex<f64>,
    pub i_cv: Complex<f64>,
}

pub fn terminal_phasors(common: &CommonParams, v_grid: Complex<f64>, s: Complex<f64>) -> TerminalPhasors {
    let w = common.omega_s;
    let z_g = Complex::new(common.r_g, w * common.ell_g);
    let mut v_filt = v_grid;
    let mut i_filt = Complex::new(0.0, 0.0);
    for _ in 0..200 {
        if v_filt.norm() < 1e-6 {
            break;
        }
        i_filt = (s / v_filt).conj();
        let next = v_grid + z_g * i_filt;
        let done = (next - v_filt).norm() < 1e-15;
        v_filt = next;
        if done {
            break;
        }
    }
    let i_cv = i_filt + Complex::new(0.0, w * common.c_f) * v_filt;
    TerminalPhasors { v_filt, i_filt, i_cv }
}

/// Rotates a grid-frame phasor into the dq frame at angle `theta`.
pub fn phasor_to_dq(theta: f64, x: Complex<f64>) -> (f64, f64) {
    let r = x * Complex::from_polar(1.0, -theta);
    (r.re, r.im)
}
