use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numkit::Vector;

pub const STATE_NAMES: [&str; 3] = ["delta", "omega", "p_f"];
pub const INPUT_NAMES: [&str; 1] = ["v_g"];
pub const OUTPUT_NAMES: [&str; 1] = ["p"];

/// Virtual synchronous machine against an infinite bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmibParams {
    pub omega_b: f64,
    pub omega_s: f64,
    pub inertia: f64,
    pub damping: f64,
    pub p_ref: f64,
    pub v_s: f64,
    pub x: f64,
    pub tau_p: f64,
}

impl Default for SmibParams {
    fn default() -> Self {
        SmibParams {
            omega_b: 2.0 * PI * 60.0,
            omega_s: 1.0,
            inertia: 3.5,
            damping: 10.0,
            p_ref: 0.8,
            v_s: 1.1,
            x: 0.6,
            tau_p: 0.01,
        }
    }
}

impl SmibParams {
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let slot = match key {
            "omega_b" => &mut self.omega_b,
            "omega_s" => &mut self.omega_s,
            "H" => &mut self.inertia,
            "D" => &mut self.damping,
            "p_ref" => &mut self.p_ref,
            "v_s" => &mut self.v_s,
            "x" => &mut self.x,
            "tau_p" => &mut self.tau_p,
            _ => return Err(Error::UnknownParam(key.to_string())),
        };
        *slot = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("H", self.inertia),
            ("tau_p", self.tau_p),
            ("x", self.x),
            ("v_s", self.v_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Scenario(format!("parameter {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    fn electrical_power(&self, delta: f64, v_g: f64) -> f64 {
        self.v_s * v_g / self.x * delta.sin()
    }

    pub fn f(&self, x: &Vector, u: &Vector) -> Vector {
        let (delta, omega, p_f) = (x[0], x[1], x[2]);
        let slip = omega - self.omega_s;
        Vector::from_vec(vec![
            self.omega_b * slip,
            (self.p_ref - p_f - self.damping * slip) / self.inertia,
            (-p_f + self.electrical_power(delta, u[0])) / self.tau_p,
        ])
    }

    pub fn h(&self, x: &Vector, u: &Vector) -> Vector {
        Vector::from_element(1, self.electrical_power(x[0], u[0]))
    }

    /// Closed-form equilibrium `δ* = asin(p_ref·x/(v_s·v_g))`, ω = ω_s, p_f = p_ref.
    pub fn equilibrium(&self, v_g: f64) -> Vector {
        let ratio = (self.p_ref * self.x / (self.v_s * v_g)).clamp(-1.0, 1.0);
        Vector::from_vec(vec![ratio.asin(), self.omega_s, self.p_ref])
    }
}
