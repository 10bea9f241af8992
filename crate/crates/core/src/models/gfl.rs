use nalgebra::Complex;

use super::ibr::{self, CommonParams};
use crate::error::{Error, Result};
use crate::numkit::Vector;

pub const STATE_NAMES: [&str; 15] = [
    "theta_pll", "omega_pll", "v_q_pll", "sigma_p", "sigma_q", "p_m", "q_m", "gamma_d", "gamma_q",
    "i_d_cv", "i_q_cv", "v_d_filt", "v_q_filt", "i_d_filt", "i_q_filt",
];

/// PLL-synchronized grid-following inverter with PI power loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GflParams {
    pub common: CommonParams,
    pub k_p_pll: f64,
    pub k_i_pll: f64,
    pub omega_lp: f64,
    pub k_p_p: f64,
    pub k_i_p: f64,
    pub k_p_q: f64,
    pub k_i_q: f64,
    pub omega_z: f64,
    pub omega_f: f64,
    pub p_ref: f64,
    pub q_ref: f64,
}

impl Default for GflParams {
    fn default() -> Self {
        GflParams {
            common: CommonParams::default(),
            k_p_pll: 0.05,
            k_i_pll: 1.42,
            omega_lp: 376.99,
            k_p_p: 0.05,
            k_i_p: 0.6,
            k_p_q: 0.05,
            k_i_q: 0.6,
            omega_z: 41.47,
            omega_f: 41.47,
            p_ref: 0.6,
            q_ref: 0.1,
        }
    }
}

impl GflParams {
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if self.common.set(key, value)? {
            return Ok(());
        }
        let slot = match key {
            "k_p_pll" => &mut self.k_p_pll,
            "k_i_pll" => &mut self.k_i_pll,
            "omega_lp" => &mut self.omega_lp,
            "k_p_p" => &mut self.k_p_p,
            "k_i_p" => &mut self.k_i_p,
            "k_p_q" => &mut self.k_p_q,
            "k_i_q" => &mut self.k_i_q,
            "omega_z" => &mut self.omega_z,
            "omega_f" => &mut self.omega_f,
            "p_ref" => &mut self.p_ref,
            "q_ref" => &mut self.q_ref,
            _ => return Err(Error::UnknownParam(key.to_string())),
        };
        *slot = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.common.validate()?;
        if !(self.omega_lp > 0.0) {
            return Err(Error::Scenario(format!(
                "omega_lp must be > 0, got {}",
                self.omega_lp
            )));
        }
        let gains = [
            ("k_p_pll", self.k_p_pll),
            ("k_i_pll", self.k_i_pll),
            ("k_p_p", self.k_p_p),
            ("k_i_p", self.k_i_p),
            ("k_p_q", self.k_p_q),
            ("k_i_q", self.k_i_q),
            ("omega_z", self.omega_z),
            ("omega_f", self.omega_f),
        ];
        for (name, v) in gains {
            if !(v >= 0.0) {
                return Err(Error::Scenario(format!("gain {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn f(&self, x: &Vector, u: &Vector) -> Vector {
        let c = &self.common;
        let [theta, omega, vq_pll, sig_p, sig_q, p_m, q_m, g_d, g_q, icd, icq, vfd, vfq, ifd, ifq] =
            std::array::from_fn(|i| x[i]);
        let (v_r, v_i) = (u[0], u[1]);

        let iref_d = self.k_p_p * (self.p_ref - p_m) + self.k_i_p * sig_p;
        let iref_q = -self.k_p_q * (self.q_ref - q_m) - self.k_i_q * sig_q;
        let (vg_d, vg_q) = ibr::grid_to_dq(theta, v_r, v_i);
        let wl_f = c.omega_b / c.ell_f;
        let wc_f = c.omega_b / c.c_f;
        let wl_g = c.omega_b / c.ell_g;

        Vector::from_vec(vec![
            c.omega_b * (omega - c.omega_s),
            self.omega_lp
                * ((self.k_i_pll / self.omega_lp - self.k_p_pll) * vq_pll + self.k_p_pll * vfq),
            self.omega_lp * (-vq_pll + vfq),
            self.p_ref - p_m,
            self.q_ref - q_m,
            self.omega_z * (vfd * ifd + vfq * ifq - p_m),
            self.omega_f * (-vfd * ifq + vfq * ifd - q_m),
            iref_d - icd,
            iref_q - icq,
            wl_f * (c.k_p_c * (iref_d - icd) + c.k_i_c * g_d - vfd - c.r_f * icd),
            wl_f * (c.k_p_c * (iref_q - icq) + c.k_i_c * g_q - vfq - c.r_f * icq),
            wc_f * (icd - ifd + omega * c.c_f * vfq),
            wc_f * (icq - ifq - omega * c.c_f * vfd),
            wl_g * (vfd - vg_d - c.r_g * ifd + omega * c.ell_g * ifq),
            wl_g * (vfq - vg_q - c.r_g * ifq - omega * c.ell_g * ifd),
        ])
    }

    pub fn h(&self, x: &Vector, _u: &Vector) -> Vector {
        let (r, i) = ibr::dq_to_grid(x[0], x[13], x[14]);
        Vector::from_vec(vec![r, i])
    }

    /// Phasor operating point with the PLL aligned to the capacitor voltage.
    pub fn phasor_guess(&self, u: &Vector) -> Vector {
        let c = &self.common;
        let w = c.omega_s;
        let t = ibr::terminal_phasors(
            c,
            Complex::new(u[0], u[1]),
            Complex::new(self.p_ref, self.q_ref),
        );
        let theta = t.v_filt.arg();
        let (vfd, vfq) = ibr::phasor_to_dq(theta, t.v_filt);
        let (ifd, ifq) = ibr::phasor_to_dq(theta, t.i_filt);
        let (icd, icq) = ibr::phasor_to_dq(theta, t.i_cv);
        let sig_p = if self.k_i_p != 0.0 { icd / self.k_i_p } else { 0.0 };
        let sig_q = if self.k_i_q != 0.0 { -icq / self.k_i_q } else { 0.0 };
        Vector::from_vec(vec![
            theta,
            w,
            0.0,
            sig_p,
            sig_q,
            self.p_ref,
            self.q_ref,
            (vfd + c.r_f * icd) / c.k_i_c,
            (vfq + c.r_f * icq) / c.k_i_c,
            icd,
            icq,
            vfd,
            vfq,
            ifd,
            ifq,
        ])
    }
}
