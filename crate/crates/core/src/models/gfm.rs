use nalgebra::Complex;

use super::ibr::{self, CommonParams};
use crate::error::{Error, Result};
use crate::numkit::Vector;

pub const STATE_NAMES: [&str; 13] = [
    "theta_oc", "omega_oc", "v_oc", "i_d_cv", "i_q_cv", "v_d_filt", "v_q_filt", "i_d_filt",
    "i_q_filt", "xi_d", "xi_q", "gamma_d", "gamma_q",
];

/// Droop-controlled grid-forming inverter with cascaded voltage and current
/// loops and a virtual impedance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GfmParams {
    pub common: CommonParams,
    pub r_v: f64,
    pub ell_v: f64,
    pub k_p: f64,
    pub k_q: f64,
    pub omega_z: f64,
    pub omega_f: f64,
    pub k_p_v: f64,
    pub k_i_v: f64,
    pub p_ref: f64,
    pub q_ref: f64,
    pub omega_ref: f64,
    pub v_ref: f64,
}

impl Default for GfmParams {
    fn default() -> Self {
        GfmParams {
            common: CommonParams::default(),
            r_v: 0.0,
            ell_v: 0.2,
            k_p: 0.1,
            k_q: 0.2,
            omega_z: 1.0,
            omega_f: 100.0,
            k_p_v: 0.3947,
            k_i_v: 49.5953,
            p_ref: 0.7,
            q_ref: 0.1,
            omega_ref: 1.0,
            v_ref: 1.0,
        }
    }
}

impl GfmParams {
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if self.common.set(key, value)? {
            return Ok(());
        }
        let slot = match key {
            "r_v" => &mut self.r_v,
            "ell_v" => &mut self.ell_v,
            "k_p" => &mut self.k_p,
            "k_q" => &mut self.k_q,
            "omega_z" => &mut self.omega_z,
            "omega_f" => &mut self.omega_f,
            "k_p_v" => &mut self.k_p_v,
            "k_i_v" => &mut self.k_i_v,
            "p_ref" => &mut self.p_ref,
            "q_ref" => &mut self.q_ref,
            "omega_ref" => &mut self.omega_ref,
            "v_ref" => &mut self.v_ref,
            _ => return Err(Error::UnknownParam(key.to_string())),
        };
        *slot = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.common.validate()?;
        let gains = [
            ("k_p", self.k_p),
            ("k_q", self.k_q),
            ("omega_z", self.omega_z),
            ("omega_f", self.omega_f),
            ("k_p_v", self.k_p_v),
            ("k_i_v", self.k_i_v),
        ];
        for (name, v) in gains {
            if !(v >= 0.0) {
                return Err(Error::Scenario(format!("gain {name} must be >= 0, got {v}")));
            }
        }
        // The droop equations divide by k_p and k_q.
        if self.k_p == 0.0 || self.k_q == 0.0 {
            return Err(Error::Scenario("droop gains k_p and k_q must be > 0".into()));
        }
        Ok(())
    }

    pub fn f(&self, x: &Vector, u: &Vector) -> Vector {
        let c = &self.common;
        let [theta, omega, v_oc, icd, icq, vfd, vfq, ifd, ifq, xi_d, xi_q, g_d, g_q] =
            std::array::from_fn(|i| x[i]);
        let (v_r, v_i) = (u[0], u[1]);

        let (vf_r, vf_i) = ibr::dq_to_grid(theta, vfd, vfq);
        let (if_r, if_i) = ibr::dq_to_grid(theta, ifd, ifq);
        let p = vf_r * if_r + vf_i * if_i;
        let q = vf_i * if_r - vf_r * if_i;

        let e_d = v_oc - self.r_v * ifd + omega * self.ell_v * ifq - vfd;
        let e_q = -self.r_v * ifq - omega * self.ell_v * ifd - vfq;
        let iref_d = self.k_p_v * e_d + self.k_i_v * xi_d - c.c_f * omega * vfq;
        let iref_q = self.k_p_v * e_q + self.k_i_v * xi_q + c.c_f * omega * vfd;

        let (vg_d, vg_q) = ibr::grid_to_dq(theta, v_r, v_i);
        let wl_f = c.omega_b / c.ell_f;
        let wc_f = c.omega_b / c.c_f;
        let wl_g = c.omega_b / c.ell_g;

        Vector::from_vec(vec![
            c.omega_b * (omega - c.omega_s),
            self.omega_z * self.k_p * (self.p_ref - p) + self.omega_z * (self.omega_ref - omega),
            self.omega_f * self.k_q * (self.q_ref - q) + self.omega_f * (self.v_ref - v_oc),
            wl_f * (c.k_p_c * (iref_d - icd) + c.k_i_c * g_d - vfd - c.r_f * icd),
            wl_f * (c.k_p_c * (iref_q - icq) + c.k_i_c * g_q - vfq - c.r_f * icq),
            wc_f * (icd - ifd + omega * c.c_f * vfq),
            wc_f * (icq - ifq - omega * c.c_f * vfd),
            wl_g * (vfd - vg_d - c.r_g * ifd + omega * c.ell_g * ifq),
            wl_g * (vfq - vg_q - c.r_g * ifq - omega * c.ell_g * ifd),
            e_d,
            e_q,
            iref_d - icd,
            iref_q - icq,
        ])
    }

    pub fn h(&self, x: &Vector, _u: &Vector) -> Vector {
        let (r, i) = ibr::dq_to_grid(x[0], x[7], x[8]);
        Vector::from_vec(vec![r, i])
    }

    /// Phasor operating point delivering `(p_ref, q_ref)` at the filter
    /// terminal, assuming `omega_ref = omega_s` and `v_ref` equal to the
    /// resulting internal voltage. Used as the Newton starting point.
    pub fn phasor_guess(&self, u: &Vector) -> Vector {
        let c = &self.common;
        let w = c.omega_s;
        let v_grid = Complex::new(u[0], u[1]);
        let t = ibr::terminal_phasors(c, v_grid, Complex::new(self.p_ref, self.q_ref));
        let e = t.v_filt + Complex::new(self.r_v, w * self.ell_v) * t.i_filt;
        let theta = e.arg();
        let (vfd, vfq) = ibr::phasor_to_dq(theta, t.v_filt);
        let (ifd, ifq) = ibr::phasor_to_dq(theta, t.i_filt);
        let (icd, icq) = ibr::phasor_to_dq(theta, t.i_cv);
        let xi_d = (icd + c.c_f * w * vfq) / self.k_i_v;
        let xi_q = (icq - c.c_f * w * vfd) / self.k_i_v;
        let g_d = (vfd + c.r_f * icd) / c.k_i_c;
        let g_q = (vfq + c.r_f * icq) / c.k_i_c;
        Vector::from_vec(vec![
            theta,
            w,
            e.norm(),
            icd,
            icq,
            vfd,
            vfq,
            ifd,
            ifq,
            xi_d,
            xi_q,
            g_d,
            g_q,
        ])
    }

    /// Sets `v_ref` so that the droop equilibrium delivers exactly `q_ref`.
    pub fn match_voltage_setpoint(&mut self, u: &Vector) {
        self.v_ref = self.phasor_guess(u)[2];
    }
}
