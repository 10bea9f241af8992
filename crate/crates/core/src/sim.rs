//! Ground-truth trajectories, measurement synthesis and trace files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::discretize::{eigenvalues, rk4_stability_fn, rk4_step};
use crate::error::{Error, Result};
use crate::filters::fmt_f64;
use crate::io::{read_numeric_csv, write_csv};
use crate::models::{numerical_jacobian, Dynamics};
use crate::numkit::Vector;
use crate::scenario::{MeasurementNoise, Scenario};

/// Generator words reserved per sample; far more than a normal draw consumes.
const WORDS_PER_SAMPLE: u128 = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrace {
    pub dt: f64,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub outputs: Vec<Vector>,
}

impl TruthTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend(self.state_names.iter().cloned());
        h.extend(self.input_names.iter().cloned());
        h.extend(self.output_names.iter().cloned());
        h
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        (0..self.len())
            .map(|i| {
                std::iter::once(self.times[i])
                    .chain(self.states[i].iter().copied())
                    .chain(self.inputs[i].iter().copied())
                    .chain(self.outputs[i].iter().copied())
                    .map(fmt_f64)
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementTrace {
    pub fps: f64,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub times: Vec<f64>,
    /// Truth-grid index of each sample when the grids nest.
    pub truth_index: Option<Vec<usize>>,
    pub inputs: Vec<Vector>,
    pub outputs: Vec<Vector>,
}

impl MeasurementTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend(self.input_names.iter().map(|s| format!("mu_{s}")));
        h.extend(self.output_names.iter().map(|s| format!("z_{s}")));
        h
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        (0..self.len())
            .map(|i| {
                std::iter::once(self.times[i])
                    .chain(self.inputs[i].iter().copied())
                    .chain(self.outputs[i].iter().copied())
                    .map(fmt_f64)
                    .collect()
            })
            .collect()
    }
}

/// Piecewise-constant input signal on the truth grid: each event takes
/// effect from the first grid index at or after its (snapped) time.
pub fn input_schedule(scenario: &Scenario, steps: usize) -> Vec<Vector> {
    let mut snapped: Vec<(usize, usize, f64)> = scenario
        .events
        .iter()
        .map(|e| ((e.t / scenario.truth_dt).round() as usize, e.input, e.value))
        .collect();
    snapped.sort_by_key(|e| e.0);
    let mut u = scenario.initial_input();
    let mut next = 0;
    let mut out = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        while next < snapped.len() && snapped[next].0 <= i {
            u[snapped[next].1] = snapped[next].2;
            next += 1;
        }
        out.push(u.clone());
    }
    out
}

/// Refuses a truth step whose scaled spectrum at `x` leaves the RK4 region.
pub fn check_truth_step<M: Dynamics + ?Sized>(model: &M, x: &Vector, u: &Vector, dt: f64) -> Result<()> {
    let eig = eigenvalues(&numerical_jacobian(model, x, u))?;
    let worst = eig
        .iter()
        .map(|l| (l * dt, rk4_stability_fn(l * dt).norm()))
        .fold(None::<(nalgebra::Complex<f64>, f64)>, |acc, c| match acc {
            Some(a) if a.1 >= c.1 => Some(a),
            _ => Some(c),
        });
    if let Some((z, r)) = worst {
        if r > 1.0 {
            return Err(Error::TruthUnstable {
                dt,
                z_re: z.re,
                z_im: z.im,
            });
        }
    }
    Ok(())
}

/// Integrates the scenario with RK4 at `truth_dt`.
pub fn simulate_truth(scenario: &Scenario) -> Result<TruthTrace> {
    let model = &scenario.model;
    let dt = scenario.truth_dt;
    let steps = scenario.truth_steps();
    let x0 = scenario.initial_state()?;
    let inputs = input_schedule(scenario, steps);
    check_truth_step(model, &x0, &inputs[0], dt)?;

    let mut states = Vec::with_capacity(steps + 1);
    let mut outputs = Vec::with_capacity(steps + 1);
    let mut x = x0;
    for (i, u) in inputs.iter().enumerate() {
        outputs.push(model.h(&x, u));
        if i < steps {
            let next = rk4_step(model, &x, u, dt)?;
            states.push(std::mem::replace(&mut x, next));
        } else {
            states.push(x.clone());
        }
    }
    Ok(TruthTrace {
        dt,
        state_names: model.state_names(),
        input_names: model.input_names(),
        output_names: model.output_names(),
        times: (0..=steps).map(|i| i as f64 * dt).collect(),
        states,
        inputs,
        outputs,
    })
}

/// Standard normal draw keyed by `(seed, channel, index)`.
pub fn keyed_normal(seed: u64, channel: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel);
    rng.set_word_pos(index as u128 * WORDS_PER_SAMPLE);
    rng.sample(StandardNormal)
}

fn lerp(a: &Vector, b: &Vector, w: f64) -> Vector {
    a * (1.0 - w) + b * w
}

/// Noisy samples of the truth inputs and clean outputs at `fps`.
///
/// Noise for a sample is keyed by (seed, channel, truth index), so rates
/// sharing a time point share its noise realization.
pub fn sample_measurements(truth: &TruthTrace, fps: f64, noise: &MeasurementNoise) -> Result<MeasurementTrace> {
    if !(fps > 0.0) {
        return Err(Error::OutOfRange(format!("fps must be > 0, got {fps}")));
    }
    if truth.is_empty() {
        return Err(Error::OutOfRange("empty truth trace".into()));
    }
    let m = truth.input_names.len();
    let t_end = *truth.times.last().unwrap();
    let stride = crate::scenario::stride_for(fps, truth.dt).ok();

    let mut times = Vec::new();
    let mut index = Vec::new();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let add_noise = |v: &Vector, std: f64, base: u64, key: u64| -> Vector {
        if std == 0.0 {
            return v.clone();
        }
        Vector::from_fn(v.len(), |c, _| v[c] + std * keyed_normal(noise.seed, base + c as u64, key))
    };
    let mut k = 0usize;
    loop {
        let (t, u, z, key) = match stride {
            Some(s) => {
                let i = k * s;
                if i >= truth.len() {
                    break;
                }
                index.push(i);
                (truth.times[i], truth.inputs[i].clone(), truth.outputs[i].clone(), i as u64)
            }
            None => {
                let t = k as f64 / fps;
                if t > t_end + 1e-12 * t_end.max(1.0) {
                    break;
                }
                let pos = (t / truth.dt).min((truth.len() - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(truth.len() - 1);
                let w = pos - lo as f64;
                (
                    t,
                    lerp(&truth.inputs[lo], &truth.inputs[hi], w),
                    lerp(&truth.outputs[lo], &truth.outputs[hi], w),
                    pos.round() as u64,
                )
            }
        };
        times.push(t);
        inputs.push(add_noise(&u, noise.input_std, 0, key));
        outputs.push(add_noise(&z, noise.output_std, m as u64, key));
        k += 1;
    }
    Ok(MeasurementTrace {
        fps,
        input_names: truth.input_names.clone(),
        output_names: truth.output_names.clone(),
        times,
        truth_index: stride.map(|_| index),
        inputs,
        outputs,
    })
}

/// One sigma point carried over `h` by `substeps` RK4 steps.
pub fn propagate_substepped<M: Dynamics + ?Sized>(
    model: &M,
    x: &Vector,
    u: &Vector,
    h: f64,
    substeps: usize,
) -> Result<Vector> {
    let dt = h / substeps as f64;
    let mut x = x.clone();
    for _ in 0..substeps {
        x = rk4_step(model, &x, u, dt)?;
    }
    Ok(x)
}

pub fn write_truth(path: &Path, trace: &TruthTrace) -> Result<()> {
    write_csv(path, &trace.csv_header(), &trace.csv_rows())
}

pub fn write_measurements(path: &Path, trace: &MeasurementTrace) -> Result<()> {
    write_csv(path, &trace.csv_header(), &trace.csv_rows())
}

fn check_header(path: &Path, got: &[String], want: &[String]) -> Result<()> {
    if got != want {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{}`, found `{}`", want.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn split_row(row: &[f64], sizes: &[usize]) -> Vec<Vector> {
    let mut at = 1;
    sizes
        .iter()
        .map(|&n| {
            let v = Vector::from_row_slice(&row[at..at + n]);
            at += n;
            v
        })
        .collect()
}

/// Reads a truth CSV written for `model`; `dt` is recovered from the grid.
pub fn read_truth<M: Dynamics + ?Sized>(path: &Path, model: &M) -> Result<TruthTrace> {
    let table = read_numeric_csv(path)?;
    let mut trace = TruthTrace {
        dt: 0.0,
        state_names: model.state_names(),
        input_names: model.input_names(),
        output_names: model.output_names(),
        times: Vec::new(),
        states: Vec::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    check_header(path, &table.header, &trace.csv_header())?;
    let sizes = [model.state_dim(), model.input_dim(), model.output_dim()];
    for row in &table.rows {
        let mut parts = split_row(row, &sizes).into_iter();
        trace.times.push(row[0]);
        trace.states.push(parts.next().unwrap());
        trace.inputs.push(parts.next().unwrap());
        trace.outputs.push(parts.next().unwrap());
    }
    if trace.times.len() > 1 {
        trace.dt = trace.times[1] - trace.times[0];
    }
    Ok(trace)
}

pub fn read_measurements<M: Dynamics + ?Sized>(path: &Path, model: &M, fps: f64) -> Result<MeasurementTrace> {
    let table = read_numeric_csv(path)?;
    let mut trace = MeasurementTrace {
        fps,
        input_names: model.input_names(),
        output_names: model.output_names(),
        times: Vec::new(),
        truth_index: None,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    check_header(path, &table.header, &trace.csv_header())?;
    let sizes = [model.input_dim(), model.output_dim()];
    for row in &table.rows {
        let mut parts = split_row(row, &sizes).into_iter();
        trace.times.push(row[0]);
        trace.inputs.push(parts.next().unwrap());
        trace.outputs.push(parts.next().unwrap());
    }
    Ok(trace)
}
