//! Scenario files: model choice, parameter overrides, horizon, input events,
//! noise levels and filter tuning.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::filters::{NoiseSpec, StateEstimate};
use crate::models::{steady_state, Dynamics, ModelKind, ModelParams, ModelSpec};
use crate::numkit::{SpdMatrix, Vector};

/// Relative tolerance on `1/(fps·truth_dt)` being an integer.
const GRID_RATIO_TOL: f64 = 1e-6;

pub const BUNDLED: [(&str, &str); 3] = [
    ("smib_fault", include_str!("../scenarios/smib_fault.json")),
    ("gfm_dip", include_str!("../scenarios/gfm_dip.json")),
    ("gfl_dip", include_str!("../scenarios/gfl_dip.json")),
];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    model: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    t_end: f64,
    truth_dt: f64,
    #[serde(default)]
    events: Vec<EventFile>,
    noise: NoiseFile,
    q_scale: BlockValues,
    fps: Vec<f64>,
    #[serde(default)]
    init: Option<InitFile>,
    #[serde(default)]
    p0: Option<BlockValues>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventFile {
    t: f64,
    input: String,
    value: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseFile {
    input_std: f64,
    output_std: f64,
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum BlockValues {
    Uniform(f64),
    Blocks(BTreeMap<String, f64>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum InitFile {
    Keyword(String),
    States(Vec<f64>),
}

/// Step change of one input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEvent {
    pub t: f64,
    pub input: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementNoise {
    pub input_std: f64,
    pub output_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    SteadyState,
    Explicit(Vector),
}

/// Validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: ModelSpec,
    pub t_end: f64,
    pub truth_dt: f64,
    pub fps: Vec<f64>,
    pub events: Vec<InputEvent>,
    pub noise: MeasurementNoise,
    /// Per-state process-noise magnitude `q₀`; `Q = h²·diag(q₀)`.
    pub q0: Vector,
    /// Initial covariance diagonal.
    pub p0: Vector,
    pub init: InitialState,
}

fn scenario_err(msg: impl Into<String>) -> Error {
    Error::Scenario(msg.into())
}

fn block_diagonal(model: &ModelSpec, values: &BlockValues, field: &str) -> Result<Vector> {
    let n = model.state_dim();
    let mut diag = Vector::from_element(n, f64::NAN);
    let blocks = model.state_blocks();
    match values {
        BlockValues::Uniform(v) => diag.fill(*v),
        BlockValues::Blocks(map) => {
            // "all" first so that named blocks refine it.
            let mut ordered: Vec<(&String, &f64)> = map.iter().collect();
            ordered.sort_by_key(|(k, _)| k.as_str() != "all");
            for (name, v) in ordered {
                let range = blocks
                    .iter()
                    .find(|(b, _)| b == name)
                    .map(|(_, r)| r.clone())
                    .ok_or_else(|| {
                        let names: Vec<&str> = blocks.iter().map(|(b, _)| *b).collect();
                        scenario_err(format!(
                            "{field}: unknown state block `{name}` for model {} (expected one of {})",
                            model.kind(),
                            names.join(", ")
                        ))
                    })?;
                for i in range {
                    diag[i] = *v;
                }
            }
        }
    }
    for (i, v) in diag.iter().enumerate() {
        if v.is_nan() {
            return Err(scenario_err(format!(
                "{field}: no value for state `{}`",
                model.state_labels()[i]
            )));
        }
        if !(*v >= 0.0) || !v.is_finite() {
            return Err(scenario_err(format!("{field}: values must be finite and >= 0, got {v}")));
        }
    }
    Ok(diag)
}

impl Scenario {
    /// Parses and validates a scenario; `origin` names the source in messages.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: ScenarioFile =
            serde_json::from_str(text).map_err(|e| scenario_err(format!("{origin}: {e}")))?;
        Self::build(file).map_err(|e| match e {
            Error::Scenario(m) => scenario_err(format!("{origin}: {m}")),
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// One of the scenarios shipped with the library, by stem name.
    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| scenario_err(format!("no bundled scenario `{name}`")))?;
        Self::from_json(text, name)
    }

    fn build(file: ScenarioFile) -> Result<Self> {
        let kind: ModelKind = file.model.parse()?;
        let mut model = ModelSpec::default_for(kind);
        for (key, value) in &file.params {
            if !value.is_finite() {
                return Err(scenario_err(format!("params.{key}: value must be finite")));
            }
            model.set_param(key, *value).map_err(|e| match e {
                Error::UnknownParam(k) => scenario_err(format!("params: unknown parameter `{k}` for model {kind}")),
                Error::Scenario(m) => scenario_err(format!("params: {m}")),
                other => other,
            })?;
        }
        if let ModelParams::Gfm(mut p) = *model.params() {
            if !file.params.contains_key("v_ref") {
                p.match_voltage_setpoint(&model.nominal_input());
                model = ModelSpec::gfm(p)?;
            }
        }

        if !(file.t_end > 0.0) || !file.t_end.is_finite() {
            return Err(scenario_err(format!("t_end: must be > 0, got {}", file.t_end)));
        }
        if !(file.truth_dt > 0.0) || !file.truth_dt.is_finite() {
            return Err(scenario_err(format!("truth_dt: must be > 0, got {}", file.truth_dt)));
        }
        if file.truth_dt > file.t_end {
            return Err(scenario_err("truth_dt: larger than t_end"));
        }
        if file.fps.is_empty() {
            return Err(scenario_err("fps: at least one rate is required"));
        }
        for (i, f) in file.fps.iter().enumerate() {
            if !(*f > 0.0) || !f.is_finite() {
                return Err(scenario_err(format!("fps[{i}]: must be > 0, got {f}")));
            }
        }
        let max_fps = file.fps.iter().copied().fold(0.0, f64::max);
        if file.truth_dt > 1.0 / (10.0 * max_fps) * (1.0 + 1e-12) {
            return Err(scenario_err(format!(
                "truth_dt: {} exceeds 1/(10 x max fps) = {}",
                file.truth_dt,
                1.0 / (10.0 * max_fps)
            )));
        }
        for (i, f) in file.fps.iter().enumerate() {
            stride_for(*f, file.truth_dt).map_err(|e| scenario_err(format!("fps[{i}]: {e}")))?;
        }

        let mut events = Vec::with_capacity(file.events.len());
        let mut last_t = f64::NEG_INFINITY;
        for (i, e) in file.events.iter().enumerate() {
            let input = model.input_index(&e.input).ok_or_else(|| {
                scenario_err(format!(
                    "events[{i}].input: unknown input `{}` (expected one of {})",
                    e.input,
                    model.input_labels().join(", ")
                ))
            })?;
            if !(e.t >= 0.0 && e.t <= file.t_end) {
                return Err(scenario_err(format!("events[{i}].t: {} is outside [0, t_end]", e.t)));
            }
            if e.t < last_t {
                return Err(scenario_err(format!("events[{i}].t: events must be sorted by time")));
            }
            if !e.value.is_finite() {
                return Err(scenario_err(format!("events[{i}].value: must be finite")));
            }
            last_t = e.t;
            events.push(InputEvent {
                t: e.t,
                input,
                value: e.value,
            });
        }

        let n = &file.noise;
        for (name, v) in [("input_std", n.input_std), ("output_std", n.output_std)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(scenario_err(format!("noise.{name}: must be finite and >= 0, got {v}")));
            }
        }
        if n.output_std == 0.0 {
            return Err(scenario_err("noise.output_std: must be > 0 for the measurement update"));
        }

        let q0 = block_diagonal(&model, &file.q_scale, "q_scale")?;
        let p0 = match &file.p0 {
            Some(v) => block_diagonal(&model, v, "p0")?,
            None => Vector::from_element(model.state_dim(), 1e-4),
        };
        let init = match file.init {
            None => InitialState::SteadyState,
            Some(InitFile::Keyword(k)) if k == "steady_state" => InitialState::SteadyState,
            Some(InitFile::Keyword(k)) => {
                return Err(scenario_err(format!(
                    "init: expected \"steady_state\" or a list of {} numbers, got \"{k}\"",
                    model.state_dim()
                )))
            }
            Some(InitFile::States(xs)) => {
                if xs.len() != model.state_dim() || xs.iter().any(|v| !v.is_finite()) {
                    return Err(scenario_err(format!(
                        "init: expected {} finite numbers, got {}",
                        model.state_dim(),
                        xs.len()
                    )));
                }
                InitialState::Explicit(Vector::from_vec(xs))
            }
        };

        Ok(Scenario {
            model,
            t_end: file.t_end,
            truth_dt: file.truth_dt,
            fps: file.fps,
            events,
            noise: MeasurementNoise {
                input_std: n.input_std,
                output_std: n.output_std,
                seed: n.seed,
            },
            q0,
            p0,
            init,
        })
    }

    /// Number of truth steps spanning the horizon.
    pub fn truth_steps(&self) -> usize {
        (self.t_end / self.truth_dt).round() as usize
    }

    /// Truth samples per filter step at `fps`.
    pub fn stride(&self, fps: f64) -> Result<usize> {
        stride_for(fps, self.truth_dt)
    }

    /// Input held at the start (index 0), before any event.
    pub fn initial_input(&self) -> Vector {
        self.model.nominal_input()
    }

    /// Equilibrium at the nominal input, or the explicit start state.
    pub fn initial_state(&self) -> Result<Vector> {
        match &self.init {
            InitialState::Explicit(x) => Ok(x.clone()),
            InitialState::SteadyState => {
                let u = self.initial_input();
                steady_state(&self.model, &u, &self.model.initial_guess(&u))
            }
        }
    }

    /// `Q = h²·diag(q₀)`, `R = σ_z²·I`, `Ψ = σ_u²·I`.
    pub fn noise_spec(&self, h: f64) -> NoiseSpec {
        let m = &self.model;
        let q: Vec<f64> = self.q0.iter().map(|q| h * h * q).collect();
        let s_u = self.noise.input_std.powi(2);
        let s_z = self.noise.output_std.powi(2);
        NoiseSpec {
            q: SpdMatrix::from_diagonal(&q),
            r: SpdMatrix::identity(m.output_dim(), s_z),
            psi: SpdMatrix::identity(m.input_dim(), s_u),
        }
    }

    pub fn initial_estimate(&self) -> Result<StateEstimate> {
        StateEstimate::new(self.initial_state()?, SpdMatrix::from_diagonal(self.p0.as_slice()))
    }
}

/// `1/(fps·dt)` as an integer, or an error when the grids do not nest.
pub fn stride_for(fps: f64, dt: f64) -> Result<usize> {
    let ratio = 1.0 / (fps * dt);
    let k = ratio.round();
    if k < 1.0 || ((ratio - k) / k).abs() > GRID_RATIO_TOL {
        return Err(Error::GridMismatch(format!(
            "1/(fps x truth_dt) = {ratio:.9} is not an integer for fps {fps}"
        )));
    }
    Ok(k as usize)
}
