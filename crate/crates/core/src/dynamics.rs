//! Compartmental models and their Euler–Maruyama integration.
//!
//! Every model is written once against [`Real`], so the same drift code runs
//! on plain floats (simulation, grid search, prediction) and on tape
//! variables (gradients for training and for the Langevin sampler).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Dense, uniformly sampled, multivariate observations.
///
/// Values are stored row-major: row `k` holds every compartment at
/// `times[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    times: Vec<f64>,
    values: Vec<f64>,
    labels: Vec<String>,
}

impl TimeSeries {
    /// Validated constructor: uniform strictly increasing times, non-negative
    /// values, unique labels.
    pub fn new(times: Vec<f64>, values: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        let ts = Self::from_raw(times, values, labels)?;
        if let Some(pos) = ts.values.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::Value {
                row: pos / ts.width(),
                message: format!("density {} is negative or not a number", ts.values[pos]),
            });
        }
        Ok(ts)
    }

    /// Shape and time-axis checks only. Model output may dip below zero and
    /// is reported through [`IntegrationReport`] rather than rejected.
    pub(crate) fn from_raw(times: Vec<f64>, values: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Schema("time series needs at least one label".into()));
        }
        if values.len() != times.len() * labels.len() {
            return Err(Error::Shape {
                expected: times.len() * labels.len(),
                got: values.len(),
            });
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Schema(format!("duplicate label {l}")));
            }
        }
        if times.len() >= 2 {
            let dt = times[1] - times[0];
            if !(dt > 0.0) {
                return Err(Error::Schema("times must be strictly increasing".into()));
            }
            for w in times.windows(2) {
                let d = w[1] - w[0];
                if (d - dt).abs() > 1e-9 * dt.abs().max(w[1].abs()) {
                    return Err(Error::Schema("times are not uniformly spaced".into()));
                }
            }
        }
        Ok(TimeSeries { times, values, labels })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of rows `L`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of compartments `N`.
    pub fn width(&self) -> usize {
        self.labels.len()
    }

    pub fn dt(&self) -> Option<f64> {
        (self.times.len() >= 2).then(|| self.times[1] - self.times[0])
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let n = self.width();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, col: usize) -> f64 {
        self.values[k * self.width() + col]
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.len()).map(|k| self.get(k, col)).collect()
    }

    /// Rows `range`, keeping the original time stamps.
    pub fn slice(&self, start: usize, end: usize) -> Result<TimeSeries> {
        if start >= end || end > self.len() {
            return Err(Error::EmptyWindow);
        }
        let n = self.width();
        TimeSeries::from_raw(
            self.times[start..end].to_vec(),
            self.values[start * n..end * n].to_vec(),
            self.labels.clone(),
        )
    }

    /// Keeps the named columns in the given order.
    pub fn select(&self, labels: &[String]) -> Result<TimeSeries> {
        let idx: Vec<usize> = labels
            .iter()
            .map(|l| {
                self.column_index(l)
                    .ok_or_else(|| Error::Schema(format!("missing column {l}")))
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(self.len() * idx.len());
        for k in 0..self.len() {
            values.extend(idx.iter().map(|&c| self.get(k, c)));
        }
        TimeSeries::from_raw(self.times.clone(), values, labels.to_vec())
    }
}

/// One named, positive model parameter. Piecewise-in-time entries carry one
/// value per segment and the interior breakpoints between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub breakpoints: Vec<f64>,
}

impl Parameter {
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Parameter {
            name: name.into(),
            values: vec![value],
            breakpoints: Vec::new(),
        }
    }

    pub fn piecewise(name: impl Into<String>, values: Vec<f64>, breakpoints: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.len() != breakpoints.len() + 1 {
            return Err(Error::Config(format!(
                "{name}: {} segments need {} breakpoints, got {}",
                values.len(),
                values.len().saturating_sub(1),
                breakpoints.len()
            )));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("{name}: breakpoints must increase")));
        }
        Ok(Parameter {
            name,
            values,
            breakpoints,
        })
    }

    /// Value in force at time `t` (piecewise constant).
    pub fn at(&self, t: f64) -> f64 {
        self.values[segment(&self.breakpoints, t)]
    }
}

fn segment(breakpoints: &[f64], t: f64) -> usize {
    breakpoints.iter().take_while(|&&b| t >= b).count()
}

/// An ordered set of model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub entries: Vec<Parameter>,
}

impl ParameterVector {
    pub fn new(entries: Vec<Parameter>) -> Self {
        ParameterVector { entries }
    }

    /// Scalar entries from `(name, value)` pairs.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        ParameterVector {
            entries: pairs.into_iter().map(|(n, v)| Parameter::scalar(n, v)).collect(),
        }
    }

    /// Every segment value, in entry order.
    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.values.iter().copied()).collect()
    }

    /// Names of the flattened values; piecewise entries get `_0`, `_1`, ...
    pub fn flat_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.entries {
            if e.values.len() == 1 {
                out.push(e.name.clone());
            } else {
                out.extend((0..e.values.len()).map(|i| format!("{}_{i}", e.name)));
            }
        }
        out
    }

    /// Same layout as `self`, new values.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParameterVector> {
        let n: usize = self.entries.iter().map(|e| e.values.len()).sum();
        if flat.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        Ok(ParameterVector {
            entries: self
                .entries
                .iter()
                .map(|e| Parameter {
                    name: e.name.clone(),
                    values: it.by_ref().take(e.values.len()).collect(),
                    breakpoints: e.breakpoints.clone(),
                })
                .collect(),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Every value must be strictly positive.
    pub fn check_positive(&self) -> Result<()> {
        for (index, value) in self.flat().into_iter().enumerate() {
            if !(value > 0.0) {
                return Err(Error::OutOfSupport { index, value });
            }
        }
        Ok(())
    }
}

/// How the exposed compartment drains in the SEIRD+ model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExposedOutflow {
    /// `dE/dt = λ_E S I − λ_I E − λ_Q E`, the form consistent with the
    /// transition diagram (E → I at rate λ_I). Conserves total mass.
    #[default]
    Transition,
    /// `dE/dt = λ_E S I − λ_E I − λ_Q E`: E drains at `λ_E I` instead of `λ_I E`.
    Literal,
}

/// Contact-tracing quarantine rate, fixed for the SEIRD+ model.
pub const QUARANTINE_RATE: f64 = 10.25;

/// Day offsets of the exposure-rate breakpoints from 2020-02-16: Mar 12,
/// Mar 22, May 6 and Jun 15.
pub const BERLIN_BREAKPOINTS: [f64; 4] = [25.0, 35.0, 80.0, 120.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelKind {
    Sir,
    SirPerturbed,
    SeirdPlus {
        breakpoints: [f64; 4],
        outflow: ExposedOutflow,
    },
}

/// An Itô model `dy = f(y; Λ) dt + σ(y; Λ) dW` with diagonal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub states: Vec<String>,
    /// Flat parameter names (piecewise entries expanded).
    pub parameters: Vec<String>,
    pub kind: ModelKind,
}

/// SIR with multiplicative noise on S and I, parameters `(β, τ, σ)`.
pub fn sir_model() -> ModelSpec {
    ModelSpec {
        name: "sir".into(),
        states: names(&["S", "I", "R"]),
        parameters: names(&["beta", "tau", "sigma"]),
        kind: ModelKind::Sir,
    }
}

/// SIR with an extra `1/(1000 + α)` inflow on every compartment; α barely
/// affects the dynamics. Parameters `(β, τ, σ, α)`.
pub fn sir_perturbed_model() -> ModelSpec {
    ModelSpec {
        name: "sir-perturbed".into(),
        states: names(&["S", "I", "R"]),
        parameters: names(&["beta", "tau", "sigma", "alpha"]),
        kind: ModelKind::SirPerturbed,
    }
}

/// The SEIRD+ model with contact tracing and quarantine, exposure rate
/// piecewise constant on five segments.
pub fn seirdplus_model() -> ModelSpec {
    seirdplus_model_with(BERLIN_BREAKPOINTS, ExposedOutflow::default())
}

pub fn seirdplus_model_with(breakpoints: [f64; 4], outflow: ExposedOutflow) -> ModelSpec {
    ModelSpec {
        name: "seirdplus".into(),
        states: names(&[
            "S", "E", "I", "R", "SY", "H", "C", "D", "Q_S", "Q_E", "Q_I", "CT", "lambda_Q",
        ]),
        parameters: names(&[
            "lambda_S",
            "lambda_E_0",
            "lambda_E_1",
            "lambda_E_2",
            "lambda_E_3",
            "lambda_E_4",
            "lambda_I",
            "lambda_R",
            "lambda_SY",
            "lambda_H",
            "lambda_C",
            "lambda_D",
            "lambda_CT",
        ]),
        kind: ModelKind::SeirdPlus { breakpoints, outflow },
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl ModelSpec {
    pub fn from_name(name: &str) -> Result<ModelSpec> {
        match name {
            "sir" => Ok(sir_model()),
            "sir-perturbed" => Ok(sir_perturbed_model()),
            "seirdplus" => Ok(seirdplus_model()),
            other => Err(Error::Config(format!("unknown model {other}"))),
        }
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|s| s == name)
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    /// The parameter vector in structured form, piecewise exposure included.
    pub fn parameter_vector(&self, flat: &[f64]) -> Result<ParameterVector> {
        if flat.len() != self.parameters.len() {
            return Err(Error::Shape {
                expected: self.parameters.len(),
                got: flat.len(),
            });
        }
        match &self.kind {
            ModelKind::SeirdPlus { breakpoints, .. } => {
                let mut entries = vec![Parameter::scalar("lambda_S", flat[0])];
                entries.push(Parameter::piecewise(
                    "lambda_E",
                    flat[1..6].to_vec(),
                    breakpoints.to_vec(),
                )?);
                for (name, &v) in self.parameters[6..].iter().zip(&flat[6..]) {
                    entries.push(Parameter::scalar(name.clone(), v));
                }
                Ok(ParameterVector::new(entries))
            }
            _ => Ok(ParameterVector::new(
                self.parameters
                    .iter()
                    .zip(flat)
                    .map(|(n, &v)| Parameter::scalar(n.clone(), v))
                    .collect(),
            )),
        }
    }

    /// Rates must be strictly positive; the noise level and the perturbation
    /// offset may be zero.
    pub fn check_parameters(&self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameters.len() {
            return Err(Error::Shape {
                expected: self.parameters.len(),
                got: flat.len(),
            });
        }
        for (index, (&value, name)) in flat.iter().zip(&self.parameters).enumerate() {
            let may_vanish = matches!(name.as_str(), "sigma" | "alpha");
            let ok = value.is_finite() && (value > 0.0 || (may_vanish && value == 0.0));
            if !ok {
                return Err(Error::OutOfSupport { index, value });
            }
        }
        Ok(())
    }

    /// Sum of the compartments that the drift moves mass between, for
    /// models that conserve it.
    pub fn conserved_total(&self, y: &[f64]) -> Option<f64> {
        match &self.kind {
            ModelKind::Sir => Some(y.iter().sum()),
            ModelKind::SirPerturbed => None,
            ModelKind::SeirdPlus { outflow, .. } => match outflow {
                ExposedOutflow::Transition => Some(y[..11].iter().sum()),
                ExposedOutflow::Literal => None,
            },
        }
    }

    /// Deterministic rate `f(y; Λ)` at time `t`, written into `out`.
    pub fn drift<T: Real>(&self, y: &[T], p: &[T], t: f64, out: &mut [T]) {
        match &self.kind {
            ModelKind::Sir => sir_drift(y, p, out),
            ModelKind::SirPerturbed => {
                sir_drift(y, p, out);
                let bump = (p[3] + 1000.0).recip();
                for o in out.iter_mut() {
                    *o = *o + bump;
                }
            }
            ModelKind::SeirdPlus { breakpoints, outflow } => seirdplus_drift(y, p, t, breakpoints, *outflow, out),
        }
    }

    /// Diagonal noise amplitude; `out[i]` multiplies the Wiener increment of
    /// compartment `i`. `None` for deterministic models.
    pub fn diffusion<T: Real>(&self, y: &[T], p: &[T], out: &mut [T]) -> bool {
        match &self.kind {
            ModelKind::Sir | ModelKind::SirPerturbed => {
                let s = p[2] * y[1];
                out[0] = -s;
                out[1] = s;
                out[2] = s.constant_like(0.0);
                true
            }
            ModelKind::SeirdPlus { .. } => false,
        }
    }
}

fn sir_drift<T: Real>(y: &[T], p: &[T], out: &mut [T]) {
    let (s, i) = (y[0], y[1]);
    let (beta, tau) = (p[0], p[1]);
    let infection = beta * s * i;
    let recovery = i / tau;
    out[0] = -infection;
    out[1] = infection - recovery;
    out[2] = recovery;
}

fn seirdplus_drift<T: Real>(y: &[T], p: &[T], t: f64, breakpoints: &[f64; 4], outflow: ExposedOutflow, out: &mut [T]) {
    let [s, e, i, _r, sy, h, c, _d, qs, qe, qi, ct, lq] = [
        y[0], y[1], y[2], y[3], y[4], y[5], y[6], y[7], y[8], y[9], y[10], y[11], y[12],
    ];
    let l_s = p[0];
    let l_e = p[1 + segment(breakpoints, t)];
    let [l_i, l_r, l_sy, l_h, l_c, l_d, l_ct] = [p[6], p[7], p[8], p[9], p[10], p[11], p[12]];

    let exposure = l_e * s * i;
    let e_out = match outflow {
        ExposedOutflow::Transition => l_i * e,
        ExposedOutflow::Literal => l_e * i,
    };
    out[0] = l_s * qs - exposure - lq * s;
    out[1] = exposure - e_out - lq * e;
    out[2] = l_i * e - (l_r + l_sy + lq) * i;
    out[3] = l_r * (i + sy + h + c + qi);
    out[4] = l_sy * (qi + i) - (l_r + l_h) * sy;
    out[5] = l_h * sy - (l_r + l_c) * h;
    out[6] = l_c * h - (l_r + l_d) * c;
    out[7] = l_d * c;
    out[8] = lq * s - l_s * qs;
    out[9] = lq * e - l_i * qe;
    out[10] = l_i * qe + lq * i - (l_sy + l_r) * qi;
    out[11] = l_sy * i + (l_ct - lq) * (s + e + i);
    out[12] = l_ct * ct * QUARANTINE_RATE;
}

/// Seeded source of Wiener increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseDriver {
    pub seed: u64,
}

/// Pre-drawn Wiener increments, `steps × dim`, already scaled by `√dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    dim: usize,
    increments: Vec<f64>,
}

impl NoiseDriver {
    pub fn new(seed: u64) -> Self {
        NoiseDriver { seed }
    }

    pub fn draw(&self, steps: usize, dim: usize, dt: f64) -> NoisePath {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = dt.sqrt();
        let increments = (0..steps * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        NoisePath { dim, increments }
    }
}

impl NoisePath {
    pub fn step(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.dim.max(1)
    }
}

/// Run metadata returned next to every trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationReport {
    /// Stochastic steps where a compartment was clipped back to zero.
    pub clip_events: usize,
    /// Deterministic steps that left a compartment negative (not clipped).
    pub negative_excursions: usize,
}

/// A trajectory in arbitrary arithmetic: `(steps + 1) × dim`, row-major.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub dim: usize,
    pub states: Vec<T>,
    pub report: IntegrationReport,
}

impl<T: Real> Trajectory<T> {
    pub fn rows(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> Vec<f64> {
        self.states.iter().map(|v| v.value()).collect()
    }
}

/// Euler–Maruyama in any [`Real`] arithmetic. With `noise` absent (or a
/// model without diffusion) this is forward Euler on the drift.
///
/// `params` must hold every model parameter in flat order; `y0` initial
/// densities. Time starts at 0 and advances by `dt`.
pub fn integrate_generic<T: Real>(
    model: &ModelSpec,
    params: &[T],
    y0: &[f64],
    dt: f64,
    steps: usize,
    noise: Option<&NoisePath>,
) -> Result<Trajectory<T>> {
    let n = model.dim();
    if params.len() != model.parameters.len() {
        return Err(Error::Shape {
            expected: model.parameters.len(),
            got: params.len(),
        });
    }
    if y0.len() != n {
        return Err(Error::Shape {
            expected: n,
            got: y0.len(),
        });
    }
    if !(dt > 0.0) || steps == 0 {
        return Err(Error::Config("integration needs dt > 0 and steps >= 1".into()));
    }
    if y0.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Config("initial state must be non-negative".into()));
    }
    if let Some(path) = noise {
        if path.dim != n || path.steps() < steps {
            return Err(Error::Shape {
                expected: steps * n,
                got: path.increments.len(),
            });
        }
    }
    let anchor = params[0];
    let zero = anchor.constant_like(0.0);
    let mut states: Vec<T> = Vec::with_capacity((steps + 1) * n);
    states.extend(y0.iter().map(|&v| anchor.constant_like(v)));
    let mut f = vec![zero; n];
    let mut g = vec![zero; n];
    let mut report = IntegrationReport::default();
    for k in 0..steps {
        let t = k as f64 * dt;
        let y: Vec<T> = states[k * n..(k + 1) * n].to_vec();
        model.drift(&y, params, t, &mut f);
        let stochastic = match noise {
            Some(_) => model.diffusion(&y, params, &mut g),
            None => false,
        };
        let mut clipped = false;
        let mut negative = false;
        for i in 0..n {
            let mut next = y[i] + f[i] * dt;
            if stochastic {
                let dw = noise.unwrap().step(k)[i];
                if dw != 0.0 {
                    next = next + g[i] * dw;
                }
                if next.value() < 0.0 {
                    next = zero;
                    clipped = true;
                }
            } else if next.value() < 0.0 {
                negative = true;
            }
            if !next.value().is_finite() {
                return Err(Error::BlowUp { step: k + 1 });
            }
            states.push(next);
        }
        report.clip_events += clipped as usize;
        report.negative_excursions += negative as usize;
    }
    Ok(Trajectory { dim: n, states, report })
}

/// Integrates in plain floats and packages the result as a [`TimeSeries`]
/// labelled with the model's state names.
pub fn integrate(
    model: &ModelSpec,
    params: &ParameterVector,
    y0: &[f64],
    dt: f64,
    steps: usize,
    noise: Option<NoiseDriver>,
) -> Result<(TimeSeries, IntegrationReport)> {
    let flat = params.flat();
    model.check_parameters(&flat)?;
    let path = noise.map(|d| d.draw(steps, model.dim(), dt));
    let traj = integrate_generic(model, &flat, y0, dt, steps, path.as_ref())?;
    let times = (0..=steps).map(|k| k as f64 * dt).collect();
    let series = TimeSeries::from_raw(times, traj.states, model.states.clone())?;
    Ok((series, traj.report))
}
