//! A small fully connected network that maps an observed epidemic to model
//! parameters, trained with Adam through the tape.
//!
//! The output layer applies `abs` so every parameter estimate is
//! non-negative, then multiplies by a fixed per-output scale. The scale lets
//! one network emit rates that differ by orders of magnitude while its raw
//! outputs stay of order one.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::dynamics::TimeSeries;
use crate::error::{Error, Result};

/// Tag written into weight snapshots and checked on load.
pub const SNAPSHOT_FORMAT: &str = "epical-mlp/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn apply_var(self, x: Var<'_>) -> Var<'_> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_layers: 2,
            width: 20,
            activation: Activation::Tanh,
            learning_rate: 0.002,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.width == 0 {
            return Err(Error::Config(
                "network needs at least one non-empty hidden layer".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Weights, biases and optimiser state of one network.
///
/// Parameters are stored flat, layer by layer: the `out × in` weight matrix
/// row-major, then the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpState {
    pub format: String,
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
    pub output_scale: Vec<f64>,
    pub adam: AdamState,
}

/// Per-compartment max normalisation, flattened time-major.
pub fn normalise_input(series: &TimeSeries) -> Vec<f64> {
    let n = series.width();
    let mut max = vec![0.0f64; n];
    for k in 0..series.len() {
        for (c, m) in max.iter_mut().enumerate() {
            *m = m.max(series.get(k, c));
        }
    }
    let mut out = Vec::with_capacity(series.values().len());
    for k in 0..series.len() {
        for (c, &m) in max.iter().enumerate() {
            out.push(if m > 0.0 { series.get(k, c) / m } else { 0.0 });
        }
    }
    out
}

impl MlpState {
    /// Uniform `±1/√fan_in` initialisation of weights and biases.
    pub fn new(config: &NetConfig, inputs: usize, outputs: usize) -> Result<Self> {
        config.validate()?;
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config("network needs inputs and outputs".into()));
        }
        let mut sizes = vec![inputs];
        sizes.extend(std::iter::repeat_n(config.width, config.hidden_layers));
        sizes.push(outputs);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1] + w[1]).map(|_| rng.random_range(-bound..bound)));
        }
        let n = params.len();
        Ok(MlpState {
            format: SNAPSHOT_FORMAT.into(),
            sizes,
            activation: config.activation,
            params,
            output_scale: vec![1.0; outputs],
            adam: AdamState::new(n),
        })
    }

    pub fn with_output_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.outputs() {
            return Err(Error::Shape {
                expected: self.outputs(),
                got: scale.len(),
            });
        }
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("output scale must be positive".into()));
        }
        self.output_scale = scale;
        Ok(self)
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.inputs() {
            return Err(Error::Shape {
                expected: self.inputs(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        let mut offset = 0;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            h = (0..n_out)
                .map(|j| {
                    let z = biases[j]
                        + weights[j * n_in..(j + 1) * n_in]
                            .iter()
                            .zip(&h)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    if l + 1 < layers {
                        self.activation.apply(z)
                    } else {
                        z.abs()
                    }
                })
                .collect();
        }
        Ok(h.iter().zip(&self.output_scale).map(|(o, s)| o * s).collect())
    }

    /// Records the forward pass on `tape`. Returns the weight leaves, in
    /// `params` order, and the outputs.
    pub fn forward_tape<'t>(&self, tape: &'t Tape, x: &[f64]) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
        self.check_input(x)?;
        let leaves: Vec<Var<'t>> = self
            .params
            .iter()
            .map(|&p| tape.lift(p))
            .collect::<std::result::Result<_, _>>()?;
        let layers = self.sizes.len() - 1;
        let mut offset = 0;
        let mut h: Vec<Var<'t>> = Vec::new();
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &leaves[offset..offset + n_in * n_out];
            let biases = &leaves[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            h = (0..n_out)
                .map(|j| {
                    let row = &weights[j * n_in..(j + 1) * n_in];
                    let z = if l == 0 {
                        tape.affine_const(row, x, biases[j])
                    } else {
                        tape.affine(row, &h, biases[j])
                    };
                    if l + 1 < layers {
                        self.activation.apply_var(z)
                    } else {
                        z.abs()
                    }
                })
                .collect();
        }
        let out = h
            .into_iter()
            .zip(&self.output_scale)
            .map(|(o, &s)| if s == 1.0 { o } else { o * s })
            .collect();
        Ok((leaves, out))
    }

    /// One Adam update. A non-finite gradient leaves the weights untouched.
    pub fn adam_step(&mut self, grads: &[f64], learning_rate: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedGradient {
                chain: None,
                epoch: None,
            });
        }
        let a = &mut self.adam;
        a.step += 1;
        let c1 = 1.0 - a.beta1.powi(a.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - a.beta2.powi(a.step.min(i32::MAX as u64) as i32);
        for (i, &g) in grads.iter().enumerate() {
            a.m[i] = a.beta1 * a.m[i] + (1.0 - a.beta1) * g;
            a.v[i] = a.beta2 * a.v[i] + (1.0 - a.beta2) * g * g;
            let m_hat = a.m[i] / c1;
            let v_hat = a.v[i] / c2;
            self.params[i] -= learning_rate * m_hat / (v_hat.sqrt() + a.eps);
        }
        Ok(())
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::new(self.params.len());
    }

    /// Gradient of `loss(outputs)` with respect to the weights.
    pub fn gradient<F>(&self, x: &[f64], loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let tape = Tape::with_capacity(self.params.len() * 2);
        let (leaves, out) = self.forward_tape(&tape, x)?;
        let root = loss(&tape, &out)?;
        let grads = tape.backward(root)?;
        Ok((root.value(), leaves.iter().map(|&l| grads.wrt(l)).collect()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(SNAPSHOT_FORMAT) => {}
            Some(other) => return Err(Error::Schema(format!("unsupported snapshot format {other}"))),
            None => return Err(Error::Schema("snapshot has no format tag".into())),
        }
        let state: MlpState = serde_json::from_value(value)?;
        let expected: usize = state.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if state.sizes.len() < 2
            || state.params.len() != expected
            || state.output_scale.len() != state.outputs()
            || state.adam.m.len() != expected
            || state.adam.v.len() != expected
        {
            return Err(Error::Schema("snapshot dimensions are inconsistent".into()));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Settings for fitting the network output to a fixed target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub learning_rate: f64,
    /// Iterations without a new best residual before the rate is halved.
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            tolerance: 1e-3,
            max_iterations: 10_000,
            learning_rate: 0.01,
            patience: 50,
        }
    }
}

/// Fits the network output on `input` to `target` by minimising the
/// Euclidean distance, measured in units of the output scale. Returns the
/// final residual. The optimiser state is reset afterwards.
pub fn pretrain_to(net: &mut MlpState, input: &[f64], target: &[f64], config: &PretrainConfig) -> Result<f64> {
    if target.len() != net.outputs() {
        return Err(Error::Shape {
            expected: net.outputs(),
            got: target.len(),
        });
    }
    let scaled: Vec<f64> = target.iter().zip(&net.output_scale).map(|(t, s)| t / s).collect();
    let scale = net.output_scale.clone();
    let residual_of = |out: &[f64]| -> f64 {
        out.iter()
            .zip(&scaled)
            .zip(&scale)
            .map(|((o, t), s)| (o / s - t).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut lr = config.learning_rate;
    let mut best = f64::INFINITY;
    let mut best_params = net.params.clone();
    let mut since_best = 0;
    for _ in 0..config.max_iterations {
        let (residual, grads) = net.gradient(input, |_, out| {
            let mut sq = None;
            for ((&o, &t), &s) in out.iter().zip(&scaled).zip(&scale) {
                let d = o / s - t;
                let term = d * d;
                sq = Some(match sq {
                    None => term,
                    Some(acc) => acc + term,
                });
            }
            Ok(sq.expect("network has outputs").sqrt())
        })?;
        if residual < best {
            best = residual;
            best_params.clone_from(&net.params);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if residual <= config.tolerance {
            break;
        }
        if since_best >= config.patience {
            lr *= 0.5;
            since_best = 0;
            net.params.clone_from(&best_params);
        }
        net.adam_step(&grads, lr)?;
    }
    let final_out = net.forward(input)?;
    let mut residual = residual_of(&final_out);
    if best < residual {
        net.params = best_params;
        residual = best;
    }
    net.reset_optimizer();
    if residual > config.tolerance {
        return Err(Error::PretrainFailed { residual });
    }
    Ok(residual)
}
