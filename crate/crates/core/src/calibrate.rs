//! Losses, calibration problems and ensembles of neural chains.
//!
//! A chain is one network trained from its own random start. Every forward
//! evaluation it makes is kept as a `(parameters, loss)` record; the pooled
//! records of all chains form a [`PosteriorLog`], from which densities are
//! reconstructed with weights `exp(-loss)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::dynamics::{integrate_generic, ModelSpec, NoiseDriver, NoisePath, TimeSeries};
use crate::error::{Error, Result};
use crate::neural::{normalise_input, pretrain_to, MlpState, NetConfig, PretrainConfig};

/// One observed column as the sum of one or more model states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub label: String,
    pub states: Vec<usize>,
}

/// Maps a model trajectory to the observed columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMap {
    pub observations: Vec<Observation>,
}

impl ObservationMap {
    /// Each listed label is a state of the model, or `Q` for the sum of the
    /// three quarantine compartments.
    pub fn from_labels(model: &ModelSpec, labels: &[String]) -> Result<Self> {
        let observations = labels
            .iter()
            .map(|label| {
                let states = match model.state_index(label) {
                    Some(i) => vec![i],
                    None if label == "Q" => ["Q_S", "Q_E", "Q_I"]
                        .iter()
                        .map(|s| model.state_index(s))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| Error::Schema(format!("model {} has no quarantine", model.name)))?,
                    None => return Err(Error::Schema(format!("model {} has no state {label}", model.name))),
                };
                Ok(Observation {
                    label: label.clone(),
                    states,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ObservationMap { observations })
    }

    pub fn identity(model: &ModelSpec) -> Self {
        ObservationMap {
            observations: model
                .states
                .iter()
                .enumerate()
                .map(|(i, s)| Observation {
                    label: s.clone(),
                    states: vec![i],
                })
                .collect(),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.observations.iter().map(|o| o.label.clone()).collect()
    }

    pub fn width(&self) -> usize {
        self.observations.len()
    }

    /// Aggregates a `rows × dim` state matrix into `rows × width`.
    pub fn observe_rows<T: Real>(&self, states: &[T], dim: usize) -> Vec<T> {
        let rows = states.len() / dim;
        let mut out = Vec::with_capacity(rows * self.width());
        for k in 0..rows {
            let row = &states[k * dim..(k + 1) * dim];
            for o in &self.observations {
                let mut acc = row[o.states[0]];
                for &s in &o.states[1..] {
                    acc = acc + row[s];
                }
                out.push(acc);
            }
        }
        out
    }

    pub fn observe(&self, model_series: &TimeSeries) -> Result<TimeSeries> {
        let values = self.observe_rows(model_series.values(), model_series.width());
        TimeSeries::from_raw(model_series.times().to_vec(), values, self.labels())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Unweighted sum of squared errors.
    #[default]
    Plain,
    /// Each column weighted by the reciprocal of its time integral.
    Weighted,
}

/// Squared-error loss over a subset of observed columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub weights: Vec<f64>,
    pub fit: Vec<bool>,
}

impl LossSpec {
    pub fn plain(width: usize) -> Self {
        LossSpec {
            kind: LossKind::Plain,
            weights: vec![1.0; width],
            fit: vec![true; width],
        }
    }

    /// Builds weights from `observed` for the columns in `fit`.
    pub fn new(kind: LossKind, observed: &TimeSeries, fit: Vec<bool>) -> Result<Self> {
        if fit.len() != observed.width() {
            return Err(Error::Shape {
                expected: observed.width(),
                got: fit.len(),
            });
        }
        if !fit.iter().any(|f| *f) {
            return Err(Error::Config("loss must fit at least one column".into()));
        }
        let weights = match kind {
            LossKind::Plain => vec![1.0; fit.len()],
            LossKind::Weighted => loss_weights(observed, &fit)?,
        };
        Ok(LossSpec { kind, weights, fit })
    }

    fn check(&self, width: usize) -> Result<()> {
        if self.weights.len() != width || self.fit.len() != width {
            return Err(Error::Shape {
                expected: width,
                got: self.weights.len().min(self.fit.len()),
            });
        }
        Ok(())
    }

    /// Loss of a predicted `rows × width` matrix in any arithmetic.
    pub fn evaluate<T: Real>(&self, predicted: &[T], observed: &TimeSeries) -> T {
        let width = observed.width();
        let obs = observed.values();
        let mut acc = predicted[0].constant_like(0.0);
        for (idx, (&p, &o)) in predicted.iter().zip(obs).enumerate() {
            let c = idx % width;
            if self.fit[c] {
                let d = p - o;
                acc = acc + d * d * self.weights[c];
            }
        }
        acc
    }
}

/// `1 / ∫ T_i dt` by the trapezoid rule for every fitted column; zero for the
/// others.
pub fn loss_weights(observed: &TimeSeries, fit: &[bool]) -> Result<Vec<f64>> {
    let dt = observed.dt().ok_or(Error::EmptyWindow)?;
    (0..observed.width())
        .map(|c| {
            if !fit[c] {
                return Ok(0.0);
            }
            let col = observed.column(c);
            let integral = dt * (col.iter().sum::<f64>() - 0.5 * (col[0] + col[col.len() - 1]));
            if integral > 0.0 && integral.is_finite() {
                Ok(1.0 / integral)
            } else {
                Err(Error::DegenerateWeight(observed.labels()[c].clone()))
            }
        })
        .collect()
}

/// Loss between two aligned series with the same labels.
pub fn compute_loss(spec: &LossSpec, predicted: &TimeSeries, observed: &TimeSeries) -> Result<f64> {
    if predicted.labels() != observed.labels() {
        return Err(Error::Schema("predicted and observed columns differ".into()));
    }
    if predicted.len() != observed.len() {
        return Err(Error::Shape {
            expected: observed.len(),
            got: predicted.len(),
        });
    }
    spec.check(observed.width())?;
    Ok(spec.evaluate(predicted.values(), observed))
}

/// Everything needed to evaluate the loss as a function of the free
/// parameters.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub model: ModelSpec,
    /// Observed training window; columns follow `observation`.
    pub observed: TimeSeries,
    pub observation: ObservationMap,
    pub loss: LossSpec,
    pub initial_state: Vec<f64>,
    /// Indices of the learned parameters in the model's flat layout.
    pub free: Vec<usize>,
    /// Values for every model parameter; free entries are overwritten.
    pub fixed: Vec<f64>,
    /// Sampling box for starting points, one range per free parameter.
    pub init_box: Vec<(f64, f64)>,
    /// Typical magnitude of each free parameter, used to scale network
    /// outputs.
    pub scale: Vec<f64>,
    /// Wiener path applied in the forward model; `None` compares data with
    /// the noiseless trajectory.
    pub forward_noise: Option<NoisePath>,
}

impl CalibrationProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: ModelSpec,
        observed: TimeSeries,
        observation: ObservationMap,
        loss: LossSpec,
        initial_state: Vec<f64>,
        free: Vec<usize>,
        fixed: Vec<f64>,
        init_box: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if observed.len() < 2 {
            return Err(Error::EmptyWindow);
        }
        if observation.labels() != observed.labels() {
            return Err(Error::Schema(
                "observed columns do not match the observation map".into(),
            ));
        }
        loss.check(observed.width())?;
        if fixed.len() != model.parameters.len() {
            return Err(Error::Shape {
                expected: model.parameters.len(),
                got: fixed.len(),
            });
        }
        if initial_state.len() != model.dim() {
            return Err(Error::Shape {
                expected: model.dim(),
                got: initial_state.len(),
            });
        }
        if free.is_empty() || free.iter().any(|&i| i >= fixed.len()) {
            return Err(Error::Config("free parameter indices out of range".into()));
        }
        if init_box.len() != free.len() || init_box.iter().any(|(a, b)| !(a < b)) {
            return Err(Error::Config(
                "need one increasing init range per free parameter".into(),
            ));
        }
        let scale = vec![1.0; free.len()];
        Ok(CalibrationProblem {
            model,
            observed,
            observation,
            loss,
            initial_state,
            free,
            fixed,
            init_box,
            scale,
            forward_noise: None,
        })
    }

    pub fn with_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.free.len() || scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("need one positive scale per free parameter".into()));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn with_forward_noise(mut self, driver: Option<NoiseDriver>) -> Self {
        let (steps, dim, dt) = (self.steps(), self.model.dim(), self.dt());
        self.forward_noise = driver.map(|d| d.draw(steps, dim, dt));
        self
    }

    pub fn steps(&self) -> usize {
        self.observed.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.observed.dt().expect("window has two rows")
    }

    pub fn dim(&self) -> usize {
        self.free.len()
    }

    pub fn free_names(&self) -> Vec<String> {
        self.free.iter().map(|&i| self.model.parameters[i].clone()).collect()
    }

    /// Full flat parameter vector with the free entries filled in.
    pub fn full_parameters<T: Real>(&self, free: &[T]) -> Vec<T> {
        let anchor = free[0];
        let mut full: Vec<T> = self.fixed.iter().map(|&v| anchor.constant_like(v)).collect();
        for (&i, &v) in self.free.iter().zip(free) {
            full[i] = v;
        }
        full
    }

    fn check_free(&self, free_len: usize) -> Result<()> {
        if free_len != self.free.len() {
            return Err(Error::Shape {
                expected: self.free.len(),
                got: free_len,
            });
        }
        Ok(())
    }

    /// Loss in any arithmetic.
    pub fn loss_generic<T: Real>(&self, free: &[T]) -> Result<T> {
        self.check_free(free.len())?;
        let full = self.full_parameters(free);
        let traj = integrate_generic(
            &self.model,
            &full,
            &self.initial_state,
            self.dt(),
            self.steps(),
            self.forward_noise.as_ref(),
        )?;
        let predicted = self.observation.observe_rows(&traj.states, traj.dim);
        let loss = self.loss.evaluate(&predicted, &self.observed);
        if !loss.value().is_finite() {
            return Err(Error::BlowUp { step: self.steps() });
        }
        Ok(loss)
    }

    pub fn loss(&self, free: &[f64]) -> Result<f64> {
        self.loss_generic(free)
    }

    pub fn loss_and_gradient(&self, free: &[f64]) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = free
            .iter()
            .map(|&v| tape.lift(v))
            .collect::<std::result::Result<_, _>>()?;
        let loss = self.loss_generic(&vars)?;
        let grads = tape.backward(loss)?;
        Ok((loss.value(), vars.iter().map(|&v| grads.wrt(v)).collect()))
    }

    /// Observed columns predicted over `steps` steps from the initial state.
    pub fn predict_observed(&self, free: &[f64], steps: usize) -> Result<TimeSeries> {
        self.check_free(free.len())?;
        let full = self.full_parameters(free);
        let traj = integrate_generic(&self.model, &full, &self.initial_state, self.dt(), steps, None)?;
        let t0 = self.observed.times()[0];
        let times = (0..=steps).map(|k| t0 + k as f64 * self.dt()).collect();
        TimeSeries::from_raw(
            times,
            self.observation.observe_rows(&traj.states, traj.dim),
            self.observation.labels(),
        )
    }

    /// Network input: the fitted columns, normalised by their maxima.
    pub fn network_input(&self) -> Result<Vec<f64>> {
        let labels: Vec<String> = self
            .observed
            .labels()
            .iter()
            .zip(&self.loss.fit)
            .filter(|(_, f)| **f)
            .map(|(l, _)| l.clone())
            .collect();
        Ok(normalise_input(&self.observed.select(&labels)?))
    }
}

/// One pooled evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub chain: usize,
    pub epoch: usize,
    pub params: Vec<f64>,
    pub loss: f64,
}

impl LogRecord {
    pub fn likelihood(&self) -> f64 {
        (-self.loss).exp()
    }
}

/// All `(parameters, loss)` evaluations of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PosteriorLog {
    pub names: Vec<String>,
    pub records: Vec<LogRecord>,
}

impl PosteriorLog {
    pub fn new(names: Vec<String>) -> Self {
        PosteriorLog {
            names,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn column(&self, index: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.params[index]).collect()
    }

    pub fn best(&self) -> Option<&LogRecord> {
        self.records
            .iter()
            .filter(|r| r.loss.is_finite())
            .min_by(|a, b| a.loss.total_cmp(&b.loss))
    }

    /// Columns `chain, epoch, <names>, loss, likelihood`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["chain".to_string(), "epoch".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("loss".into());
        header.push("likelihood".into());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.chain.to_string(), r.epoch.to_string()];
            row.extend(r.params.iter().map(|v| v.to_string()));
            row.push(r.loss.to_string());
            row.push(r.likelihood().to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
        if header.len() < 5 || header[0] != "chain" || header[1] != "epoch" || header[header.len() - 2] != "loss" {
            return Err(Error::Schema(format!("{} is not a posterior log", path.display())));
        }
        let names = header[2..header.len() - 2].to_vec();
        let mut log = PosteriorLog::new(names);
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Value {
                        row: row + 1,
                        message: format!("column {} is not a number", header[i]),
                    })
            };
            let n = header.len();
            log.records.push(LogRecord {
                chain: field(0)? as usize,
                epoch: field(1)? as usize,
                params: (2..n - 2).map(field).collect::<Result<_>>()?,
                loss: field(n - 2)?,
            });
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pretrain: PretrainConfig,
    /// Stop when the loss improved by less than `plateau_tolerance` (relative)
    /// over this many epochs. Zero disables the check.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            pretrain: PretrainConfig::default(),
            plateau_window: 20,
            plateau_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    EpochCap,
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub chain: usize,
    pub seed: u64,
    pub start: Vec<f64>,
    pub pretrain_residual: f64,
    pub termination: Termination,
    pub losses: Vec<f64>,
    pub best_loss: f64,
    pub best_params: Vec<f64>,
    pub network: MlpState,
}

/// Mixes a master seed and a chain index into an independent chain seed.
pub fn chain_seed(master: u64, chain: usize) -> u64 {
    let mut z = master ^ (chain as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn plateaued(losses: &[f64], window: usize, tolerance: f64) -> bool {
    if window == 0 || losses.len() <= window {
        return false;
    }
    let e = losses.len() - 1;
    let reference = losses[e - window];
    let best = losses[e - window + 1..].iter().copied().fold(f64::INFINITY, f64::min);
    reference - best <= tolerance * reference.abs()
}

/// Pretrains a fresh network towards a random start inside the init box,
/// then trains it on the calibration loss. Every epoch's forward evaluation
/// is returned as a log record.
pub fn train_chain(
    problem: &CalibrationProblem,
    net: &NetConfig,
    train: &TrainConfig,
    chain: usize,
    seed: u64,
) -> Result<(ChainResult, Vec<LogRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start: Vec<f64> = problem.init_box.iter().map(|&(a, b)| rng.random_range(a..b)).collect();
    let cfg = NetConfig {
        seed: rng.random(),
        ..net.clone()
    };
    let input = problem.network_input()?;
    let mut mlp = MlpState::new(&cfg, input.len(), problem.dim())?.with_output_scale(problem.scale.clone())?;
    let pretrain_residual = pretrain_to(&mut mlp, &input, &start, &train.pretrain)?;

    let diverged = |epoch: usize| Error::DivergedGradient {
        chain: Some(chain),
        epoch: Some(epoch),
    };
    let mut records = Vec::with_capacity(train.epochs);
    let mut losses = Vec::with_capacity(train.epochs);
    let mut best = (f64::INFINITY, start.clone());
    let mut termination = Termination::EpochCap;
    for epoch in 0..train.epochs {
        let mut params = Vec::new();
        let (loss, grads) = mlp
            .gradient(&input, |_, out| {
                params = out.iter().map(|v| v.value()).collect();
                problem.loss_generic(out)
            })
            .map_err(|_| diverged(epoch))?;
        if loss < best.0 {
            best = (loss, params.clone());
        }
        records.push(LogRecord {
            chain,
            epoch,
            params,
            loss,
        });
        losses.push(loss);
        if plateaued(&losses, train.plateau_window, train.plateau_tolerance) {
            termination = Termination::Plateau;
            break;
        }
        mlp.adam_step(&grads, net.learning_rate).map_err(|_| diverged(epoch))?;
    }
    Ok((
        ChainResult {
            chain,
            seed,
            start,
            pretrain_residual,
            termination,
            losses,
            best_loss: best.0,
            best_params: best.1,
            network: mlp,
        },
        records,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainFailure {
    pub chain: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub log: PosteriorLog,
    pub chains: Vec<ChainResult>,
    pub failures: Vec<ChainFailure>,
}

impl Ensemble {
    pub fn best_chain(&self) -> Option<&ChainResult> {
        self.chains.iter().min_by(|a, b| a.best_loss.total_cmp(&b.best_loss))
    }
}

/// Trains `chains` independent chains on `workers` threads. The result does
/// not depend on the number of workers.
pub fn run_ensemble(
    problem: &CalibrationProblem,
    net: &NetConfig,
    train: &TrainConfig,
    chains: usize,
    workers: usize,
    master_seed: u64,
) -> Result<Ensemble> {
    if chains == 0 {
        return Err(Error::Config("ensemble needs at least one chain".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outcomes: Vec<Result<(ChainResult, Vec<LogRecord>)>> = pool.install(|| {
        (0..chains)
            .into_par_iter()
            .map(|c| train_chain(problem, net, train, c, chain_seed(master_seed, c)))
            .collect()
    });
    let mut log = PosteriorLog::new(problem.free_names());
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (chain, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((result, records)) => {
                log.records.extend(records);
                results.push(result);
            }
            Err(e) => failures.push(ChainFailure {
                chain,
                message: e.to_string(),
            }),
        }
    }
    if results.is_empty() {
        return Err(Error::EnsembleFailed { chains });
    }
    Ok(Ensemble {
        log,
        chains: results,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate, sir_model, ParameterVector};

    fn sir_problem(noise: Option<u64>) -> CalibrationProblem {
        let model = sir_model();
        let truth = ParameterVector::from_pairs([("beta", 0.2), ("tau", 14.0), ("sigma", 0.1)]);
        let y0 = vec![0.99, 0.01, 0.0];
        let (data, _) = integrate(&model, &truth, &y0, 1.0, 100, noise.map(NoiseDriver::new)).unwrap();
        let obs = ObservationMap::identity(&model);
        CalibrationProblem::new(
            model,
            data,
            obs,
            LossSpec::plain(3),
            y0,
            vec![0, 1],
            vec![0.0, 0.0, 0.0],
            vec![(0.0, 1.0), (1.0, 30.0)],
        )
        .unwrap()
    }

    fn series(values: Vec<f64>, labels: &[&str]) -> TimeSeries {
        let n = values.len() / labels.len();
        TimeSeries::new(
            (0..n).map(|k| k as f64).collect(),
            values,
            labels.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_series_have_zero_loss() {
        let a = series(vec![0.9, 0.1, 0.8, 0.2, 0.7, 0.3], &["S", "I"]);
        assert_eq!(compute_loss(&LossSpec::plain(2), &a, &a).unwrap(), 0.0);
        let w = LossSpec::new(LossKind::Weighted, &a, vec![true, true]).unwrap();
        assert_eq!(compute_loss(&w, &a, &a).unwrap(), 0.0);
    }

    #[test]
    fn plain_loss_is_sum_of_squares() {
        let obs = series(vec![1.0, 0.0, 1.0, 0.0], &["S", "I"]);
        let pred = series(vec![0.5, 0.25, 1.0, 0.5], &["S", "I"]);
        let want = 0.25 + 0.0625 + 0.0 + 0.25;
        assert!((compute_loss(&LossSpec::plain(2), &pred, &obs).unwrap() - want).abs() < 1e-15);
        let masked = LossSpec::new(LossKind::Plain, &obs, vec![true, false]).unwrap();
        assert!((compute_loss(&masked, &pred, &obs).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn weights_are_reciprocal_trapezoid_integrals() {
        let obs = series(vec![1.0, 0.0, 3.0, 2.0, 1.0, 0.0], &["A", "B"]);
        let w = loss_weights(&obs, &[true, true]).unwrap();
        assert!((w[0] - 1.0 / 4.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 2.0).abs() < 1e-15);
        let zero = series(vec![1.0, 0.0, 1.0, 0.0], &["A", "B"]);
        assert!(matches!(loss_weights(&zero, &[true, true]), Err(Error::DegenerateWeight(l)) if l == "B"));
        assert_eq!(loss_weights(&zero, &[true, false]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn weighted_loss_is_scale_invariant_per_column() {
        let obs = series(vec![1.0, 0.001, 2.0, 0.002, 1.5, 0.0015], &["A", "B"]);
        let pred = series(vec![1.1, 0.0011, 2.2, 0.0022, 1.65, 0.00165], &["A", "B"]);
        let spec = LossSpec::new(LossKind::Weighted, &obs, vec![true, true]).unwrap();
        let j = compute_loss(&spec, &pred, &obs).unwrap();
        let only_a = LossSpec::new(LossKind::Weighted, &obs, vec![true, false]).unwrap();
        let ja = compute_loss(&only_a, &pred, &obs).unwrap();
        // each column contributes (0.1)^2 * Σ T_i^2 / ∫T_i, so B is 1000x smaller
        assert!(((j - ja) * 1000.0 - ja).abs() < 1e-12);
    }

    #[test]
    fn loss_shape_errors() {
        let a = series(vec![1.0, 0.0, 1.0, 0.0], &["S", "I"]);
        let b = series(vec![1.0, 0.0, 1.0, 0.0], &["S", "R"]);
        let c = series(vec![1.0, 0.0], &["S", "I"]);
        assert!(compute_loss(&LossSpec::plain(2), &a, &b).is_err());
        assert!(compute_loss(&LossSpec::plain(2), &c, &a).is_err());
        assert!(compute_loss(&LossSpec::plain(3), &a, &a).is_err());
    }

    #[test]
    fn quarantine_columns_are_summed() {
        let model = crate::dynamics::seirdplus_model();
        let map = ObservationMap::from_labels(&model, &["S".into(), "Q".into()]).unwrap();
        let mut row = vec![0.0; 13];
        row[0] = 0.5;
        row[8] = 0.1;
        row[9] = 0.02;
        row[10] = 0.003;
        let out = map.observe_rows(&row, 13);
        assert_eq!(out[0], 0.5);
        assert!((out[1] - 0.123).abs() < 1e-15);
        assert!(ObservationMap::from_labels(&sir_model(), &["Q".into()]).is_err());
    }

    #[test]
    fn truth_has_zero_noiseless_loss_and_matching_gradient() {
        let p = sir_problem(None);
        assert!(p.loss(&[0.2, 14.0]).unwrap() < 1e-28);
        let (j, g) = p.loss_and_gradient(&[0.25, 12.0]).unwrap();
        assert!((j - p.loss(&[0.25, 12.0]).unwrap()).abs() < 1e-15);
        let h = 1e-6;
        let fd0 = (p.loss(&[0.25 + h, 12.0]).unwrap() - p.loss(&[0.25 - h, 12.0]).unwrap()) / (2.0 * h);
        let fd1 = (p.loss(&[0.25, 12.0 + h]).unwrap() - p.loss(&[0.25, 12.0 - h]).unwrap()) / (2.0 * h);
        assert!((g[0] - fd0).abs() < 1e-6 * fd0.abs());
        assert!((g[1] - fd1).abs() < 1e-6 * fd1.abs());
    }

    #[test]
    fn invalid_parameters_fail_cleanly() {
        let p = sir_problem(None);
        assert!(p.loss(&[0.2, 0.0]).is_err());
        assert!(p.loss_and_gradient(&[0.2, 0.0]).is_err());
        assert!(p.loss(&[0.2]).is_err());
    }

    #[test]
    fn chain_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|c| chain_seed(7, c)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(chain_seed(7, 0), chain_seed(8, 0));
    }

    #[test]
    fn plateau_detection() {
        let flat = vec![1.0; 25];
        assert!(plateaued(&flat, 20, 1e-12));
        assert!(!plateaued(&flat[..20], 20, 1e-12));
        let falling: Vec<f64> = (0..25).map(|k| 1.0 / (k as f64 + 1.0)).collect();
        assert!(!plateaued(&falling, 20, 1e-12));
        assert!(!plateaued(&flat, 0, 1e-12));
    }

    #[test]
    fn frozen_network_stops_on_plateau() {
        let p = sir_problem(Some(0));
        let net = NetConfig {
            learning_rate: 1e-300,
            ..NetConfig::default()
        };
        let train = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        let (res, records) = train_chain(&p, &net, &train, 0, 5).unwrap();
        assert_eq!(res.termination, Termination::Plateau);
        assert_eq!(records.len(), 21);
        assert!(res.pretrain_residual <= 1e-3);
    }

    #[test]
    fn records_are_consistent() {
        let p = sir_problem(Some(0));
        let train = TrainConfig {
            epochs: 15,
            ..TrainConfig::default()
        };
        let (res, records) = train_chain(&p, &NetConfig::default(), &train, 3, 11).unwrap();
        assert_eq!(records.len(), 15);
        for (e, r) in records.iter().enumerate() {
            assert_eq!((r.chain, r.epoch), (3, e));
            assert!(r.loss.is_finite() && r.loss >= 0.0);
            assert!((r.loss - p.loss(&r.params).unwrap()).abs() <= 1e-12 * r.loss.max(1.0));
            assert!(r.likelihood() > 0.0 && r.likelihood() <= 1.0);
        }
        let start_dist: f64 = records[0]
            .params
            .iter()
            .zip(&res.start)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(start_dist <= 1e-3);
    }

    #[test]
    fn ensemble_is_independent_of_worker_count() {
        let p = sir_problem(Some(0));
        let train = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = run_ensemble(&p, &NetConfig::default(), &train, 4, 1, 42).unwrap();
        let b = run_ensemble(&p, &NetConfig::default(), &train, 4, 3, 42).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 20);
        let c = run_ensemble(&p, &NetConfig::default(), &train, 4, 1, 43).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn posterior_log_csv_round_trip() {
        let mut log = PosteriorLog::new(vec!["beta".into(), "tau".into()]);
        log.records.push(LogRecord {
            chain: 0,
            epoch: 0,
            params: vec![0.1 + 0.2, 14.000000000000002],
            loss: 0.5281234567890123,
        });
        log.records.push(LogRecord {
            chain: 1,
            epoch: 7,
            params: vec![1e-7, 3.0],
            loss: 800.0,
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("chain,epoch,beta,tau,loss,likelihood"));
        assert_eq!(PosteriorLog::read_csv(&path).unwrap(), log);
    }
}
