//! Run configuration, compartment datasets and the artifact directory
//! written by a calibration run.
//!
//! A run is described by a versioned TOML file ([`RunConfig`]). Data either
//! come from a CSV file of daily counts ([`ingest_csv`]) or are generated
//! from a model ([`synth_generate`]). [`run`] calibrates, builds marginals
//! and prediction ensembles, and writes everything as CSV/JSON next to a
//! `summary.json` whose numbers can all be recomputed from the other files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibrate::{
    chain_seed, run_ensemble, CalibrationProblem, LogRecord, LossKind, LossSpec, ObservationMap, PosteriorLog,
    TrainConfig,
};
use crate::dynamics::{integrate, seirdplus_model_with, ExposedOutflow, ModelKind, ModelSpec, NoiseDriver, TimeSeries};
use crate::error::{Error, Result};
use crate::mcmc::{gelman_rubin_curve, run_mala, MalaConfig, McmcTrace};
use crate::neural::{Activation, NetConfig, PretrainConfig};
use crate::posterior::{
    grid_search, hellinger, joint_marginals_from_log, kde, linspace, marginal_from_log, predict, residual,
    select_draws, Density1D, DrawWeighting, PredictionEnsemble, Prior,
};

pub const CONFIG_VERSION: u32 = 1;

/// Compartments a dataset may carry. `Q` is the total of the quarantined
/// compartments.
pub const KNOWN_COMPARTMENTS: [&str; 8] = ["S", "E", "I", "R", "SY", "H", "C", "Q"];

/// Start of the Berlin data and the dates at which the exposure rate
/// changes, ending with the last day of the data.
pub const BERLIN_DATES: [&str; 6] = [
    "2020-02-16",
    "2020-03-12",
    "2020-03-22",
    "2020-05-06",
    "2020-06-15",
    "2020-10-27",
];

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Config(format!("bad date {s:?}: {e}")))
}

/// Exposure-rate breakpoints in days since `start` for the given change
/// dates.
pub fn breakpoints_from_dates(start: NaiveDate, dates: &[String]) -> Result<[f64; 4]> {
    if dates.len() != 4 {
        return Err(Error::Config(format!(
            "need 4 exposure change dates, got {}",
            dates.len()
        )));
    }
    let mut out = [0.0; 4];
    for (slot, d) in out.iter_mut().zip(dates) {
        *slot = (parse_date(d)? - start).num_days() as f64;
    }
    if out[0] <= 0.0 || out.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "exposure change dates must increase and follow the data start".into(),
        ));
    }
    Ok(out)
}

fn berlin_change_dates() -> Vec<String> {
    BERLIN_DATES[1..5].iter().map(|s| s.to_string()).collect()
}

/// Compartments a model can be observed through, in dataset order.
pub fn observable_compartments(model: &ModelSpec) -> Vec<String> {
    match model.kind {
        ModelKind::SeirdPlus { .. } => KNOWN_COMPARTMENTS.iter().map(|s| s.to_string()).collect(),
        _ => model.states.clone(),
    }
}

/// A parameter value in a config file: a number, or one number per segment
/// for piecewise parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    Segments(Vec<f64>),
}

/// Looks up every flat model parameter in `values`. Piecewise parameters
/// may be given as a list under their base name (`lambda_E = [..]`) or one
/// by one (`lambda_E_0 = ..`).
pub fn flat_parameters(model: &ModelSpec, values: &BTreeMap<String, ParamValue>) -> Result<Vec<Option<f64>>> {
    for key in values.keys() {
        let known = model
            .parameters
            .iter()
            .any(|p| p == key || split_segment(p).is_some_and(|(b, _)| b == key));
        if !known {
            return Err(Error::Config(format!("model {} has no parameter {key}", model.name)));
        }
    }
    model
        .parameters
        .iter()
        .map(|name| {
            if let Some(v) = values.get(name) {
                return match v {
                    ParamValue::Scalar(x) => Ok(Some(*x)),
                    ParamValue::Segments(_) => Err(Error::Config(format!("{name} takes a single value"))),
                };
            }
            if let Some((base, i)) = split_segment(name) {
                if let Some(v) = values.get(base) {
                    return match v {
                        ParamValue::Segments(s) => s
                            .get(i)
                            .copied()
                            .map(Some)
                            .ok_or_else(|| Error::Config(format!("{base} is missing segment {i}"))),
                        ParamValue::Scalar(_) => Err(Error::Config(format!("{base} takes one value per segment"))),
                    };
                }
            }
            Ok(None)
        })
        .collect()
}

fn split_segment(name: &str) -> Option<(&str, usize)> {
    let (base, idx) = name.rsplit_once('_')?;
    Some((base, idx.parse().ok()?))
}

/// Expands parameter names, a base name standing for all its segments.
fn resolve_names(model: &ModelSpec, names: &[String]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for n in names {
        let hits: Vec<usize> = model
            .parameters
            .iter()
            .enumerate()
            .filter(|(_, p)| *p == n || split_segment(p).is_some_and(|(b, _)| b == n))
            .map(|(i, _)| i)
            .collect();
        if hits.is_empty() {
            return Err(Error::Config(format!("model {} has no parameter {n}", model.name)));
        }
        out.extend(hits);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Looks up a per-parameter setting by flat name, then by base name.
fn by_name<'a, T>(map: &'a BTreeMap<String, T>, name: &str) -> Option<&'a T> {
    map.get(name)
        .or_else(|| split_segment(name).and_then(|(b, _)| map.get(b)))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Neural,
    Mala,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "one")]
    pub workers: usize,
    pub model: ModelSection,
    pub data: DataSection,
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub neural: NeuralSection,
    /// Seed and worker count are taken from the top level.
    #[serde(default)]
    pub mala: MalaConfig,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub posterior: PosteriorSection,
    #[serde(default)]
    pub prediction: PredictionSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("epical-out")
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `sir`, `sir-perturbed` or `seirdplus`.
    pub name: String,
    #[serde(default)]
    pub exposed_outflow: ExposedOutflow,
    /// The four dates at which the SEIRD+ exposure rate changes.
    #[serde(default = "berlin_change_dates")]
    pub exposure_changes: Vec<String>,
    /// Reference values: fixed parameters, synthetic ground truth, and the
    /// centre of `init_spread` boxes.
    #[serde(default)]
    pub parameters: BTreeMap<String, ParamValue>,
    #[serde(default)]
    pub initial_state: InitialStateSection,
}

/// How the initial state of the calibrated model is formed: observed
/// compartments of the first data row (with `Q` assigned to `Q_S`), then
/// explicit `values`, then optionally `S` as the remainder of the
/// population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStateSection {
    #[serde(default = "yes")]
    pub from_data: bool,
    #[serde(default)]
    pub susceptible_from_rest: bool,
    #[serde(default)]
    pub values: BTreeMap<String, f64>,
}

impl Default for InitialStateSection {
    fn default() -> Self {
        InitialStateSection {
            from_data: true,
            susceptible_from_rest: false,
            values: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub schema: DatasetSchema,
    /// First day of the projection window; earlier days are calibrated on.
    #[serde(default)]
    pub split: Option<String>,
}

/// Column names of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    #[serde(default = "date_column")]
    pub date: String,
    #[serde(default = "population_column")]
    pub population: String,
    /// Compartment to column name. Empty picks up every column named like a
    /// known compartment.
    #[serde(default)]
    pub columns: BTreeMap<String, String>,
}

fn date_column() -> String {
    "date".into()
}

fn population_column() -> String {
    "N".into()
}

impl Default for DatasetSchema {
    fn default() -> Self {
        DatasetSchema {
            date: date_column(),
            population: population_column(),
            columns: BTreeMap::new(),
        }
    }
}

/// How to simulate a dataset from the model section's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "berlin_start")]
    pub start: String,
    #[serde(default = "default_population")]
    pub population: u64,
    /// Number of daily steps; the dataset has `steps + 1` rows.
    pub steps: usize,
    #[serde(default)]
    pub noise_seed: u64,
    /// Drive the model's diffusion term with a Wiener path.
    #[serde(default = "yes")]
    pub stochastic: bool,
    /// Relative level of independent Gaussian noise applied to every
    /// observation, `x (1 + level ξ)`.
    #[serde(default)]
    pub multiplicative_noise: f64,
    /// Compartments to write; empty writes every observable one.
    #[serde(default)]
    pub observe: Vec<String>,
    /// Initial state; omitted compartments start at zero.
    pub initial_state: BTreeMap<String, f64>,
}

fn berlin_start() -> String {
    BERLIN_DATES[0].into()
}

fn default_population() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub method: Method,
    /// Learned parameters; a piecewise base name stands for all segments.
    pub free: Vec<String>,
    /// Sampling range of starting points per free parameter.
    #[serde(default)]
    pub init_box: BTreeMap<String, [f64; 2]>,
    /// Range `reference (1 ± init_spread)` for free parameters without an
    /// explicit box.
    #[serde(default)]
    pub init_spread: Option<f64>,
    /// Network output scale per free parameter; defaults to the upper end
    /// of the init box.
    #[serde(default)]
    pub scale: BTreeMap<String, f64>,
    #[serde(default)]
    pub loss: LossKind,
    /// Compartments entering the loss; defaults to every dataset column.
    #[serde(default)]
    pub fit: Option<Vec<String>>,
    /// Seed of a fixed Wiener path in the forward model; none compares the
    /// data with the noiseless trajectory.
    #[serde(default)]
    pub forward_noise_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralSection {
    pub chains: usize,
    pub epochs: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub pretrain: PretrainConfig,
}

impl Default for NeuralSection {
    fn default() -> Self {
        let net = NetConfig::default();
        let train = TrainConfig::default();
        NeuralSection {
            chains: 300,
            epochs: train.epochs,
            hidden_layers: net.hidden_layers,
            width: net.width,
            activation: net.activation,
            learning_rate: net.learning_rate,
            plateau_window: train.plateau_window,
            plateau_tolerance: train.plateau_tolerance,
            pretrain: train.pretrain,
        }
    }
}

impl NeuralSection {
    pub fn net(&self) -> NetConfig {
        NetConfig {
            hidden_layers: self.hidden_layers,
            width: self.width,
            activation: self.activation,
            learning_rate: self.learning_rate,
            seed: 0,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            pretrain: self.pretrain,
            plateau_window: self.plateau_window,
            plateau_tolerance: self.plateau_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Nodes per free parameter; the range is the init box.
    pub points: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { points: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginalMethod {
    /// Joint reconstruction for up to two free parameters, KDE otherwise.
    #[default]
    Auto,
    Joint,
    Kde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorSection {
    pub marginal: MarginalMethod,
    /// Nodes of each marginal's grid over the init box.
    pub grid_points: usize,
    /// Gaussian blur of the joint reconstruction, in cells.
    pub smoothing: f64,
    /// Fixed KDE bandwidth; none uses Silverman's rule.
    pub bandwidth: Option<f64>,
    pub prior: Prior,
    /// Reference density files per parameter; their grids replace the
    /// default ones and the summary reports Hellinger distances to them.
    pub oracle: BTreeMap<String, PathBuf>,
}

impl Default for PosteriorSection {
    fn default() -> Self {
        PosteriorSection {
            marginal: MarginalMethod::Auto,
            grid_points: 100,
            smoothing: 0.0,
            bandwidth: None,
            prior: Prior::default(),
            oracle: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionSection {
    pub draws: usize,
    pub weighting: DrawWeighting,
}

impl Default for PredictionSection {
    fn default() -> Self {
        PredictionSection {
            draws: 10_000,
            weighting: DrawWeighting::Likelihood,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative data and oracle paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = RunConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = config.data.path.as_mut() {
            rebase(p);
        }
        for p in config.posterior.oracle.values_mut() {
            rebase(p);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.data.path.is_some() == self.data.synthetic.is_some() {
            return Err(Error::Config("data needs exactly one of `path` and `synthetic`".into()));
        }
        if self.calibration.free.is_empty() {
            return Err(Error::Config("no free parameters".into()));
        }
        if self.posterior.grid_points < 2 || self.grid.points < 2 {
            return Err(Error::Config("grids need at least two points".into()));
        }
        if self.prediction.draws == 0 {
            return Err(Error::Config("prediction needs at least one draw".into()));
        }
        if self.calibration.init_spread.is_some_and(|s| !(s > 0.0 && s < 1.0)) {
            return Err(Error::Config("init_spread must lie in (0, 1)".into()));
        }
        self.model()?;
        Ok(())
    }

    /// The model with breakpoints counted from the data start.
    pub fn model(&self) -> Result<ModelSpec> {
        let model = ModelSpec::from_name(&self.model.name)?;
        match model.kind {
            ModelKind::SeirdPlus { .. } => {
                let start = match &self.data.synthetic {
                    Some(s) => parse_date(&s.start)?,
                    None => parse_date(BERLIN_DATES[0])?,
                };
                let breakpoints = breakpoints_from_dates(start, &self.model.exposure_changes)?;
                Ok(seirdplus_model_with(breakpoints, self.model.exposed_outflow))
            }
            _ => Ok(model),
        }
    }

    /// The MALA settings with the run's seed and worker count.
    pub fn mala_config(&self) -> MalaConfig {
        MalaConfig {
            seed: self.seed,
            workers: self.workers,
            ..self.mala.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Datasets

/// Daily compartment counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompartmentDataset {
    pub dates: Vec<NaiveDate>,
    pub population: Vec<u64>,
    pub compartments: Vec<String>,
    /// One row per date, one entry per compartment.
    pub counts: Vec<Vec<f64>>,
    /// Known compartments the data do not carry.
    pub missing: Vec<String>,
    pub provenance: String,
}

impl CompartmentDataset {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn start(&self) -> NaiveDate {
        self.dates[0]
    }

    /// Row of `date`, if present.
    pub fn row_of(&self, date: NaiveDate) -> Option<usize> {
        let d = (date - self.start()).num_days();
        (d >= 0 && (d as usize) < self.len()).then_some(d as usize)
    }

    /// Population fractions `count / N` against days since the start.
    pub fn densities(&self) -> Result<TimeSeries> {
        let times = (0..self.len()).map(|k| k as f64).collect();
        let values = self
            .counts
            .iter()
            .zip(&self.population)
            .flat_map(|(row, &n)| row.iter().map(move |c| c / n as f64))
            .collect();
        TimeSeries::new(times, values, self.compartments.clone())
    }

    /// Whether each of `labels` is present in the data; absent compartments
    /// cannot enter the loss.
    pub fn fit_mask(&self, labels: &[String]) -> Vec<bool> {
        labels.iter().map(|l| self.compartments.contains(l)).collect()
    }

    /// Writes `date,N,<compartments>` preceded by a `#` provenance line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for line in self.provenance.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let mut header = vec!["date".to_string(), "N".to_string()];
            header.extend(self.compartments.iter().cloned());
            w.write_record(&header)?;
            for ((date, n), row) in self.dates.iter().zip(&self.population).zip(&self.counts) {
                let mut rec = vec![date.format("%Y-%m-%d").to_string(), n.to_string()];
                rec.extend(row.iter().map(|c| c.to_string()));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads a daily count file. Lines starting with `#` are provenance notes.
pub fn ingest_csv(path: &Path, schema: &DatasetSchema) -> Result<CompartmentDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dataset = parse_dataset(&text, schema)?;
    if dataset.provenance.is_empty() {
        dataset.provenance = format!("ingested from {}", path.display());
    }
    Ok(dataset)
}

/// [`ingest_csv`] on file contents.
pub fn parse_dataset(text: &str, schema: &DatasetSchema) -> Result<CompartmentDataset> {
    let provenance: Vec<&str> = text
        .lines()
        .filter_map(|l| l.strip_prefix('#'))
        .map(|l| l.strip_prefix(' ').unwrap_or(l))
        .collect();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(Error::Schema("file has no header".into()));
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name}")))
    };
    let date_col = find(&schema.date)?;
    let pop_col = find(&schema.population)?;
    let mut columns = Vec::new();
    if schema.columns.is_empty() {
        for c in KNOWN_COMPARTMENTS {
            if let Some(i) = header.iter().position(|h| h == c) {
                columns.push((c.to_string(), i));
            }
        }
    } else {
        // Keep the canonical compartment order regardless of map order.
        for c in KNOWN_COMPARTMENTS {
            if let Some(name) = schema.columns.get(c) {
                columns.push((c.to_string(), find(name)?));
            }
        }
        if let Some(bad) = schema
            .columns
            .keys()
            .find(|k| !KNOWN_COMPARTMENTS.contains(&k.as_str()))
        {
            return Err(Error::Schema(format!("unknown compartment {bad}")));
        }
    }
    if columns.is_empty() {
        return Err(Error::Schema("no compartment columns".into()));
    }

    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut population = Vec::new();
    let mut counts = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let row = k + 1;
        let rec = rec?;
        let bad = |message: String| Error::Value { row, message };
        let field = |i: usize| rec.get(i).unwrap_or("");
        let date = NaiveDate::parse_from_str(field(date_col), "%Y-%m-%d")
            .map_err(|e| bad(format!("date {:?}: {e}", field(date_col))))?;
        if let Some(prev) = dates.last() {
            let step = (date - *prev).num_days();
            if step > 1 {
                return Err(Error::Gap(date.format("%Y-%m-%d").to_string()));
            }
            if step < 1 {
                return Err(bad(format!("date {date} does not follow {prev}")));
            }
        }
        let n: u64 = field(pop_col)
            .parse()
            .map_err(|_| bad(format!("population {:?}", field(pop_col))))?;
        if n == 0 {
            return Err(bad("population is zero".into()));
        }
        let mut values = Vec::with_capacity(columns.len());
        for (name, i) in &columns {
            let v: f64 = field(*i).parse().map_err(|_| bad(format!("{name} {:?}", field(*i))))?;
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!("{name} = {v} is not a non-negative count")));
            }
            values.push(v);
        }
        dates.push(date);
        population.push(n);
        counts.push(values);
    }
    if dates.is_empty() {
        return Err(Error::Schema("file has no data rows".into()));
    }
    let compartments: Vec<String> = columns.into_iter().map(|(c, _)| c).collect();
    let missing = KNOWN_COMPARTMENTS
        .iter()
        .filter(|c| !compartments.iter().any(|x| x == *c))
        .map(|c| c.to_string())
        .collect();
    Ok(CompartmentDataset {
        dates,
        population,
        compartments,
        counts,
        missing,
        provenance: provenance.join("\n"),
    })
}

/// Parameters and seed a synthetic dataset was generated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub model: String,
    pub parameters: BTreeMap<String, f64>,
    pub initial_state: BTreeMap<String, f64>,
    pub noise_seed: u64,
    pub stochastic: bool,
    pub multiplicative_noise: f64,
}

/// Simulates `spec.steps` days of `model` at `params` (flat layout) and
/// converts the observed compartments to counts.
pub fn synth_generate(
    model: &ModelSpec,
    params: &[f64],
    spec: &SyntheticSpec,
) -> Result<(CompartmentDataset, GroundTruth)> {
    model.check_parameters(params)?;
    if spec.population == 0 {
        return Err(Error::Config("population must be positive".into()));
    }
    if !(spec.multiplicative_noise >= 0.0) {
        return Err(Error::Config("noise level must be non-negative".into()));
    }
    let start = parse_date(&spec.start)?;
    let mut y0 = vec![0.0; model.dim()];
    for (name, &v) in &spec.initial_state {
        let i = model
            .state_index(name)
            .ok_or_else(|| Error::Config(format!("model {} has no state {name}", model.name)))?;
        y0[i] = v;
    }
    let pv = model.parameter_vector(params)?;
    let noise = spec.stochastic.then(|| NoiseDriver::new(spec.noise_seed));
    let (trajectory, _) = integrate(model, &pv, &y0, 1.0, spec.steps, noise)?;
    let labels = if spec.observe.is_empty() {
        observable_compartments(model)
    } else {
        spec.observe.clone()
    };
    let observed = ObservationMap::from_labels(model, &labels)?.observe(&trajectory)?;

    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed(spec.noise_seed, 0));
    let n = spec.population as f64;
    let counts = (0..observed.len())
        .map(|k| {
            observed
                .row(k)
                .iter()
                .map(|&x| {
                    let x = if spec.multiplicative_noise > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x * (1.0 + spec.multiplicative_noise * z)
                    } else {
                        x
                    };
                    (x * n).max(0.0)
                })
                .collect()
        })
        .collect();
    let dates = (0..observed.len())
        .map(|k| start.checked_add_days(Days::new(k as u64)))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Config("date range overflows".into()))?;
    let missing = KNOWN_COMPARTMENTS
        .iter()
        .filter(|c| !labels.iter().any(|x| x == *c))
        .map(|c| c.to_string())
        .collect();
    let dataset = CompartmentDataset {
        population: vec![spec.population; dates.len()],
        dates,
        compartments: labels,
        counts,
        missing,
        provenance: format!("synthetic {} data, noise seed {}", model.name, spec.noise_seed),
    };
    let truth = GroundTruth {
        model: model.name.clone(),
        parameters: model.parameters.iter().cloned().zip(params.iter().copied()).collect(),
        initial_state: model.states.iter().cloned().zip(y0).collect(),
        noise_seed: spec.noise_seed,
        stochastic: spec.stochastic,
        multiplicative_noise: spec.multiplicative_noise,
    };
    Ok((dataset, truth))
}

/// Sidecar path holding the ground truth of a generated data file.
pub fn truth_path(data: &Path) -> PathBuf {
    data.with_extension("truth.json")
}

/// Writes a generated dataset and its ground-truth sidecar.
pub fn write_synthetic(dataset: &CompartmentDataset, truth: &GroundTruth, path: &Path) -> Result<()> {
    dataset.write_csv(path)?;
    let side = truth_path(path);
    fs::write(&side, serde_json::to_string_pretty(truth)? + "\n").map_err(|e| Error::io(&side, e))
}

// ---------------------------------------------------------------------------
// Problem assembly

/// A dataset, its split and the calibration problem on its first window.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: ModelSpec,
    pub dataset: CompartmentDataset,
    pub truth: Option<GroundTruth>,
    /// All rows as population fractions.
    pub series: TimeSeries,
    /// First projection row; equals the row count without a split.
    pub split_row: usize,
    pub problem: CalibrationProblem,
}

impl Prepared {
    pub fn has_projection(&self) -> bool {
        self.split_row < self.series.len()
    }
}

/// Loads or generates the data and builds the calibration problem.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let model = config.model()?;
    let reference = flat_parameters(&model, &config.model.parameters)?;
    let (dataset, truth) = match (&config.data.path, &config.data.synthetic) {
        (Some(path), _) => (ingest_csv(path, &config.data.schema)?, None),
        (None, Some(spec)) => {
            let params = reference
                .iter()
                .zip(&model.parameters)
                .map(|(v, n)| v.ok_or_else(|| Error::Config(format!("synthetic data need a value for {n}"))))
                .collect::<Result<Vec<f64>>>()?;
            let (d, t) = synth_generate(&model, &params, spec)?;
            (d, Some(t))
        }
        (None, None) => unreachable!("validated"),
    };
    if let ModelKind::SeirdPlus { .. } = model.kind {
        if config.data.synthetic.is_none() && dataset.start() != parse_date(BERLIN_DATES[0])? {
            return Err(Error::Config(format!(
                "exposure change dates are counted from {}, data start on {}",
                BERLIN_DATES[0],
                dataset.start()
            )));
        }
    }
    let series = dataset.densities()?;
    let split_row = match &config.data.split {
        None => series.len(),
        Some(s) => {
            let date = parse_date(s)?;
            match dataset.row_of(date) {
                Some(r) if r >= 2 => r,
                _ => {
                    return Err(Error::Config(format!(
                        "split {date} must fall inside the data after the second day"
                    )))
                }
            }
        }
    };
    let observed = series.slice(0, split_row)?;
    let labels = dataset.compartments.clone();
    let observation = ObservationMap::from_labels(&model, &labels)?;

    let mut fit = dataset.fit_mask(&labels);
    if let Some(chosen) = &config.calibration.fit {
        for c in chosen {
            if !labels.contains(c) {
                return Err(Error::Schema(format!("cannot fit {c}: the data have no such column")));
            }
        }
        fit = labels.iter().map(|l| chosen.contains(l)).collect();
    }
    let loss = LossSpec::new(config.calibration.loss, &observed, fit)?;
    let initial_state = initial_state(&model, &config.model.initial_state, &observed)?;

    let free = resolve_names(&model, &config.calibration.free)?;
    let free_names: Vec<&String> = free.iter().map(|&i| &model.parameters[i]).collect();
    let mut init_box = Vec::with_capacity(free.len());
    for (&i, name) in free.iter().zip(&free_names) {
        let range = match (
            by_name(&config.calibration.init_box, name),
            config.calibration.init_spread,
        ) {
            (Some(r), _) => (r[0], r[1]),
            (None, Some(s)) => {
                let c = reference[i].ok_or_else(|| Error::Config(format!("init_spread needs a value for {name}")))?;
                (c * (1.0 - s), c * (1.0 + s))
            }
            (None, None) => return Err(Error::Config(format!("no init box for {name}"))),
        };
        init_box.push(range);
    }
    let fixed: Vec<f64> = model
        .parameters
        .iter()
        .enumerate()
        .map(|(i, name)| match reference[i] {
            Some(v) => Ok(v),
            None if free.contains(&i) => Ok(init_box[free.iter().position(|&f| f == i).unwrap()].1),
            None => Err(Error::Config(format!("fixed parameter {name} needs a value"))),
        })
        .collect::<Result<_>>()?;
    let scale = free_names
        .iter()
        .zip(&init_box)
        .map(|(name, b)| by_name(&config.calibration.scale, name).copied().unwrap_or(b.1))
        .collect();
    let problem = CalibrationProblem::new(
        model.clone(),
        observed,
        observation,
        loss,
        initial_state,
        free,
        fixed,
        init_box,
    )?
    .with_scale(scale)?
    .with_forward_noise(config.calibration.forward_noise_seed.map(NoiseDriver::new));
    Ok(Prepared {
        model,
        dataset,
        truth,
        series,
        split_row,
        problem,
    })
}

fn initial_state(model: &ModelSpec, spec: &InitialStateSection, observed: &TimeSeries) -> Result<Vec<f64>> {
    let mut y = vec![0.0; model.dim()];
    if spec.from_data {
        for (c, label) in observed.labels().iter().enumerate() {
            let state = if label == "Q" && model.state_index("Q").is_none() {
                "Q_S"
            } else {
                label.as_str()
            };
            if let Some(i) = model.state_index(state) {
                y[i] = observed.get(0, c);
            }
        }
    }
    for (name, &v) in &spec.values {
        let i = model
            .state_index(name)
            .ok_or_else(|| Error::Config(format!("model {} has no state {name}", model.name)))?;
        y[i] = v;
    }
    if spec.susceptible_from_rest {
        let s = model
            .state_index("S")
            .ok_or_else(|| Error::Config("model has no S compartment".into()))?;
        let population = match model.kind {
            ModelKind::SeirdPlus { .. } => 11,
            _ => model.dim(),
        };
        y[s] = 1.0 - (0..population).filter(|&i| i != s).map(|i| y[i]).sum::<f64>();
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Runs

/// Result of [`run`]: where the artifacts went and the summary written
/// there. `partial` marks runs in which some chain or stage failed.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: BTreeMap<String, Value>,
    pub partial: bool,
}

/// Output of the calibration step, before post-processing.
enum Calibrated {
    Neural(crate::calibrate::Ensemble),
    Mala(crate::mcmc::MalaRun),
    Grid(crate::posterior::GridPosterior),
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Calibrates as configured and writes the artifact directory.
///
/// Files: `config.toml` (the resolved configuration), `data.csv` (and its
/// truth sidecar for generated data), `log.csv`, per-method diagnostics,
/// `density_<param>.csv`, `ensemble_calibration.csv`,
/// `ensemble_projection.csv`, `residuals.csv` and `summary.json`.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let prepared = prepare(config)?;
    let dir = config.out.clone();
    ensure_dir(&dir)?;
    write_text(&dir.join("config.toml"), &config.to_toml()?)?;
    let data_path = dir.join("data.csv");
    match &prepared.truth {
        Some(t) => write_synthetic(&prepared.dataset, t, &data_path)?,
        None => prepared.dataset.write_csv(&data_path)?,
    }

    let mut summary: BTreeMap<String, Value> = BTreeMap::new();
    let mut errors: Vec<String> = Vec::new();
    let problem = &prepared.problem;
    let method = config.calibration.method;
    summary.insert("method".into(), json!(method));
    summary.insert("model".into(), json!(prepared.model.name));
    summary.insert("seed".into(), json!(config.seed));
    summary.insert("parameters".into(), json!(problem.free_names()));
    summary.insert("calibration_days".into(), json!(prepared.split_row));
    summary.insert(
        "projection_days".into(),
        json!(prepared.series.len() - prepared.split_row),
    );

    let calibrated = match calibrate_step(config, problem) {
        Ok(c) => c,
        Err(e) => {
            summary.insert("errors".into(), json!([e.to_string()]));
            write_summary(&dir, &summary)?;
            return Err(e);
        }
    };
    let log = match &calibrated {
        Calibrated::Neural(ens) => {
            ens.log.write_csv(&dir.join("log.csv"))?;
            write_chain_table(ens, &dir.join("chains.csv"))?;
            if let Some(best) = ens.best_chain() {
                best.network.save(&dir.join("best_network.json"))?;
                summary.insert("best_chain".into(), json!(best.chain));
            }
            summary.insert("chains".into(), json!(ens.chains.len()));
            summary.insert("records".into(), json!(ens.log.len()));
            for f in &ens.failures {
                errors.push(format!("chain {}: {}", f.chain, f.message));
            }
            summary.insert("failed_chains".into(), json!(ens.failures.len()));
            ens.log.clone()
        }
        Calibrated::Mala(run) => {
            run.log.write_csv(&dir.join("log.csv"))?;
            run.trace.write_csv(&dir.join("trace.csv"))?;
            summary.insert("chains".into(), json!(run.trace.chains.len()));
            summary.insert("records".into(), json!(run.log.len()));
            let rates: Vec<f64> = run.trace.chains.iter().map(|c| c.acceptance_rate()).collect();
            summary.insert(
                "acceptance_rate".into(),
                json!(rates.iter().sum::<f64>() / rates.len().max(1) as f64),
            );
            for (chain, message) in &run.trace.failures {
                errors.push(format!("chain {chain}: {message}"));
            }
            summary.insert("failed_chains".into(), json!(run.trace.failures.len()));
            match write_rhat_curves(
                &run.trace,
                config.mala.thinning.max(1) * 20,
                &dir.join("gelman_rubin.csv"),
            ) {
                Ok(last) => {
                    for (name, r) in problem.free_names().iter().zip(last) {
                        summary.insert(format!("rhat_{name}"), json!(r));
                    }
                }
                Err(e) => errors.push(format!("gelman-rubin: {e}")),
            }
            run.log.clone()
        }
        Calibrated::Grid(grid) => {
            grid.write_csv(&dir.join("grid.csv"))?;
            summary.insert("records".into(), json!(grid.loss.len()));
            summary.insert("failed_nodes".into(), json!(grid.failed));
            grid_log(grid)
        }
    };
    if let Some(best) = log.best() {
        summary.insert("best_loss".into(), json!(best.loss));
        summary.insert("best_params".into(), json!(best.params));
    }

    match densities_step(config, problem, &calibrated, &log) {
        Ok(densities) => {
            for (name, d) in problem.free_names().iter().zip(&densities) {
                d.write_csv(&dir.join(format!("density_{name}.csv")))?;
                summary.insert(format!("mean_{name}"), json!(d.mean()));
                summary.insert(format!("std_{name}"), json!(d.std()));
                summary.insert(format!("mode_{name}"), json!(d.mode()));
                if let Some(path) = config.posterior.oracle.get(name) {
                    match Density1D::read_csv(path).and_then(|o| hellinger(d, &o)) {
                        Ok(h) => {
                            summary.insert(format!("hellinger_{name}"), json!(h));
                        }
                        Err(e) => errors.push(format!("oracle for {name}: {e}")),
                    }
                }
            }
        }
        Err(e) => errors.push(format!("marginals: {e}")),
    }

    let draws_log = match &calibrated {
        Calibrated::Mala(run) => trace_log(&run.trace),
        _ => log,
    };
    let weighting = match calibrated {
        Calibrated::Mala(_) => DrawWeighting::Uniform,
        _ => config.prediction.weighting,
    };
    match prediction_step(config, &prepared, &draws_log, weighting, &dir) {
        Ok(metrics) => summary.extend(metrics),
        Err(e) => errors.push(format!("prediction: {e}")),
    }

    let partial = !errors.is_empty();
    if partial {
        summary.insert("errors".into(), json!(errors));
    }
    summary.insert("complete".into(), json!(!partial));
    write_summary(&dir, &summary)?;
    Ok(RunOutcome { dir, summary, partial })
}

fn write_summary(dir: &Path, summary: &BTreeMap<String, Value>) -> Result<()> {
    write_text(
        &dir.join("summary.json"),
        &(serde_json::to_string_pretty(summary)? + "\n"),
    )
}

fn calibrate_step(config: &RunConfig, problem: &CalibrationProblem) -> Result<Calibrated> {
    match config.calibration.method {
        Method::Neural => {
            let n = &config.neural;
            Ok(Calibrated::Neural(run_ensemble(
                problem,
                &n.net(),
                &n.train(),
                n.chains,
                config.workers,
                config.seed,
            )?))
        }
        Method::Mala => Ok(Calibrated::Mala(run_mala(
            problem,
            &config.mala_config(),
            &problem.init_box,
        )?)),
        Method::Grid => {
            let axes: Vec<Vec<f64>> = problem
                .init_box
                .iter()
                .map(|&(a, b)| linspace(a, b, config.grid.points))
                .collect();
            Ok(Calibrated::Grid(grid_search(problem, &axes)?))
        }
    }
}

fn write_chain_table(ens: &crate::calibrate::Ensemble, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "chain",
        "seed",
        "termination",
        "epochs",
        "pretrain_residual",
        "best_loss",
    ])?;
    for c in &ens.chains {
        let termination = match c.termination {
            crate::calibrate::Termination::EpochCap => "epoch-cap",
            crate::calibrate::Termination::Plateau => "plateau",
        };
        w.write_record([
            c.chain.to_string(),
            c.seed.to_string(),
            termination.to_string(),
            c.losses.len().to_string(),
            c.pretrain_residual.to_string(),
            c.best_loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `R̂` against chain length for every parameter and returns the
/// final values.
pub fn write_rhat_curves(trace: &McmcTrace, stride: usize, path: &Path) -> Result<Vec<f64>> {
    let curves = (0..trace.names.len())
        .map(|p| gelman_rubin_curve(trace, p, stride))
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["samples".to_string()];
    header.extend(trace.names.iter().cloned());
    w.write_record(&header)?;
    let rows = curves.iter().map(Vec::len).min().unwrap_or(0);
    for k in 0..rows {
        let mut rec = vec![curves[0][k].samples.to_string()];
        rec.extend(curves.iter().map(|c| c[k].value.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(curves.iter().map(|c| c.last().map_or(f64::NAN, |r| r.value)).collect())
}

/// Grid nodes as log records, so that draws and marginals treat every
/// method alike.
fn grid_log(grid: &crate::posterior::GridPosterior) -> PosteriorLog {
    let mut log = PosteriorLog::new(grid.names.clone());
    for (i, &loss) in grid.loss.iter().enumerate() {
        if loss.is_finite() {
            log.records.push(LogRecord {
                chain: 0,
                epoch: i,
                params: grid.node(i),
                loss,
            });
        }
    }
    log
}

/// Retained MCMC samples as log records.
fn trace_log(trace: &McmcTrace) -> PosteriorLog {
    let mut log = PosteriorLog::new(trace.names.clone());
    for c in &trace.chains {
        for s in &c.samples {
            log.records.push(LogRecord {
                chain: c.chain,
                epoch: s.step,
                params: s.params.clone(),
                loss: s.loss,
            });
        }
    }
    log
}

fn marginal_grids(config: &RunConfig, problem: &CalibrationProblem) -> Result<Vec<Vec<f64>>> {
    problem
        .free_names()
        .iter()
        .zip(&problem.init_box)
        .map(|(name, &(a, b))| match config.posterior.oracle.get(name) {
            Some(path) => Ok(Density1D::read_csv(path)?.grid().to_vec()),
            None => Ok(linspace(a, b, config.posterior.grid_points)),
        })
        .collect()
}

fn densities_step(
    config: &RunConfig,
    problem: &CalibrationProblem,
    calibrated: &Calibrated,
    log: &PosteriorLog,
) -> Result<Vec<Density1D>> {
    let grids = marginal_grids(config, problem)?;
    let post = &config.posterior;
    match calibrated {
        Calibrated::Grid(grid) => grid
            .marginals()?
            .into_iter()
            .zip(&grids)
            .map(|(m, g)| if m.grid() == g.as_slice() { Ok(m) } else { m.resample(g) })
            .collect(),
        Calibrated::Mala(run) => (0..grids.len())
            .map(|i| kde(&run.trace.pooled(i), &grids[i], post.bandwidth, post.prior))
            .collect(),
        Calibrated::Neural(_) => {
            let joint = match post.marginal {
                MarginalMethod::Auto => grids.len() <= 2,
                MarginalMethod::Joint => true,
                MarginalMethod::Kde => false,
            };
            if joint {
                let params: Vec<usize> = (0..grids.len()).collect();
                joint_marginals_from_log(log, &params, &grids, post.smoothing, post.prior)
            } else {
                (0..grids.len())
                    .map(|i| marginal_from_log(log, i, &grids[i], post.bandwidth, post.prior))
                    .collect()
            }
        }
    }
}

/// Prediction ensembles and residuals over the calibration and projection
/// windows of `prepared`.
pub fn prediction_step(
    config: &RunConfig,
    prepared: &Prepared,
    log: &PosteriorLog,
    weighting: DrawWeighting,
    dir: &Path,
) -> Result<BTreeMap<String, Value>> {
    let mut metrics = BTreeMap::new();
    let draws = select_draws(log, config.prediction.draws, config.seed, weighting)?;
    let steps = prepared.series.len() - 1;
    let ensemble = predict(&prepared.problem, &draws, steps)?;
    let split = prepared.split_row;
    write_ensemble_window(&ensemble, 0, split, &dir.join("ensemble_calibration.csv"))?;
    let calibration = prepared.series.slice(0, split)?;
    metrics.insert("coverage_calibration".into(), json!(ensemble.coverage(&calibration)?));
    metrics.insert("dropped_draws".into(), json!(ensemble.dropped));
    if prepared.has_projection() {
        write_ensemble_window(
            &ensemble,
            split,
            prepared.series.len(),
            &dir.join("ensemble_projection.csv"),
        )?;
        let projection = prepared.series.slice(split, prepared.series.len())?;
        metrics.insert("coverage_projection".into(), json!(ensemble.coverage(&projection)?));
    }
    let table = residual_table(&ensemble.mean, &prepared.series, split)?;
    table.write_csv(&dir.join("residuals.csv"))?;
    metrics.insert("calibration_error".into(), json!(table.average.calibration_relative));
    if let Some(p) = table.average.projection_relative {
        metrics.insert("projection_error".into(), json!(p));
    }
    Ok(metrics)
}

fn write_ensemble_window(ensemble: &PredictionEnsemble, start: usize, end: usize, path: &Path) -> Result<()> {
    let window = PredictionEnsemble {
        draws: Vec::new(),
        weights: Vec::new(),
        members: Vec::new(),
        mean: ensemble.mean.slice(start, end)?,
        std: ensemble.std.slice(start, end)?,
        dropped: ensemble.dropped,
    };
    window.write_csv(path)
}

/// Relative residuals of one compartment in both windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub compartment: String,
    pub calibration_raw: f64,
    pub calibration_relative: f64,
    pub projection_raw: Option<f64>,
    pub projection_relative: Option<f64>,
}

/// Per-compartment residuals and their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTable {
    pub rows: Vec<ResidualRow>,
    pub average: ResidualRow,
}

/// Residuals of `predicted` against every compartment of `data`, split at
/// row `split`.
pub fn residual_table(predicted: &TimeSeries, data: &TimeSeries, split: usize) -> Result<ResidualTable> {
    if split == 0 || split > data.len() {
        return Err(Error::EmptyWindow);
    }
    let t = data.times();
    let cal_end = t[split - 1];
    let projection = (split < data.len()).then(|| (t[split], t[data.len() - 1]));
    let mut rows = Vec::new();
    for label in data.labels() {
        let cal = residual(predicted, data, label, t[0], cal_end)?;
        let proj = projection
            .map(|(a, b)| residual(predicted, data, label, a, b))
            .transpose()?;
        rows.push(ResidualRow {
            compartment: label.clone(),
            calibration_raw: cal.raw,
            calibration_relative: cal.relative,
            projection_raw: proj.map(|r| r.raw),
            projection_relative: proj.map(|r| r.relative),
        });
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&ResidualRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let average = ResidualRow {
        compartment: "average".into(),
        calibration_raw: mean(&|r| r.calibration_raw),
        calibration_relative: mean(&|r| r.calibration_relative),
        projection_raw: projection.map(|_| mean(&|r| r.projection_raw.unwrap_or(f64::NAN))),
        projection_relative: projection.map(|_| mean(&|r| r.projection_relative.unwrap_or(f64::NAN))),
    };
    Ok(ResidualTable { rows, average })
}

impl ResidualTable {
    /// Average over the named compartments only.
    pub fn average_of(&self, compartments: &[&str]) -> Option<ResidualRow> {
        let picked: Vec<&ResidualRow> = self
            .rows
            .iter()
            .filter(|r| compartments.contains(&r.compartment.as_str()))
            .collect();
        if picked.is_empty() {
            return None;
        }
        let n = picked.len() as f64;
        let mean = |f: &dyn Fn(&ResidualRow) -> f64| picked.iter().map(|r| f(r)).sum::<f64>() / n;
        let has_projection = picked.iter().all(|r| r.projection_relative.is_some());
        Some(ResidualRow {
            compartment: compartments.join("+"),
            calibration_raw: mean(&|r| r.calibration_raw),
            calibration_relative: mean(&|r| r.calibration_relative),
            projection_raw: has_projection.then(|| mean(&|r| r.projection_raw.unwrap())),
            projection_relative: has_projection.then(|| mean(&|r| r.projection_relative.unwrap())),
        })
    }

    /// Columns `compartment`, `calibration_raw`, `calibration_relative`,
    /// `projection_raw`, `projection_relative`; the last row is the average.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "compartment",
            "calibration_raw",
            "calibration_relative",
            "projection_raw",
            "projection_relative",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            w.write_record([
                r.compartment.clone(),
                r.calibration_raw.to_string(),
                r.calibration_relative.to_string(),
                opt(r.projection_raw),
                opt(r.projection_relative),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Recomputes predictions and residuals from a saved log.
pub fn predict_from_log(config: &RunConfig, log: &PosteriorLog, dir: &Path) -> Result<BTreeMap<String, Value>> {
    let prepared = prepare(config)?;
    if log.names != prepared.problem.free_names() {
        return Err(Error::Schema(format!(
            "log columns {:?} do not match the free parameters {:?}",
            log.names,
            prepared.problem.free_names()
        )));
    }
    ensure_dir(dir)?;
    let weighting = match config.calibration.method {
        Method::Mala => DrawWeighting::Uniform,
        _ => config.prediction.weighting,
    };
    let metrics = prediction_step(config, &prepared, log, weighting, dir)?;
    write_summary(dir, &metrics)?;
    Ok(metrics)
}
