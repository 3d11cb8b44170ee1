//! Marginal densities, the grid oracle, prediction ensembles and the scalar
//! metrics used to compare them.
//!
//! Two ways of turning a [`PosteriorLog`] into a marginal are provided:
//!
//! * [`marginal_from_log`] smooths the recorded values of one parameter with
//!   a Gaussian kernel, each record weighted by its likelihood `exp(-J)`.
//! * [`joint_marginals_from_log`] first rebuilds the likelihood surface on a
//!   grid over a few parameters (mean `exp(-J)` of the records falling into
//!   each cell), then sums out the other axes. The result does not depend on
//!   how often a region was visited, only on the likelihood found there, so
//!   it is the better choice when the log comes from optimisers that dwell
//!   near the minimum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationProblem, PosteriorLog};
use crate::dynamics::TimeSeries;
use crate::error::{Error, Result};

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Quadrature weight of every grid node: half the distance to each
/// neighbour, mirrored at the ends. On a uniform grid every weight is the
/// spacing.
pub fn cell_widths(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    if n < 2 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|i| {
            if i == 0 {
                grid[1] - grid[0]
            } else if i == n - 1 {
                grid[n - 1] - grid[n - 2]
            } else {
                0.5 * (grid[i + 1] - grid[i - 1])
            }
        })
        .collect()
}

/// A density sampled on a grid, normalised so that `Σ density·width = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density1D {
    grid: Vec<f64>,
    density: Vec<f64>,
}

impl Density1D {
    /// Normalises non-negative `mass` on `grid`.
    pub fn new(grid: Vec<f64>, mass: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid.len() != mass.len() {
            return Err(Error::Shape {
                expected: grid.len().max(1),
                got: mass.len(),
            });
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|g| !g.is_finite()) {
            return Err(Error::Schema("density grid must be strictly increasing".into()));
        }
        if mass.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::Value {
                row: mass.iter().position(|m| !(*m >= 0.0) || !m.is_finite()).unwrap(),
                message: "density mass must be finite and non-negative".into(),
            });
        }
        let widths = cell_widths(&grid);
        let total: f64 = mass.iter().zip(&widths).map(|(m, w)| m * w).sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateLikelihoods);
        }
        let density = mass.iter().map(|m| m / total).collect();
        Ok(Density1D { grid, density })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn widths(&self) -> Vec<f64> {
        cell_widths(&self.grid)
    }

    pub fn total(&self) -> f64 {
        self.density.iter().zip(self.widths()).map(|(d, w)| d * w).sum()
    }

    pub fn mean(&self) -> f64 {
        self.grid
            .iter()
            .zip(&self.density)
            .zip(self.widths())
            .map(|((x, d), w)| x * d * w)
            .sum()
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        self.grid
            .iter()
            .zip(&self.density)
            .zip(self.widths())
            .map(|((x, d), w)| (x - m).powi(2) * d * w)
            .sum::<f64>()
            .sqrt()
    }

    /// Grid node with the highest density (first one on ties).
    pub fn mode(&self) -> f64 {
        let mut best = 0;
        for (i, d) in self.density.iter().enumerate() {
            if *d > self.density[best] {
                best = i;
            }
        }
        self.grid[best]
    }

    /// Linear interpolation onto `grid` (zero outside the current range),
    /// renormalised.
    pub fn resample(&self, grid: &[f64]) -> Result<Density1D> {
        let mass = grid
            .iter()
            .map(|&x| {
                let g = &self.grid;
                if x < g[0] || x > g[g.len() - 1] {
                    return 0.0;
                }
                let j = g.partition_point(|&v| v <= x);
                if j == 0 {
                    return self.density[0];
                }
                if j >= g.len() {
                    return self.density[g.len() - 1];
                }
                let t = (x - g[j - 1]) / (g[j] - g[j - 1]);
                self.density[j - 1] * (1.0 - t) + self.density[j] * t
            })
            .collect();
        Density1D::new(grid.to_vec(), mass)
    }

    /// Two columns, `grid,density`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["grid", "density"])?;
        for (g, d) in self.grid.iter().zip(&self.density) {
            w.write_record([g.to_string(), d.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Density1D> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.len() < 2 || header[0] != "grid" {
            return Err(Error::Schema(format!("{} is not a density file", path.display())));
        }
        let (mut grid, mut mass) = (Vec::new(), Vec::new());
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Value {
                        row: row + 1,
                        message: "expected a number".into(),
                    })
            };
            grid.push(num(0)?);
            mass.push(num(1)?);
        }
        Density1D::new(grid, mass)
    }
}

fn same_grid(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0))
}

/// `½ ∫ (√p − √q)²`, in `[0, 1]`.
pub fn hellinger(p: &Density1D, q: &Density1D) -> Result<f64> {
    if !same_grid(&p.grid, &q.grid) {
        return Err(Error::GridMismatch);
    }
    let h: f64 = p
        .density
        .iter()
        .zip(&q.density)
        .zip(p.widths())
        .map(|((a, b), w)| (a.sqrt() - b.sqrt()).powi(2) * w)
        .sum::<f64>()
        * 0.5;
    Ok(h.clamp(0.0, 1.0))
}

/// Prior density applied to a marginal before renormalisation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Prior {
    Flat,
    /// Uniform on `(0, ∞)`.
    #[default]
    Positive,
    Uniform {
        lo: f64,
        hi: f64,
    },
}

impl Prior {
    pub fn density(&self, x: f64) -> f64 {
        match *self {
            Prior::Flat => 1.0,
            Prior::Positive => (x > 0.0) as u8 as f64,
            Prior::Uniform { lo, hi } => (x >= lo && x <= hi) as u8 as f64,
        }
    }
}

/// Kish effective sample size `(Σw)² / Σw²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Silverman's rule `1.06 σ n^{-1/5}` with weighted spread and effective
/// sample size. `None` when the weighted spread is zero.
pub fn silverman_bandwidth(values: &[f64], weights: &[f64]) -> Option<f64> {
    let s: f64 = weights.iter().sum();
    if !(s > 0.0) {
        return None;
    }
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / s;
    let var = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - mean).powi(2))
        .sum::<f64>()
        / s;
    let n = effective_sample_size(weights);
    let h = 1.06 * var.sqrt() * n.powf(-0.2);
    (h > 0.0 && h.is_finite()).then_some(h)
}

/// Weighted Gaussian kernel sum on `grid` (unnormalised).
fn kernel_sum(values: &[f64], weights: &[f64], grid: &[f64], h: f64) -> Vec<f64> {
    let cut = 8.0 * h;
    grid.par_iter()
        .map(|&x| {
            values
                .iter()
                .zip(weights)
                .filter(|(v, _)| (x - **v).abs() < cut)
                .map(|(v, w)| w * (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum()
        })
        .collect()
}

fn default_bandwidth(values: &[f64], weights: &[f64], grid: &[f64]) -> f64 {
    silverman_bandwidth(values, weights).unwrap_or_else(|| {
        let w = cell_widths(grid);
        w.iter().copied().fold(f64::INFINITY, f64::min)
    })
}

/// Gaussian KDE of plain samples (each counted once), times the prior.
pub fn kde(samples: &[f64], grid: &[f64], bandwidth: Option<f64>, prior: Prior) -> Result<Density1D> {
    if samples.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let weights = vec![1.0; samples.len()];
    let h = bandwidth.unwrap_or_else(|| default_bandwidth(samples, &weights, grid));
    let mass = kernel_sum(samples, &weights, grid, h)
        .into_iter()
        .zip(grid)
        .map(|(m, &x)| m * prior.density(x))
        .collect();
    Density1D::new(grid.to_vec(), mass)
}

/// Likelihoods `exp(-(J - J_min))` of all records; the shift cancels on
/// normalisation and keeps large losses from underflowing as a group.
pub fn record_weights(log: &PosteriorLog) -> Result<Vec<f64>> {
    let j_min = log
        .records
        .iter()
        .map(|r| r.loss)
        .filter(|j| j.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !j_min.is_finite() {
        return Err(Error::DegenerateLikelihoods);
    }
    Ok(log
        .records
        .iter()
        .map(|r| {
            if r.loss.is_finite() {
                (-(r.loss - j_min)).exp()
            } else {
                0.0
            }
        })
        .collect())
}

/// Likelihood-weighted Gaussian KDE of one parameter of the log.
pub fn marginal_from_log(
    log: &PosteriorLog,
    parameter: usize,
    grid: &[f64],
    bandwidth: Option<f64>,
    prior: Prior,
) -> Result<Density1D> {
    if log.is_empty() {
        return Err(Error::DegenerateLikelihoods);
    }
    if parameter >= log.names.len() {
        return Err(Error::Shape {
            expected: log.names.len(),
            got: parameter,
        });
    }
    let weights = record_weights(log)?;
    let values = log.column(parameter);
    let h = bandwidth.unwrap_or_else(|| default_bandwidth(&values, &weights, grid));
    let mass = kernel_sum(&values, &weights, grid, h)
        .into_iter()
        .zip(grid)
        .map(|(m, &x)| m * prior.density(x))
        .collect();
    Density1D::new(grid.to_vec(), mass)
}

/// Largest number of cells a reconstructed likelihood surface may have.
pub const JOINT_CELL_BUDGET: usize = 50_000_000;

fn blur_axis(data: &mut [f64], shape: &[usize], axis: usize, sigma: f64) {
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let n = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut line = vec![0.0; n];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for (i, slot) in line.iter_mut().enumerate() {
                *slot = data[base + i * stride];
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (k, kw) in kernel.iter().enumerate() {
                    let j = i as isize + k as isize - radius;
                    if j >= 0 && (j as usize) < n {
                        acc += kw * line[j as usize];
                    }
                }
                data[base + i * stride] = acc;
            }
        }
    }
}

/// Rebuilds the likelihood on the grid spanned by `axes` over the parameters
/// `parameters`, then returns one marginal per axis.
///
/// Each record lands in its nearest grid cell. A cell's likelihood is the
/// mean `exp(-J)` of its records; `smoothing` (in cells, zero to disable)
/// blurs both the likelihood sums and the record counts with a Gaussian
/// before dividing. Cells that no record reaches count as zero. Records
/// outside the grid are ignored.
pub fn joint_marginals_from_log(
    log: &PosteriorLog,
    parameters: &[usize],
    axes: &[Vec<f64>],
    smoothing: f64,
    prior: Prior,
) -> Result<Vec<Density1D>> {
    if parameters.len() != axes.len() || parameters.is_empty() {
        return Err(Error::Config("need one axis per parameter".into()));
    }
    if parameters.iter().any(|&p| p >= log.names.len()) {
        return Err(Error::Config("parameter index out of range".into()));
    }
    for axis in axes {
        if axis.len() < 2 || axis.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Schema("axes need at least two increasing nodes".into()));
        }
    }
    let shape: Vec<usize> = axes.iter().map(|a| a.len()).collect();
    let cells = shape.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
    let cells = match cells {
        Some(c) if c <= JOINT_CELL_BUDGET => c,
        _ => return Err(Error::Config("likelihood grid exceeds the memory budget".into())),
    };
    let weights = record_weights(log)?;
    let mut num = vec![0.0; cells];
    let mut den = vec![0.0; cells];
    'records: for (r, w) in log.records.iter().zip(&weights) {
        let mut flat = 0;
        for (&p, axis) in parameters.iter().zip(axes) {
            let x = r.params[p];
            let half_lo = 0.5 * (axis[1] - axis[0]);
            let half_hi = 0.5 * (axis[axis.len() - 1] - axis[axis.len() - 2]);
            if !(x >= axis[0] - half_lo && x <= axis[axis.len() - 1] + half_hi) {
                continue 'records;
            }
            let j = axis.partition_point(|&v| v < x);
            let idx = if j == 0 {
                0
            } else if j == axis.len() || x - axis[j - 1] <= axis[j] - x {
                j - 1
            } else {
                j
            };
            flat = flat * axis.len() + idx;
        }
        num[flat] += w;
        den[flat] += 1.0;
    }
    if !den.iter().any(|d| *d > 0.0) {
        return Err(Error::DegenerateLikelihoods);
    }
    if smoothing > 0.0 {
        for a in 0..shape.len() {
            blur_axis(&mut num, &shape, a, smoothing);
            blur_axis(&mut den, &shape, a, smoothing);
        }
    }
    let floor = if smoothing > 0.0 { 1e-9 } else { 0.0 };
    let like: Vec<f64> = num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > floor { n / d } else { 0.0 })
        .collect();
    marginals_of_joint(&like, axes, prior)
}

/// Sums a dense joint array (row-major over `axes`) down to each axis.
fn marginals_of_joint(joint: &[f64], axes: &[Vec<f64>], prior: Prior) -> Result<Vec<Density1D>> {
    let shape: Vec<usize> = axes.iter().map(|a| a.len()).collect();
    let widths: Vec<Vec<f64>> = axes.iter().map(|a| cell_widths(a)).collect();
    let mut sums: Vec<Vec<f64>> = shape.iter().map(|&n| vec![0.0; n]).collect();
    let mut idx = vec![0usize; shape.len()];
    for &value in joint {
        if value > 0.0 {
            let volume: f64 = idx.iter().enumerate().map(|(a, &i)| widths[a][i]).product();
            for (a, &i) in idx.iter().enumerate() {
                sums[a][i] += value * volume / widths[a][i];
            }
        }
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    sums.into_iter()
        .zip(axes)
        .map(|(s, axis)| {
            let mass = s.iter().zip(axis).map(|(m, &x)| m * prior.density(x)).collect();
            Density1D::new(axis.clone(), mass)
        })
        .collect()
}

/// Normalised `exp(-J)` over a dense grid of free-parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPosterior {
    pub names: Vec<String>,
    pub axes: Vec<Vec<f64>>,
    /// Loss at every node, row-major (last axis fastest); infinite where the
    /// model failed.
    pub loss: Vec<f64>,
    /// Density with respect to the grid measure.
    pub mass: Vec<f64>,
    /// Flat indices of nodes where the forward model failed.
    pub failed: Vec<usize>,
}

impl GridPosterior {
    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.len()).collect()
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut rem = flat;
        let mut out = vec![0.0; self.axes.len()];
        for a in (0..self.axes.len()).rev() {
            let n = self.axes[a].len();
            out[a] = self.axes[a][rem % n];
            rem /= n;
        }
        out
    }

    /// Node with the highest mass.
    pub fn mode(&self) -> Vec<f64> {
        let best = self
            .mass
            .iter()
            .enumerate()
            .fold(0, |b, (i, m)| if *m > self.mass[b] { i } else { b });
        self.node(best)
    }

    pub fn marginal(&self, axis: usize) -> Result<Density1D> {
        if axis >= self.axes.len() {
            return Err(Error::Config("axis out of range".into()));
        }
        Ok(marginals_of_joint(&self.mass, &self.axes, Prior::Flat)?.swap_remove(axis))
    }

    pub fn marginals(&self) -> Result<Vec<Density1D>> {
        marginals_of_joint(&self.mass, &self.axes, Prior::Flat)
    }

    /// Columns `<names>, loss, density`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.names.clone();
        header.push("loss".into());
        header.push("density".into());
        w.write_record(&header)?;
        for (i, (l, m)) in self.loss.iter().zip(&self.mass).enumerate() {
            let mut row: Vec<String> = self.node(i).iter().map(|v| v.to_string()).collect();
            row.push(l.to_string());
            row.push(m.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Evaluates the loss at every node of the grid spanned by `axes`, over the
/// problem's free parameters.
pub fn grid_search(problem: &CalibrationProblem, axes: &[Vec<f64>]) -> Result<GridPosterior> {
    if axes.len() != problem.dim() {
        return Err(Error::Shape {
            expected: problem.dim(),
            got: axes.len(),
        });
    }
    if axes
        .iter()
        .any(|a| a.is_empty() || a.windows(2).any(|w| !(w[1] > w[0])))
    {
        return Err(Error::Schema("grid axes must be non-empty and increasing".into()));
    }
    let total = axes
        .iter()
        .try_fold(1usize, |acc, a| acc.checked_mul(a.len()))
        .filter(|&n| n <= JOINT_CELL_BUDGET)
        .ok_or_else(|| Error::Config("grid exceeds the memory budget".into()))?;
    let mut posterior = GridPosterior {
        names: problem.free_names(),
        axes: axes.to_vec(),
        loss: Vec::new(),
        mass: Vec::new(),
        failed: Vec::new(),
    };
    posterior.loss = (0..total)
        .into_par_iter()
        .map(|i| problem.loss(&posterior.node(i)).unwrap_or(f64::INFINITY))
        .collect();
    posterior.failed = posterior
        .loss
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_finite())
        .map(|(i, _)| i)
        .collect();
    let j_min = posterior.loss.iter().copied().fold(f64::INFINITY, f64::min);
    if !j_min.is_finite() {
        return Err(Error::DegenerateLikelihoods);
    }
    let unnorm: Vec<f64> = posterior.loss.iter().map(|l| (-(l - j_min)).exp()).collect();
    let widths: Vec<Vec<f64>> = axes.iter().map(|a| cell_widths(a)).collect();
    let total_mass: f64 = unnorm
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut rem = i;
            let mut vol = 1.0;
            for a in (0..axes.len()).rev() {
                vol *= widths[a][rem % axes[a].len()];
                rem /= axes[a].len();
            }
            m * vol
        })
        .sum();
    posterior.mass = unnorm.into_iter().map(|m| m / total_mass).collect();
    Ok(posterior)
}

/// One ensemble member: free-parameter values and an unnormalised weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDraw {
    pub params: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawWeighting {
    /// Uniformly chosen records weighted by `exp(-J)` in the mean.
    #[default]
    Likelihood,
    /// Uniformly chosen records, equal weights.
    Uniform,
}

/// Picks `n` records uniformly at random (with replacement).
pub fn select_draws(log: &PosteriorLog, n: usize, seed: u64, weighting: DrawWeighting) -> Result<Vec<WeightedDraw>> {
    let weights = record_weights(log)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let i = rng.random_range(0..log.len());
            WeightedDraw {
                params: log.records[i].params.clone(),
                weight: match weighting {
                    DrawWeighting::Likelihood => weights[i],
                    DrawWeighting::Uniform => 1.0,
                },
            }
        })
        .collect())
}

/// Noiseless trajectories of weighted draws with their weighted mean and
/// pointwise standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionEnsemble {
    pub draws: Vec<WeightedDraw>,
    /// Normalised weights of the surviving members.
    pub weights: Vec<f64>,
    pub members: Vec<TimeSeries>,
    pub mean: TimeSeries,
    pub std: TimeSeries,
    /// Draws whose trajectory blew up and were left out.
    pub dropped: usize,
}

impl PredictionEnsemble {
    /// Columns `t`, then `<label>_mean`, `<label>_std` per compartment.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        for l in self.mean.labels() {
            header.push(format!("{l}_mean"));
            header.push(format!("{l}_std"));
        }
        w.write_record(&header)?;
        for k in 0..self.mean.len() {
            let mut row = vec![self.mean.times()[k].to_string()];
            for c in 0..self.mean.width() {
                row.push(self.mean.get(k, c).to_string());
                row.push(self.std.get(k, c).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Fraction of data points (matched by time and label) inside
    /// `mean ± std`.
    pub fn coverage(&self, data: &TimeSeries) -> Result<f64> {
        let (mut inside, mut total) = (0usize, 0usize);
        for (c, label) in self.mean.labels().iter().enumerate() {
            let Some(dc) = data.column_index(label) else { continue };
            for (k, t) in self.mean.times().iter().enumerate() {
                let Some(dk) = data.times().iter().position(|s| (s - t).abs() < 1e-9) else {
                    continue;
                };
                let d = data.get(dk, dc);
                total += 1;
                if (d - self.mean.get(k, c)).abs() <= self.std.get(k, c) {
                    inside += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::EmptyWindow);
        }
        Ok(inside as f64 / total as f64)
    }
}

/// Runs every draw noiselessly for `steps` steps from the problem's initial
/// state and aggregates the observed columns.
pub fn predict(problem: &CalibrationProblem, draws: &[WeightedDraw], steps: usize) -> Result<PredictionEnsemble> {
    if draws.is_empty() {
        return Err(Error::EmptyWindow);
    }
    if draws.iter().any(|d| !(d.weight >= 0.0) || !d.weight.is_finite()) {
        return Err(Error::Config("draw weights must be finite and non-negative".into()));
    }
    let runs: Vec<Option<TimeSeries>> = draws
        .par_iter()
        .map(|d| problem.predict_observed(&d.params, steps).ok())
        .collect();
    let mut kept = Vec::new();
    let mut members = Vec::new();
    let mut dropped = 0;
    for (d, run) in draws.iter().zip(runs) {
        match run {
            Some(ts) if ts.values().iter().all(|v| v.is_finite()) => {
                kept.push(d.clone());
                members.push(ts);
            }
            _ => dropped += 1,
        }
    }
    let total: f64 = kept.iter().map(|d| d.weight).sum();
    if members.is_empty() || !(total > 0.0) {
        return Err(Error::DegenerateLikelihoods);
    }
    let weights: Vec<f64> = kept.iter().map(|d| d.weight / total).collect();
    let n = members[0].values().len();
    let mut mean = vec![0.0; n];
    for (m, w) in members.iter().zip(&weights) {
        for (acc, v) in mean.iter_mut().zip(m.values()) {
            *acc += w * v;
        }
    }
    let mut var = vec![0.0; n];
    for (m, w) in members.iter().zip(&weights) {
        for ((acc, v), mu) in var.iter_mut().zip(m.values()).zip(&mean) {
            *acc += w * (v - mu).powi(2);
        }
    }
    let std: Vec<f64> = var.into_iter().map(f64::sqrt).collect();
    let times = members[0].times().to_vec();
    let labels = members[0].labels().to_vec();
    Ok(PredictionEnsemble {
        draws: kept,
        weights,
        mean: TimeSeries::from_raw(times.clone(), mean, labels.clone())?,
        std: TimeSeries::from_raw(times, std, labels)?,
        members,
        dropped,
    })
}

/// Root-mean-square error, raw and relative to the mean observed level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub raw: f64,
    pub relative: f64,
    pub points: usize,
}

/// Residual of `compartment` over data times in `[start, end]`, matching
/// rows of `predicted` and `data` by time stamp.
pub fn residual(
    predicted: &TimeSeries,
    data: &TimeSeries,
    compartment: &str,
    start: f64,
    end: f64,
) -> Result<Residual> {
    let pc = predicted
        .column_index(compartment)
        .ok_or_else(|| Error::Schema(format!("prediction has no column {compartment}")))?;
    let dc = data
        .column_index(compartment)
        .ok_or_else(|| Error::Schema(format!("data has no column {compartment}")))?;
    let (mut sq, mut level, mut points) = (0.0, 0.0, 0usize);
    for (dk, &t) in data.times().iter().enumerate() {
        if t < start - 1e-9 || t > end + 1e-9 {
            continue;
        }
        let Some(pk) = predicted.times().iter().position(|s| (s - t).abs() < 1e-9) else {
            continue;
        };
        let d = data.get(dk, dc);
        sq += (predicted.get(pk, pc) - d).powi(2);
        level += d.abs();
        points += 1;
    }
    if points == 0 {
        return Err(Error::EmptyWindow);
    }
    let raw = (sq / points as f64).sqrt();
    let level = level / points as f64;
    let relative = if level > 0.0 {
        raw / level
    } else if raw == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(Residual { raw, relative, points })
}
