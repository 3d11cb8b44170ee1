//! Statistical and structural properties that need more than a unit test:
//! larger samples, the Berlin-like configuration, or several modules at once.

use std::path::PathBuf;

use epical::calibrate::{run_ensemble, CalibrationProblem, LossSpec, ObservationMap, TrainConfig};
use epical::dynamics::{integrate, sir_model, ParameterVector};
use epical::io::{self, RunConfig};
use epical::mcmc::{mala_step, LogTarget, PreconditionerState, State};
use epical::neural::NetConfig;
use epical::posterior::{grid_search, hellinger, linspace, predict, WeightedDraw};
use epical::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct StandardNormal1D;

impl LogTarget for StandardNormal1D {
    fn dim(&self) -> usize {
        1
    }

    fn log_density(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((-0.5 * x[0] * x[0], vec![-x[0]]))
    }
}

fn normal_mass(lo: f64, hi: f64) -> f64 {
    let n = 2000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let inner: f64 = (1..n)
        .map(|i| f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    h / 3.0 * (f(lo) + f(hi) + inner)
}

#[test]
fn fixed_step_mala_samples_a_standard_normal() {
    let target = StandardNormal1D;
    let mut pre = PreconditionerState::identity(1);
    let mut current = State {
        x: vec![0.0],
        log_density: 0.0,
        grad: vec![0.0],
        hessian: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (samples, thinning, eps) = (100_000, 10, 1.0);
    for _ in 0..1000 {
        mala_step(&target, &mut current, &mut pre, eps, &mut rng).unwrap();
    }

    // 18 bins of width 0.3 on [-2.7, 2.7] plus two tails.
    let edges: Vec<f64> = (0..=18).map(|i| -2.7 + 0.3 * i as f64).collect();
    let mut counts = [0usize; 20];
    for _ in 0..samples {
        for _ in 0..thinning {
            mala_step(&target, &mut current, &mut pre, eps, &mut rng).unwrap();
        }
        counts[edges.partition_point(|&e| e <= current.x[0])] += 1;
    }
    let tail = 0.5 - normal_mass(0.0, 2.7);
    let expected: Vec<f64> = std::iter::once(tail)
        .chain(edges.windows(2).map(|w| normal_mass(w[0], w[1])))
        .chain(std::iter::once(tail))
        .map(|p| p * samples as f64)
        .collect();
    let chi2: f64 = counts
        .iter()
        .zip(&expected)
        .map(|(&o, e)| (o as f64 - e).powi(2) / e)
        .sum();
    // 99th percentile of chi-square with 19 degrees of freedom.
    assert!(chi2 < 36.19, "chi2 = {chi2}, counts {counts:?}");
}

fn berlin() -> io::Prepared {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/berlin-surrogate.toml");
    io::prepare(&RunConfig::load(&path).unwrap()).unwrap()
}

fn sample_box(init_box: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    init_box.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect()
}

#[test]
fn seirdplus_stays_nonnegative_over_the_calibration_box() {
    let prepared = berlin();
    let problem = &prepared.problem;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let free = sample_box(&problem.init_box, &mut rng);
        let params = problem.model.parameter_vector(&problem.full_parameters(&free)).unwrap();
        for dt in [1.0, 0.5] {
            let steps = (problem.steps() as f64 / dt) as usize;
            let (series, report) = integrate(&problem.model, &params, &problem.initial_state, dt, steps, None).unwrap();
            assert_eq!(report.negative_excursions, 0, "{free:?} dt {dt}");
            assert!(series.values().iter().all(|v| *v >= 0.0));
        }
    }
}

fn spread(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(0.0, f64::max);
    let min = terms.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

/// Reciprocal-integral weights scale each term like the compartment's size
/// times its squared relative error, so small compartments stay small; the
/// spread is still orders of magnitude narrower than with the plain loss.
#[test]
fn weighting_narrows_the_spread_of_berlin_loss_terms() {
    let prepared = berlin();
    let problem = &prepared.problem;
    let observed = problem.observed.values();
    let width = problem.observed.width();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut weighted_spreads = Vec::new();
    for _ in 0..10 {
        let free = sample_box(&problem.init_box, &mut rng);
        let predicted = problem.predict_observed(&free, problem.steps()).unwrap();
        let mut sums = vec![0.0; width];
        for (idx, (p, o)) in predicted.values().iter().zip(observed).enumerate() {
            sums[idx % width] += (p - o).powi(2);
        }
        let fitted = |scale: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..width)
                .filter(|&c| problem.loss.fit[c])
                .map(|c| sums[c] * scale(c))
                .collect()
        };
        let plain = spread(&fitted(&|_| 1.0));
        let weighted = spread(&fitted(&|c| problem.loss.weights[c]));
        assert!(weighted * 10.0 < plain, "{free:?}: weighted {weighted}, plain {plain}");
        weighted_spreads.push(weighted);
    }
    weighted_spreads.sort_by(f64::total_cmp);
    assert!(weighted_spreads[5] < 1e3, "{weighted_spreads:?}");
}

fn sir_problem(noisy: bool) -> CalibrationProblem {
    let model = sir_model();
    let truth = ParameterVector::from_pairs([("beta", 0.2), ("tau", 14.0), ("sigma", if noisy { 0.1 } else { 0.0 })]);
    let y0 = vec![0.99, 0.01, 0.0];
    let noise = noisy.then(|| epical::dynamics::NoiseDriver::new(0));
    let (data, _) = integrate(&model, &truth, &y0, 1.0, 100, noise).unwrap();
    let obs = ObservationMap::identity(&model);
    CalibrationProblem::new(
        model,
        data,
        obs,
        LossSpec::plain(3),
        y0,
        vec![0, 1],
        vec![0.2, 14.0, 0.0],
        vec![(0.05, 0.5), (2.0, 30.0)],
    )
    .unwrap()
}

#[test]
fn every_training_epoch_enters_the_log() {
    let problem = sir_problem(true);
    let train = TrainConfig {
        epochs: 40,
        ..TrainConfig::default()
    };
    let ens = run_ensemble(&problem, &NetConfig::default(), &train, 6, 2, 4).unwrap();
    let ran: usize = ens.chains.iter().map(|c| c.losses.len()).sum();
    assert_eq!(ens.log.len(), ran);
    assert!(ens.chains.iter().all(|c| c.losses.len() <= 40));
}

#[test]
fn grid_oracle_converges_under_refinement() {
    let problem = sir_problem(true);
    let levels = [12, 24, 48, 96];
    let marginals: Vec<_> = levels
        .iter()
        .map(|&n| {
            let axes = vec![linspace(0.15, 0.25, n), linspace(10.0, 20.0, n)];
            grid_search(&problem, &axes).unwrap().marginals().unwrap()
        })
        .collect();
    for axis in 0..2 {
        let changes: Vec<f64> = marginals
            .windows(2)
            .map(|w| {
                let coarse = &w[0][axis];
                hellinger(&w[1][axis].resample(coarse.grid()).unwrap(), coarse).unwrap()
            })
            .collect();
        for (change, n) in changes.iter().zip(levels) {
            assert!(*change < 1.0 / (n - 1) as f64, "axis {axis}: {changes:?}");
        }
        assert!(changes.windows(2).all(|w| w[1] < w[0]), "axis {axis}: {changes:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prediction_is_invariant_to_weight_scale(
        weights in proptest::collection::vec(0.01f64..1.0, 5),
        factor in 1e-3f64..1e3,
    ) {
        let problem = sir_problem(false);
        let draws: Vec<WeightedDraw> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| WeightedDraw { params: vec![0.15 + 0.02 * i as f64, 10.0 + i as f64], weight: w })
            .collect();
        let scaled: Vec<WeightedDraw> = draws
            .iter()
            .map(|d| WeightedDraw { params: d.params.clone(), weight: d.weight * factor })
            .collect();
        let a = predict(&problem, &draws, 60).unwrap();
        let b = predict(&problem, &scaled, 60).unwrap();
        for (x, y) in a.mean.values().iter().zip(b.mean.values()).chain(a.std.values().iter().zip(b.std.values())) {
            prop_assert!((x - y).abs() <= 1e-10 * x.abs() + 1e-14, "{x} vs {y}");
        }
    }
}
