//! Toll design by Bayesian optimization over a Gaussian toll curve.

pub mod gp;

use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gp::{gp_fit, matern52, GpHyper, GpModel};

use crate::daytoday::{run_experiment, ChoiceSets, ExperimentResult, RunOptions};
use crate::error::{Result, TcsError};
use crate::market::{TollProfile, TOLL_BINS, TOLL_BIN_MINUTES};
use crate::metrics::{beta_costs, welfare_gain};
use crate::rng::{substream, SimRng, Stream};
use crate::scenario::{Scenario, MINUTES_PER_DAY};

/// Values below this are dropped from generated toll profiles, credits/m.
pub const TOLL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TollParams {
    /// Peak rate, credits per meter.
    pub amplitude: f64,
    /// Peak time, minutes of day.
    pub mean: f64,
    /// Spread, minutes.
    pub std: f64,
}

impl TollParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(TcsError::invalid("toll.amplitude", "must be finite and >= 0"));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(TcsError::invalid("toll.std", "must be positive"));
        }
        if !(0.0..MINUTES_PER_DAY).contains(&self.mean) {
            return Err(TcsError::invalid("toll.mean", "must be within [0, 1440)"));
        }
        Ok(())
    }

    pub fn as_tuple(&self) -> (f64, f64, f64) {
        (self.amplitude, self.mean, self.std)
    }
}

/// Gaussian curve evaluated at 5-minute bin centers.
pub fn toll_profile(params: &TollParams) -> TollProfile {
    let values = (0..TOLL_BINS)
        .map(|i| {
            let t = (i as f64 + 0.5) * TOLL_BIN_MINUTES;
            let g = params.amplitude * (-(t - params.mean).powi(2) / (2.0 * params.std.powi(2))).exp();
            if g < TOLL_FLOOR {
                0.0
            } else {
                g
            }
        })
        .collect();
    TollProfile::new(values).expect("non-negative finite bins")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoParams {
    /// Exploration weight of the UCB acquisition.
    pub rho: f64,
    pub iterations: usize,
    pub initial_design: usize,
    pub amplitude_range: (f64, f64),
    pub mean_range: (f64, f64),
    pub std_range: (f64, f64),
    /// Trailing days averaged into a run's score.
    pub welfare_window: usize,
    pub acquisition_samples: usize,
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Default for BoParams {
    fn default() -> Self {
        BoParams {
            rho: 2.0,
            iterations: 30,
            initial_design: 6,
            amplitude_range: (0.0, 0.04),
            mean_range: (360.0, 720.0),
            std_range: (15.0, 120.0),
            welfare_window: 10,
            acquisition_samples: 4096,
            length_scale: 0.3,
            signal_variance: 1.0,
            noise_variance: 1e-4,
        }
    }
}

impl BoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) {
            return Err(TcsError::invalid("bo.rho", "must be >= 0"));
        }
        if self.iterations < 1 {
            return Err(TcsError::invalid("bo.iterations", "must be at least 1"));
        }
        if self.initial_design < 1 || self.welfare_window < 1 || self.acquisition_samples < 1 {
            return Err(TcsError::invalid(
                "bo",
                "initial_design, welfare_window and acquisition_samples must be >= 1",
            ));
        }
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.amplitude_range) || self.amplitude_range.0 < 0.0 {
            return Err(TcsError::invalid("bo.amplitude_range", "need 0 <= lo <= hi"));
        }
        if !ok(self.mean_range) || self.mean_range.0 < 0.0 || self.mean_range.1 >= MINUTES_PER_DAY {
            return Err(TcsError::invalid("bo.mean_range", "need 0 <= lo <= hi < 1440"));
        }
        if !ok(self.std_range) || self.std_range.0 <= 0.0 {
            return Err(TcsError::invalid("bo.std_range", "need 0 < lo <= hi"));
        }
        if !(self.length_scale > 0.0 && self.signal_variance > 0.0 && self.noise_variance >= 0.0) {
            return Err(TcsError::invalid("bo", "kernel hyperparameters out of range"));
        }
        Ok(())
    }

    pub fn hyper(&self, dim: usize) -> GpHyper {
        GpHyper::isotropic(dim, self.length_scale, self.signal_variance, self.noise_variance)
    }

    fn ranges(&self) -> [(f64, f64); 3] {
        [self.amplitude_range, self.mean_range, self.std_range]
    }

    /// Map a point of the unit cube to toll parameters.
    pub fn from_unit(&self, u: &[f64]) -> TollParams {
        let r = self.ranges();
        let at = |i: usize| r[i].0 + u[i].clamp(0.0, 1.0) * (r[i].1 - r[i].0);
        TollParams {
            amplitude: at(0),
            mean: at(1),
            std: at(2),
        }
    }

    pub fn to_unit(&self, p: &TollParams) -> Vec<f64> {
        let r = self.ranges();
        [p.amplitude, p.mean, p.std]
            .iter()
            .zip(r)
            .map(|(v, (lo, hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect()
    }
}

const PRIMES: [u64; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];

/// Halton points with one random digit permutation per base (0 kept fixed so
/// the sequence stays in [0, 1)).
pub fn scrambled_halton(n: usize, dim: usize, rng: &mut SimRng) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len(), "at most {} dimensions", PRIMES.len());
    let perms: Vec<Vec<u64>> = PRIMES[..dim]
        .iter()
        .map(|&b| {
            let mut p: Vec<u64> = (1..b).collect();
            p.shuffle(rng);
            std::iter::once(0).chain(p).collect()
        })
        .collect();
    (1..=n as u64)
        .map(|i| {
            PRIMES[..dim]
                .iter()
                .zip(&perms)
                .map(|(&b, perm)| {
                    let (mut f, mut r, mut k) = (1.0, 0.0, i);
                    while k > 0 {
                        f /= b as f64;
                        r += f * perm[(k % b) as usize] as f64;
                        k /= b;
                    }
                    r
                })
                .collect()
        })
        .collect()
}

/// UCB acquisition on a model of the quantity to minimize.
pub fn ucb(model: &GpModel, x: &[f64], rho: f64) -> f64 {
    let (m, v) = model.posterior(x);
    -m + rho * v.sqrt()
}

/// Maximize the acquisition over the unit cube: random samples, then
/// coordinate refinement of the best one. Ties keep the first point found.
pub fn propose_next(model: &GpModel, rho: f64, samples: usize, rng: &mut SimRng) -> Vec<f64> {
    let dim = model.x.first().map(|x| x.len()).unwrap_or(1);
    let mut best: Vec<f64> = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    for _ in 0..samples {
        let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let v = ucb(model, &x, rho);
        if v > best_val {
            best_val = v;
            best = x;
        }
    }
    let mut step = 0.05;
    while step > 1e-4 {
        let mut improved = true;
        while improved {
            improved = false;
            for d in 0..dim {
                for dir in [-1.0, 1.0] {
                    let mut x = best.clone();
                    x[d] = (x[d] + dir * step).clamp(0.0, 1.0);
                    let v = ucb(model, &x, rho);
                    if v > best_val {
                        best_val = v;
                        best = x;
                        improved = true;
                    }
                }
            }
        }
        step /= 2.0;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoRecord {
    /// 1-based over initial design and acquisitions.
    pub iteration: usize,
    pub initial: bool,
    pub x: Vec<f64>,
    pub score: f64,
    /// Best score so far.
    pub incumbent: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoHistory {
    pub records: Vec<BoRecord>,
}

impl BoHistory {
    pub fn best(&self) -> Option<&BoRecord> {
        let mut best: Option<&BoRecord> = None;
        for r in &self.records {
            if best.is_none_or(|b| r.score > b.score) {
                best = Some(r);
            }
        }
        best
    }

    fn push(&mut self, x: Vec<f64>, score: f64, initial: bool) {
        let incumbent = self
            .records
            .last()
            .map(|r| r.incumbent.max(score))
            .unwrap_or(score);
        self.records.push(BoRecord {
            iteration: self.records.len() + 1,
            initial,
            x,
            score,
            incumbent,
        });
    }
}

/// Maximize `objective` over the unit cube of dimension `dim`. The GP models
/// the negated score so the acquisition's -mu + rho*sigma targets high scores.
pub fn maximize(
    dim: usize,
    params: &BoParams,
    rng: &mut SimRng,
    objective: &mut dyn FnMut(&[f64]) -> Result<f64>,
) -> Result<BoHistory> {
    let mut history = BoHistory::default();
    for x in scrambled_halton(params.initial_design, dim, rng) {
        let score = objective(&x)?;
        history.push(x, score, true);
    }
    for _ in 0..params.iterations {
        let xs: Vec<Vec<f64>> = history.records.iter().map(|r| r.x.clone()).collect();
        let ys: Vec<f64> = history.records.iter().map(|r| -r.score).collect();
        let model = gp_fit(xs, &ys, params.hyper(dim))?;
        let x = propose_next(&model, params.rho, params.acquisition_samples, rng);
        let score = objective(&x)?;
        history.push(x, score, false);
    }
    Ok(history)
}

/// One evaluated toll candidate.
#[derive(Debug, Clone)]
pub struct TollEvaluation {
    pub params: TollParams,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct BoOutcome {
    pub best: TollParams,
    pub best_score: f64,
    pub evaluations: Vec<TollEvaluation>,
    pub history: BoHistory,
}

/// Mean per-capita welfare gain of `toll` over the averaging window.
pub fn score_toll(
    scenario: &Scenario,
    sets: &ChoiceSets,
    base: &ExperimentResult,
    toll: &TollProfile,
) -> Result<(f64, ExperimentResult)> {
    let run = if toll.is_zero() {
        // A zero profile disables the scheme; the run is the baseline itself.
        base.clone()
    } else {
        run_experiment(scenario, sets, toll, RunOptions::default())?
    };
    let betas = beta_costs(&scenario.config.choice, &scenario.population);
    let score = welfare_gain(&run, base, &betas, scenario.config.bo.welfare_window)?;
    Ok((score, run))
}

/// Simulate, score and update for `config.bo.iterations` rounds after the
/// initial design. Every candidate restarts from free-flow knowledge.
pub fn bo_loop(scenario: &Scenario, sets: &ChoiceSets, base: &ExperimentResult) -> Result<BoOutcome> {
    let params = &scenario.config.bo;
    let mut rng = substream(scenario.config.seed, Stream::Optimizer, &[]);
    let mut evaluations = Vec::new();
    let history = maximize(3, params, &mut rng, &mut |u| {
        let tp = params.from_unit(u);
        let (score, _) = score_toll(scenario, sets, base, &toll_profile(&tp))?;
        evaluations.push(TollEvaluation { params: tp, score });
        Ok(score)
    })?;
    let best = history.best().expect("at least one evaluation");
    Ok(BoOutcome {
        best: params.from_unit(&best.x),
        best_score: best.score,
        evaluations,
        history,
    })
}

pub fn write_history_csv(path: &FsPath, outcome: &BoOutcome) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| TcsError::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["iteration", "amplitude", "mean", "std", "score", "incumbent", "phase"])?;
    for (r, e) in outcome.history.records.iter().zip(&outcome.evaluations) {
        w.write_record([
            r.iteration.to_string(),
            format!("{}", e.params.amplitude),
            format!("{}", e.params.mean),
            format!("{}", e.params.std),
            format!("{}", r.score),
            format!("{}", r.incumbent),
            if r.initial { "initial" } else { "ucb" }.to_string(),
        ])?;
    }
    w.flush().map_err(|e| TcsError::io(path, e))
}
