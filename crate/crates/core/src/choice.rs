//! Departure-time windows and the joint departure-time x route logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcsError};
use crate::market::TollProfile;
use crate::network::{Path, PathDummies};
use crate::scenario::{Traveler, Trip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChoiceParams {
    /// Per minute of travel time.
    pub beta_tt: f64,
    /// Per km of route length.
    pub beta_length: f64,
    pub beta_path_size: f64,
    /// Per signalized intersection.
    pub beta_signals: f64,
    /// Per km on highway segments.
    pub beta_highway: f64,
    pub beta_min_tt: f64,
    pub beta_min_dist: f64,
    pub beta_min_sig: f64,
    pub beta_max_hwy: f64,
    /// Half-width of the departure window in intervals.
    pub eta: usize,
    /// Interval width, minutes.
    pub window_step: f64,
}

impl Default for ChoiceParams {
    fn default() -> Self {
        ChoiceParams {
            beta_tt: -0.03,
            beta_length: -0.05,
            beta_path_size: 1.0,
            beta_signals: -0.02,
            beta_highway: 0.01,
            beta_min_tt: 0.1,
            beta_min_dist: 0.1,
            beta_min_sig: 0.1,
            beta_max_hwy: 0.1,
            eta: 6,
            window_step: 5.0,
        }
    }
}

impl ChoiceParams {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 1 {
            return Err(TcsError::invalid("choice.eta", "must be at least 1"));
        }
        if !(self.window_step > 0.0) {
            return Err(TcsError::invalid("choice.window_step", "must be positive"));
        }
        if !(self.beta_tt < 0.0) {
            return Err(TcsError::invalid("choice.beta_tt", "must be negative"));
        }
        Ok(())
    }

    /// Utility per dollar for a traveler with value of time `vot` ($/min).
    pub fn beta_cost(&self, vot: f64) -> f64 {
        self.beta_tt / vot
    }
}

/// Candidate departure times for one trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub intervals: Vec<f64>,
    pub step: f64,
    /// Preferred departure on the window grid, before any shift.
    pub preferred: f64,
    pub shifted: bool,
}

/// Round to the nearest multiple of `step`, halves going down.
pub fn round_half_down(x: f64, step: f64) -> f64 {
    let r = x / step;
    let lower = r.floor();
    if r - lower > 0.5 + 1e-9 {
        (lower + 1.0) * step
    } else {
        lower * step
    }
}

/// Preferred departure: T* minus the predicted travel time, on the window grid.
pub fn preferred_departure(trip: &Trip, predicted_tt: f64, params: &ChoiceParams) -> f64 {
    round_half_down(trip.preferred_arrival - predicted_tt, params.window_step)
}

/// Window of 2*eta + 1 departures centered on the preferred departure. If it
/// starts before `earliest` (end of the previous activity, or the day start)
/// the whole window moves right to begin there.
pub fn build_time_window(
    trip: &Trip,
    predicted_tt: f64,
    earliest: f64,
    params: &ChoiceParams,
) -> TimeWindow {
    let step = params.window_step;
    let preferred = preferred_departure(trip, predicted_tt, params);
    let eta = params.eta as f64;
    let mut start = preferred - eta * step;
    let shifted = start < earliest;
    if shifted {
        start = earliest;
    }
    TimeWindow {
        intervals: (0..=2 * params.eta).map(|j| start + j as f64 * step).collect(),
        step,
        preferred,
        shifted,
    }
}

/// Systematic utility without the toll term, evaluated at departure `t_dep`
/// with travel time `tt` (minutes) on `path`.
pub fn utility_without_toll(
    params: &ChoiceParams,
    traveler: &Traveler,
    preferred_arrival: f64,
    path: &Path,
    dummies: PathDummies,
    t_dep: f64,
    tt: f64,
) -> f64 {
    let beta_cost = params.beta_cost(traveler.vot);
    let arrival = t_dep + tt;
    let schedule = if arrival < preferred_arrival {
        beta_cost * traveler.sde_rate * (preferred_arrival - arrival)
    } else {
        beta_cost * traveler.sdl_rate * (arrival - preferred_arrival)
    };
    let dummy = |on: bool, beta: f64| if on { beta } else { 0.0 };
    params.beta_tt * tt
        + schedule
        + params.beta_path_size * path.path_size
        + params.beta_length * path.total_distance_m / 1000.0
        + params.beta_signals * path.signal_count as f64
        + params.beta_highway * path.highway_distance_m / 1000.0
        + dummy(dummies.min_tt, params.beta_min_tt)
        + dummy(dummies.min_dist, params.beta_min_dist)
        + dummy(dummies.min_sig, params.beta_min_sig)
        + dummy(dummies.max_hwy, params.beta_max_hwy)
}

/// Perceived toll in dollars: g(t) * distance credits, capped per trip, at price p.
pub fn perceived_toll(toll: &TollProfile, t_dep: f64, distance_m: f64, price: f64, cap: u32) -> f64 {
    (toll.at(t_dep) * distance_m).min(cap as f64) * price
}

/// One departure-time x route alternative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alternative {
    pub departure: f64,
    /// Index into the trip's choice set.
    pub path: usize,
    pub utility: f64,
    /// Credits the traveler expects to be charged.
    pub toll_credits: f64,
    pub predicted_tt: f64,
}

/// Inputs shared by every alternative of a trip.
pub struct ChoiceContext<'a> {
    pub params: &'a ChoiceParams,
    pub traveler: &'a Traveler,
    pub trip: &'a Trip,
    pub toll: &'a TollProfile,
    pub price: f64,
    pub max_credits: u32,
}

/// Full utility of departing at `t_dep` on `path` with predicted `tt`.
pub fn utility(ctx: &ChoiceContext<'_>, path: &Path, dummies: PathDummies, t_dep: f64, tt: f64) -> f64 {
    let base = utility_without_toll(
        ctx.params,
        ctx.traveler,
        ctx.trip.preferred_arrival,
        path,
        dummies,
        t_dep,
        tt,
    );
    let toll = perceived_toll(ctx.toll, t_dep, path.total_distance_m, ctx.price, ctx.max_credits);
    base + ctx.params.beta_cost(ctx.traveler.vot) * toll
}

/// Enumerate window x paths. `tt_lookup(path_index, t_dep)` gives predicted travel time.
pub fn alternatives(
    ctx: &ChoiceContext<'_>,
    window: &TimeWindow,
    paths: &[Path],
    dummies: &[PathDummies],
    tt_lookup: &mut dyn FnMut(usize, f64) -> Result<f64>,
) -> Result<Vec<Alternative>> {
    let mut out = Vec::with_capacity(window.intervals.len() * paths.len());
    for &t in &window.intervals {
        for (k, path) in paths.iter().enumerate() {
            let tt = tt_lookup(k, t)?;
            let credits = (ctx.toll.at(t) * path.total_distance_m).min(ctx.max_credits as f64);
            out.push(Alternative {
                departure: t,
                path: k,
                utility: utility(ctx, path, dummies[k], t, tt),
                toll_credits: credits,
                predicted_tt: tt,
            });
        }
    }
    Ok(out)
}

/// Logit probabilities with max-shifted exponentials.
pub fn probabilities(utilities: &[f64]) -> Result<Vec<f64>> {
    if utilities.is_empty() {
        return Err(TcsError::EmptyChoiceSet);
    }
    let max = utilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = utilities.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Pick an index by inverting the logit CDF at `u` in [0, 1).
pub fn choose_with_uniform(utilities: &[f64], u: f64) -> Result<usize> {
    let probs = probabilities(utilities)?;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // u within round-off of 1: last alternative with positive mass.
    Ok(probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1))
}

pub fn choose<'a, R: Rng + ?Sized>(
    alternatives: &'a [Alternative],
    rng: &mut R,
) -> Result<&'a Alternative> {
    let v: Vec<f64> = alternatives.iter().map(|a| a.utility).collect();
    let i = choose_with_uniform(&v, rng.random::<f64>())?;
    Ok(&alternatives[i])
}
