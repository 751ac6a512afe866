//! Multi-day loop: within-day simulation, travel-time learning and price updates.

mod within_day;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TcsError};
use crate::market::{MarketWorld, TollProfile, Transaction};
use crate::network::{build_choice_set, ChoiceSet, ChoiceSetCache, Network, NodeId, SegmentId};
use crate::scenario::Scenario;
use crate::supply::{ObservedLinkTimes, SupplyParams, TripRecord};

pub use within_day::{simulate_day, DayInputs, DayOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningParams {
    /// Weight of the newest observation in the smoothed table.
    pub learning_rate: f64,
    /// Trailing days checked by the stability criterion.
    pub stability_window: usize,
    /// Maximum relative standard deviation of per-capita utility in the window.
    pub stability_tolerance: f64,
}

impl Default for LearningParams {
    fn default() -> Self {
        LearningParams {
            learning_rate: 0.2,
            stability_window: 10,
            stability_tolerance: 0.05,
        }
    }
}

impl LearningParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(TcsError::invalid("learning.learning_rate", "must be in (0, 1]"));
        }
        if self.stability_window < 2 {
            return Err(TcsError::invalid("learning.stability_window", "must be at least 2"));
        }
        if !(self.stability_tolerance > 0.0) {
            return Err(TcsError::invalid("learning.stability_tolerance", "must be positive"));
        }
        Ok(())
    }
}

/// Time-dependent link travel times (minutes) by segment and entry bin.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkTravelTimeTable {
    bins: usize,
    bin_minutes: f64,
    times: Vec<f64>,
    free_flow: Vec<f64>,
}

impl LinkTravelTimeTable {
    pub fn free_flow(net: &Network, params: &SupplyParams) -> Self {
        let bins = params.day_bins();
        let free_flow: Vec<f64> = net.segments().iter().map(|s| s.free_flow_min()).collect();
        let times = free_flow
            .iter()
            .flat_map(|&ff| std::iter::repeat_n(ff, bins))
            .collect();
        LinkTravelTimeTable {
            bins,
            bin_minutes: params.bin_minutes,
            times,
            free_flow,
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bin_of(&self, minute: f64) -> usize {
        ((minute / self.bin_minutes + 1e-9).floor().max(0.0) as usize).min(self.bins - 1)
    }

    pub fn get(&self, seg: SegmentId, bin: usize) -> f64 {
        self.times[seg * self.bins + bin.min(self.bins - 1)]
    }

    pub fn set(&mut self, seg: SegmentId, bin: usize, minutes: f64) {
        let ff = self.free_flow[seg];
        self.times[seg * self.bins + bin] = minutes.max(ff);
    }

    pub fn free_flow_of(&self, seg: SegmentId) -> f64 {
        self.free_flow[seg]
    }

    /// Travel time along `segments` departing at `t`, advancing the bin as the
    /// path is traversed.
    pub fn path_travel_time(&self, segments: &[SegmentId], t: f64) -> f64 {
        let mut clock = t;
        for &s in segments {
            clock += self.get(s, self.bin_of(clock));
        }
        clock - t
    }

    /// Exponential smoothing; bins without observations keep their value.
    pub fn smooth(&self, observed: &ObservedLinkTimes, learning_rate: f64) -> Self {
        let mut next = self.clone();
        for seg in 0..self.free_flow.len() {
            for bin in 0..self.bins {
                if let Some(obs) = observed.mean(seg, bin) {
                    let old = self.get(seg, bin);
                    next.set(seg, bin, (1.0 - learning_rate) * old + learning_rate * obs);
                }
            }
        }
        next
    }

    /// Mean absolute entry-wise difference, minutes.
    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        let total: f64 = self
            .times
            .iter()
            .zip(&other.times)
            .map(|(a, b)| (a - b).abs())
            .sum();
        total / self.times.len() as f64
    }
}

/// sum |TT_sim - TT_pre| / sum TT_sim over all trips.
pub fn inconsistency(records: &[TripRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(TcsError::NoRecords);
    }
    let num: f64 = records
        .iter()
        .map(|r| (r.travel_time - r.predicted_tt).abs())
        .sum();
    let den: f64 = records.iter().map(|r| r.travel_time).sum();
    Ok(num / den)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Relative std of the trailing `window` values below `tolerance`.
pub fn is_stable(series: &[f64], window: usize, tolerance: f64) -> bool {
    if series.len() < window || window == 0 {
        return false;
    }
    let (mean, std) = mean_std(&series[series.len() - window..]);
    mean != 0.0 && std / mean.abs() < tolerance
}

/// Choice sets for every OD pair in the population, shared across runs.
#[derive(Debug, Clone)]
pub struct ChoiceSets {
    pub sets: Vec<ChoiceSet>,
    /// `by_trip[traveler][trip]` indexes `sets`.
    pub by_trip: Vec<Vec<usize>>,
}

impl ChoiceSets {
    pub fn build(scenario: &Scenario) -> Result<Self> {
        let net = &scenario.network;
        let cache_path = scenario.config.network.choice_set_cache.as_deref();
        let mut cached: HashMap<(NodeId, NodeId), ChoiceSet> = cache_path
            .and_then(|p| ChoiceSetCache::load_matching(p, net))
            .map(|c| c.into_map())
            .unwrap_or_default();
        let mut index: HashMap<(NodeId, NodeId), usize> = HashMap::new();
        let mut sets = Vec::new();
        let mut by_trip = Vec::with_capacity(scenario.population.len());
        let mut fresh = false;
        for t in &scenario.population {
            let mut row = Vec::with_capacity(t.trips.len());
            for trip in &t.trips {
                let od = (trip.origin, trip.destination);
                let i = match index.get(&od) {
                    Some(&i) => i,
                    None => {
                        let set = match cached.remove(&od) {
                            Some(s) => s,
                            None => {
                                fresh = true;
                                build_choice_set(
                                    net,
                                    od.0,
                                    od.1,
                                    &scenario.config.choice_set,
                                )?
                            }
                        };
                        sets.push(set);
                        index.insert(od, sets.len() - 1);
                        sets.len() - 1
                    }
                };
                row.push(i);
            }
            by_trip.push(row);
        }
        if let (Some(p), true) = (cache_path, fresh) {
            ChoiceSetCache {
                network_hash: net.content_hash(),
                sets: sets.clone(),
            }
            .save(p)?;
        }
        Ok(ChoiceSets { sets, by_trip })
    }

    pub fn for_trip(&self, traveler: usize, trip: usize) -> &ChoiceSet {
        &self.sets[self.by_trip[traveler][trip]]
    }
}

/// Optional outputs of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Keep allocation transactions in the log (one per traveler per instant).
    pub log_allocations: bool,
}

/// Everything recorded for one simulated day.
#[derive(Debug, Clone)]
pub struct DayResult {
    /// 1-based.
    pub day: usize,
    /// Price in force during the day.
    pub price: f64,
    pub next_price: f64,
    /// Bought minus sold credits.
    pub excess: i64,
    pub bought: u64,
    pub sold: u64,
    pub inconsistency: f64,
    /// Mean absolute change of the learned table, minutes.
    pub table_change: f64,
    /// Sorted by (traveler, trip).
    pub records: Vec<TripRecord>,
    pub transactions: Vec<Transaction>,
    /// Mean vehicles on the network per bin.
    pub accumulation: Vec<f64>,
    /// Summed experienced utility per traveler, toll term included.
    pub utility: Vec<f64>,
    /// Dollars paid in credits per traveler (charged credits x price).
    pub toll_money: Vec<f64>,
}

impl DayResult {
    pub fn utility_per_capita(&self) -> f64 {
        self.utility.iter().sum::<f64>() / self.utility.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub days: Vec<DayResult>,
    pub toll: TollProfile,
    pub final_table: LinkTravelTimeTable,
}

impl ExperimentResult {
    pub fn utility_series(&self) -> Vec<f64> {
        self.days.iter().map(|d| d.utility_per_capita()).collect()
    }

    pub fn inconsistency_series(&self) -> Vec<f64> {
        self.days.iter().map(|d| d.inconsistency).collect()
    }

    pub fn price_series(&self) -> Vec<f64> {
        self.days.iter().map(|d| d.price).collect()
    }

    /// The stability criterion on per-capita utility.
    pub fn is_stable(&self, params: &LearningParams) -> bool {
        is_stable(
            &self.utility_series(),
            params.stability_window,
            params.stability_tolerance,
        )
    }
}

/// Run `config.days` days from free-flow knowledge and the initial price.
pub fn run_experiment(
    scenario: &Scenario,
    sets: &ChoiceSets,
    toll: &TollProfile,
    options: RunOptions,
) -> Result<ExperimentResult> {
    let cfg = &scenario.config;
    let mut table = LinkTravelTimeTable::free_flow(&scenario.network, &cfg.supply);
    let mut market = MarketWorld::new(cfg.tcs.clone(), toll.clone(), scenario.population.len());
    market.log_allocations = options.log_allocations;
    let mut days = Vec::with_capacity(cfg.days);
    for day in 1..=cfg.days {
        let price = market.state.price;
        let out = simulate_day(DayInputs {
            scenario,
            sets,
            table: &table,
            market: &mut market,
            day,
        })?;
        let inconsistency = inconsistency(&out.records)?;
        let bought = market.state.bought_today;
        let sold = market.state.sold_today;
        let (excess, next_price) = market.end_day();
        let next_table = table.smooth(&out.observed, cfg.learning.learning_rate);
        let table_change = next_table.mean_abs_diff(&table);
        table = next_table;
        days.push(DayResult {
            day,
            price,
            next_price,
            excess,
            bought,
            sold,
            inconsistency,
            table_change,
            records: out.records,
            transactions: out.transactions,
            accumulation: out.accumulation,
            utility: out.utility,
            toll_money: out.toll_money,
        });
    }
    Ok(ExperimentResult {
        days,
        toll: toll.clone(),
        final_table: table,
    })
}
