//! Welfare, congestion and market statistics, plus CSV/JSON writers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::choice::ChoiceParams;
use crate::daytoday::{DayResult, ExperimentResult};
use crate::error::{Result, TcsError};
use crate::market::{Transaction, TransactionKind};
use crate::scenario::{Traveler, TravelerId};
use crate::supply::TripRecord;

/// Bin width for departure, TTI and accumulation series, minutes.
pub const SERIES_BIN: f64 = 5.0;
/// Bin width for schedule-delay and sale-size summaries, minutes.
pub const SUMMARY_BIN: f64 = 30.0;

pub fn beta_costs(params: &ChoiceParams, population: &[Traveler]) -> Vec<f64> {
    population.iter().map(|t| params.beta_cost(t.vot)).collect()
}

/// Welfare of one day relative to the matched baseline day, in dollars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Welfare {
    pub total: f64,
    pub per_capita: f64,
}

/// Sum over travelers of ((U - beta_cost * toll money) - U_base) / |beta_cost|.
pub fn social_welfare(tcs: &DayResult, base: &DayResult, beta_costs: &[f64]) -> Result<Welfare> {
    let n = beta_costs.len();
    if tcs.utility.len() != n || base.utility.len() != n || tcs.toll_money.len() != n {
        return Err(TcsError::PopulationMismatch(format!(
            "{} travelers in the toll run, {} in the baseline, {} cost coefficients",
            tcs.utility.len(),
            base.utility.len(),
            n
        )));
    }
    let total: f64 = (0..n)
        .map(|i| {
            let b = beta_costs[i];
            ((tcs.utility[i] - b * tcs.toll_money[i]) - base.utility[i]) / b.abs()
        })
        .sum();
    Ok(Welfare {
        total,
        per_capita: total / n.max(1) as f64,
    })
}

/// Mean per-capita welfare over the last `window` days, matching days by index.
pub fn welfare_gain(
    tcs: &ExperimentResult,
    base: &ExperimentResult,
    beta_costs: &[f64],
    window: usize,
) -> Result<f64> {
    if tcs.days.len() != base.days.len() {
        return Err(TcsError::PopulationMismatch(format!(
            "{} toll days vs {} baseline days",
            tcs.days.len(),
            base.days.len()
        )));
    }
    let w = window.clamp(1, tcs.days.len().max(1));
    let start = tcs.days.len().saturating_sub(w);
    let mut sum = 0.0;
    for (a, b) in tcs.days[start..].iter().zip(&base.days[start..]) {
        sum += social_welfare(a, b, beta_costs)?.per_capita;
    }
    Ok(sum / w as f64)
}

/// Bin of a time in the left-open convention: bin b covers (b*w, (b+1)*w].
fn left_open_bin(t: f64, width: f64) -> usize {
    ((t / width - 1e-9).ceil() - 1.0).max(0.0) as usize
}

/// Distance-weighted mean of TT / TT_ff per departure bin; empty bins omitted.
pub fn weighted_tti(records: &[TripRecord], bin_minutes: f64) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(left_open_bin(r.departure, bin_minutes)).or_default();
        e.0 += r.distance_m * r.travel_time / r.free_flow_tt;
        e.1 += r.distance_m;
    }
    acc.into_iter()
        .filter(|(_, (_, d))| *d > 0.0)
        .map(|(b, (num, den))| (b, num / den))
        .collect()
}

/// Departures per bin.
pub fn departure_counts(records: &[TripRecord], bin_minutes: f64) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(left_open_bin(r.departure, bin_minutes)).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScheduleDelayBin {
    pub trips: usize,
    /// $ per trip.
    pub early: f64,
    pub late: f64,
}

/// Mean early/late schedule-delay cost per trip, by preferred-arrival bin.
pub fn schedule_delay_costs(
    records: &[TripRecord],
    population: &[Traveler],
    bin_minutes: f64,
) -> BTreeMap<usize, ScheduleDelayBin> {
    let mut out: BTreeMap<usize, ScheduleDelayBin> = BTreeMap::new();
    for r in records {
        let t = &population[r.traveler as usize];
        let b = out
            .entry((r.preferred_arrival / bin_minutes).floor() as usize)
            .or_default();
        b.trips += 1;
        b.early += t.sde_rate * (r.preferred_arrival - r.arrival).max(0.0);
        b.late += t.sdl_rate * (r.arrival - r.preferred_arrival).max(0.0);
    }
    for b in out.values_mut() {
        b.early /= b.trips as f64;
        b.late /= b.trips as f64;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransactionStats {
    pub sells: usize,
    pub buys: usize,
    pub sold_credits: u64,
    pub bought_credits: u64,
    pub traded_credits: u64,
    /// Travelers who sold and later bought within the same day.
    pub buyback_travelers: usize,
    pub sellers: usize,
    /// Mean credits per sale by 30-minute bin of the day.
    pub mean_sell_amount: BTreeMap<usize, f64>,
}

pub fn transaction_stats(transactions: &[Transaction]) -> TransactionStats {
    let mut stats = TransactionStats::default();
    let mut first_sell: HashMap<(usize, TravelerId), f64> = HashMap::new();
    let mut buyback: HashSet<TravelerId> = HashSet::new();
    let mut sellers: HashSet<TravelerId> = HashSet::new();
    let mut sell_bins: BTreeMap<usize, (u64, usize)> = BTreeMap::new();
    let mut ordered: Vec<&Transaction> = transactions.iter().collect();
    ordered.sort_by(|a, b| a.day.cmp(&b.day).then(a.time.total_cmp(&b.time)));
    for tx in ordered {
        let Some(who) = tx.traveler() else { continue };
        match tx.kind {
            TransactionKind::Sell => {
                stats.sells += 1;
                stats.sold_credits += tx.amount as u64;
                sellers.insert(who);
                first_sell.entry((tx.day, who)).or_insert(tx.time);
                let e = sell_bins
                    .entry((tx.time / SUMMARY_BIN).floor() as usize)
                    .or_default();
                e.0 += tx.amount as u64;
                e.1 += 1;
            }
            TransactionKind::Buy => {
                stats.buys += 1;
                stats.bought_credits += tx.amount as u64;
                if first_sell.get(&(tx.day, who)).is_some_and(|t| *t <= tx.time) {
                    buyback.insert(who);
                }
            }
            _ => {}
        }
    }
    stats.traded_credits = stats.sold_credits + stats.bought_credits;
    stats.buyback_travelers = buyback.len();
    stats.sellers = sellers.len();
    stats.mean_sell_amount = sell_bins
        .into_iter()
        .map(|(b, (credits, n))| (b, credits as f64 / n as f64))
        .collect();
    stats
}

/// Per-day summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayMetrics {
    pub day: usize,
    pub inconsistency: f64,
    pub price: f64,
    pub excess: i64,
    pub bought: u64,
    pub sold: u64,
    pub utility_per_capita: f64,
    pub welfare_gain_per_capita: Option<f64>,
    pub sells: usize,
    pub buys: usize,
    pub traded_credits: u64,
    pub buyback_travelers: usize,
    pub mean_travel_time: f64,
    pub peak_tti: f64,
    pub peak_accumulation: f64,
    pub credits_charged: u64,
}

pub fn day_metrics(day: &DayResult, base: Option<&DayResult>, beta_costs: &[f64]) -> Result<DayMetrics> {
    let stats = transaction_stats(&day.transactions);
    let welfare = match base {
        Some(b) => Some(social_welfare(day, b, beta_costs)?.per_capita),
        None => None,
    };
    let tti = weighted_tti(&day.records, SERIES_BIN);
    let n = day.records.len().max(1) as f64;
    Ok(DayMetrics {
        day: day.day,
        inconsistency: day.inconsistency,
        price: day.price,
        excess: day.excess,
        bought: day.bought,
        sold: day.sold,
        utility_per_capita: day.utility_per_capita(),
        welfare_gain_per_capita: welfare,
        sells: stats.sells,
        buys: stats.buys,
        traded_credits: stats.traded_credits,
        buyback_travelers: stats.buyback_travelers,
        mean_travel_time: day.records.iter().map(|r| r.travel_time).sum::<f64>() / n,
        peak_tti: tti.values().cloned().fold(0.0, f64::max),
        peak_accumulation: day.accumulation.iter().cloned().fold(0.0, f64::max),
        credits_charged: day.records.iter().map(|r| r.charged as u64).sum(),
    })
}

pub fn experiment_metrics(
    run: &ExperimentResult,
    base: Option<&ExperimentResult>,
    beta_costs: &[f64],
) -> Result<Vec<DayMetrics>> {
    run.days
        .iter()
        .enumerate()
        .map(|(i, d)| day_metrics(d, base.and_then(|b| b.days.get(i)), beta_costs))
        .collect()
}

/// Series averaged over the last `window` days, keyed by bin.
pub fn window_mean_series<F>(run: &ExperimentResult, window: usize, series: F) -> BTreeMap<usize, f64>
where
    F: Fn(&DayResult) -> BTreeMap<usize, f64>,
{
    let w = window.clamp(1, run.days.len().max(1));
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for d in &run.days[run.days.len() - w..] {
        for (b, v) in series(d) {
            let e = acc.entry(b).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(b, (s, n))| (b, s / n as f64)).collect()
}

/// Run-level summary mirroring a per-scenario comparison table. Counts are
/// means per day over the averaging window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub days: usize,
    pub window: usize,
    pub profit_threshold: f64,
    /// (A credits/m, mu minutes, sigma minutes) when the toll is a Gaussian curve.
    pub tariff: Option<(f64, f64, f64)>,
    pub sells: f64,
    pub buys: f64,
    pub traded_credits: f64,
    pub buyback_travelers: f64,
    pub welfare_gain_per_capita: Option<f64>,
    pub final_price: f64,
    pub mean_inconsistency: f64,
    pub utility_per_capita: f64,
    pub peak_tti: f64,
    pub peak_accumulation: f64,
    pub stable: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn summarize(
    label: &str,
    seed: u64,
    run: &ExperimentResult,
    metrics: &[DayMetrics],
    window: usize,
    profit_threshold: f64,
    tariff: Option<(f64, f64, f64)>,
    stable: bool,
) -> RunSummary {
    let w = window.clamp(1, metrics.len().max(1));
    let tail = &metrics[metrics.len() - w..];
    let mean = |f: &dyn Fn(&DayMetrics) -> f64| tail.iter().map(f).sum::<f64>() / w as f64;
    let welfare = tail
        .iter()
        .map(|m| m.welfare_gain_per_capita)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / w as f64);
    let tti = window_mean_series(run, w, |d| weighted_tti(&d.records, SERIES_BIN));
    let acc = window_mean_series(run, w, |d| d.accumulation.iter().cloned().enumerate().collect());
    RunSummary {
        label: label.to_string(),
        seed,
        days: metrics.len(),
        window: w,
        profit_threshold,
        tariff,
        sells: mean(&|m| m.sells as f64),
        buys: mean(&|m| m.buys as f64),
        traded_credits: mean(&|m| m.traded_credits as f64),
        buyback_travelers: mean(&|m| m.buyback_travelers as f64),
        welfare_gain_per_capita: welfare,
        final_price: run.days.last().map(|d| d.next_price).unwrap_or(0.0),
        mean_inconsistency: mean(&|m| m.inconsistency),
        utility_per_capita: mean(&|m| m.utility_per_capita),
        peak_tti: tti.values().cloned().fold(0.0, f64::max),
        peak_accumulation: acc.values().cloned().fold(0.0, f64::max),
        stable,
    }
}

fn create(path: &FsPath) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| TcsError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_metrics_csv(path: &FsPath, rows: &[DayMetrics]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record([
        "day",
        "inconsistency",
        "price",
        "excess",
        "bought",
        "sold",
        "utility_per_capita",
        "welfare_gain_per_capita",
        "sells",
        "buys",
        "traded_credits",
        "buyback_travelers",
        "mean_travel_time",
        "peak_tti",
        "peak_accumulation",
        "credits_charged",
    ])?;
    for m in rows {
        w.write_record([
            m.day.to_string(),
            format!("{}", m.inconsistency),
            format!("{}", m.price),
            m.excess.to_string(),
            m.bought.to_string(),
            m.sold.to_string(),
            format!("{}", m.utility_per_capita),
            opt(m.welfare_gain_per_capita),
            m.sells.to_string(),
            m.buys.to_string(),
            m.traded_credits.to_string(),
            m.buyback_travelers.to_string(),
            format!("{}", m.mean_travel_time),
            format!("{}", m.peak_tti),
            format!("{}", m.peak_accumulation),
            m.credits_charged.to_string(),
        ])?;
    }
    w.flush().map_err(|e| TcsError::io(path, e))
}

pub fn write_trips_csv(path: &FsPath, run: &ExperimentResult) -> Result<()> {
    let mut w = create(path)?;
    w.write_record([
        "day",
        "traveler",
        "trip",
        "departure",
        "arrival",
        "travel_time",
        "free_flow_tt",
        "predicted_tt",
        "distance_m",
        "path",
        "charged",
        "price",
        "preferred_arrival",
        "early_min",
        "late_min",
    ])?;
    for d in &run.days {
        for r in &d.records {
            w.write_record([
                d.day.to_string(),
                r.traveler.to_string(),
                r.trip.to_string(),
                format!("{}", r.departure),
                format!("{}", r.arrival),
                format!("{}", r.travel_time),
                format!("{}", r.free_flow_tt),
                format!("{}", r.predicted_tt),
                format!("{}", r.distance_m),
                r.path.to_string(),
                r.charged.to_string(),
                format!("{}", r.price),
                format!("{}", r.preferred_arrival),
                format!("{}", r.early_min),
                format!("{}", r.late_min),
            ])?;
        }
    }
    w.flush().map_err(|e| TcsError::io(path, e))
}

pub fn write_transactions_csv(path: &FsPath, run: &ExperimentResult) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["day", "time", "kind", "buyer", "seller", "amount", "price", "fee"])?;
    for d in &run.days {
        for t in &d.transactions {
            w.write_record([
                t.day.to_string(),
                format!("{}", t.time),
                t.kind.to_string(),
                t.buyer.to_string(),
                t.seller.to_string(),
                t.amount.to_string(),
                format!("{}", t.unit_price),
                format!("{}", t.fee),
            ])?;
        }
    }
    w.flush().map_err(|e| TcsError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| TcsError::io(path, e))
}
