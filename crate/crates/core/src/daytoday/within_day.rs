//! One simulated day: trip decisions, market ticks and traffic loading on a
//! shared clock.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;

use super::{ChoiceSets, LinkTravelTimeTable};
use crate::choice::{self, build_time_window, preferred_departure, ChoiceContext, TimeWindow};
use crate::error::{Result, TcsError};
use crate::market::{Departure, HorizonTrip, MarketWorld, Transaction};
use crate::network::ChoiceSet;
use crate::rng::{substream, Stream};
use crate::scenario::{Scenario, Traveler, TravelerId, Trip, MINUTES_PER_DAY};
use crate::supply::{ObservedLinkTimes, SupplySim, TripRecord};

pub struct DayInputs<'a> {
    pub scenario: &'a Scenario,
    pub sets: &'a ChoiceSets,
    pub table: &'a LinkTravelTimeTable,
    pub market: &'a mut MarketWorld,
    /// 1-based.
    pub day: usize,
}

#[derive(Debug, Clone)]
pub struct DayOutput {
    pub records: Vec<TripRecord>,
    pub transactions: Vec<Transaction>,
    pub observed: ObservedLinkTimes,
    pub accumulation: Vec<f64>,
    pub utility: Vec<f64>,
    pub toll_money: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Decision {
    departure: f64,
    path: usize,
    charge: u32,
    predicted_tt: f64,
}

#[derive(Debug, Clone)]
struct TripPlan {
    /// Preferred departure from the start-of-day prediction.
    predicted_departure: f64,
    predicted_charge: u32,
    decided: Option<Decision>,
    charged: u32,
}

struct TravelerState {
    plans: Vec<TripPlan>,
    /// First trip that has not departed yet.
    next: usize,
}

/// Predicted travel time on the reference route, looked up at the departure
/// that would arrive on time under free flow.
fn reference_tt(table: &LinkTravelTimeTable, set: &ChoiceSet, trip: &Trip) -> f64 {
    let path = &set.paths[set.reference()];
    table.path_travel_time(&path.segments, trip.preferred_arrival - path.free_flow_min)
}

fn tick_at_or_after(t: f64, tick: f64) -> u64 {
    (t / tick - 1e-9).ceil().max(0.0) as u64
}

pub fn simulate_day(inputs: DayInputs<'_>) -> Result<DayOutput> {
    let DayInputs {
        scenario,
        sets,
        table,
        market,
        day,
    } = inputs;
    let cfg = &scenario.config;
    let net = &scenario.network;
    let population = &scenario.population;
    let tick = cfg.supply.tick_minutes();
    let day_start = (day - 1) as f64 * MINUTES_PER_DAY;
    let cap = cfg.tcs.max_credits_per_trip;
    let price = market.state.price;
    let toll = market.toll.clone();

    let mut states: Vec<TravelerState> = population
        .iter()
        .enumerate()
        .map(|(n, traveler)| {
            let plans = traveler
                .trips
                .iter()
                .enumerate()
                .map(|(i, trip)| {
                    let set = sets.for_trip(n, i);
                    let tt = reference_tt(table, set, trip);
                    let t_hat = preferred_departure(trip, tt, &cfg.choice);
                    let dist = set.paths[set.reference()].total_distance_m;
                    TripPlan {
                        predicted_departure: t_hat,
                        predicted_charge: toll.charge(t_hat, dist, cap),
                        decided: None,
                        charged: 0,
                    }
                })
                .collect();
            TravelerState { plans, next: 0 }
        })
        .collect();

    let mut windows: Vec<Option<TimeWindow>> = vec![None; population.len()];
    let mut decisions: BinaryHeap<Reverse<(u64, TravelerId)>> = BinaryHeap::new();
    let mut departures: BinaryHeap<Reverse<(u64, TravelerId)>> = BinaryHeap::new();

    let schedule_window = |n: usize,
                           earliest: f64,
                           now: f64,
                           windows: &mut Vec<Option<TimeWindow>>,
                           decisions: &mut BinaryHeap<Reverse<(u64, TravelerId)>>,
                           state: &TravelerState| {
        let i = state.next;
        let trip = &population[n].trips[i];
        let tt = reference_tt(table, sets.for_trip(n, i), trip);
        let w = build_time_window(trip, tt, earliest, &cfg.choice);
        let at = (w.intervals[0] - cfg.choice.window_step).max(now);
        windows[n] = Some(w);
        decisions.push(Reverse((tick_at_or_after(at, tick), n as TravelerId)));
    };

    for n in 0..population.len() {
        if !population[n].trips.is_empty() {
            schedule_window(n, 0.0, 0.0, &mut windows, &mut decisions, &states[n]);
        }
    }

    let mut supply = SupplySim::new(net, &cfg.supply);
    let mut records = Vec::new();
    let mut transactions = Vec::new();
    let mut utility = vec![0.0; population.len()];
    let mut toll_money = vec![0.0; population.len()];
    let mut k: u64 = 0;
    loop {
        let t = k as f64 * tick;
        let idle = decisions.is_empty() && departures.is_empty() && supply.on_network() == 0;
        if t >= MINUTES_PER_DAY - 1e-9 && idle {
            break;
        }
        if t > 4.0 * MINUTES_PER_DAY {
            return Err(TcsError::invalid(
                "simulation",
                format!("day {day} did not clear its demand"),
            ));
        }

        while let Some(&Reverse((due, id))) = decisions.peek() {
            if due > k {
                break;
            }
            decisions.pop();
            let n = id as usize;
            let w = windows[n].take().expect("window before decision");
            let traveler = &population[n];
            let i = states[n].next;
            let trip = &traveler.trips[i];
            let set = sets.for_trip(n, i);
            let d = decide(scenario, traveler, trip, set, &w, table, market, day, i, t)?;
            states[n].plans[i].decided = Some(d);
            departures.push(Reverse((tick_at_or_after(d.departure, tick), id)));
        }

        let mut leaving: Vec<Departure> = Vec::new();
        while let Some(&Reverse((due, id))) = departures.peek() {
            if due > k {
                break;
            }
            departures.pop();
            let n = id as usize;
            let i = states[n].next;
            let d = states[n].plans[i].decided.expect("decided trip");
            let set = sets.for_trip(n, i);
            leaving.push(Departure {
                traveler: id,
                time: day_start + d.departure,
                distance_m: set.paths[d.path].total_distance_m,
            });
            states[n].next += 1;
        }

        let now = day_start + t;
        let (txs, charges) = market.tick(now, &leaving, &mut |id| {
            horizon(&states[id as usize], day_start, now)
        });
        transactions.extend(txs);

        for (dep, charge) in leaving.iter().zip(charges) {
            let n = dep.traveler as usize;
            let i = states[n].next - 1;
            states[n].plans[i].charged = charge.charged;
            let d = states[n].plans[i].decided.expect("decided trip");
            let set = sets.for_trip(n, i);
            supply.depart(dep.traveler, i, &set.paths[d.path].segments, d.departure)?;
        }

        for a in supply.advance_to(t) {
            let n = a.traveler as usize;
            let traveler = &population[n];
            let trip = &traveler.trips[a.trip];
            let plan = &states[n].plans[a.trip];
            let d = plan.decided.expect("decided trip");
            let set = sets.for_trip(n, a.trip);
            let path = &set.paths[d.path];
            let tt = a.arrival - a.departure;
            let money = plan.charged as f64 * price;
            let beta_cost = cfg.choice.beta_cost(traveler.vot);
            utility[n] += choice::utility_without_toll(
                &cfg.choice,
                traveler,
                trip.preferred_arrival,
                path,
                set.dummies(d.path),
                a.departure,
                tt,
            ) + beta_cost * money;
            toll_money[n] += money;
            let mut rec = TripRecord {
                traveler: a.traveler,
                trip: a.trip,
                departure: a.departure,
                arrival: a.arrival,
                travel_time: tt,
                distance_m: path.total_distance_m,
                path: d.path,
                free_flow_tt: path.free_flow_min,
                predicted_tt: d.predicted_tt,
                charged: plan.charged,
                price,
                preferred_arrival: trip.preferred_arrival,
                early_min: 0.0,
                late_min: 0.0,
            };
            rec.set_schedule_delay();
            records.push(rec);

            let state = &states[n];
            if state.next < traveler.trips.len() {
                let earliest = a.arrival + traveler.trips[state.next].preceding_activity_duration;
                // The choice happens no earlier than the next tick.
                let now_next = t + tick;
                schedule_window(n, earliest, now_next, &mut windows, &mut decisions, state);
            }
        }
        k += 1;
    }

    records.sort_by_key(|r| (r.traveler, r.trip));
    let (observed, accumulation) = supply.into_outputs();
    Ok(DayOutput {
        records,
        transactions,
        observed,
        accumulation,
        utility,
        toll_money,
    })
}

/// Upcoming trips today plus tomorrow's duplicates, as the selling model sees them.
fn horizon(state: &TravelerState, day_start: f64, now: f64) -> Vec<HorizonTrip> {
    let mut h: Vec<HorizonTrip> = state.plans[state.next..]
        .iter()
        .map(|p| match p.decided {
            Some(d) => HorizonTrip {
                departure: day_start + d.departure,
                charge: d.charge,
            },
            None => HorizonTrip {
                departure: day_start + p.predicted_departure,
                charge: p.predicted_charge,
            },
        })
        .chain(state.plans.iter().map(|p| HorizonTrip {
            departure: day_start + MINUTES_PER_DAY + p.predicted_departure,
            charge: p.predicted_charge,
        }))
        .collect();
    for trip in &mut h {
        trip.departure = trip.departure.max(now);
    }
    h.sort_by(|a, b| a.departure.total_cmp(&b.departure));
    h
}

#[allow(clippy::too_many_arguments)]
fn decide(
    scenario: &Scenario,
    traveler: &Traveler,
    trip: &Trip,
    set: &ChoiceSet,
    window: &TimeWindow,
    table: &LinkTravelTimeTable,
    market: &MarketWorld,
    day: usize,
    trip_index: usize,
    now: f64,
) -> Result<Decision> {
    let cfg = &scenario.config;
    let ctx = ChoiceContext {
        params: &cfg.choice,
        traveler,
        trip,
        toll: &market.toll,
        price: market.state.price,
        max_credits: cfg.tcs.max_credits_per_trip,
    };
    let dummies: Vec<_> = (0..set.paths.len()).map(|k| set.dummies(k)).collect();
    let alts = choice::alternatives(&ctx, window, &set.paths, &dummies, &mut |k, t| {
        Ok(table.path_travel_time(&set.paths[k].segments, t))
    })?;
    let mut rng = substream(
        cfg.seed,
        Stream::Choice,
        &[day as u64, traveler.id as u64, trip_index as u64],
    );
    let v: Vec<f64> = alts.iter().map(|a| a.utility).collect();
    let pick = &alts[choice::choose_with_uniform(&v, rng.random::<f64>())?];
    let departure = pick.departure.max(now);
    let path = &set.paths[pick.path];
    Ok(Decision {
        departure,
        path: pick.path,
        charge: market
            .toll
            .charge(departure, path.total_distance_m, cfg.tcs.max_credits_per_trip),
        predicted_tt: table.path_travel_time(&path.segments, departure),
    })
}
