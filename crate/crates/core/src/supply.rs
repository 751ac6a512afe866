//! Mesoscopic traffic loading.
//!
//! Each segment has a moving part, traversed at a speed set by the density at
//! entry, and a FIFO queue at its downstream end discharged at capacity. The
//! clock advances in fixed ticks; within a tick, vehicles that reach a segment
//! end with free discharge capacity keep their exact continuous exit time, and
//! queued vehicles leave at tick instants.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TcsError};
use crate::network::{Network, Segment, SegmentId};
use crate::scenario::{TravelerId, MINUTES_PER_DAY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupplyParams {
    pub tick_seconds: f64,
    pub alpha: f64,
    pub beta: f64,
    pub min_speed_kmh: f64,
    /// Width of link travel-time and accumulation bins, minutes.
    pub bin_minutes: f64,
}

impl Default for SupplyParams {
    fn default() -> Self {
        SupplyParams {
            tick_seconds: 5.0,
            alpha: 2.0,
            beta: 2.0,
            min_speed_kmh: 5.0,
            bin_minutes: 5.0,
        }
    }
}

impl SupplyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tick_seconds > 0.0) {
            return Err(TcsError::invalid("supply.tick_seconds", "must be positive"));
        }
        if !(self.min_speed_kmh > 0.0) {
            return Err(TcsError::invalid("supply.min_speed_kmh", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(TcsError::invalid("supply.alpha", "exponents must be positive"));
        }
        let per_bin = self.bin_minutes * 60.0 / self.tick_seconds;
        if !(self.bin_minutes > 0.0) || (per_bin - per_bin.round()).abs() > 1e-9 {
            return Err(TcsError::invalid(
                "supply.bin_minutes",
                "must be a positive multiple of the tick",
            ));
        }
        Ok(())
    }

    pub fn tick_minutes(&self) -> f64 {
        self.tick_seconds / 60.0
    }

    /// Bins covering one day.
    pub fn day_bins(&self) -> usize {
        (MINUTES_PER_DAY / self.bin_minutes).round() as usize
    }

    pub fn bin_of(&self, minute: f64) -> usize {
        ((minute / self.bin_minutes + 1e-9).floor().max(0.0)) as usize
    }
}

/// Speed in km/h at `density` veh/km/lane.
pub fn speed(seg: &Segment, density: f64, params: &SupplyParams) -> f64 {
    let ratio = density.max(0.0).min(seg.kjam_veh_per_km) / seg.kjam_veh_per_km;
    let v = seg.vf_kmh * (1.0 - ratio.powf(params.alpha)).powf(params.beta);
    v.max(params.min_speed_kmh).min(seg.vf_kmh.max(params.min_speed_kmh))
}

/// One completed (or simulated) trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub traveler: TravelerId,
    pub trip: usize,
    pub departure: f64,
    pub arrival: f64,
    pub travel_time: f64,
    pub distance_m: f64,
    /// Index of the path within the trip's choice set.
    pub path: usize,
    pub free_flow_tt: f64,
    pub predicted_tt: f64,
    pub charged: u32,
    pub price: f64,
    pub preferred_arrival: f64,
    pub early_min: f64,
    pub late_min: f64,
}

impl TripRecord {
    /// Fill schedule delay from the arrival and preferred arrival.
    pub fn set_schedule_delay(&mut self) {
        self.early_min = (self.preferred_arrival - self.arrival).max(0.0);
        self.late_min = (self.arrival - self.preferred_arrival).max(0.0);
    }
}

/// Mean observed traversal time per (segment, bin of entry time).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedLinkTimes {
    pub bins: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl ObservedLinkTimes {
    pub fn new(segments: usize, bins: usize) -> Self {
        ObservedLinkTimes {
            bins,
            sums: vec![0.0; segments * bins],
            counts: vec![0; segments * bins],
        }
    }

    pub fn record(&mut self, seg: SegmentId, bin: usize, minutes: f64) {
        let i = seg * self.bins + bin.min(self.bins - 1);
        self.sums[i] += minutes;
        self.counts[i] += 1;
    }

    pub fn mean(&self, seg: SegmentId, bin: usize) -> Option<f64> {
        let i = seg * self.bins + bin.min(self.bins - 1);
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }

    pub fn count(&self, seg: SegmentId, bin: usize) -> u32 {
        self.counts[seg * self.bins + bin.min(self.bins - 1)]
    }
}

/// A vehicle that finished its last segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub traveler: TravelerId,
    pub trip: usize,
    pub departure: f64,
    pub arrival: f64,
}

#[derive(Debug, Clone)]
struct Vehicle {
    traveler: TravelerId,
    trip: usize,
    segments: Vec<SegmentId>,
    pos: usize,
    departure: f64,
    entered: f64,
}

#[derive(Debug, Clone)]
struct SegState {
    moving: u32,
    queue: VecDeque<usize>,
    budget: f64,
    per_tick: f64,
    max_idle_budget: f64,
    density_scale: f64,
}

/// Incremental within-day supply state; the day loop departs vehicles and
/// advances the clock tick by tick.
pub struct SupplySim<'a> {
    net: &'a Network,
    params: SupplyParams,
    segs: Vec<SegState>,
    vehicles: Vec<Option<Vehicle>>,
    // (due time bits, sequence, vehicle); due times are >= 0 so bit order is numeric order.
    due: BinaryHeap<Reverse<(u64, u64, usize)>>,
    seq: u64,
    now: f64,
    entered: u64,
    exited: u64,
    observed: ObservedLinkTimes,
    accumulation_sum: Vec<f64>,
    accumulation_ticks: Vec<u32>,
}

impl<'a> SupplySim<'a> {
    pub fn new(net: &'a Network, params: &SupplyParams) -> Self {
        let tick_h = params.tick_seconds / 3600.0;
        let segs = net
            .segments()
            .iter()
            .map(|s| {
                let per_tick = s.capacity_veh_per_h * tick_h;
                let max_idle = per_tick.max(1.0);
                SegState {
                    moving: 0,
                    queue: VecDeque::new(),
                    budget: max_idle,
                    per_tick,
                    max_idle_budget: max_idle,
                    density_scale: 1.0 / (s.length_m / 1000.0 * s.lanes.max(1) as f64),
                }
            })
            .collect();
        let bins = params.day_bins();
        SupplySim {
            net,
            params: params.clone(),
            segs,
            vehicles: Vec::new(),
            due: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            entered: 0,
            exited: 0,
            observed: ObservedLinkTimes::new(net.segments().len(), bins),
            accumulation_sum: vec![0.0; bins],
            accumulation_ticks: vec![0; bins],
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn on_network(&self) -> u64 {
        self.entered - self.exited
    }

    pub fn entered(&self) -> u64 {
        self.entered
    }

    pub fn exited(&self) -> u64 {
        self.exited
    }

    /// Vehicles currently queued at segment ends.
    pub fn queued(&self) -> usize {
        self.segs.iter().map(|s| s.queue.len()).sum()
    }

    /// Start a trip at time `t` on the given segment sequence.
    pub fn depart(
        &mut self,
        traveler: TravelerId,
        trip: usize,
        segments: &[SegmentId],
        t: f64,
    ) -> Result<()> {
        if segments.is_empty() || segments.iter().any(|&s| s >= self.segs.len()) {
            return Err(TcsError::InvalidPath {
                traveler,
                trip,
                reason: "empty path or unknown segment".into(),
            });
        }
        for w in segments.windows(2) {
            if self.net.segment(w[0]).to != self.net.segment(w[1]).from {
                return Err(TcsError::InvalidPath {
                    traveler,
                    trip,
                    reason: format!("segments {} and {} are not contiguous", w[0], w[1]),
                });
            }
        }
        let id = self.vehicles.len();
        self.vehicles.push(Some(Vehicle {
            traveler,
            trip,
            segments: segments.to_vec(),
            pos: 0,
            departure: t,
            entered: t,
        }));
        self.entered += 1;
        self.enter_segment(id, t);
        Ok(())
    }

    fn enter_segment(&mut self, id: usize, t: f64) {
        let v = self.vehicles[id].as_mut().expect("live vehicle");
        v.entered = t;
        let seg_id = v.segments[v.pos];
        let seg = self.net.segment(seg_id);
        let st = &mut self.segs[seg_id];
        let density = st.moving as f64 * st.density_scale;
        let kmh = speed(seg, density, &self.params);
        st.moving += 1;
        let due = t + seg.length_m / 1000.0 / kmh * 60.0;
        self.seq += 1;
        self.due.push(Reverse((due.max(0.0).to_bits(), self.seq, id)));
    }

    /// Leave the current segment at time `t`: move on or finish the trip.
    fn exit_segment(&mut self, id: usize, t: f64, arrivals: &mut Vec<Arrival>) {
        let v = self.vehicles[id].as_mut().expect("live vehicle");
        let seg_id = v.segments[v.pos];
        let bin = self.params.bin_of(v.entered);
        self.observed.record(seg_id, bin, t - v.entered);
        v.pos += 1;
        if v.pos < v.segments.len() {
            self.enter_segment(id, t);
        } else {
            let v = self.vehicles[id].take().expect("live vehicle");
            self.exited += 1;
            arrivals.push(Arrival {
                traveler: v.traveler,
                trip: v.trip,
                departure: v.departure,
                arrival: t,
            });
        }
    }

    /// Advance the clock to `t` (one tick after the previous call) and return
    /// the trips completed during the step, in completion order.
    pub fn advance_to(&mut self, t: f64) -> Vec<Arrival> {
        let mut arrivals = Vec::new();
        for st in &mut self.segs {
            // Cap what an idle server carried over, then accrue this tick so a
            // vehicle arriving mid-tick can use it.
            if st.queue.is_empty() {
                st.budget = st.budget.min(st.max_idle_budget);
            }
            st.budget += st.per_tick;
        }
        // Continuous-time arrivals at segment ends within the tick.
        while let Some(&Reverse((bits, _, id))) = self.due.peek() {
            let due = f64::from_bits(bits);
            if due > t + 1e-12 {
                break;
            }
            self.due.pop();
            let seg_id = {
                let v = self.vehicles[id].as_ref().expect("live vehicle");
                v.segments[v.pos]
            };
            let st = &mut self.segs[seg_id];
            st.moving -= 1;
            if st.queue.is_empty() && st.budget >= 1.0 - 1e-12 {
                st.budget -= 1.0;
                self.exit_segment(id, due, &mut arrivals);
            } else {
                st.queue.push_back(id);
            }
        }
        // Queue discharge at the tick instant.
        for seg_id in 0..self.segs.len() {
            while !self.segs[seg_id].queue.is_empty() && self.segs[seg_id].budget >= 1.0 - 1e-12 {
                let id = self.segs[seg_id].queue.pop_front().expect("non-empty");
                self.segs[seg_id].budget -= 1.0;
                self.exit_segment(id, t, &mut arrivals);
            }
        }
        self.now = t;
        let bin = self.params.bin_of(t - 1e-9);
        if bin >= self.accumulation_sum.len() {
            self.accumulation_sum.resize(bin + 1, 0.0);
            self.accumulation_ticks.resize(bin + 1, 0);
        }
        self.accumulation_sum[bin] += self.on_network() as f64;
        self.accumulation_ticks[bin] += 1;
        arrivals
    }

    pub fn observed(&self) -> &ObservedLinkTimes {
        &self.observed
    }

    /// Mean vehicles on the network per bin.
    pub fn accumulation(&self) -> Vec<f64> {
        self.accumulation_sum
            .iter()
            .zip(&self.accumulation_ticks)
            .map(|(s, n)| if *n > 0 { s / *n as f64 } else { 0.0 })
            .collect()
    }

    pub fn into_outputs(self) -> (ObservedLinkTimes, Vec<f64>) {
        let acc = self.accumulation();
        (self.observed, acc)
    }
}

/// A planned trip for [`run_day`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedDeparture {
    pub traveler: TravelerId,
    pub trip: usize,
    pub path: usize,
    pub segments: Vec<SegmentId>,
    pub departure: f64,
}

/// Output of a stand-alone supply day.
#[derive(Debug, Clone)]
pub struct SupplyDay {
    pub records: Vec<TripRecord>,
    pub observed: ObservedLinkTimes,
    pub accumulation: Vec<f64>,
}

/// Load a fixed set of departures and run until every vehicle has arrived.
pub fn run_day(
    net: &Network,
    departures: &[PlannedDeparture],
    params: &SupplyParams,
) -> Result<SupplyDay> {
    let mut order: Vec<usize> = (0..departures.len()).collect();
    order.sort_by(|&a, &b| {
        departures[a]
            .departure
            .total_cmp(&departures[b].departure)
            .then(a.cmp(&b))
    });
    let mut sim = SupplySim::new(net, params);
    let tick = params.tick_minutes();
    let mut records: Vec<Option<TripRecord>> = vec![None; departures.len()];
    let index: std::collections::HashMap<(TravelerId, usize), usize> = departures
        .iter()
        .enumerate()
        .map(|(i, d)| ((d.traveler, d.trip), i))
        .collect();
    let mut next = 0;
    let mut k: u64 = 0;
    while next < order.len() || sim.on_network() > 0 {
        k += 1;
        let t = k as f64 * tick;
        while next < order.len() && departures[order[next]].departure <= t + 1e-12 {
            let d = &departures[order[next]];
            sim.depart(d.traveler, d.trip, &d.segments, d.departure)?;
            next += 1;
        }
        for a in sim.advance_to(t) {
            let i = index[&(a.traveler, a.trip)];
            let d = &departures[i];
            let path = net.path(d.segments.clone());
            let mut rec = TripRecord {
                traveler: a.traveler,
                trip: a.trip,
                departure: a.departure,
                arrival: a.arrival,
                travel_time: a.arrival - a.departure,
                distance_m: path.total_distance_m,
                path: d.path,
                free_flow_tt: path.free_flow_min,
                predicted_tt: 0.0,
                charged: 0,
                price: 0.0,
                preferred_arrival: a.arrival,
                early_min: 0.0,
                late_min: 0.0,
            };
            rec.set_schedule_delay();
            records[i] = Some(rec);
        }
    }
    let (observed, accumulation) = sim.into_outputs();
    Ok(SupplyDay {
        records: records.into_iter().map(|r| r.expect("every vehicle arrives")).collect(),
        observed,
        accumulation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: usize, from: usize, to: usize, length_m: f64, vf: f64, cap: f64) -> Segment {
        Segment {
            id,
            from,
            to,
            length_m,
            vf_kmh: vf,
            capacity_veh_per_h: cap,
            kjam_veh_per_km: 140.0,
            signal: false,
            highway: false,
            lanes: 1,
        }
    }

    #[test]
    fn speed_density_shape() {
        let p = SupplyParams::default();
        let s = seg(0, 0, 1, 1000.0, 60.0, 1000.0);
        assert_eq!(speed(&s, 0.0, &p), 60.0);
        assert_eq!(speed(&s, 140.0, &p), 5.0);
        assert_eq!(speed(&s, 500.0, &p), 5.0);
        let lin = SupplyParams {
            alpha: 1.0,
            beta: 1.0,
            ..p
        };
        assert!((speed(&s, 70.0, &lin) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn single_vehicle_free_flow() {
        let net = Network::new(2, vec![seg(0, 0, 1, 1000.0, 60.0, 1000.0)]).unwrap();
        let d = PlannedDeparture {
            traveler: 0,
            trip: 0,
            path: 0,
            segments: vec![0],
            departure: 0.0,
        };
        let out = run_day(&net, &[d], &SupplyParams::default()).unwrap();
        assert!((out.records[0].travel_time - 1.0).abs() < 1e-12);
        assert_eq!(*out.accumulation.last().unwrap(), 0.0);
    }

    #[test]
    fn invalid_path_names_the_trip() {
        let net = Network::new(
            3,
            vec![seg(0, 0, 1, 500.0, 50.0, 900.0), seg(1, 0, 2, 500.0, 50.0, 900.0)],
        )
        .unwrap();
        let d = PlannedDeparture {
            traveler: 7,
            trip: 2,
            path: 0,
            segments: vec![0, 1],
            departure: 0.0,
        };
        let err = run_day(&net, &[d], &SupplyParams::default()).unwrap_err();
        assert!(matches!(err, TcsError::InvalidPath { traveler: 7, trip: 2, .. }));
    }

    #[test]
    fn observed_bins_by_entry() {
        let net = Network::new(2, vec![seg(0, 0, 1, 1000.0, 60.0, 1000.0)]).unwrap();
        let ds: Vec<_> = [12.0, 13.0, 100.0]
            .iter()
            .enumerate()
            .map(|(i, &t)| PlannedDeparture {
                traveler: i as u32,
                trip: 0,
                path: 0,
                segments: vec![0],
                departure: t,
            })
            .collect();
        let out = run_day(&net, &ds, &SupplyParams::default()).unwrap();
        assert_eq!(out.observed.count(0, 2), 2);
        assert!((out.observed.mean(0, 20).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(out.observed.mean(0, 3), None);
    }
}
