//! Experiment definition: run settings, synthetic network and population.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, Triangular};
use serde::{Deserialize, Serialize};

use crate::choice::ChoiceParams;
use crate::daytoday::LearningParams;
use crate::error::{Result, TcsError};
use crate::market::TcsParams;
use crate::network::{ChoiceSetParams, Network, NodeId, Segment};
use crate::optimizer::BoParams;
use crate::rng::{substream, SimRng, Stream};
use crate::supply::SupplyParams;

pub type TravelerId = u32;

pub const MINUTES_PER_DAY: f64 = 1440.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Work,
    Education,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub origin: NodeId,
    pub destination: NodeId,
    /// Preferred arrival time, minutes after midnight.
    pub preferred_arrival: f64,
    pub purpose: Purpose,
    /// Duration of the activity performed before this trip starts (0 for the first trip).
    pub preceding_activity_duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Traveler {
    pub id: TravelerId,
    /// Value of time, $/min.
    pub vot: f64,
    /// Schedule-delay-early rate, $/min.
    pub sde_rate: f64,
    /// Schedule-delay-late rate, $/min.
    pub sdl_rate: f64,
    pub trips: Vec<Trip>,
}

impl Traveler {
    pub fn validate(&self) -> Result<()> {
        if !(self.vot > 0.0 && 0.0 < self.sde_rate && self.sde_rate < self.vot && self.vot < self.sdl_rate)
        {
            return Err(TcsError::invalid(
                "traveler",
                format!("traveler {} violates 0 < sde < vot < sdl", self.id),
            ));
        }
        let mut last = f64::NEG_INFINITY;
        for t in &self.trips {
            if t.origin == t.destination {
                return Err(TcsError::invalid(
                    "trip",
                    format!("traveler {} has a trip with origin = destination", self.id),
                ));
            }
            if !(0.0..MINUTES_PER_DAY).contains(&t.preferred_arrival) || t.preferred_arrival < last {
                return Err(TcsError::invalid(
                    "trip",
                    format!("traveler {} has unordered or out-of-day arrivals", self.id),
                ));
            }
            last = t.preferred_arrival;
        }
        Ok(())
    }
}

/// Grid generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridParams {
    pub rows: usize,
    pub cols: usize,
    pub length_m: (f64, f64),
    pub vf_kmh: f64,
    pub highway_vf_kmh: f64,
    pub capacity_veh_per_h: (f64, f64),
    pub highway_capacity_veh_per_h: f64,
    pub kjam_veh_per_km: f64,
    pub signal_probability: f64,
    /// Outer ring segments are highways.
    pub ring_highway: bool,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            rows: 6,
            cols: 6,
            length_m: (1200.0, 2000.0),
            vf_kmh: 40.0,
            highway_vf_kmh: 70.0,
            capacity_veh_per_h: (90.0, 140.0),
            highway_capacity_veh_per_h: 300.0,
            kjam_veh_per_km: 140.0,
            signal_probability: 0.5,
            ring_highway: true,
        }
    }
}

/// Where the network comes from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSource {
    /// Segment table CSV; when absent a grid is generated.
    pub file: Option<PathBuf>,
    pub grid: GridParams,
    /// Optional choice-set cache file.
    pub choice_set_cache: Option<PathBuf>,
}

/// Population synthesis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationParams {
    /// Load travelers from this JSON-lines file instead of synthesizing.
    pub file: Option<PathBuf>,
    /// Mean value of time, $/h.
    pub vot_mean_per_hour: f64,
    pub vot_cv: f64,
    /// (min, mode, max) of SDE/VOT.
    pub early_ratio: (f64, f64, f64),
    /// (min, mode, max) of SDL/VOT.
    pub late_ratio: (f64, f64, f64),
    pub morning_peak: f64,
    pub morning_spread: f64,
    pub evening_peak: f64,
    pub evening_spread: f64,
    /// Probabilities of 2-, 3- and 4-trip chains.
    pub chain_mix: (f64, f64, f64),
    /// Probabilities of work, education, other trip purposes.
    pub purpose_mix: (f64, f64, f64),
    /// Exponent of the pull of central nodes for work destinations.
    pub cbd_concentration: f64,
}

impl Default for PopulationParams {
    fn default() -> Self {
        PopulationParams {
            file: None,
            vot_mean_per_hour: 13.0,
            vot_cv: 0.5,
            early_ratio: (0.1, 0.5, 1.0),
            late_ratio: (1.0, 2.0, 4.0),
            morning_peak: 8.5 * 60.0,
            morning_spread: 30.0,
            evening_peak: 18.0 * 60.0,
            evening_spread: 60.0,
            chain_mix: (0.6, 0.2, 0.2),
            purpose_mix: (0.85, 0.10, 0.05),
            cbd_concentration: 3.0,
        }
    }
}

impl PopulationParams {
    /// (mu, sigma) of the underlying normal of the log-normal VOT, in $/min.
    pub fn vot_lognormal(&self) -> (f64, f64) {
        let mean = self.vot_mean_per_hour / 60.0;
        let s2 = (1.0 + self.vot_cv * self.vot_cv).ln();
        (mean.ln() - s2 / 2.0, s2.sqrt())
    }
}

/// Everything needed to run an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub days: usize,
    pub seed: u64,
    pub population_size: usize,
    pub tcs: TcsParams,
    pub choice: ChoiceParams,
    pub choice_set: ChoiceSetParams,
    pub supply: SupplyParams,
    pub learning: LearningParams,
    pub bo: BoParams,
    pub network: NetworkSource,
    pub population: PopulationParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            days: 25,
            seed: 20240101,
            population_size: 2000,
            tcs: TcsParams::default(),
            choice: ChoiceParams::default(),
            choice_set: ChoiceSetParams::default(),
            supply: SupplyParams::default(),
            learning: LearningParams::default(),
            bo: BoParams::default(),
            network: NetworkSource::default(),
            population: PopulationParams::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.days < 1 {
            return Err(TcsError::invalid("days", "must be at least 1"));
        }
        if self.population_size < 1 {
            return Err(TcsError::invalid("population_size", "must be at least 1"));
        }
        self.tcs.validate()?;
        self.choice.validate()?;
        self.supply.validate()?;
        self.learning.validate()?;
        self.bo.validate()?;
        let g = &self.network.grid;
        if self.network.file.is_none() && (g.rows < 2 || g.cols < 2) {
            return Err(TcsError::invalid("network.grid", "rows and cols must be >= 2"));
        }
        let p = &self.population;
        if !(p.vot_mean_per_hour > 0.0 && p.vot_cv > 0.0) {
            return Err(TcsError::invalid("population.vot", "mean and cv must be positive"));
        }
        let (emin, emode, emax) = p.early_ratio;
        let (lmin, lmode, lmax) = p.late_ratio;
        if !(0.0 <= emin && emin <= emode && emode <= emax && emin < 1.0 && emax > 0.0 && emin < emax)
        {
            return Err(TcsError::invalid("population.early_ratio", "need 0 <= min <= mode <= max, min < 1"));
        }
        if !(lmin <= lmode && lmode <= lmax && lmax > 1.0 && lmin < lmax) {
            return Err(TcsError::invalid("population.late_ratio", "need min <= mode <= max, max > 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Read and validate a TOML scenario file. Relative file references are resolved
/// against the config file's directory.
pub fn load_scenario(path: &FsPath) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| TcsError::io(path, e))?;
    let mut config: ScenarioConfig = toml::from_str(&text).map_err(|e| TcsError::Parse {
        path: path.to_path_buf(),
        message: e.to_string().lines().next().unwrap_or_default().to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| FsPath::new("."));
    let resolve = |p: &mut Option<PathBuf>| {
        if let Some(f) = p {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
    };
    resolve(&mut config.network.file);
    resolve(&mut config.network.choice_set_cache);
    resolve(&mut config.population.file);
    config.validate()?;
    Ok(config)
}

/// Bidirectional grid with one pair of opposite segments per adjacency.
pub fn generate_grid_network(params: &GridParams, rng: &mut SimRng) -> Result<Network> {
    let (rows, cols) = (params.rows, params.cols);
    if rows < 2 || cols < 2 {
        return Err(TcsError::invalid("grid", "rows and cols must be >= 2"));
    }
    let mut segments = Vec::with_capacity(4 * rows * cols);
    let node = |r: usize, c: usize| r * cols + c;
    let mut push_pair = |a: NodeId, b: NodeId, highway: bool, rng: &mut SimRng| {
        let length_m = rng.random_range(params.length_m.0..=params.length_m.1).round();
        let (vf, cap) = if highway {
            (params.highway_vf_kmh, params.highway_capacity_veh_per_h)
        } else {
            (
                params.vf_kmh,
                rng.random_range(params.capacity_veh_per_h.0..=params.capacity_veh_per_h.1)
                    .round(),
            )
        };
        let signal = !highway && rng.random_bool(params.signal_probability);
        for (from, to) in [(a, b), (b, a)] {
            segments.push(Segment {
                id: segments.len(),
                from,
                to,
                length_m,
                vf_kmh: vf,
                capacity_veh_per_h: cap,
                kjam_veh_per_km: params.kjam_veh_per_km,
                signal,
                highway,
                lanes: 1,
            });
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                let hwy = params.ring_highway && (r == 0 || r == rows - 1);
                push_pair(node(r, c), node(r, c + 1), hwy, rng);
            }
            if r + 1 < rows {
                let hwy = params.ring_highway && (c == 0 || c == cols - 1);
                push_pair(node(r, c), node(r + 1, c), hwy, rng);
            }
        }
    }
    Network::new(rows * cols, segments)
}

/// Attraction weight of each node for central (work) destinations and for homes.
fn node_weights(config: &ScenarioConfig, net: &Network) -> (Vec<f64>, Vec<f64>) {
    let n = net.node_count();
    if config.network.file.is_some() {
        return (vec![1.0; n], vec![1.0; n]);
    }
    let g = &config.network.grid;
    let (cr, cc) = ((g.rows as f64 - 1.0) / 2.0, (g.cols as f64 - 1.0) / 2.0);
    let mut central = Vec::with_capacity(n);
    let mut home = Vec::with_capacity(n);
    for id in 0..n {
        let (r, c) = ((id / g.cols) as f64, (id % g.cols) as f64);
        let d = ((r - cr).powi(2) + (c - cc).powi(2)).sqrt();
        central.push((1.0 + d * d).powf(-config.population.cbd_concentration / 2.0));
        home.push(0.5 + d);
    }
    (central, home)
}

fn pick_weighted(weights: &[f64], exclude: Option<usize>, rng: &mut SimRng) -> usize {
    let total: f64 = weights
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(_, w)| w)
        .sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        last = i;
        if u < *w {
            return i;
        }
        u -= w;
    }
    last
}

fn pick_purpose(mix: (f64, f64, f64), rng: &mut SimRng) -> Purpose {
    let u = rng.random::<f64>() * (mix.0 + mix.1 + mix.2);
    if u < mix.0 {
        Purpose::Work
    } else if u < mix.0 + mix.1 {
        Purpose::Education
    } else {
        Purpose::Other
    }
}

fn clamp_normal(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut SimRng) -> f64 {
    let n = Normal::new(mean, sd).expect("positive spread");
    n.sample(rng).clamp(lo, hi)
}

/// Draw a population. Traveler `i` uses its own substream so population size
/// changes do not reshuffle earlier travelers.
pub fn synthesize_population(config: &ScenarioConfig, net: &Network) -> Vec<Traveler> {
    let p = &config.population;
    let (mu, sigma) = p.vot_lognormal();
    let vot_dist = LogNormal::new(mu, sigma).expect("valid log-normal");
    let early = Triangular::new(p.early_ratio.0, p.early_ratio.2, p.early_ratio.1)
        .expect("valid triangular");
    let late =
        Triangular::new(p.late_ratio.0, p.late_ratio.2, p.late_ratio.1).expect("valid triangular");
    let (central, home_w) = node_weights(config, net);
    let uniform = vec![1.0; net.node_count()];

    (0..config.population_size)
        .map(|i| {
            let mut rng = substream(config.seed, Stream::Population, &[i as u64]);
            let vot = vot_dist.sample(&mut rng);
            let (sde, sdl) = loop {
                let (e, l) = (early.sample(&mut rng), late.sample(&mut rng));
                let (sde, sdl) = (e * vot, l * vot);
                if sde > 0.0 && sde < vot && vot < sdl {
                    break (sde, sdl);
                }
            };
            let trips = synthesize_chain(p, &central, &home_w, &uniform, &mut rng);
            Traveler {
                id: i as TravelerId,
                vot,
                sde_rate: sde,
                sdl_rate: sdl,
                trips,
            }
        })
        .collect()
}

fn synthesize_chain(
    p: &PopulationParams,
    central: &[f64],
    home_w: &[f64],
    uniform: &[f64],
    rng: &mut SimRng,
) -> Vec<Trip> {
    let u = rng.random::<f64>() * (p.chain_mix.0 + p.chain_mix.1 + p.chain_mix.2);
    let n_trips = if u < p.chain_mix.0 {
        2
    } else if u < p.chain_mix.0 + p.chain_mix.1 {
        3
    } else {
        4
    };
    let purposes: Vec<Purpose> = (0..n_trips).map(|_| pick_purpose(p.purpose_mix, rng)).collect();
    let home = pick_weighted(home_w, None, rng);
    let primary = match purposes[0] {
        Purpose::Work => pick_weighted(central, Some(home), rng),
        _ => pick_weighted(uniform, Some(home), rng),
    };

    let first = clamp_normal(p.morning_peak, p.morning_spread, 6.0 * 60.0, 11.0 * 60.0, rng);
    let last = clamp_normal(p.evening_peak, p.evening_spread, 15.0 * 60.0, 21.0 * 60.0, rng)
        .max(first + 5.0 * 60.0);

    // (origin, destination, preferred arrival)
    let legs: Vec<(NodeId, NodeId, f64)> = match n_trips {
        2 => vec![(home, primary, first), (primary, home, last)],
        3 => {
            let stop = pick_weighted(uniform, Some(primary), rng);
            let stop = if stop == home { primary } else { stop };
            if stop == primary {
                vec![(home, primary, first), (primary, home, last)]
            } else {
                let mid = rng.random_range(first + 3.0 * 60.0..=last - 90.0);
                vec![(home, primary, first), (primary, stop, mid), (stop, home, last)]
            }
        }
        _ => {
            let stop = pick_weighted(uniform, Some(home), rng);
            let back = (last - 60.0).max(first + 4.0 * 60.0);
            let out = back + rng.random_range(60.0..=120.0);
            let ret = (out + rng.random_range(60.0..=120.0)).min(22.5 * 60.0);
            vec![
                (home, primary, first),
                (primary, home, back),
                (home, stop, out),
                (stop, home, ret.max(out + 30.0)),
            ]
        }
    };

    let mut trips = Vec::with_capacity(legs.len());
    let mut prev_arrival: Option<f64> = None;
    for (i, (o, d, t)) in legs.into_iter().enumerate() {
        let t = t.min(MINUTES_PER_DAY - 60.0);
        let duration = match prev_arrival {
            None => 0.0,
            Some(prev) => {
                let gap = t - prev;
                (gap - rng.random_range(20.0..=40.0)).max(15.0_f64.min(gap / 2.0))
            }
        };
        trips.push(Trip {
            origin: o,
            destination: d,
            preferred_arrival: (t * 10.0).round() / 10.0,
            purpose: purposes[i.min(purposes.len() - 1)],
            preceding_activity_duration: (duration * 10.0).round() / 10.0,
        });
        prev_arrival = Some(t);
    }
    trips
}

/// Write one JSON record per traveler.
pub fn write_population(path: &FsPath, travelers: &[Traveler]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| TcsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in travelers {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| TcsError::io(path, e))?;
    }
    w.flush().map_err(|e| TcsError::io(path, e))
}

pub fn read_population(path: &FsPath) -> Result<Vec<Traveler>> {
    let file = fs::File::open(path).map_err(|e| TcsError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TcsError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Traveler = serde_json::from_str(&line).map_err(|e| TcsError::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

/// A materialized experiment: config, network and population.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub network: Network,
    pub population: Vec<Traveler>,
}

impl Scenario {
    /// Build (or load) the network and population described by `config`.
    pub fn build(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let network = match &config.network.file {
            Some(f) => Network::read_csv(f)?,
            None => {
                let mut rng = substream(config.seed, Stream::Network, &[]);
                generate_grid_network(&config.network.grid, &mut rng)?
            }
        };
        let population = match &config.population.file {
            Some(f) => read_population(f)?,
            None => synthesize_population(&config, &network),
        };
        for t in &population {
            t.validate()?;
            for trip in &t.trips {
                if trip.origin >= network.node_count() || trip.destination >= network.node_count() {
                    return Err(TcsError::invalid(
                        "trip",
                        format!("traveler {} references a node outside the network", t.id),
                    ));
                }
            }
        }
        Ok(Scenario {
            config,
            network,
            population,
        })
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        Scenario::build(load_scenario(path)?)
    }
}
