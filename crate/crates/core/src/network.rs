//! Road graph, loopless k-shortest paths and route choice sets.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TcsError};

pub type NodeId = usize;
pub type SegmentId = usize;

/// A homogeneous stretch of road between two nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: SegmentId,
    pub from: NodeId,
    pub to: NodeId,
    pub length_m: f64,
    pub vf_kmh: f64,
    pub capacity_veh_per_h: f64,
    pub kjam_veh_per_km: f64,
    pub signal: bool,
    pub highway: bool,
    #[serde(default = "one_lane")]
    pub lanes: u32,
}

fn one_lane() -> u32 {
    1
}

impl Segment {
    /// Free-flow traversal time in minutes.
    pub fn free_flow_min(&self) -> f64 {
        self.length_m / 1000.0 / self.vf_kmh * 60.0
    }

    fn validate(&self) -> Result<()> {
        let checks = [
            (self.length_m, "length_m"),
            (self.vf_kmh, "vf_kmh"),
            (self.capacity_veh_per_h, "capacity_veh_per_h"),
            (self.kjam_veh_per_km, "kjam_veh_per_km"),
        ];
        for (value, name) in checks {
            if !(value > 0.0 && value.is_finite()) {
                return Err(TcsError::invalid(
                    "segment",
                    format!("segment {} has non-positive {name}", self.id),
                ));
            }
        }
        if self.lanes == 0 {
            return Err(TcsError::invalid(
                "segment",
                format!("segment {} has zero lanes", self.id),
            ));
        }
        Ok(())
    }
}

/// Directed road network. Segment ids are their positions in `segments`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    node_count: usize,
    segments: Vec<Segment>,
    out_edges: Vec<Vec<SegmentId>>,
}

impl Network {
    pub fn new(node_count: usize, segments: Vec<Segment>) -> Result<Self> {
        let mut out_edges = vec![Vec::new(); node_count];
        for (i, s) in segments.iter().enumerate() {
            if s.id != i {
                return Err(TcsError::invalid(
                    "segment",
                    format!("segment ids must be 0..n in order, found {} at {i}", s.id),
                ));
            }
            if s.from >= node_count || s.to >= node_count || s.from == s.to {
                return Err(TcsError::invalid(
                    "segment",
                    format!("segment {} has invalid endpoints {}->{}", s.id, s.from, s.to),
                ));
            }
            s.validate()?;
            out_edges[s.from].push(i);
        }
        Ok(Network {
            node_count,
            segments,
            out_edges,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.segments[id]
    }

    pub fn out_edges(&self, node: NodeId) -> &[SegmentId] {
        &self.out_edges[node]
    }

    /// Checks that `segments` form a contiguous walk from `origin` to `destination`.
    pub fn check_walk(&self, segments: &[SegmentId], origin: NodeId, destination: NodeId) -> bool {
        let Some(&first) = segments.first() else {
            return false;
        };
        if segments.iter().any(|&s| s >= self.segments.len()) {
            return false;
        }
        if self.segments[first].from != origin {
            return false;
        }
        let contiguous = segments
            .windows(2)
            .all(|w| self.segments[w[0]].to == self.segments[w[1]].from);
        contiguous && self.segments[*segments.last().unwrap()].to == destination
    }

    pub fn path(&self, segments: Vec<SegmentId>) -> Path {
        Path::from_segments(self, segments)
    }

    /// Content hash over the segment table, used to key cached choice sets.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.node_count as u64).to_le_bytes());
        for s in &self.segments {
            hasher.update(
                format!(
                    "{},{},{},{},{},{},{},{},{},{};",
                    s.id,
                    s.from,
                    s.to,
                    s.length_m,
                    s.vf_kmh,
                    s.capacity_veh_per_h,
                    s.kjam_veh_per_km,
                    s.signal,
                    s.highway,
                    s.lanes
                )
                .as_bytes(),
            );
        }
        hex::encode(hasher.finalize())
    }

    /// Write the segment table as CSV.
    pub fn write_csv(&self, path: &FsPath) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for s in &self.segments {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| TcsError::io(path, e))?;
        Ok(())
    }

    /// Read a segment table. The node count is inferred from the largest node id.
    pub fn read_csv(path: &FsPath) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| TcsError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut segments = Vec::new();
        for row in r.deserialize() {
            let s: Segment = row.map_err(|e| TcsError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            segments.push(s);
        }
        let node_count = segments
            .iter()
            .map(|s| s.from.max(s.to) + 1)
            .max()
            .unwrap_or(0);
        Network::new(node_count, segments)
    }
}

/// A route through the network plus the attributes the utility function needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub segments: Vec<SegmentId>,
    pub total_distance_m: f64,
    pub signal_count: u32,
    pub highway_distance_m: f64,
    pub free_flow_min: f64,
    /// Overlap measure in (0, 1]; 1 for a path standing alone.
    pub path_size: f64,
}

impl Path {
    fn from_segments(net: &Network, segments: Vec<SegmentId>) -> Self {
        let mut total = 0.0;
        let mut signals = 0;
        let mut hwy = 0.0;
        let mut ff = 0.0;
        for &s in &segments {
            let seg = net.segment(s);
            total += seg.length_m;
            ff += seg.free_flow_min();
            if seg.signal {
                signals += 1;
            }
            if seg.highway {
                hwy += seg.length_m;
            }
        }
        Path {
            segments,
            total_distance_m: total,
            signal_count: signals,
            highway_distance_m: hwy,
            free_flow_min: ff,
            path_size: 1.0,
        }
    }

    /// Sum of `weight` over the path's segments.
    pub fn cost(&self, net: &Network, weight: &dyn Fn(&Segment) -> f64) -> f64 {
        self.segments.iter().map(|&s| weight(net.segment(s))).sum()
    }
}

#[derive(Clone, Copy)]
struct HeapEntry {
    cost: f64,
    node: NodeId,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    // Min-heap on cost, then on node id.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

fn dijkstra(
    net: &Network,
    source: NodeId,
    target: NodeId,
    weight: &dyn Fn(&Segment) -> f64,
    banned_edges: &[bool],
    banned_nodes: &[bool],
) -> Option<Vec<SegmentId>> {
    let n = net.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<SegmentId>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry {
        cost: 0.0,
        node: source,
    });
    while let Some(HeapEntry { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        if node == target {
            break;
        }
        for &e in net.out_edges(node) {
            if banned_edges[e] {
                continue;
            }
            let seg = net.segment(e);
            if banned_nodes[seg.to] {
                continue;
            }
            let next = cost + weight(seg);
            if next < dist[seg.to] {
                dist[seg.to] = next;
                pred[seg.to] = Some(e);
                heap.push(HeapEntry {
                    cost: next,
                    node: seg.to,
                });
            }
        }
    }
    if !dist[target].is_finite() || source == target {
        return None;
    }
    let mut path = Vec::new();
    let mut at = target;
    while at != source {
        let e = pred[at]?;
        path.push(e);
        at = net.segment(e).from;
    }
    path.reverse();
    Some(path)
}

fn node_sequence(net: &Network, segments: &[SegmentId]) -> Vec<NodeId> {
    let mut nodes = Vec::with_capacity(segments.len() + 1);
    if let Some(&first) = segments.first() {
        nodes.push(net.segment(first).from);
    }
    nodes.extend(segments.iter().map(|&s| net.segment(s).to));
    nodes
}

/// Loopless k-shortest paths (Yen) under an arbitrary positive segment weight.
///
/// Paths come back in nondecreasing weight order; ties are ordered by hop count
/// and then by segment sequence so the result is reproducible.
pub fn k_shortest_paths(
    net: &Network,
    origin: NodeId,
    destination: NodeId,
    k: usize,
    weight: &dyn Fn(&Segment) -> f64,
) -> Vec<Path> {
    if k == 0 || origin >= net.node_count() || destination >= net.node_count() {
        return Vec::new();
    }
    let n_edges = net.segments().len();
    let no_edges = vec![false; n_edges];
    let no_nodes = vec![false; net.node_count()];
    let Some(first) = dijkstra(net, origin, destination, weight, &no_edges, &no_nodes) else {
        return Vec::new();
    };

    let mut accepted: Vec<Vec<SegmentId>> = vec![first];
    let mut candidates: Vec<(f64, Vec<SegmentId>)> = Vec::new();
    let cost_of = |p: &[SegmentId]| -> f64 { p.iter().map(|&s| weight(net.segment(s))).sum() };

    while accepted.len() < k {
        let last = accepted.last().unwrap().clone();
        let last_nodes = node_sequence(net, &last);
        for i in 0..last.len() {
            let spur_node = last_nodes[i];
            let root = &last[..i];
            let mut banned_edges = vec![false; n_edges];
            for p in &accepted {
                if p.len() > i && p[..i] == *root {
                    banned_edges[p[i]] = true;
                }
            }
            let mut banned_nodes = vec![false; net.node_count()];
            for &node in &last_nodes[..i] {
                banned_nodes[node] = true;
            }
            if let Some(spur) = dijkstra(
                net,
                spur_node,
                destination,
                weight,
                &banned_edges,
                &banned_nodes,
            ) {
                let mut total = root.to_vec();
                total.extend(spur);
                if !accepted.contains(&total) && !candidates.iter().any(|(_, c)| *c == total) {
                    candidates.push((cost_of(&total), total));
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        let best = candidates
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.0.total_cmp(&b.0)
                    .then_with(|| a.1.len().cmp(&b.1.len()))
                    .then_with(|| a.1.cmp(&b.1))
            })
            .map(|(i, _)| i)
            .unwrap();
        accepted.push(candidates.swap_remove(best).1);
    }
    accepted.into_iter().map(|p| net.path(p)).collect()
}

/// Choice-set generation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChoiceSetParams {
    pub k_per_method: usize,
    pub max_paths: usize,
}

impl Default for ChoiceSetParams {
    fn default() -> Self {
        ChoiceSetParams {
            k_per_method: 4,
            max_paths: 8,
        }
    }
}

/// Alternative routes for one OD pair with the "best in set" dummies resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceSet {
    pub origin: NodeId,
    pub destination: NodeId,
    pub paths: Vec<Path>,
    pub min_tt: usize,
    pub min_dist: usize,
    pub min_sig: usize,
    pub max_hwy: usize,
}

/// Dummy indicators of one path within its set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PathDummies {
    pub min_tt: bool,
    pub min_dist: bool,
    pub min_sig: bool,
    pub max_hwy: bool,
}

impl ChoiceSet {
    pub fn dummies(&self, k: usize) -> PathDummies {
        PathDummies {
            min_tt: self.min_tt == k,
            min_dist: self.min_dist == k,
            min_sig: self.min_sig == k,
            max_hwy: self.max_hwy == k,
        }
    }

    fn from_paths(origin: NodeId, destination: NodeId, paths: Vec<Path>) -> Self {
        // Strict comparisons keep the lowest index on ties.
        let argbest = |key: &dyn Fn(&Path) -> f64, better: fn(f64, f64) -> bool| {
            let mut best = 0;
            for k in 1..paths.len() {
                if better(key(&paths[k]), key(&paths[best])) {
                    best = k;
                }
            }
            best
        };
        let lt = |a: f64, b: f64| a < b;
        let gt = |a: f64, b: f64| a > b;
        let min_tt = argbest(&|p| p.free_flow_min, lt);
        let min_dist = argbest(&|p| p.total_distance_m, lt);
        let min_sig = argbest(&|p| p.signal_count as f64, lt);
        let max_hwy = argbest(&|p| p.highway_distance_m, gt);
        ChoiceSet {
            origin,
            destination,
            paths,
            min_tt,
            min_dist,
            min_sig,
            max_hwy,
        }
    }

    /// Index of the shortest free-flow path, used as the reference route before a choice.
    pub fn reference(&self) -> usize {
        self.min_tt
    }
}

/// Length-weighted overlap of path `k` with the rest of `paths`:
/// sum over its segments of (l_a / L_k) / N_a, N_a = number of paths using a.
pub fn path_size(net: &Network, k: usize, paths: &[Path]) -> f64 {
    let path = &paths[k];
    let mut usage: HashMap<SegmentId, usize> = HashMap::new();
    for p in paths {
        let mut distinct = p.segments.clone();
        distinct.sort_unstable();
        distinct.dedup();
        for s in distinct {
            *usage.entry(s).or_insert(0) += 1;
        }
    }
    path.segments
        .iter()
        .map(|s| net.segment(*s).length_m / path.total_distance_m / usage[s] as f64)
        .sum()
}

/// Union of free-flow-time and distance k-shortest paths plus single-link
/// eliminations of the fastest path; deduplicated and capped.
pub fn build_choice_set(
    net: &Network,
    origin: NodeId,
    destination: NodeId,
    params: &ChoiceSetParams,
) -> Result<ChoiceSet> {
    let by_time = |s: &Segment| s.free_flow_min();
    let by_distance = |s: &Segment| s.length_m;
    let fastest = k_shortest_paths(net, origin, destination, params.k_per_method, &by_time);
    if fastest.is_empty() {
        return Err(TcsError::Unreachable {
            origin,
            destination,
        });
    }
    let shortest = k_shortest_paths(net, origin, destination, params.k_per_method, &by_distance);

    let mut eliminated = Vec::new();
    let no_nodes = vec![false; net.node_count()];
    for &seg in &fastest[0].segments {
        let mut banned = vec![false; net.segments().len()];
        banned[seg] = true;
        if let Some(p) = dijkstra(net, origin, destination, &by_time, &banned, &no_nodes) {
            eliminated.push(net.path(p));
        }
    }

    let mut paths: Vec<Path> = Vec::new();
    for p in fastest.into_iter().chain(shortest).chain(eliminated) {
        if paths.len() >= params.max_paths.max(1) {
            break;
        }
        if !paths.iter().any(|q| q.segments == p.segments) {
            paths.push(p);
        }
    }
    let sizes: Vec<f64> = (0..paths.len()).map(|k| path_size(net, k, &paths)).collect();
    for (p, s) in paths.iter_mut().zip(sizes) {
        p.path_size = s;
    }
    Ok(ChoiceSet::from_paths(origin, destination, paths))
}

/// Choice sets keyed by OD pair, tagged with the hash of the network they were built on.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ChoiceSetCache {
    pub network_hash: String,
    pub sets: Vec<ChoiceSet>,
}

impl ChoiceSetCache {
    pub fn into_map(self) -> HashMap<(NodeId, NodeId), ChoiceSet> {
        self.sets
            .into_iter()
            .map(|cs| ((cs.origin, cs.destination), cs))
            .collect()
    }

    /// Load a cache file; returns `None` when missing, unreadable or built for another network.
    pub fn load_matching(path: &FsPath, net: &Network) -> Option<Self> {
        let text = std::fs::read_to_string(path).ok()?;
        let cache: ChoiceSetCache = serde_json::from_str(&text).ok()?;
        (cache.network_hash == net.content_hash()).then_some(cache)
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| TcsError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: usize, from: usize, to: usize, length_m: f64) -> Segment {
        Segment {
            id,
            from,
            to,
            length_m,
            vf_kmh: 60.0,
            capacity_veh_per_h: 1000.0,
            kjam_veh_per_km: 150.0,
            signal: false,
            highway: false,
            lanes: 1,
        }
    }

    /// A=0, B=1, C=2 with AB=1, BC=1, AC=3 (km).
    fn triangle() -> Network {
        Network::new(
            3,
            vec![seg(0, 0, 1, 1000.0), seg(1, 1, 2, 1000.0), seg(2, 0, 2, 3000.0)],
        )
        .unwrap()
    }

    #[test]
    fn triangle_two_shortest() {
        let net = triangle();
        let km = |s: &Segment| s.length_m / 1000.0;
        let paths = k_shortest_paths(&net, 0, 2, 2, &km);
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0].segments, vec![0, 1]);
        assert_eq!(paths[1].segments, vec![2]);
        assert_eq!(paths[0].cost(&net, &km), 2.0);
        assert_eq!(paths[1].cost(&net, &km), 3.0);
    }

    #[test]
    fn k_one_and_unreachable() {
        let net = triangle();
        let km = |s: &Segment| s.length_m;
        assert_eq!(k_shortest_paths(&net, 0, 2, 1, &km).len(), 1);
        // no edges leave C
        assert!(k_shortest_paths(&net, 2, 0, 3, &km).is_empty());
        assert!(matches!(
            build_choice_set(&net, 2, 0, &ChoiceSetParams::default()),
            Err(TcsError::Unreachable { .. })
        ));
    }

    #[test]
    fn triangle_choice_set() {
        let net = triangle();
        let cs = build_choice_set(&net, 0, 2, &ChoiceSetParams::default()).unwrap();
        assert_eq!(cs.paths.len(), 2);
        assert_eq!(cs.paths[0].segments, vec![0, 1]);
        let d = cs.dummies(0);
        assert!(d.min_tt && d.min_dist);
        assert!(!cs.dummies(1).min_tt);
        // disjoint paths
        assert_eq!(cs.paths[0].path_size, 1.0);
        assert_eq!(cs.paths[1].path_size, 1.0);
    }

    #[test]
    fn single_edge_choice_set() {
        let net = Network::new(2, vec![seg(0, 0, 1, 500.0)]).unwrap();
        let cs = build_choice_set(&net, 0, 1, &ChoiceSetParams::default()).unwrap();
        assert_eq!(cs.paths.len(), 1);
        assert_eq!(cs.paths[0].path_size, 1.0);
        let d = cs.dummies(0);
        assert!(d.min_tt && d.min_dist && d.min_sig && d.max_hwy);
    }

    #[test]
    fn path_size_overlap() {
        let net = triangle();
        let p = net.path(vec![0, 1]);
        let other = net.path(vec![2]);
        assert_eq!(path_size(&net, 0, std::slice::from_ref(&p)), 1.0);
        assert_eq!(path_size(&net, 0, &[p.clone(), p.clone()]), 0.5);
        assert_eq!(path_size(&net, 0, &[p, other]), 1.0);
    }

    #[test]
    fn rejects_bad_segments() {
        let mut s = seg(0, 0, 1, 100.0);
        s.capacity_veh_per_h = 0.0;
        assert!(Network::new(2, vec![s]).is_err());
        assert!(Network::new(2, vec![seg(0, 0, 0, 100.0)]).is_err());
    }
}
