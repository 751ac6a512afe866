use proptest::prelude::*;
use tcs_core::choice::{choose_with_uniform, probabilities};
use tcs_core::daytoday::LinkTravelTimeTable;
use tcs_core::market::next_price;
use tcs_core::network::{build_choice_set, k_shortest_paths, path_size, ChoiceSetParams};
use tcs_core::rng::{substream, Stream};
use tcs_core::scenario::{generate_grid_network, GridParams};
use tcs_core::supply::{ObservedLinkTimes, SupplyParams, SupplySim};
use tcs_core::{Network, Segment};

fn grid(seed: u64, rows: usize, cols: usize) -> Network {
    let params = GridParams {
        rows,
        cols,
        ..GridParams::default()
    };
    generate_grid_network(&params, &mut substream(seed, Stream::Network, &[])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn price_never_negative_and_follows_excess(
        p in 0.0f64..2.0,
        k in 0.0f64..1e-3,
        z in -100_000i64..100_000,
    ) {
        let next = next_price(p, k, z);
        prop_assert!(next >= 0.0);
        if p + k * z as f64 > 0.0 && k > 0.0 {
            prop_assert_eq!((next - p).partial_cmp(&0.0), (z as f64).partial_cmp(&0.0));
        }
    }

    #[test]
    fn logit_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..30), shift in -1e3f64..1e3) {
        let p = probabilities(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = probabilities(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] > v[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn inverse_cdf_pick_lands_in_its_interval(v in prop::collection::vec(-5.0f64..5.0, 1..12), u in 0.0f64..1.0) {
        let p = probabilities(&v).unwrap();
        let i = choose_with_uniform(&v, u).unwrap();
        let lo: f64 = p[..i].iter().sum();
        prop_assert!(lo <= u + 1e-12);
        prop_assert!(u < lo + p[i] + 1e-12);
    }

    #[test]
    fn smoothing_is_a_convex_combination(
        obs in prop::collection::vec(0.0f64..30.0, 12),
        lambda in 0.0f64..=1.0,
    ) {
        let net = grid(3, 2, 2);
        let params = SupplyParams::default();
        let table = LinkTravelTimeTable::free_flow(&net, &params);
        let mut observed = ObservedLinkTimes::new(net.segments().len(), table.bins());
        for (i, t) in obs.iter().enumerate() {
            observed.record(i % net.segments().len(), 100 + i, *t);
        }
        let next = table.smooth(&observed, lambda);
        for seg in 0..net.segments().len() {
            for bin in 0..table.bins() {
                let old = table.get(seg, bin);
                let new = next.get(seg, bin);
                prop_assert!(new >= table.free_flow_of(seg));
                match observed.mean(seg, bin) {
                    Some(o) => {
                        let lo = old.min(o).max(table.free_flow_of(seg));
                        let hi = old.max(o).max(table.free_flow_of(seg));
                        prop_assert!(new >= lo - 1e-12 && new <= hi + 1e-12);
                    }
                    None => prop_assert_eq!(new, old),
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ksp_costs_nondecreasing_and_loopless(seed in 0u64..1000, o in 0usize..16, d in 0usize..16) {
        prop_assume!(o != d);
        let net = grid(seed, 4, 4);
        let weight = |s: &Segment| s.free_flow_min();
        let paths = k_shortest_paths(&net, o, d, 6, &weight);
        prop_assert!(!paths.is_empty());
        let costs: Vec<f64> = paths.iter().map(|p| p.cost(&net, &weight)).collect();
        for w in costs.windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-9);
        }
        for p in &paths {
            prop_assert!(net.check_walk(&p.segments, o, d));
            let mut nodes: Vec<usize> = p.segments.iter().map(|&s| net.segment(s).from).collect();
            nodes.push(d);
            let n = nodes.len();
            nodes.sort_unstable();
            nodes.dedup();
            prop_assert_eq!(nodes.len(), n);
        }
        for i in 0..paths.len() {
            for j in i + 1..paths.len() {
                prop_assert_ne!(&paths[i].segments, &paths[j].segments);
            }
        }
    }

    #[test]
    fn path_size_in_unit_interval(seed in 0u64..1000, o in 0usize..16, d in 0usize..16) {
        prop_assume!(o != d);
        let net = grid(seed, 4, 4);
        let set = build_choice_set(&net, o, d, &ChoiceSetParams::default()).unwrap();
        prop_assert!(set.paths.len() <= ChoiceSetParams::default().max_paths);
        for (k, p) in set.paths.iter().enumerate() {
            prop_assert!(p.path_size > 0.0 && p.path_size <= 1.0 + 1e-12);
            prop_assert!((p.path_size - path_size(&net, k, &set.paths)).abs() < 1e-12);
        }
        if set.paths.len() == 1 {
            prop_assert!((set.paths[0].path_size - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn supply_conserves_vehicles(seed in 0u64..500, n in 1usize..150) {
        let net = grid(seed, 3, 3);
        let params = SupplyParams::default();
        let mut rng = substream(seed, Stream::Choice, &[]);
        use rand::Rng;
        let mut trips: Vec<(f64, Vec<usize>)> = (0..n)
            .map(|_| {
                let o = rng.random_range(0..9);
                let mut d = rng.random_range(0..9);
                if d == o {
                    d = (o + 1) % 9;
                }
                let p = k_shortest_paths(&net, o, d, 1, &|s: &Segment| s.length_m).remove(0);
                (rng.random_range(0.0..30.0), p.segments)
            })
            .collect();
        trips.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut sim = SupplySim::new(&net, &params);
        let tick = params.tick_minutes();
        let mut next = 0;
        let mut arrived = 0u64;
        let mut k = 0u64;
        while next < trips.len() || sim.on_network() > 0 {
            k += 1;
            let t = k as f64 * tick;
            while next < trips.len() && trips[next].0 <= t {
                sim.depart(next as u32, 0, &trips[next].1, trips[next].0).unwrap();
                next += 1;
            }
            let out = sim.advance_to(t);
            for a in &out {
                prop_assert!(a.arrival <= t + 1e-9);
                prop_assert!(a.arrival >= a.departure);
            }
            arrived += out.len() as u64;
            prop_assert_eq!(sim.entered(), next as u64);
            prop_assert_eq!(sim.exited(), arrived);
            prop_assert_eq!(sim.entered(), sim.exited() + sim.on_network());
            prop_assert!(k < 100_000);
        }
        prop_assert_eq!(arrived, n as u64);
    }

    #[test]
    // Everyone enters within 2 min, before the free-flow traversal (2.25 min)
    // ends, so queue-join order equals departure order and exits test the queue.
    fn segment_queue_is_fifo(n in 2usize..200, gaps in prop::collection::vec(0.0f64..0.01, 200)) {
        let seg = Segment {
            id: 0,
            from: 0,
            to: 1,
            length_m: 1500.0,
            vf_kmh: 40.0,
            capacity_veh_per_h: 300.0,
            kjam_veh_per_km: 140.0,
            signal: false,
            highway: false,
            lanes: 1,
        };
        let net = Network::new(2, vec![seg]).unwrap();
        let params = SupplyParams::default();
        let mut sim = SupplySim::new(&net, &params);
        let mut t_dep = 0.0;
        let deps: Vec<f64> = gaps[..n].iter().map(|g| { t_dep += g; t_dep }).collect();
        let mut order = Vec::new();
        let mut next = 0;
        let mut k = 0u64;
        while next < n || sim.on_network() > 0 {
            k += 1;
            let t = k as f64 * params.tick_minutes();
            while next < n && deps[next] <= t {
                sim.depart(next as u32, 0, &[0], deps[next]).unwrap();
                next += 1;
            }
            order.extend(sim.advance_to(t).into_iter().map(|a| a.traveler));
        }
        prop_assert!(sim.queued() == 0);
        let sorted: Vec<u32> = (0..n as u32).collect();
        prop_assert_eq!(order, sorted);
    }
}
