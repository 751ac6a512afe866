//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcs_core::optimizer::{matern52, GpHyper};
use tcs_core::market::{
    allocate, charge_trip, sell_all, CreditAccount, FeeSchedule, HorizonTrip, MarketState, TcsParams, TollProfile,
};

/// Balance-level account model: no tokens, just the running count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleAccount {
    pub balance: i64,
    pub capacity: i64,
}

impl OracleAccount {
    pub fn allocate(&mut self, tokens: i64) {
        self.balance = (self.balance + tokens).min(self.capacity);
    }

    /// Returns credits bought.
    pub fn charge(&mut self, credits: i64) -> i64 {
        if self.balance >= credits {
            self.balance -= credits;
            0
        } else {
            let bought = credits - self.balance;
            self.balance = 0;
            bought
        }
    }

    pub fn sell(&mut self) -> i64 {
        std::mem::replace(&mut self.balance, 0)
    }
}

/// Token counts keyed by birth minute; expiry is checked at allocation instants.
pub struct RefWallet {
    pub births: BTreeMap<i64, u32>,
    pub capacity: u32,
    pub lifetime: i64,
    pub allocated: u64,
    pub expired: u64,
    pub used: u64,
    pub bought: u64,
    pub sold: u64,
}

impl RefWallet {
    pub fn new(params: &TcsParams, start: i64) -> Self {
        let q = params.tokens_per_allocation();
        let capacity = params.wallet_capacity();
        let interval = params.allocation_interval as i64;
        let mut births = BTreeMap::new();
        let mut left = params.initial_allocation.min(capacity);
        let mut k = 1;
        while left > 0 {
            let n = left.min(q);
            births.insert(start - k * interval, n);
            left -= n;
            k += 1;
        }
        RefWallet {
            births,
            capacity,
            lifetime: params.lifetime as i64,
            allocated: params.initial_allocation.min(capacity) as u64,
            expired: 0,
            used: 0,
            bought: 0,
            sold: 0,
        }
    }

    pub fn balance(&self) -> u32 {
        self.births.values().sum()
    }

    fn drop_oldest(&mut self, mut n: u32) {
        while n > 0 {
            let (&b, &c) = self.births.iter().next().expect("enough tokens");
            let take = c.min(n);
            if take == c {
                self.births.remove(&b);
            } else {
                self.births.insert(b, c - take);
            }
            n -= take;
        }
    }

    pub fn allocate(&mut self, now: i64, q: u32) {
        let dead: Vec<i64> = self.births.keys().copied().filter(|b| b + self.lifetime < now).collect();
        for b in dead {
            self.expired += self.births.remove(&b).unwrap() as u64;
        }
        *self.births.entry(now).or_insert(0) += q;
        self.allocated += q as u64;
        let bal = self.balance();
        if bal > self.capacity {
            self.drop_oldest(bal - self.capacity);
            self.expired += (bal - self.capacity) as u64;
        }
    }

    pub fn charge(&mut self, c: u32) -> u32 {
        let bal = self.balance();
        self.used += c as u64;
        if bal >= c {
            self.drop_oldest(c);
            0
        } else {
            self.births.clear();
            self.bought += (c - bal) as u64;
            c - bal
        }
    }

    pub fn sell(&mut self) -> u32 {
        let bal = self.balance();
        self.births.clear();
        self.sold += bal as u64;
        bal
    }
}

pub fn random_params(rng: &mut ChaCha8Rng) -> TcsParams {
    let interval = 20.0;
    let q = rng.random_range(1..=4u32);
    let lifetime = interval * rng.random_range(2..=72) as f64;
    let w = ((lifetime / interval) as u32 + 1) * q;
    TcsParams {
        allocation_rate: q as f64 / interval,
        allocation_interval: interval,
        lifetime,
        initial_allocation: rng.random_range(0..=w),
        ..TcsParams::default()
    }
}


/// Replay `sequences` random allocate / charge / sell / idle sequences against
/// [`RefWallet`]. Returns the number of compared steps or the first mismatch.
pub fn replay_accounts(sequences: usize, seed: u64) -> Result<u64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 0.01 credits/m everywhere: a trip of 100*c meters costs exactly c credits.
    let toll = TollProfile::new(vec![0.01; 288]).unwrap();
    let mut checked = 0u64;
    for seq in 0..sequences {
        let params = random_params(&mut rng);
        let q = params.tokens_per_allocation();
        let interval = params.allocation_interval as i64;
        let mut now: i64 = 0;
        let mut acc = vec![CreditAccount::with_initial(7, &params, 0.0)];
        let mut reference = RefWallet::new(&params, 0);
        let mut market = MarketState::new(0.1, 1e-5);
        let steps = rng.random_range(1..=60);
        for step in 0..steps {
            let what = rng.random_range(0..4);
            match what {
                0 => {
                    // skip 0..2 instants so tokens can also die of age
                    let skip = rng.random_range(0..3);
                    now = (now / interval + 1 + skip) * interval;
                    allocate(&mut acc, &params, now as f64, 1, market.price);
                    reference.allocate(now, q);
                }
                1 => {
                    let c = rng.random_range(1..=160u32);
                    let t = now as f64 + rng.random_range(0.0..interval as f64);
                    let out = charge_trip(&mut acc[0], &mut market, &toll, &params, t, 100.0 * c as f64);
                    let expected = reference.charge(c);
                    if out.charged != c || out.bought != expected {
                        return Err(format!("sequence {seq} step {step}: charge {c} bought {} vs {expected}", out.bought));
                    }
                }
                2 => {
                    let expected = reference.sell();
                    let sold = sell_all(&mut acc[0], &mut market, &params.fees, now as f64).map(|t| t.amount).unwrap_or(0);
                    if sold != expected {
                        return Err(format!("sequence {seq} step {step}: sold {sold} vs {expected}"));
                    }
                }
                _ => {}
            }
            let a = &acc[0];
            let ours = (a.balance(), a.allocated, a.expired, a.used, a.bought, a.sold);
            let theirs = (
                reference.balance(),
                reference.allocated,
                reference.expired,
                reference.used,
                reference.bought,
                reference.sold,
            );
            if ours != theirs || !a.conserves() || a.balance() > a.capacity {
                return Err(format!("sequence {seq} step {step} (action {what}): {ours:?} vs {theirs:?}"));
            }
            if (market.bought_today, market.sold_today) != (reference.bought, reference.sold) {
                return Err(format!("sequence {seq} step {step}: market totals diverge"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Grid instants k*interval with from < k*interval <= to, counted by stepping.
pub fn count_instants(from: f64, to: f64, interval: f64) -> i64 {
    let mut k = (from / interval).floor() as i64 - 1;
    let mut n = 0;
    loop {
        let t = k as f64 * interval;
        if t > to + 1e-9 {
            return n;
        }
        if t > from + 1e-9 {
            n += 1;
        }
        k += 1;
    }
}

pub fn sell_value(fees: &FeeSchedule, amount: i64, price: f64) -> f64 {
    amount as f64 * price * (1.0 - fees.sell_proportional) - fees.sell_fixed
}

pub fn buy_value(fees: &FeeSchedule, amount: i64, price: f64) -> f64 {
    amount as f64 * price * (1.0 + fees.buy_proportional) + fees.buy_fixed
}

/// Profit of selling `x` credits at time `s`, with predicted balances from
/// an emptied wallet at `s` onward.
pub fn oracle_profit(params: &TcsParams, x: i64, s: f64, trips: &[HorizonTrip], price: f64) -> f64 {
    let w = params.wallet_capacity() as i64;
    let q = params.tokens_per_allocation() as i64;
    let mut profit = sell_value(&params.fees, x, price);
    let mut held = 0i64;
    let mut last = s;
    for trip in trips {
        held = (held + q * count_instants(last, trip.departure, params.allocation_interval)).min(w);
        let g = trip.charge as i64;
        if g > held {
            profit -= buy_value(&params.fees, g - held, price);
            held = 0;
        } else {
            held -= g;
        }
        last = trip.departure;
    }
    profit
}

/// Profits of selling now and at each later grid instant before the first
/// departure (or until the wallet fills when there are no trips).
pub fn candidate_profits(
    params: &TcsParams,
    balance: i64,
    now: f64,
    trips: &[HorizonTrip],
    price: f64,
) -> Vec<f64> {
    let w = params.wallet_capacity() as i64;
    let q = params.tokens_per_allocation() as i64;
    let dt = params.allocation_interval;
    let mut out = vec![oracle_profit(params, balance, now, trips, price)];
    let mut s = ((now / dt).floor() + 1.0) * dt;
    loop {
        if let Some(first) = trips.first() {
            if s >= first.departure - 1e-9 {
                break;
            }
        }
        let x = (balance + q * count_instants(now, s, dt)).min(w);
        out.push(oracle_profit(params, x, s, trips, price));
        if trips.is_empty() && x >= w {
            break;
        }
        s += dt;
    }
    out
}

/// Some(decision) when the optimum is unambiguous, None on ties.
pub fn oracle_decision(
    params: &TcsParams,
    balance: i64,
    now: f64,
    trips: &[HorizonTrip],
    price: f64,
) -> Option<bool> {
    let tol = 1e-9;
    let profits = candidate_profits(params, balance, now, trips, price);
    let now_profit = profits[0];
    let best_later = profits[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if balance == 0 {
        return Some(false);
    }
    if (now_profit - params.profit_threshold).abs() < tol {
        return None;
    }
    if now_profit < params.profit_threshold {
        return Some(false);
    }
    if (now_profit - best_later).abs() < tol {
        return None;
    }
    Some(now_profit > best_later)
}

/// A random selling instance with at most three upcoming trips.
#[derive(Debug, Clone)]
pub struct SellInstance {
    pub params: TcsParams,
    pub balance: u32,
    pub now: f64,
    pub trips: Vec<HorizonTrip>,
    pub price: f64,
}

pub fn random_instance<R: Rng>(rng: &mut R) -> SellInstance {
    let fees = if rng.random_bool(0.3) {
        FeeSchedule::default()
    } else {
        FeeSchedule {
            buy_fixed: if rng.random_bool(0.5) { rng.random_range(0.0..0.2) } else { 0.0 },
            sell_fixed: if rng.random_bool(0.5) { rng.random_range(0.0..0.2) } else { 0.0 },
            buy_proportional: rng.random_range(0.0..0.3),
            sell_proportional: rng.random_range(0.0..0.3),
        }
    };
    let params = TcsParams {
        fees,
        profit_threshold: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..2.0) },
        ..TcsParams::default()
    };
    let now = if rng.random_bool(0.5) {
        rng.random_range(0..72) as f64 * 20.0
    } else {
        rng.random_range(0.0..1440.0)
    };
    let n = rng.random_range(0..=3);
    let mut deps: Vec<f64> = (0..n)
        .map(|_| now + rng.random_range(1.0..2000.0f64).round().max(1.0))
        .collect();
    deps.sort_by(f64::total_cmp);
    let trips = deps
        .into_iter()
        .map(|departure| HorizonTrip {
            departure,
            charge: if rng.random_bool(0.15) { 0 } else { rng.random_range(1..=160) },
        })
        .collect();
    SellInstance {
        params,
        balance: rng.random_range(0..=72),
        now,
        trips,
        price: rng.random_range(0.005..0.2),
    }
}

/// Which derivative-case property an instance exercised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeCase {
    /// Positive proportional fees, an under-funded trip, no wallet cap in play.
    Underfunded,
    /// Every trip funded when selling at the instant the wallet fills.
    FullWallet,
    NotApplicable,
}

/// True when any candidate sell time's predicted balances hit the wallet cap
/// before the last trip. The cap makes extra held credits free, so the
/// marginal-fee argument no longer applies there.
pub fn cap_binds(params: &TcsParams, balance: i64, now: f64, trips: &[HorizonTrip]) -> bool {
    let w = params.wallet_capacity() as i64;
    let q = params.tokens_per_allocation() as i64;
    let dt = params.allocation_interval;
    let Some(first) = trips.first() else {
        return false;
    };
    let mut s = now;
    let mut x = balance;
    while s < first.departure - 1e-9 {
        if x > w {
            return true;
        }
        let mut held = 0i64;
        let mut last = s;
        for trip in trips {
            held += q * count_instants(last, trip.departure, dt);
            if held > w {
                return true;
            }
            held = (held - trip.charge as i64).max(0);
            last = trip.departure;
        }
        let next = ((s / dt).floor() + 1.0) * dt;
        x = balance + q * count_instants(now, next, dt);
        s = next;
    }
    false
}

/// Check the two derivative-case properties on one instance.
pub fn check_derivative_case(inst: &SellInstance) -> Result<DerivativeCase, String> {
    let p = &inst.params;
    let balance = inst.balance as i64;
    let w = p.wallet_capacity() as i64;
    let profits = candidate_profits(p, balance, inst.now, &inst.trips, inst.price);
    let tol = 1e-9;

    let underfunded = {
        let q = p.tokens_per_allocation() as i64;
        let mut held = 0i64;
        let mut last = inst.now;
        let mut any = false;
        for trip in &inst.trips {
            held = (held + q * count_instants(last, trip.departure, p.allocation_interval)).min(w);
            if trip.charge as i64 > held {
                any = true;
                held = 0;
            } else {
                held -= trip.charge as i64;
            }
            last = trip.departure;
        }
        any
    };
    if p.fees.buy_proportional > 0.0
        && p.fees.sell_proportional > 0.0
        && underfunded
        && !cap_binds(p, balance, inst.now, &inst.trips)
    {
        let later = profits[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if later > profits[0] + tol {
            return Err(format!("deferring beats selling now ({later} > {}): {inst:?}", profits[0]));
        }
        return Ok(DerivativeCase::Underfunded);
    }

    if balance < w {
        let q = p.tokens_per_allocation() as i64;
        let dt = p.allocation_interval;
        // candidate i > 0 sells at the i-th grid instant after now
        let full = (1..profits.len()).find(|&i| {
            let s = ((inst.now / dt).floor() + i as f64) * dt;
            balance + q * count_instants(inst.now, s, dt) >= w
        });
        if let Some(i) = full {
            // funded means no buy-back term in the profit
            let funded = (profits[i] - sell_value(&p.fees, w, inst.price)).abs() < tol;
            if funded {
                let best = profits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if profits[i] < best - tol {
                    return Err(format!("full-wallet instant is not optimal: {inst:?}"));
                }
                return Ok(DerivativeCase::FullWallet);
            }
        }
    }
    Ok(DerivativeCase::NotApplicable)
}

/// mean = k' (K + s2 I)^-1 y, var = sf2 - k' (K + s2 I)^-1 k on standardized targets.
pub fn dense_posterior(x: &[Vec<f64>], ys: &[f64], hyper: &GpHyper, q: &[f64]) -> (f64, f64) {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        matern52(&x[i], &x[j], hyper) + if i == j { hyper.noise_variance } else { 0.0 }
    });
    let inv = k.try_inverse().expect("invertible");
    let kq = DVector::from_fn(n, |i, _| matern52(&x[i], q, hyper));
    let y = DVector::from_column_slice(ys);
    let mean = (kq.transpose() * &inv * y)[(0, 0)];
    let var = hyper.signal_variance - (kq.transpose() * &inv * &kq)[(0, 0)];
    (mean, var)
}

/// Separated points keep the noise-free kernel matrix well conditioned.
pub fn well_separated(x: &[Vec<f64>], min_dist: f64) -> bool {
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let d: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if d < min_dist {
                return false;
            }
        }
    }
    true
}

/// Known-optimum objective for the BO check.
pub const OPTIMUM: [f64; 3] = [0.3, 0.6, 0.45];

pub fn concave(x: &[f64]) -> f64 {
    -x.iter().zip(OPTIMUM).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}
