//! Credit accounts, regulator transactions, the multi-trip selling strategy
//! and the day-to-day price update.
//!
//! Times inside this module are absolute minutes since the start of day 1
//! (`(day - 1) * 1440 + minute_of_day`). Transactions record the day index and
//! the minute of day separately.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TcsError};
use crate::scenario::{TravelerId, MINUTES_PER_DAY};

/// Width of a toll step, minutes.
pub const TOLL_BIN_MINUTES: f64 = 5.0;
pub const TOLL_BINS: usize = 288;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FeeSchedule {
    pub buy_fixed: f64,
    pub sell_fixed: f64,
    pub buy_proportional: f64,
    pub sell_proportional: f64,
}

impl FeeSchedule {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.buy_fixed,
            self.sell_fixed,
            self.buy_proportional,
            self.sell_proportional,
        ];
        if all.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
            return Err(TcsError::invalid("tcs.fees", "fees must be finite and >= 0"));
        }
        if self.sell_proportional >= 1.0 {
            return Err(TcsError::invalid(
                "tcs.fees.sell_proportional",
                "proportional sell fee must be < 1",
            ));
        }
        Ok(())
    }

    /// Revenue of selling `amount` credits.
    pub fn sell_revenue(&self, amount: u32, price: f64) -> f64 {
        amount as f64 * price * (1.0 - self.sell_proportional) - self.sell_fixed
    }

    /// Cost of buying `amount` credits.
    pub fn buy_cost(&self, amount: u32, price: f64) -> f64 {
        amount as f64 * price * (1.0 + self.buy_proportional) + self.buy_fixed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcsParams {
    /// Credits per minute.
    pub allocation_rate: f64,
    /// Minutes between allocation instants.
    pub allocation_interval: f64,
    /// Token lifetime, minutes.
    pub lifetime: f64,
    /// Day-1 price, $/credit.
    pub initial_price: f64,
    pub initial_allocation: u32,
    pub max_credits_per_trip: u32,
    /// Price change per net credit of excess consumption.
    pub price_step: f64,
    pub fees: FeeSchedule,
    /// Minimum expected selling profit, $.
    pub profit_threshold: f64,
}

impl Default for TcsParams {
    fn default() -> Self {
        TcsParams {
            allocation_rate: 1.0 / 20.0,
            allocation_interval: 20.0,
            lifetime: 1420.0,
            initial_price: 0.1,
            initial_allocation: 72,
            max_credits_per_trip: 160,
            price_step: 5e-6,
            fees: FeeSchedule::default(),
            profit_threshold: 0.0,
        }
    }
}

impl TcsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.allocation_rate > 0.0 && self.allocation_interval > 0.0) {
            return Err(TcsError::invalid(
                "tcs.allocation_rate",
                "rate and interval must be positive",
            ));
        }
        let per = self.allocation_rate * self.allocation_interval;
        if (per - per.round()).abs() > 1e-9 || per.round() < 1.0 {
            return Err(TcsError::invalid(
                "tcs.allocation_rate",
                format!("rate x interval = {per} is not a positive whole number of credits"),
            ));
        }
        let ratio = self.lifetime / self.allocation_interval;
        if !(self.lifetime > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(TcsError::invalid(
                "tcs.lifetime",
                format!(
                    "lifetime {} is not a positive multiple of the allocation interval {}",
                    self.lifetime, self.allocation_interval
                ),
            ));
        }
        for (v, name) in [
            (self.initial_price, "tcs.initial_price"),
            (self.price_step, "tcs.price_step"),
            (self.profit_threshold, "tcs.profit_threshold"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TcsError::invalid(name, "must be finite and >= 0"));
            }
        }
        if (MINUTES_PER_DAY / self.allocation_interval).fract().abs() > 1e-9 {
            return Err(TcsError::invalid(
                "tcs.allocation_interval",
                "must divide the day evenly",
            ));
        }
        self.fees.validate()
    }

    /// Credits handed out at each allocation instant.
    pub fn tokens_per_allocation(&self) -> u32 {
        (self.allocation_rate * self.allocation_interval).round() as u32
    }

    /// Wallet capacity W: a token is alive on the allocation instants
    /// birth, birth + interval, ..., birth + lifetime.
    pub fn wallet_capacity(&self) -> u32 {
        let instants = (self.lifetime / self.allocation_interval).round() as u32 + 1;
        instants * self.tokens_per_allocation()
    }

    /// Number of allocation instants in the half-open interval (from, to].
    pub fn allocation_instants_between(&self, from: f64, to: f64) -> u32 {
        if to <= from {
            return 0;
        }
        let k = |t: f64| (t / self.allocation_interval + EPS).floor();
        (k(to) - k(from)).max(0.0) as u32
    }

    pub fn is_allocation_instant(&self, t: f64) -> bool {
        let r = t / self.allocation_interval;
        (r - r.round()).abs() < 1e-7
    }
}

/// One credit token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Credit {
    pub birth: f64,
    pub lifetime: f64,
}

impl Credit {
    /// Alive through `birth + lifetime` inclusive.
    pub fn expired_at(&self, now: f64) -> bool {
        self.birth + self.lifetime < now - EPS
    }
}

/// A traveler's wallet with running counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditAccount {
    pub owner: TravelerId,
    /// Oldest first.
    pub active: VecDeque<Credit>,
    pub capacity: u32,
    pub allocated: u64,
    pub expired: u64,
    /// Credits consumed by trips, including those bought at departure.
    pub used: u64,
    pub bought: u64,
    pub sold: u64,
}

impl CreditAccount {
    pub fn new(owner: TravelerId, capacity: u32) -> Self {
        CreditAccount {
            owner,
            active: VecDeque::new(),
            capacity,
            allocated: 0,
            expired: 0,
            used: 0,
            bought: 0,
            sold: 0,
        }
    }

    /// Account holding `count` tokens born on the allocation grid before `start`
    /// (the most recent at `start - interval`), as if accumulated before day 1.
    pub fn with_initial(owner: TravelerId, params: &TcsParams, start: f64) -> Self {
        let mut acc = CreditAccount::new(owner, params.wallet_capacity());
        let per = params.tokens_per_allocation().max(1);
        let count = params.initial_allocation.min(acc.capacity);
        let mut births: Vec<f64> = (0..count)
            .map(|j| start - params.allocation_interval * (1 + j / per) as f64)
            .collect();
        births.sort_by(f64::total_cmp);
        acc.active.extend(births.into_iter().map(|birth| Credit {
            birth,
            lifetime: params.lifetime,
        }));
        acc.allocated = count as u64;
        acc
    }

    pub fn balance(&self) -> u32 {
        self.active.len() as u32
    }

    /// allocated + bought = active + expired + used + sold
    pub fn conserves(&self) -> bool {
        self.allocated + self.bought
            == self.active.len() as u64 + self.expired + self.used + self.sold
    }

    fn expire(&mut self, now: f64) -> u32 {
        let mut n = 0;
        while self.active.front().is_some_and(|c| c.expired_at(now)) {
            self.active.pop_front();
            n += 1;
        }
        self.expired += n as u64;
        n
    }

    /// Expire, add `tokens` born now, then drop the oldest beyond capacity.
    fn receive_allocation(&mut self, now: f64, tokens: u32, lifetime: f64) {
        self.expire(now);
        for _ in 0..tokens {
            self.active.push_back(Credit {
                birth: now,
                lifetime,
            });
        }
        self.allocated += tokens as u64;
        while self.active.len() as u32 > self.capacity {
            self.active.pop_front();
            self.expired += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransactionKind {
    Allocation,
    Buy,
    Use,
    Sell,
}

impl fmt::Display for TransactionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransactionKind::Allocation => "allocation",
            TransactionKind::Buy => "buy",
            TransactionKind::Use => "use",
            TransactionKind::Sell => "sell",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Party {
    Regulator,
    Traveler(TravelerId),
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Regulator => f.write_str("regulator"),
            Party::Traveler(id) => write!(f, "{id}"),
        }
    }
}

impl Party {
    pub fn traveler(&self) -> Option<TravelerId> {
        match self {
            Party::Regulator => None,
            Party::Traveler(id) => Some(*id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub kind: TransactionKind,
    pub buyer: Party,
    pub seller: Party,
    pub amount: u32,
    /// Minute of day.
    pub time: f64,
    /// 1-based day index.
    pub day: usize,
    pub unit_price: f64,
    pub fee: f64,
}

impl Transaction {
    /// The traveler on the non-regulator side.
    pub fn traveler(&self) -> Option<TravelerId> {
        self.buyer.traveler().or(self.seller.traveler())
    }
}

/// Day-indexed credit price and today's trade totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub day: usize,
    pub price: f64,
    pub bought_today: u64,
    pub sold_today: u64,
    pub price_step: f64,
}

impl MarketState {
    pub fn new(price: f64, price_step: f64) -> Self {
        MarketState {
            day: 1,
            price,
            bought_today: 0,
            sold_today: 0,
            price_step,
        }
    }

    /// Excess credit consumption of the current day.
    pub fn excess(&self) -> i64 {
        self.bought_today as i64 - self.sold_today as i64
    }

    /// p <- max(p + k * Z, 0); resets the daily counters and advances the day.
    pub fn update_price(&mut self) -> f64 {
        self.price = next_price(self.price, self.price_step, self.excess());
        self.bought_today = 0;
        self.sold_today = 0;
        self.day += 1;
        self.price
    }
}

pub fn next_price(price: f64, step: f64, excess: i64) -> f64 {
    (price + step * excess as f64).max(0.0)
}

/// Credits per meter by 5-minute bin of the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TollProfile {
    values: Vec<f64>,
}

impl TollProfile {
    pub fn zero() -> Self {
        TollProfile {
            values: vec![0.0; TOLL_BINS],
        }
    }

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != TOLL_BINS {
            return Err(TcsError::invalid(
                "toll_profile",
                format!("expected {TOLL_BINS} bins, got {}", values.len()),
            ));
        }
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(TcsError::invalid("toll_profile", "values must be finite and >= 0"));
        }
        Ok(TollProfile { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn bin_of(minute_of_day: f64) -> usize {
        let m = minute_of_day.rem_euclid(MINUTES_PER_DAY);
        ((m / TOLL_BIN_MINUTES + EPS).floor() as usize).min(TOLL_BINS - 1)
    }

    /// Toll rate g(t) in credits per meter; `t` may be any absolute time.
    pub fn at(&self, t: f64) -> f64 {
        self.values[Self::bin_of(t)]
    }

    /// Credits charged for a trip: ceil(g(t) * distance), capped.
    pub fn charge(&self, t: f64, distance_m: f64, cap: u32) -> u32 {
        let raw = self.at(t) * distance_m;
        if raw <= 0.0 {
            return 0;
        }
        // Guard against 96.99999 style round-off before the ceiling.
        let c = (raw - 1e-9).ceil().max(1.0);
        (c as u64).min(cap as u64) as u32
    }

    pub fn write_csv(&self, path: &FsPath) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_start_min", "credits_per_meter"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([format!("{}", i as f64 * TOLL_BIN_MINUTES), format!("{v}")])?;
        }
        w.flush().map_err(|e| TcsError::io(path, e))
    }

    pub fn read_csv(path: &FsPath) -> Result<Self> {
        let parse_err = |message: String| TcsError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
        let mut values = Vec::with_capacity(TOLL_BINS);
        for rec in r.records() {
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let v: f64 = rec
                .get(1)
                .ok_or_else(|| parse_err("missing credits_per_meter column".into()))?
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("{e}")))?;
            values.push(v);
        }
        TollProfile::new(values)
    }
}

/// Expire and allocate for every account at an allocation instant.
pub fn allocate(
    accounts: &mut [CreditAccount],
    params: &TcsParams,
    now: f64,
    day: usize,
    price: f64,
) -> Vec<Transaction> {
    let tokens = params.tokens_per_allocation();
    accounts
        .iter_mut()
        .map(|acc| {
            acc.receive_allocation(now, tokens, params.lifetime);
            Transaction {
                kind: TransactionKind::Allocation,
                buyer: Party::Traveler(acc.owner),
                seller: Party::Regulator,
                amount: tokens,
                time: minute_of_day(now),
                day,
                unit_price: price,
                fee: 0.0,
            }
        })
        .collect()
}

pub fn minute_of_day(abs: f64) -> f64 {
    abs.rem_euclid(MINUTES_PER_DAY)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChargeOutcome {
    pub charged: u32,
    pub bought: u32,
    pub transactions: Vec<Transaction>,
}

/// Charge a departing trip. Uses the oldest tokens; a shortfall is bought from
/// the regulator and consumed together with the whole balance.
pub fn charge_trip(
    account: &mut CreditAccount,
    market: &mut MarketState,
    toll: &TollProfile,
    params: &TcsParams,
    t_dep: f64,
    distance_m: f64,
) -> ChargeOutcome {
    let charge = toll.charge(t_dep, distance_m, params.max_credits_per_trip);
    let mut transactions = Vec::new();
    if charge == 0 {
        return ChargeOutcome {
            charged: 0,
            bought: 0,
            transactions,
        };
    }
    let time = minute_of_day(t_dep);
    let balance = account.balance();
    let mut bought = 0;
    if balance >= charge {
        for _ in 0..charge {
            account.active.pop_front();
        }
    } else {
        bought = charge - balance;
        account.active.clear();
        account.bought += bought as u64;
        market.bought_today += bought as u64;
        let cost = params.fees.buy_cost(bought, market.price);
        transactions.push(Transaction {
            kind: TransactionKind::Buy,
            buyer: Party::Traveler(account.owner),
            seller: Party::Regulator,
            amount: bought,
            time,
            day: market.day,
            unit_price: market.price,
            fee: cost - bought as f64 * market.price,
        });
    }
    account.used += charge as u64;
    transactions.push(Transaction {
        kind: TransactionKind::Use,
        buyer: Party::Regulator,
        seller: Party::Traveler(account.owner),
        amount: charge,
        time,
        day: market.day,
        unit_price: market.price,
        fee: 0.0,
    });
    ChargeOutcome {
        charged: charge,
        bought,
        transactions,
    }
}

/// Sell the whole balance to the regulator.
pub fn sell_all(
    account: &mut CreditAccount,
    market: &mut MarketState,
    fees: &FeeSchedule,
    now: f64,
) -> Result<Transaction> {
    let amount = account.balance();
    if amount == 0 {
        return Err(TcsError::EmptySale(account.owner));
    }
    account.active.clear();
    account.sold += amount as u64;
    market.sold_today += amount as u64;
    let revenue = fees.sell_revenue(amount, market.price);
    Ok(Transaction {
        kind: TransactionKind::Sell,
        buyer: Party::Regulator,
        seller: Party::Traveler(account.owner),
        amount,
        time: minute_of_day(now),
        day: market.day,
        unit_price: market.price,
        fee: amount as f64 * market.price - revenue,
    })
}

/// An upcoming trip as seen by the selling model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonTrip {
    /// Absolute departure time (predicted or chosen).
    pub departure: f64,
    /// Predicted credit charge.
    pub charge: u32,
}

/// Expected balance at each upcoming departure if everything is sold at `now`
/// and nothing is sold afterwards. Allocation instants are counted discretely.
pub fn predicted_balances(params: &TcsParams, now: f64, horizon: &[HorizonTrip]) -> Vec<u32> {
    let w = params.wallet_capacity();
    let per = params.tokens_per_allocation();
    let mut out = Vec::with_capacity(horizon.len());
    let mut prev_time = now;
    let mut carry: u32 = 0;
    for (i, trip) in horizon.iter().enumerate() {
        let accrued = per * params.allocation_instants_between(prev_time, trip.departure);
        let x = if i == 0 {
            accrued.min(w)
        } else {
            (carry + accrued).min(w)
        };
        out.push(x);
        carry = x.saturating_sub(trip.charge);
        prev_time = trip.departure;
    }
    out
}

/// Expected profit of selling the whole `balance` now: sale revenue minus the
/// cost of topping up every future trip the emptied wallet could not cover.
pub fn selling_profit(
    params: &TcsParams,
    balance: u32,
    now: f64,
    horizon: &[HorizonTrip],
    price: f64,
) -> f64 {
    let xs = predicted_balances(params, now, horizon);
    let buys: f64 = horizon
        .iter()
        .zip(&xs)
        .filter(|(t, x)| t.charge > **x)
        .map(|(t, x)| params.fees.buy_cost(t.charge - x, price))
        .sum();
    params.fees.sell_revenue(balance, price) - buys
}

/// Sell-now decision: profit above the threshold, and either the wallet is
/// full or waiting for the next allocation instant would not raise the
/// profit. Waiting adds credits to the sale but drains the predicted balances
/// downstream until a trip that must buy anyway (charge >= predicted balance)
/// or the wallet cap absorbs the difference. Profit over later sell times is
/// unimodal, so the one-step comparison decides the whole pre-departure range.
pub fn should_sell(
    params: &TcsParams,
    balance: u32,
    now: f64,
    horizon: &[HorizonTrip],
    price: f64,
) -> bool {
    if balance == 0 {
        return false;
    }
    let profit = selling_profit(params, balance, now, horizon, price);
    if profit <= params.profit_threshold {
        return false;
    }
    let w = params.wallet_capacity();
    if balance >= w {
        return true;
    }
    let next = next_allocation_instant(params, now);
    if horizon.first().is_some_and(|t| t.departure <= next + EPS) {
        // No sell time left before the next departure.
        return true;
    }
    let later = (balance + params.tokens_per_allocation()).min(w);
    let deferred = selling_profit(params, later, next, horizon, price);
    deferred - profit <= 1e-9 * profit.abs().max(1.0)
}

/// First allocation instant strictly after `now`.
pub fn next_allocation_instant(params: &TcsParams, now: f64) -> f64 {
    ((now / params.allocation_interval + EPS).floor() + 1.0) * params.allocation_interval
}

/// A trip starting at the current tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Departure {
    pub traveler: TravelerId,
    pub time: f64,
    pub distance_m: f64,
}

/// Regulator, market platform and all traveler accounts.
#[derive(Debug, Clone)]
pub struct MarketWorld {
    pub params: TcsParams,
    pub toll: TollProfile,
    pub state: MarketState,
    pub accounts: Vec<CreditAccount>,
    /// Whether allocation transactions are kept in the log.
    pub log_allocations: bool,
    /// Trading is off when the toll is identically zero (no-scheme baseline).
    trading: bool,
}

impl MarketWorld {
    /// Accounts are indexed by traveler id, which must be 0..n.
    pub fn new(params: TcsParams, toll: TollProfile, travelers: usize) -> Self {
        let accounts = (0..travelers)
            .map(|i| CreditAccount::with_initial(i as TravelerId, &params, 0.0))
            .collect();
        let trading = !toll.is_zero();
        MarketWorld {
            state: MarketState::new(params.initial_price, params.price_step),
            params,
            toll,
            accounts,
            log_allocations: false,
            trading,
        }
    }

    pub fn trading(&self) -> bool {
        self.trading
    }

    /// One clock step in fixed order: allocation (on the grid), trip charges,
    /// then selling checks. Sell checks run for everyone at allocation instants
    /// and for travelers who departed this tick. `horizon` yields a traveler's
    /// upcoming trips. Returns the transactions and charge outcomes per departure.
    pub fn tick(
        &mut self,
        now: f64,
        departures: &[Departure],
        horizon: &mut dyn FnMut(TravelerId) -> Vec<HorizonTrip>,
    ) -> (Vec<Transaction>, Vec<ChargeOutcome>) {
        let mut log = Vec::new();
        // The next day's first allocation belongs to that day.
        let in_day = now < self.state.day as f64 * MINUTES_PER_DAY - EPS;
        let on_grid = in_day && self.params.is_allocation_instant(now);
        let day = self.state.day;
        if on_grid {
            let txs = allocate(&mut self.accounts, &self.params, now, day, self.state.price);
            if self.log_allocations {
                log.extend(txs);
            }
        }
        let mut outcomes = Vec::with_capacity(departures.len());
        for d in departures {
            let acc = &mut self.accounts[d.traveler as usize];
            let out = charge_trip(
                acc,
                &mut self.state,
                &self.toll,
                &self.params,
                d.time,
                d.distance_m,
            );
            log.extend(out.transactions.iter().cloned());
            outcomes.push(out);
        }
        if self.trading {
            let mut check = |world: &mut MarketWorld, id: TravelerId, log: &mut Vec<Transaction>| {
                let acc = &world.accounts[id as usize];
                let trips = horizon(id);
                if should_sell(&world.params, acc.balance(), now, &trips, world.state.price) {
                    let tx = sell_all(
                        &mut world.accounts[id as usize],
                        &mut world.state,
                        &world.params.fees,
                        now,
                    )
                    .expect("balance checked");
                    log.push(tx);
                }
            };
            if on_grid {
                for id in 0..self.accounts.len() {
                    check(self, id as TravelerId, &mut log);
                }
            } else {
                for d in departures {
                    check(self, d.traveler, &mut log);
                }
            }
        }
        (log, outcomes)
    }

    /// Close the day: returns (excess consumption, new price).
    pub fn end_day(&mut self) -> (i64, f64) {
        let z = self.state.excess();
        let p = self.state.update_price();
        (z, p)
    }
}
