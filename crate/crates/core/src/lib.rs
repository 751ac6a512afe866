//! Agent-based simulator of a tradable credit scheme with day-to-day learning
//! and Bayesian-optimization toll design.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod choice;
pub mod daytoday;
pub mod error;
pub mod market;
pub mod metrics;
pub mod network;
pub mod optimizer;
pub mod rng;
pub mod scenario;
pub mod supply;

pub use daytoday::{run_experiment, ChoiceSets, DayResult, ExperimentResult, RunOptions};
pub use error::{Result, TcsError};
pub use market::{CreditAccount, MarketState, TcsParams, TollProfile, Transaction};
pub use network::{ChoiceSet, Network, Path, Segment};
pub use optimizer::{bo_loop, toll_profile, BoParams, TollParams};
pub use scenario::{load_scenario, Scenario, ScenarioConfig, Traveler, Trip};
pub use supply::TripRecord;
