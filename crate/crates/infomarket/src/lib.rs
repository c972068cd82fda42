//! An information market for web-browsing data.
//!
//! Users sell controlled access to their browsing history instead of being
//! tracked covertly. The pieces fit together like this: [`trace`] produces
//! synthetic browsing logs, [`valuation`] turns a browsing profile into what
//! an ad network would pay for it, [`game`] splits the resulting surplus
//! between user, ad network, and market via Shapley values, [`auction`]
//! sells per-period access with a differentially private clearing price,
//! [`policy`] decides per HTTP request whether tracking state passes or is
//! stripped, [`proxy`] enforces those decisions on live traffic, and
//! [`adoption`] simulates who ends up joining such a market and what they
//! earn.

pub mod adoption;
pub mod auction;
pub mod config;
pub mod engine;
pub mod game;
pub mod io;
pub mod ledger;
pub mod money;
pub mod policy;
pub mod proxy;
pub mod seed;
pub mod trace;
pub mod valuation;

pub use engine::{ConsentLift, CpmParams, IntentProfile, MarketConfig, MarketType};
pub use money::Money;
