//! Revenue primitives: CPM composition, intent profiles, consent lift.
//!
//! Ad revenue for one user/publisher/ad-network triple factors into a
//! run-of-network base rate, a traffic-quality multiplier, and an intent
//! coefficient describing how much targeting data the ad network has:
//! 1 when tracking is blocked, the implicit coefficient when it tracks
//! covertly, and the explicit coefficient when the user discloses in full.

use crate::money::Money;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EngineError {
    #[error("intent coefficients must satisfy explicit >= implicit >= 1, got explicit {explicit}, implicit {implicit}")]
    InvalidIntents { explicit: f64, implicit: f64 },
    #[error("intent coefficient must be finite and >= 0, got {0}")]
    InvalidIntent(f64),
    #[error("cpm parameters invalid: {0}")]
    InvalidCpmParams(String),
    #[error("market config invalid: {0}")]
    InvalidConfig(String),
    #[error("unknown market type {0:?} (expected mediated, direct, dnt-mediated, or dnt-direct)")]
    UnknownMarketType(String),
}

/// Who intermediates the sale of a user's data, and whether publishers
/// enforce do-not-track against non-participants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarketType {
    Mediated,
    Direct,
    DntMediated,
    DntDirect,
}

impl MarketType {
    pub const ALL: [MarketType; 4] = [
        MarketType::Mediated,
        MarketType::Direct,
        MarketType::DntMediated,
        MarketType::DntDirect,
    ];

    /// Three-player game with a market provider, or two-player direct sale.
    pub fn is_mediated(self) -> bool {
        matches!(self, MarketType::Mediated | MarketType::DntMediated)
    }

    /// Publishers block tracking of non-participants, so covert tracking
    /// earns nothing above the blocked baseline.
    pub fn is_dnt(self) -> bool {
        matches!(self, MarketType::DntMediated | MarketType::DntDirect)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MarketType::Mediated => "mediated",
            MarketType::Direct => "direct",
            MarketType::DntMediated => "dnt-mediated",
            MarketType::DntDirect => "dnt-direct",
        }
    }
}

impl fmt::Display for MarketType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MarketType {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<MarketType, EngineError> {
        match s {
            "mediated" => Ok(MarketType::Mediated),
            "direct" => Ok(MarketType::Direct),
            "dnt-mediated" => Ok(MarketType::DntMediated),
            "dnt-direct" => Ok(MarketType::DntDirect),
            other => Err(EngineError::UnknownMarketType(other.into())),
        }
    }
}

/// Base CPM factors shared by every transaction: run-of-network rate
/// (money per thousand impressions) and traffic-quality multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpmParams {
    pub ron: Money,
    pub tqm: f64,
}

impl CpmParams {
    pub fn new(ron: Money, tqm: f64) -> Result<CpmParams, EngineError> {
        if ron.is_negative() {
            return Err(EngineError::InvalidCpmParams(format!("ron must be >= 0, got {ron}")));
        }
        if !tqm.is_finite() || tqm < 0.0 {
            return Err(EngineError::InvalidCpmParams(format!("tqm must be finite and >= 0, got {tqm}")));
        }
        Ok(CpmParams { ron, tqm })
    }

    /// Money per thousand impressions under `intent`, rounded once to a
    /// micro-unit.
    pub fn base_per_mille(&self, intent: f64) -> f64 {
        self.ron.to_units() * self.tqm * intent
    }
}

/// CPM for one user/ad-network pair: ron x tqm x intent, money per mille.
pub fn cpm(params: &CpmParams, intent: f64) -> Result<Money, EngineError> {
    if !intent.is_finite() || intent < 0.0 {
        return Err(EngineError::InvalidIntent(intent));
    }
    Ok(Money::from_units_rounded(params.base_per_mille(intent)))
}

/// A user's intent coefficients: one explicit (full-disclosure) value and a
/// per-ad-network implicit (covert tracking) value. The blocked coefficient
/// is always 1 and is not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentProfile {
    explicit: f64,
    implicit: BTreeMap<String, f64>,
}

impl IntentProfile {
    /// Enforces explicit >= implicit[a] >= 1 for every ad network.
    pub fn new(explicit: f64, implicit: BTreeMap<String, f64>) -> Result<IntentProfile, EngineError> {
        if !explicit.is_finite() || explicit < 1.0 {
            return Err(EngineError::InvalidIntents { explicit, implicit: 1.0 });
        }
        for &imp in implicit.values() {
            if !imp.is_finite() || !(1.0..=explicit).contains(&imp) {
                return Err(EngineError::InvalidIntents { explicit, implicit: imp });
            }
        }
        Ok(IntentProfile { explicit, implicit })
    }

    pub fn explicit(&self) -> f64 {
        self.explicit
    }

    /// Covert-tracking coefficient for `aggregator`; 1 when it never sees
    /// this user.
    pub fn implicit(&self, aggregator: &str) -> f64 {
        self.implicit.get(aggregator).copied().unwrap_or(1.0)
    }

    pub fn aggregators(&self) -> impl Iterator<Item = (&str, f64)> {
        self.implicit.iter().map(|(a, &v)| (a.as_str(), v))
    }
}

/// How much a user's consent is worth to an ad network relative to what
/// covert tracking already yields: (explicit - 1) / (implicit - 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConsentLift {
    Finite(f64),
    /// Tracking blind (implicit = 1) but consent has value: any price makes
    /// the ad network better off.
    Infinite,
    /// This user's data is worthless either way (implicit = explicit = 1).
    Undefined,
}

pub fn consent_lift(explicit: f64, implicit: f64) -> Result<ConsentLift, EngineError> {
    if !explicit.is_finite() || !implicit.is_finite() || implicit < 1.0 || explicit < implicit {
        return Err(EngineError::InvalidIntents { explicit, implicit });
    }
    if implicit > 1.0 {
        Ok(ConsentLift::Finite((explicit - 1.0) / (implicit - 1.0)))
    } else if explicit > 1.0 {
        Ok(ConsentLift::Infinite)
    } else {
        Ok(ConsentLift::Undefined)
    }
}

/// Market-wide economic knobs. `alpha` is the revenue fraction an ad network
/// keeps after the publisher's cut; `currency_scale` converts one unit of
/// allocation value into money when valuations become bids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub market_type: MarketType,
    pub alpha: f64,
    pub epsilon: f64,
    pub impressions_per_period: u64,
    pub currency_scale: f64,
}

impl MarketConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(EngineError::InvalidConfig(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(EngineError::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.impressions_per_period == 0 {
            return Err(EngineError::InvalidConfig("impressions_per_period must be >= 1".into()));
        }
        if !self.currency_scale.is_finite() || self.currency_scale <= 0.0 {
            return Err(EngineError::InvalidConfig(format!("currency_scale must be > 0, got {}", self.currency_scale)));
        }
        Ok(())
    }
}
