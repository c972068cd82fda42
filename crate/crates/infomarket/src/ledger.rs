//! Append-only record of who paid which user, when, and under which
//! pricing rule. One JSON line per payment.

use crate::io::{append_jsonl, read_jsonl, IoError};
use crate::money::Money;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("ledger entry for user {user:?} has negative amount {amount}")]
    NegativeAmount { user: String, amount: Money },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PricingMode {
    Shapley,
    Auction,
}

impl PricingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PricingMode::Shapley => "shapley",
            PricingMode::Auction => "auction",
        }
    }
}

impl std::fmt::Display for PricingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PricingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<PricingMode, String> {
        match s {
            "shapley" => Ok(PricingMode::Shapley),
            "auction" => Ok(PricingMode::Auction),
            other => Err(format!("unknown pricing mode {other:?} (expected shapley or auction)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub period: u64,
    pub user: String,
    pub aggregator: String,
    pub amount: Money,
    pub pricing_mode: PricingMode,
}

/// Appends entries, rejecting negative amounts before any write.
pub fn append(path: &Path, entries: &[LedgerEntry]) -> Result<(), LedgerError> {
    for e in entries {
        if e.amount.is_negative() {
            return Err(LedgerError::NegativeAmount { user: e.user.clone(), amount: e.amount });
        }
    }
    append_jsonl(path, entries)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<LedgerEntry>, LedgerError> {
    Ok(read_jsonl(path)?)
}

/// Per-user totals plus the grand total; sums are exact in money units.
pub fn summarize(entries: &[LedgerEntry]) -> (BTreeMap<String, Money>, Money) {
    let mut per_user: BTreeMap<String, Money> = BTreeMap::new();
    let mut total = Money::ZERO;
    for e in entries {
        *per_user.entry(e.user.clone()).or_insert(Money::ZERO) += e.amount;
        total += e.amount;
    }
    (per_user, total)
}
