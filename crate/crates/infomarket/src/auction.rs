//! Differentially private access auctions.
//!
//! Once per period, ad networks bid a max price for next-period access to a
//! user's data. Posting the exact revenue-maximizing price would leak the
//! bid vector, so the clearing price is drawn from the exponential
//! mechanism: density proportional to exp(epsilon x R(p)) where
//! R(p) = p x |{bids >= p}| is the revenue at price p. Every bidder whose
//! bid meets the sampled price wins access and pays it.
//!
//! R is piecewise linear between sorted bid values, so the density is
//! piecewise exponential: all masses, the CDF, sampling, and the expected
//! revenue have closed forms, evaluated in log space so large
//! epsilon x revenue exponents cannot overflow. The support is truncated to
//! (0, max bid]: prices above the top bid sell nothing and rate zero.

use crate::money::Money;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AuctionError {
    #[error("epsilon must be finite and > 0, got {0}")]
    InvalidEpsilon(f64),
    #[error("no positive bids: the price density is degenerate")]
    NoPositiveBids,
    #[error("bid from {aggregator:?} is negative: {price}")]
    NegativeBid { aggregator: String, price: Money },
}

/// One ad network's sealed bid: the most it will pay for one period of
/// access to this user's whitelist. Zero means abstain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bid {
    pub aggregator: String,
    pub max_price: Money,
}

/// A bid-file row. Line-delimited JSON, one object per (user, aggregator).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BidRecord {
    pub user: String,
    pub aggregator: String,
    pub max_price: Money,
}

/// An outcome-file row for one user's auction in one period.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub user: String,
    pub period: u64,
    pub clearing_price: Money,
    pub winners: Vec<String>,
    pub user_revenue: Money,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuctionOutcome {
    pub clearing_price: Money,
    /// Winning aggregators, sorted lexicographically.
    pub winners: Vec<String>,
    /// clearing_price x |winners|, exact.
    pub user_revenue: Money,
}

impl AuctionOutcome {
    pub fn no_sale() -> AuctionOutcome {
        AuctionOutcome {
            clearing_price: Money::ZERO,
            winners: Vec::new(),
            user_revenue: Money::ZERO,
        }
    }
}

/// Revenue the user would earn posting price `p`: p times the number of
/// bids at or above p.
pub fn revenue_at_price(p: f64, bids: &[f64]) -> f64 {
    debug_assert!(p >= 0.0);
    p * bids.iter().filter(|&&b| b >= p).count() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalPrice {
    pub price: f64,
    pub revenue: f64,
    /// Number of bidders served at the optimal price.
    pub winners: usize,
}

/// Exact revenue-maximizing posted price. R(p) increases within each
/// segment, so only bid values are candidates; ties break toward the lower
/// price. `None` when no bid is positive.
pub fn optimal_price(bids: &[f64]) -> Option<OptimalPrice> {
    let mut values: Vec<f64> = bids.iter().copied().filter(|&b| b > 0.0).collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut best: Option<OptimalPrice> = None;
    for &v in &values {
        let winners = bids.iter().filter(|&&b| b >= v).count();
        let revenue = v * winners as f64;
        if best.is_none_or(|b| revenue > b.revenue) {
            best = Some(OptimalPrice { price: v, revenue, winners });
        }
    }
    best
}

/// Expected-revenue floor the mechanism guarantees at privacy level
/// `epsilon`, relative to the optimum `opt` served to `m` bidders:
/// opt - 3 ln(e + opt x epsilon^2 x m) / epsilon.
pub fn expected_revenue_floor(opt: f64, m: usize, epsilon: f64) -> f64 {
    opt - 3.0 * (std::f64::consts::E + opt * epsilon * epsilon * m as f64).ln() / epsilon
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    lo: f64,
    hi: f64,
    winners: u32,
    /// epsilon x winners: the density on (lo, hi] is proportional to
    /// exp(lambda x p).
    lambda: f64,
    /// Probability mass of this segment under the normalized density.
    prob: f64,
}

/// The normalized exponential-mechanism price distribution for one bid set.
#[derive(Debug, Clone)]
pub struct PriceDensity {
    epsilon: f64,
    segments: Vec<Segment>,
}

/// Mean of x over [0, 1] under density proportional to exp(a x):
/// 1/(1 - exp(-a)) - 1/a, with a series fallback near zero.
fn scaled_mean(a: f64) -> f64 {
    if a < 1e-2 {
        0.5 + a / 12.0 - a * a * a / 720.0
    } else {
        1.0 / -f64::exp_m1(-a) - 1.0 / a
    }
}

impl PriceDensity {
    /// Builds the piecewise density. Non-positive bids abstain; an empty or
    /// all-zero bid set has no well-defined density and is rejected.
    pub fn new(bids: &[f64], epsilon: f64) -> Result<PriceDensity, AuctionError> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(AuctionError::InvalidEpsilon(epsilon));
        }
        let mut values: Vec<f64> = bids.iter().copied().filter(|&b| b > 0.0 && b.is_finite()).collect();
        if values.is_empty() {
            return Err(AuctionError::NoPositiveBids);
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let positive = values.clone();
        values.dedup();

        let mut segments = Vec::with_capacity(values.len());
        let mut lo = 0.0;
        for &hi in &values {
            // bids only sit at segment boundaries, so the winner count is
            // constant on (lo, hi]
            let winners = positive.iter().filter(|&&b| b >= hi).count() as u32;
            segments.push(Segment {
                lo,
                hi,
                winners,
                lambda: epsilon * winners as f64,
                prob: 0.0,
            });
            lo = hi;
        }

        // log of each segment's unnormalized mass
        // integral of exp(lambda p) over (lo, hi]
        let log_masses: Vec<f64> = segments
            .iter()
            .map(|s| {
                let x = s.lambda * (s.hi - s.lo);
                if x < 1.0 {
                    s.lambda * s.lo + f64::exp_m1(x).ln() - s.lambda.ln()
                } else {
                    s.lambda * s.hi + f64::ln_1p(-(-x).exp()) - s.lambda.ln()
                }
            })
            .collect();
        let peak = log_masses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = peak + log_masses.iter().map(|&l| (l - peak).exp()).sum::<f64>().ln();
        for (s, &lm) in segments.iter_mut().zip(&log_masses) {
            s.prob = (lm - log_z).exp();
        }
        Ok(PriceDensity { epsilon, segments })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Upper end of the support: the highest positive bid.
    pub fn support_max(&self) -> f64 {
        self.segments.last().unwrap().hi
    }

    /// Winner count at price `p` within the support; used by tests to check
    /// the count never increases with price.
    pub fn winners_at(&self, p: f64) -> Option<u32> {
        self.segments
            .iter()
            .find(|s| p > s.lo && p <= s.hi)
            .map(|s| s.winners)
    }

    /// Normalized density at `p` (zero outside the support).
    pub fn pdf(&self, p: f64) -> f64 {
        match self.segments.iter().find(|s| p > s.lo && p <= s.hi) {
            None => 0.0,
            Some(s) => {
                let x = s.lambda * (s.hi - s.lo);
                s.prob * s.lambda * (s.lambda * (p - s.hi)).exp() / -f64::exp_m1(-x)
            }
        }
    }

    /// Exact cumulative distribution at `p`.
    pub fn cdf(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for s in &self.segments {
            if p >= s.hi {
                acc += s.prob;
            } else if p > s.lo {
                let x = s.lambda * (s.hi - s.lo);
                let within =
                    (s.lambda * (p - s.hi)).exp() * -f64::exp_m1(-s.lambda * (p - s.lo)) / -f64::exp_m1(-x);
                acc += s.prob * within;
                break;
            } else {
                break;
            }
        }
        acc.min(1.0)
    }

    /// Draws one price: a categorical pick of the segment by mass, then the
    /// exact inverse CDF of the within-segment truncated exponential.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let pick: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = self.segments.len() - 1;
        for (i, s) in self.segments.iter().enumerate() {
            acc += s.prob;
            if pick < acc {
                chosen = i;
                break;
            }
        }
        let s = &self.segments[chosen];
        let x = s.lambda * (s.hi - s.lo);
        // u in (0, 1]: p = hi + ln(u + (1-u) exp(-x)) / lambda, all
        // exponents non-positive
        let u = 1.0 - rng.gen::<f64>();
        let p = s.hi + (u + (1.0 - u) * (-x).exp()).ln() / s.lambda;
        p.clamp(f64::MIN_POSITIVE, s.hi)
    }

    /// Exact expected revenue E[R(p)] under this distribution, segment by
    /// segment in closed form.
    pub fn expected_revenue(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| {
                let delta = s.hi - s.lo;
                let mean_price = s.lo + delta * scaled_mean(s.lambda * delta);
                s.winners as f64 * mean_price * s.prob
            })
            .sum()
    }
}

/// Expected revenue of the mechanism for a bid set, without sampling.
pub fn expected_revenue(bids: &[f64], epsilon: f64) -> Result<f64, AuctionError> {
    Ok(PriceDensity::new(bids, epsilon)?.expected_revenue())
}

/// Runs one user's per-period auction. Zero bids abstain; if nobody bids a
/// positive price the auction short-circuits to no sale. The clearing price
/// is the sampled price floored to a micro-unit, so winners (bid >= sampled
/// price) always meet it.
pub fn run_auction<R: Rng + ?Sized>(
    bids: &[Bid],
    epsilon: f64,
    rng: &mut R,
) -> Result<AuctionOutcome, AuctionError> {
    for bid in bids {
        if bid.max_price.is_negative() {
            return Err(AuctionError::NegativeBid {
                aggregator: bid.aggregator.clone(),
                price: bid.max_price,
            });
        }
    }
    let prices: Vec<f64> = bids.iter().map(|b| b.max_price.to_units()).collect();
    let density = match PriceDensity::new(&prices, epsilon) {
        Ok(d) => d,
        Err(AuctionError::NoPositiveBids) => return Ok(AuctionOutcome::no_sale()),
        Err(e) => return Err(e),
    };
    let price = density.sample(rng);
    let mut winners: Vec<String> = bids
        .iter()
        .filter(|b| b.max_price.to_units() >= price)
        .map(|b| b.aggregator.clone())
        .collect();
    winners.sort();
    let clearing_price = Money::from_units_floor(price);
    let user_revenue = clearing_price * winners.len() as i64;
    Ok(AuctionOutcome { clearing_price, winners, user_revenue })
}
