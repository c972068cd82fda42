//! Who joins the market, and what happens to the money.
//!
//! The simulation replays a browsing trace as one auction period. Users
//! join when some ad network that observes them would pay them a positive
//! revenue share; ad networks join when joining strictly beats abstaining
//! under the current membership. Rounds are synchronous (all users decide,
//! then all ad networks) and the joined sets only grow, so user decisions
//! settle in round one, ad-network decisions in round two, and the loop
//! stops at the first quiet round, with a configurable cap as a guard.
//!
//! Every (user, ad network) pair that shares at least one trace event is
//! one transaction line. Its intent coefficient depends on membership:
//! outsiders track covertly (their implicit coefficient; 1 under the
//! do-not-track variants), a joined user blocks non-members down to 1, and
//! a cooperating pair earns the explicit coefficient with the user (and
//! under a mediated market, the intermediary) paid their revenue shares.
//! Gross revenue, the publisher cut, both payments, and the ad network's
//! residual are exact money amounts per pair, so conservation holds
//! bit-for-bit. Under auction pricing the cooperating set and user
//! payments come from one exponential-mechanism auction per joined user
//! instead of the revenue-share formula; join decisions are unchanged.

use crate::auction::{run_auction, AuctionError, Bid};
use crate::engine::{CpmParams, EngineError, IntentProfile, MarketConfig, MarketType};
use crate::game::{
    data_price, publisher_share, shapley_closed_form, user_gains, worth, Coalition, GameError, Player,
};
use crate::ledger::{LedgerEntry, PricingMode};
use crate::money::Money;
use crate::seed::rng_for;
use crate::trace::Trace;
use crate::valuation::{bid_for_user, derive_intents, Catalog, ClickModel, ValuationError};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum AdoptionError {
    #[error("dynamics did not reach a fixed point within {cap} rounds")]
    RoundCapExceeded { cap: u64 },
    #[error("auction pricing needs an advertiser catalog")]
    MissingCatalog,
    #[error("user {user} has no intent profile")]
    MissingIntents { user: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Valuation(#[from] ValuationError),
    #[error(transparent)]
    Auction(#[from] AuctionError),
    #[error("writing {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub market: MarketConfig,
    pub cpm: CpmParams,
    pub click: ClickModel,
    pub round_cap: u64,
    pub periods_per_month: u64,
    pub pricing: PricingMode,
    pub seed: u64,
}

/// Intent profiles for every user that appears in the trace. Each user's
/// implicit map covers exactly the ad networks that observe at least one
/// of their visits; pairs that never transact carry no intent and cannot
/// drive a join decision.
pub fn derive_all_intents(
    trace: &Trace,
    catalog: &Catalog,
    beta: f64,
    click: &ClickModel,
) -> Result<BTreeMap<String, IntentProfile>, ValuationError> {
    let aggs: Vec<&str> = trace.aggregators().collect();
    let mut intents = BTreeMap::new();
    for user in trace.users() {
        let full = trace.profile_of(user).expect("user comes from the trace");
        let visible: BTreeMap<String, _> = aggs
            .iter()
            .filter_map(|a| {
                let v = trace.visible_profile(user, a);
                (!v.is_empty()).then(|| (a.to_string(), v))
            })
            .collect();
        intents.insert(user.to_string(), derive_intents(full, &visible, beta, catalog, click)?);
    }
    Ok(intents)
}

/// A user joins when some observing ad network leaves them a positive
/// revenue share.
pub fn user_join_decision(market: MarketType, intents: &IntentProfile) -> Result<bool, GameError> {
    for (_, implicit) in intents.aggregators() {
        if user_gains(market, intents.explicit(), implicit)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Exact books for one (user, ad network) pair over the simulated period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairBooks {
    pub user: String,
    pub aggregator: String,
    pub events: u64,
    pub impressions: u64,
    /// Intent coefficient the pair traded at.
    pub coefficient: f64,
    pub gross: Money,
    pub publisher: Money,
    pub user_payment: Money,
    pub market_payment: Money,
    /// gross - publisher - user_payment - market_payment, exactly.
    pub aggregator_net: Money,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Membership {
    user_in: bool,
    agg_in: bool,
}

/// Cooperation outcome for a member pair: how the explicit-intent surplus
/// is priced.
enum Cooperation {
    RevenueShare,
    AuctionWon { clearing: Money },
    AuctionLost,
}

fn pair_books(
    user: &str,
    aggregator: &str,
    events: u64,
    intents: &IntentProfile,
    membership: Membership,
    cooperation: &Cooperation,
    config: &SimulationConfig,
) -> Result<PairBooks, AdoptionError> {
    let market = config.market.market_type;
    let explicit = intents.explicit();
    let implicit = intents.implicit(aggregator);
    let impressions = events * config.market.impressions_per_period;

    let (coefficient, user_payment, market_payment) = if !membership.user_in {
        // covert tracking continues; worth of the lone tracker
        let coefficient = worth(market, explicit, implicit, Coalition::of(&[Player::Aggregator]))?;
        (coefficient, Money::ZERO, Money::ZERO)
    } else if !membership.agg_in {
        // the joined user blocks outsiders entirely
        (1.0, Money::ZERO, Money::ZERO)
    } else {
        match cooperation {
            Cooperation::RevenueShare => {
                let shares = shapley_closed_form(market, explicit, implicit)?;
                let price = data_price(&shares, &config.cpm, impressions);
                if price.participating {
                    (explicit, price.user_payment, price.market_payment)
                } else {
                    // the user would lose by cooperating, so the pair
                    // stays blocked
                    (1.0, Money::ZERO, Money::ZERO)
                }
            }
            Cooperation::AuctionWon { clearing } => (explicit, *clearing, Money::ZERO),
            Cooperation::AuctionLost => (1.0, Money::ZERO, Money::ZERO),
        }
    };

    let gross = Money::from_units_rounded(config.cpm.base_per_mille(coefficient) * impressions as f64 / 1000.0);
    let publisher = publisher_share(config.market.alpha, gross);
    let aggregator_net = gross - publisher - user_payment - market_payment;
    Ok(PairBooks {
        user: user.to_string(),
        aggregator: aggregator.to_string(),
        events,
        impressions,
        coefficient,
        gross,
        publisher,
        user_payment,
        market_payment,
        aggregator_net,
    })
}

/// Precomputed transaction structure of a trace.
struct Instance {
    users: Vec<String>,
    aggs: Vec<String>,
    /// events per (user, ad network) pair, pairs with zero events omitted
    pair_events: BTreeMap<(String, String), u64>,
}

impl Instance {
    fn build(trace: &Trace) -> Instance {
        let mut pair_events: BTreeMap<(String, String), u64> = BTreeMap::new();
        for event in trace.events() {
            for a in &event.aggregators {
                *pair_events.entry((event.user.clone(), a.clone())).or_insert(0) += 1;
            }
        }
        Instance {
            users: trace.users().map(str::to_string).collect(),
            aggs: trace.aggregators().map(str::to_string).collect(),
            pair_events,
        }
    }

    fn pairs_of_agg<'a>(&'a self, agg: &'a str) -> impl Iterator<Item = (&'a str, u64)> {
        self.pair_events
            .iter()
            .filter(move |((_, a), _)| a == agg)
            .map(|((u, _), &n)| (u.as_str(), n))
    }
}

/// Revenue an ad network books under a given membership, revenue-share
/// pricing, summed over every pair it observes.
pub fn aggregator_revenue(
    aggregator: &str,
    users_in: &BTreeSet<String>,
    agg_in: bool,
    trace: &Trace,
    intents: &BTreeMap<String, IntentProfile>,
    config: &SimulationConfig,
) -> Result<Money, AdoptionError> {
    let instance = Instance::build(trace);
    aggregator_revenue_on(&instance, aggregator, users_in, agg_in, intents, config)
}

fn aggregator_revenue_on(
    instance: &Instance,
    aggregator: &str,
    users_in: &BTreeSet<String>,
    agg_in: bool,
    intents: &BTreeMap<String, IntentProfile>,
    config: &SimulationConfig,
) -> Result<Money, AdoptionError> {
    let mut total = Money::ZERO;
    for (user, events) in instance.pairs_of_agg(aggregator) {
        let user_intents = intents
            .get(user)
            .ok_or_else(|| AdoptionError::MissingIntents { user: user.to_string() })?;
        let membership = Membership { user_in: users_in.contains(user), agg_in };
        let books = pair_books(
            user,
            aggregator,
            events,
            user_intents,
            membership,
            &Cooperation::RevenueShare,
            config,
        )?;
        total += books.aggregator_net;
    }
    Ok(total)
}

/// Joining must strictly beat abstaining, everything else held fixed.
/// Join decisions always use revenue-share pricing: under auction pricing
/// the auction only reprices cooperation after membership settles.
pub fn aggregator_join_decision(
    aggregator: &str,
    users_in: &BTreeSet<String>,
    trace: &Trace,
    intents: &BTreeMap<String, IntentProfile>,
    config: &SimulationConfig,
) -> Result<bool, AdoptionError> {
    let instance = Instance::build(trace);
    aggregator_join_on(&instance, aggregator, users_in, intents, config)
}

fn aggregator_join_on(
    instance: &Instance,
    aggregator: &str,
    users_in: &BTreeSet<String>,
    intents: &BTreeMap<String, IntentProfile>,
    config: &SimulationConfig,
) -> Result<bool, AdoptionError> {
    let joined = aggregator_revenue_on(instance, aggregator, users_in, true, intents, config)?;
    let abstained = aggregator_revenue_on(instance, aggregator, users_in, false, intents, config)?;
    Ok(joined > abstained)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundSnapshot {
    pub round: u64,
    pub users_joined: usize,
    pub aggregators_joined: usize,
    pub user_fraction: f64,
    pub aggregator_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdoptionResult {
    pub market_type: MarketType,
    pub pricing: PricingMode,
    pub rounds: Vec<RoundSnapshot>,
    pub users_total: usize,
    pub aggregators_total: usize,
    pub users_joined: BTreeSet<String>,
    pub aggregators_joined: BTreeSet<String>,
    /// Ad networks whose join condition was false in the initial empty
    /// market and that nevertheless ended up joining: they came only
    /// because users joined first.
    pub network_effect_aggregators: BTreeSet<String>,
    pub initial_gross: Money,
    pub final_gross: Money,
    pub initial_aggregator_net: Money,
    pub final_aggregator_net: Money,
    pub initial_intent_sum: f64,
    pub final_intent_sum: f64,
    /// Sum of per-period user payments, scaled to a month.
    pub user_monthly_revenue: BTreeMap<String, Money>,
    /// One entry per paying pair for the simulated period.
    pub ledger: Vec<LedgerEntry>,
    /// Final per-pair accounting; conservation is exact on every row.
    pub books: Vec<PairBooks>,
}

impl AdoptionResult {
    pub fn user_fraction(&self) -> f64 {
        fraction(self.users_joined.len(), self.users_total)
    }

    pub fn aggregator_fraction(&self) -> f64 {
        fraction(self.aggregators_joined.len(), self.aggregators_total)
    }

    pub fn total_revenue_ratio(&self) -> f64 {
        ratio(self.final_gross, self.initial_gross)
    }

    pub fn aggregator_revenue_ratio(&self) -> f64 {
        ratio(self.final_aggregator_net, self.initial_aggregator_net)
    }
}

fn fraction(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

fn ratio(now: Money, initial: Money) -> f64 {
    if initial == Money::ZERO {
        if now == Money::ZERO {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        now.to_units() / initial.to_units()
    }
}

/// The simulated auction period; ledger entries and grants refer to it.
pub const SIMULATED_PERIOD: u64 = 1;

pub fn run_adoption(
    trace: &Trace,
    intents: &BTreeMap<String, IntentProfile>,
    catalog: Option<&Catalog>,
    config: &SimulationConfig,
) -> Result<AdoptionResult, AdoptionError> {
    config.market.validate()?;
    if config.pricing == PricingMode::Auction && catalog.is_none() {
        return Err(AdoptionError::MissingCatalog);
    }
    let market = config.market.market_type;
    let instance = Instance::build(trace);
    for user in &instance.users {
        if !intents.contains_key(user) {
            return Err(AdoptionError::MissingIntents { user: user.clone() });
        }
    }

    // ad networks that would not join an empty market; any of them seen
    // joining later joined on the back of user adoption
    let mut reluctant_at_start = BTreeSet::new();
    for agg in &instance.aggs {
        if !aggregator_join_on(&instance, agg, &BTreeSet::new(), intents, config)? {
            reluctant_at_start.insert(agg.clone());
        }
    }

    let mut users_in: BTreeSet<String> = BTreeSet::new();
    let mut aggs_in: BTreeSet<String> = BTreeSet::new();
    let mut rounds = vec![RoundSnapshot {
        round: 0,
        users_joined: 0,
        aggregators_joined: 0,
        user_fraction: 0.0,
        aggregator_fraction: 0.0,
    }];
    let mut settled = false;
    for round in 1..=config.round_cap {
        let mut changed = false;
        for user in &instance.users {
            if !users_in.contains(user) && user_join_decision(market, &intents[user])? {
                users_in.insert(user.clone());
                changed = true;
            }
        }
        for agg in &instance.aggs {
            if !aggs_in.contains(agg) && aggregator_join_on(&instance, agg, &users_in, intents, config)? {
                aggs_in.insert(agg.clone());
                changed = true;
            }
        }
        rounds.push(RoundSnapshot {
            round,
            users_joined: users_in.len(),
            aggregators_joined: aggs_in.len(),
            user_fraction: fraction(users_in.len(), instance.users.len()),
            aggregator_fraction: fraction(aggs_in.len(), instance.aggs.len()),
        });
        if !changed {
            settled = true;
            break;
        }
    }
    if !settled {
        return Err(AdoptionError::RoundCapExceeded { cap: config.round_cap });
    }

    // under auction pricing, cooperation and payments come from one
    // auction per joined user at the fixed point
    let mut auction_wins: BTreeMap<(String, String), Money> = BTreeMap::new();
    if config.pricing == PricingMode::Auction {
        let catalog = catalog.expect("checked above");
        for user in &users_in {
            let mut bids = Vec::new();
            for agg in &aggs_in {
                if !instance.pair_events.contains_key(&(user.clone(), agg.clone())) {
                    continue;
                }
                let visible = trace.visible_profile(user, agg);
                let price = bid_for_user(&visible, catalog, &config.click, config.market.currency_scale);
                if price > Money::ZERO {
                    bids.push(Bid { aggregator: agg.clone(), max_price: price });
                }
            }
            let mut rng = rng_for(config.seed, "user-auction", &[user, &SIMULATED_PERIOD.to_string()]);
            let outcome = run_auction(&bids, config.market.epsilon, &mut rng)?;
            for winner in &outcome.winners {
                auction_wins.insert((user.clone(), winner.clone()), outcome.clearing_price);
            }
        }
    }

    let nobody = Membership { user_in: false, agg_in: false };
    let mut initial_gross = Money::ZERO;
    let mut initial_net = Money::ZERO;
    let mut initial_intent_sum = 0.0;
    let mut final_gross = Money::ZERO;
    let mut final_net = Money::ZERO;
    let mut final_intent_sum = 0.0;
    let mut books = Vec::with_capacity(instance.pair_events.len());
    let mut ledger = Vec::new();
    let mut user_period_revenue: BTreeMap<String, Money> = BTreeMap::new();
    for ((user, agg), &events) in &instance.pair_events {
        let user_intents = &intents[user];
        let initial = pair_books(user, agg, events, user_intents, nobody, &Cooperation::RevenueShare, config)?;
        initial_gross += initial.gross;
        initial_net += initial.aggregator_net;
        initial_intent_sum += initial.coefficient;

        let cooperation = match config.pricing {
            PricingMode::Shapley => Cooperation::RevenueShare,
            PricingMode::Auction => match auction_wins.get(&(user.clone(), agg.clone())) {
                Some(&clearing) => Cooperation::AuctionWon { clearing },
                None => Cooperation::AuctionLost,
            },
        };
        let membership = Membership { user_in: users_in.contains(user), agg_in: aggs_in.contains(agg) };
        let row = pair_books(user, agg, events, user_intents, membership, &cooperation, config)?;
        final_gross += row.gross;
        final_net += row.aggregator_net;
        final_intent_sum += row.coefficient;
        if row.user_payment > Money::ZERO {
            *user_period_revenue.entry(user.clone()).or_insert(Money::ZERO) += row.user_payment;
            ledger.push(LedgerEntry {
                period: SIMULATED_PERIOD,
                user: user.clone(),
                aggregator: agg.clone(),
                amount: row.user_payment,
                pricing_mode: config.pricing,
            });
        }
        books.push(row);
    }

    let user_monthly_revenue = users_in
        .iter()
        .map(|u| {
            let per_period = user_period_revenue.get(u).copied().unwrap_or(Money::ZERO);
            (u.clone(), per_period * config.periods_per_month as i64)
        })
        .collect();
    let network_effect_aggregators: BTreeSet<String> =
        aggs_in.intersection(&reluctant_at_start).cloned().collect();

    Ok(AdoptionResult {
        market_type: market,
        pricing: config.pricing,
        rounds,
        users_total: instance.users.len(),
        aggregators_total: instance.aggs.len(),
        users_joined: users_in,
        aggregators_joined: aggs_in,
        network_effect_aggregators,
        initial_gross,
        final_gross,
        initial_aggregator_net: initial_net,
        final_aggregator_net: final_net,
        initial_intent_sum,
        final_intent_sum,
        user_monthly_revenue,
        ledger,
        books,
    })
}

/// Nearest-rank quantiles at 0.0, 0.1, ..., 1.0 over the joined users'
/// monthly revenues. Empty input yields no rows.
pub fn revenue_quantiles(monthly: &BTreeMap<String, Money>) -> Vec<(f64, Money)> {
    if monthly.is_empty() {
        return Vec::new();
    }
    let mut amounts: Vec<Money> = monthly.values().copied().collect();
    amounts.sort();
    (0..=10)
        .map(|tenth| {
            let q = tenth as f64 / 10.0;
            let rank = ((amounts.len() - 1) as f64 * q).round() as usize;
            (q, amounts[rank])
        })
        .collect()
}

/// Writes `rounds.csv`, `summary.csv`, and `user_revenue_quantiles.csv`
/// under `dir`, creating it if needed. Returns the paths written.
pub fn report(result: &AdoptionResult, dir: &Path) -> Result<Vec<PathBuf>, AdoptionError> {
    let write = |name: &str, text: String| -> Result<PathBuf, AdoptionError> {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|source| AdoptionError::Write {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    };
    std::fs::create_dir_all(dir).map_err(|source| AdoptionError::Write {
        path: dir.display().to_string(),
        source,
    })?;

    let mut rounds = String::from("round,users_joined,aggregators_joined,user_fraction,aggregator_fraction\n");
    for r in &result.rounds {
        rounds.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.round, r.users_joined, r.aggregators_joined, r.user_fraction, r.aggregator_fraction
        ));
    }

    let summary = format!(
        "market_type,pricing,rounds,users,users_joined,user_fraction,aggregators,aggregators_joined,\
         aggregator_fraction,network_effect_aggregators,initial_gross,final_gross,total_revenue_ratio,\
         initial_aggregator_net,final_aggregator_net,aggregator_revenue_ratio,initial_intent_sum,final_intent_sum\n\
         {},{},{},{},{},{:.6},{},{},{:.6},{},{},{},{:.6},{},{},{:.6},{:.6},{:.6}\n",
        result.market_type,
        result.pricing,
        result.rounds.len() - 1,
        result.users_total,
        result.users_joined.len(),
        result.user_fraction(),
        result.aggregators_total,
        result.aggregators_joined.len(),
        result.aggregator_fraction(),
        result.network_effect_aggregators.len(),
        result.initial_gross,
        result.final_gross,
        result.total_revenue_ratio(),
        result.initial_aggregator_net,
        result.final_aggregator_net,
        result.aggregator_revenue_ratio(),
        result.initial_intent_sum,
        result.final_intent_sum,
    );

    let mut quantiles = String::from("quantile,monthly_revenue\n");
    for (q, amount) in revenue_quantiles(&result.user_monthly_revenue) {
        quantiles.push_str(&format!("{q:.1},{amount}\n"));
    }

    Ok(vec![
        write("rounds.csv", rounds)?,
        write("summary.csv", summary)?,
        write("user_revenue_quantiles.csv", quantiles)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceEvent;

    fn micro_trace() -> Trace {
        // one user on one publisher carrying both ad networks
        Trace::new(vec![TraceEvent {
            ts: 0,
            user: "u1".into(),
            publisher: "p1".into(),
            aggregators: vec!["a1".into(), "a2".into()],
            keywords: vec!["travel".into()],
        }])
        .unwrap()
    }

    fn micro_intents(explicit: f64, implicit: &[(&str, f64)]) -> BTreeMap<String, IntentProfile> {
        let map = implicit.iter().map(|(a, i)| (a.to_string(), *i)).collect();
        BTreeMap::from([("u1".to_string(), IntentProfile::new(explicit, map).unwrap())])
    }

    fn config(market_type: MarketType) -> SimulationConfig {
        SimulationConfig {
            market: MarketConfig {
                market_type,
                alpha: 1.0,
                epsilon: 1.0,
                impressions_per_period: 1000,
                currency_scale: 1.0,
            },
            cpm: CpmParams::new(Money::from_units(1), 1.0).unwrap(),
            click: ClickModel::new(0.1).unwrap(),
            round_cap: 16,
            periods_per_month: 10,
            pricing: PricingMode::Shapley,
            seed: 0,
        }
    }

    #[test]
    fn direct_micro_instance_books() {
        let trace = micro_trace();
        let intents = micro_intents(3.0, &[("a1", 1.5), ("a2", 1.2)]);
        let result = run_adoption(&trace, &intents, None, &config(MarketType::Direct)).unwrap();

        assert_eq!(result.users_joined, BTreeSet::from(["u1".to_string()]));
        assert_eq!(result.aggregators_joined.len(), 2);
        // with 1000 impressions at base 1 per mille, one intent unit is
        // exactly one money unit
        assert_eq!(result.initial_gross, Money::from_units_rounded(2.7));
        assert_eq!(result.final_gross, Money::from_units(6));
        assert_eq!(result.initial_intent_sum, 2.7);
        assert_eq!(result.final_intent_sum, 6.0);
        let by_agg: BTreeMap<&str, &PairBooks> =
            result.books.iter().map(|b| (b.aggregator.as_str(), b)).collect();
        assert_eq!(by_agg["a1"].user_payment, Money::from_micros(500_000));
        assert_eq!(by_agg["a1"].aggregator_net, Money::from_micros(2_500_000));
        assert_eq!(by_agg["a2"].user_payment, Money::from_micros(800_000));
        assert_eq!(by_agg["a2"].aggregator_net, Money::from_micros(2_200_000));
        // monthly revenue scales the per-period payments
        assert_eq!(result.user_monthly_revenue["u1"], Money::from_units(13));
        // both joined only because the user did
        assert_eq!(result.network_effect_aggregators.len(), 2);
        assert_eq!(result.ledger.len(), 2);
    }

    #[test]
    fn books_conserve_money_exactly() {
        let trace = micro_trace();
        let intents = micro_intents(3.0, &[("a1", 1.5), ("a2", 1.2)]);
        let mut cfg = config(MarketType::Mediated);
        cfg.market.alpha = 0.7;
        let result = run_adoption(&trace, &intents, None, &cfg).unwrap();
        for b in &result.books {
            assert_eq!(b.gross, b.publisher + b.user_payment + b.market_payment + b.aggregator_net);
        }
        // the mediated intermediary takes a payment out of each pair
        assert!(result.books.iter().all(|b| b.market_payment > Money::ZERO));
    }

    #[test]
    fn all_equal_intents_mean_nobody_joins() {
        let trace = micro_trace();
        let intents = micro_intents(2.0, &[("a1", 2.0), ("a2", 2.0)]);
        for market in [MarketType::Mediated, MarketType::Direct] {
            let result = run_adoption(&trace, &intents, None, &config(market)).unwrap();
            assert!(result.users_joined.is_empty());
            assert!(result.aggregators_joined.is_empty());
            assert_eq!(result.final_gross, result.initial_gross);
            // two quiet-check rounds: the first sees no joins and stops
            assert_eq!(result.rounds.last().unwrap().round, 1);
        }
    }

    #[test]
    fn user_threshold_separates_markets() {
        let trace = micro_trace();
        // lift of (3-1)/(2.2-1) = 1.67: joins mediated, not direct
        let intents = micro_intents(3.0, &[("a1", 2.2), ("a2", 2.2)]);
        let mediated = run_adoption(&trace, &intents, None, &config(MarketType::Mediated)).unwrap();
        let direct = run_adoption(&trace, &intents, None, &config(MarketType::Direct)).unwrap();
        assert_eq!(mediated.users_joined.len(), 1);
        assert!(direct.users_joined.is_empty());
        assert!(direct.users_joined.is_subset(&mediated.users_joined));
    }

    #[test]
    fn dnt_market_blocks_outsiders_by_default() {
        let trace = micro_trace();
        let intents = micro_intents(1.5, &[("a1", 1.5), ("a2", 1.0)]);
        let result = run_adoption(&trace, &intents, None, &config(MarketType::DntMediated)).unwrap();
        // under do-not-track, any explicit > 1 pays the user
        assert_eq!(result.users_joined.len(), 1);
        assert_eq!(result.aggregators_joined.len(), 2);
        // status quo was fully blocked: intent 1 per pair
        assert_eq!(result.initial_intent_sum, 2.0);
        assert_eq!(result.final_intent_sum, 3.0);
    }

    #[test]
    fn aggregator_revenue_matches_hand_tally() {
        let trace = micro_trace();
        let intents = micro_intents(3.0, &[("a1", 1.5), ("a2", 1.2)]);
        let cfg = config(MarketType::Direct);
        let nobody = BTreeSet::new();
        let u1 = BTreeSet::from(["u1".to_string()]);
        // status quo: covert tracking at the implicit coefficient
        assert_eq!(
            aggregator_revenue("a1", &nobody, false, &trace, &intents, &cfg).unwrap(),
            Money::from_micros(1_500_000)
        );
        // joined user, abstaining network: blocked to 1
        assert_eq!(
            aggregator_revenue("a1", &u1, false, &trace, &intents, &cfg).unwrap(),
            Money::from_units(1)
        );
        // joined both: explicit minus the user share
        assert_eq!(
            aggregator_revenue("a1", &u1, true, &trace, &intents, &cfg).unwrap(),
            Money::from_micros(2_500_000)
        );
        assert!(aggregator_join_decision("a1", &u1, &trace, &intents, &cfg).unwrap());
        assert!(!aggregator_join_decision("a1", &nobody, &trace, &intents, &cfg).unwrap());
    }

    #[test]
    fn auction_pricing_pays_through_auctions() {
        // two sites so the networks see different slices
        let trace = Trace::new(vec![
            TraceEvent {
                ts: 0,
                user: "u1".into(),
                publisher: "p1".into(),
                aggregators: vec!["a1".into(), "a2".into()],
                keywords: vec!["travel".into()],
            },
            TraceEvent {
                ts: 1,
                user: "u1".into(),
                publisher: "p2".into(),
                aggregators: vec!["a1".into()],
                keywords: vec!["music".into()],
            },
        ])
        .unwrap();
        let catalog = Catalog::from_records([
            crate::valuation::CatalogRecord { advertiser: "ad1".into(), keyword: "travel".into(), cpc: 2.0 },
            crate::valuation::CatalogRecord { advertiser: "ad2".into(), keyword: "music".into(), cpc: 1.0 },
        ])
        .unwrap();
        let intents = micro_intents(3.0, &[("a1", 1.5), ("a2", 1.2)]);
        let mut cfg = config(MarketType::Direct);
        cfg.pricing = PricingMode::Auction;

        assert!(matches!(
            run_adoption(&trace, &intents, None, &cfg),
            Err(AdoptionError::MissingCatalog)
        ));
        let result = run_adoption(&trace, &intents, Some(&catalog), &cfg).unwrap();
        assert_eq!(result.users_joined.len(), 1);
        // winners pay the clearing price; losers are blocked at intent 1
        let winners: Vec<&PairBooks> =
            result.books.iter().filter(|b| b.user_payment > Money::ZERO).collect();
        assert!(!winners.is_empty());
        let clearing = winners[0].user_payment;
        assert!(winners.iter().all(|b| b.user_payment == clearing && b.coefficient == 3.0));
        assert!(result
            .books
            .iter()
            .filter(|b| b.user_payment == Money::ZERO)
            .all(|b| b.coefficient == 1.0));
        for b in &result.books {
            assert_eq!(b.gross, b.publisher + b.user_payment + b.market_payment + b.aggregator_net);
        }
        assert!(result.ledger.iter().all(|e| e.pricing_mode == PricingMode::Auction));
        // same seed reproduces the same auction outcome
        let again = run_adoption(&trace, &intents, Some(&catalog), &cfg).unwrap();
        assert_eq!(result, again);
    }

    #[test]
    fn quantiles_are_nearest_rank() {
        let monthly: BTreeMap<String, Money> =
            (0..5).map(|i| (format!("u{i}"), Money::from_units(i as i64 * 10))).collect();
        let q = revenue_quantiles(&monthly);
        assert_eq!(q.len(), 11);
        assert_eq!(q[0], (0.0, Money::ZERO));
        assert_eq!(q[5], (0.5, Money::from_units(20)));
        assert_eq!(q[10], (1.0, Money::from_units(40)));
        // rank 0.1 of five values rounds to index 0
        assert_eq!(q[1], (0.1, Money::ZERO));
        assert!(revenue_quantiles(&BTreeMap::new()).is_empty());
    }

    #[test]
    fn report_writes_deterministic_csvs() {
        let trace = micro_trace();
        let intents = micro_intents(3.0, &[("a1", 1.5), ("a2", 1.2)]);
        let result = run_adoption(&trace, &intents, None, &config(MarketType::Direct)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = report(&result, dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let rounds = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
        assert!(rounds.starts_with("round,users_joined"), "{rounds}");
        assert!(rounds.lines().count() >= 3);
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.contains("direct,shapley"), "{summary}");
        let quantiles = std::fs::read_to_string(dir.path().join("user_revenue_quantiles.csv")).unwrap();
        assert_eq!(quantiles.lines().count(), 12);

        // empty input produces header-only quantiles
        let empty = run_adoption(
            &Trace::new(vec![]).unwrap(),
            &BTreeMap::new(),
            None,
            &config(MarketType::Direct),
        )
        .unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        report(&empty, dir2.path()).unwrap();
        let quantiles = std::fs::read_to_string(dir2.path().join("user_revenue_quantiles.csv")).unwrap();
        assert_eq!(quantiles, "quantile,monthly_revenue\n");
    }

    #[test]
    fn round_cap_guards_nontermination() {
        let trace = micro_trace();
        let intents = micro_intents(3.0, &[("a1", 1.5), ("a2", 1.2)]);
        let mut cfg = config(MarketType::Direct);
        cfg.round_cap = 1;
        // round 1 still changes membership, so the cap trips
        assert!(matches!(
            run_adoption(&trace, &intents, None, &cfg),
            Err(AdoptionError::RoundCapExceeded { cap: 1 })
        ));
    }

    #[test]
    fn derived_intents_cover_only_observing_networks() {
        let trace = Trace::new(vec![
            TraceEvent {
                ts: 0,
                user: "u1".into(),
                publisher: "p1".into(),
                aggregators: vec!["a1".into()],
                keywords: vec!["travel".into()],
            },
            TraceEvent {
                ts: 1,
                user: "u2".into(),
                publisher: "p2".into(),
                aggregators: vec!["a2".into()],
                keywords: vec!["music".into()],
            },
        ])
        .unwrap();
        let catalog = Catalog::from_records([crate::valuation::CatalogRecord {
            advertiser: "ad1".into(),
            keyword: "travel".into(),
            cpc: 2.0,
        }])
        .unwrap();
        let intents = derive_all_intents(&trace, &catalog, 2.0, &ClickModel::new(0.5).unwrap()).unwrap();
        // u1's profile is worth something, so disclosure lifts explicit
        assert!(intents["u1"].explicit() > 1.0);
        assert_eq!(intents["u1"].aggregators().count(), 1);
        // u2 visits nothing the catalog can monetize
        assert_eq!(intents["u2"].explicit(), 1.0);
        assert_eq!(intents["u2"].aggregators().count(), 1);
    }
}
