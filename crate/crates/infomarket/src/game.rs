//! The cooperative game behind data pricing.
//!
//! Each user/ad-network transaction is a small coalition game. The players
//! are the user, the ad network, and (in mediated markets) the market
//! provider; a coalition's worth is the intent coefficient its cooperation
//! unlocks. Shapley values split the surplus over the no-cooperation
//! baseline, and those shares become the data price the ad network pays.

use crate::engine::{CpmParams, MarketType};
use crate::money::Money;
use std::fmt;

/// Enumeration beyond this many players is factorial-cost and rejected.
pub const MAX_ENUMERATED_PLAYERS: usize = 12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GameError {
    #[error("intent coefficients must satisfy explicit >= implicit >= 1, got explicit {explicit}, implicit {implicit}")]
    InvalidIntents { explicit: f64, implicit: f64 },
    #[error("the market provider is not a player in a {0} game")]
    MarketPlayerNotInGame(MarketType),
    #[error("cannot enumerate {0} players (cap {MAX_ENUMERATED_PLAYERS})")]
    TooManyPlayers(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Player {
    User,
    Aggregator,
    Market,
}

impl Player {
    fn bit(self) -> u8 {
        match self {
            Player::User => 1,
            Player::Aggregator => 2,
            Player::Market => 4,
        }
    }
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Player::User => "user",
            Player::Aggregator => "aggregator",
            Player::Market => "market",
        })
    }
}

/// A set of players in one transaction game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Coalition(u8);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn of(players: &[Player]) -> Coalition {
        players.iter().fold(Coalition::EMPTY, |c, &p| c.with(p))
    }

    pub fn with(self, player: Player) -> Coalition {
        Coalition(self.0 | player.bit())
    }

    pub fn contains(self, player: Player) -> bool {
        self.0 & player.bit() != 0
    }
}

/// The players of a transaction game, in canonical order.
pub fn players(market: MarketType) -> &'static [Player] {
    if market.is_mediated() {
        &[Player::User, Player::Aggregator, Player::Market]
    } else {
        &[Player::User, Player::Aggregator]
    }
}

fn check_intents(explicit: f64, implicit: f64) -> Result<(), GameError> {
    if !explicit.is_finite() || !implicit.is_finite() || implicit < 1.0 || explicit < implicit {
        return Err(GameError::InvalidIntents { explicit, implicit });
    }
    Ok(())
}

/// Worth of a coalition: the intent coefficient its members can realize on
/// their own.
///
/// Without the user's cooperation the ad network still tracks covertly
/// (worth `implicit`), except in do-not-track markets where publishers
/// block it (worth 1). A user cooperating with the blocking side but not
/// the ad network forces worth 1. Full cooperation realizes `explicit`.
pub fn worth(
    market: MarketType,
    explicit: f64,
    implicit: f64,
    coalition: Coalition,
) -> Result<f64, GameError> {
    check_intents(explicit, implicit)?;
    if coalition.contains(Player::Market) && !market.is_mediated() {
        return Err(GameError::MarketPlayerNotInGame(market));
    }
    let u = coalition.contains(Player::User);
    let a = coalition.contains(Player::Aggregator);
    let m = coalition.contains(Player::Market);
    Ok(match market {
        MarketType::Mediated => {
            if u && a && m {
                explicit
            } else if u && m {
                1.0
            } else {
                implicit
            }
        }
        MarketType::Direct => {
            if u && a {
                explicit
            } else if u {
                1.0
            } else {
                implicit
            }
        }
        MarketType::DntMediated => {
            if u && a && m {
                explicit
            } else {
                1.0
            }
        }
        MarketType::DntDirect => {
            if u && a {
                explicit
            } else {
                1.0
            }
        }
    })
}

/// Permutation-average Shapley value for an arbitrary worth function over
/// `n` players (bit `i` of the mask = player `i` present).
///
/// Averages each player's marginal contribution over all n! join orders,
/// so the returned shares sum to worth(grand) - worth(empty) up to float
/// rounding.
pub fn shapley_enumerate<F>(n: usize, worth_of: F) -> Result<Vec<f64>, GameError>
where
    F: Fn(u32) -> f64,
{
    if n > MAX_ENUMERATED_PLAYERS {
        return Err(GameError::TooManyPlayers(n));
    }
    let mut shares = vec![0.0; n];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut orders: u64 = 0;
    permute(&mut perm, 0, &mut |order| {
        let mut mask = 0u32;
        for &p in order {
            let before = worth_of(mask);
            mask |= 1 << p;
            shares[p] += worth_of(mask) - before;
        }
        orders += 1;
    });
    for s in &mut shares {
        *s /= orders as f64;
    }
    Ok(shares)
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Enumerated Shapley surplus shares for one transaction game, keyed in
/// `players(market)` order.
pub fn shapley_enumerate_market(
    market: MarketType,
    explicit: f64,
    implicit: f64,
) -> Result<Vec<f64>, GameError> {
    check_intents(explicit, implicit)?;
    let ps = players(market);
    shapley_enumerate(ps.len(), |mask| {
        let mut c = Coalition::EMPTY;
        for (i, &p) in ps.iter().enumerate() {
            if mask & (1 << i) != 0 {
                c = c.with(p);
            }
        }
        worth(market, explicit, implicit, c).expect("players() matches market")
    })
}

/// Closed-form Shapley split of one transaction.
///
/// `user`, `aggregator`, and `market` are surplus shares over the
/// no-cooperation baseline; they sum to worth(grand) - worth(empty). The
/// baseline itself (`implicit` in non-DNT markets, nothing in DNT markets
/// where it is 1 by fiat) accrues to the ad network and is recorded in
/// `aggregator_baseline`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlayerShares {
    pub user: f64,
    pub aggregator: f64,
    pub market: Option<f64>,
    pub aggregator_baseline: f64,
}

impl PlayerShares {
    /// What the ad network ends up holding: baseline plus its surplus share.
    pub fn aggregator_total(&self) -> f64 {
        self.aggregator_baseline + self.aggregator
    }

    pub fn surplus_total(&self) -> f64 {
        self.user + self.aggregator + self.market.unwrap_or(0.0)
    }

    pub fn share(&self, player: Player) -> Option<f64> {
        match player {
            Player::User => Some(self.user),
            Player::Aggregator => Some(self.aggregator),
            Player::Market => self.market,
        }
    }
}

pub fn shapley_closed_form(
    market: MarketType,
    explicit: f64,
    implicit: f64,
) -> Result<PlayerShares, GameError> {
    check_intents(explicit, implicit)?;
    let e = explicit;
    let i = implicit;
    Ok(match market {
        MarketType::Mediated => PlayerShares {
            user: (e - 1.0 - 1.5 * (i - 1.0)) / 3.0,
            aggregator: (e - 1.0) / 3.0,
            market: Some((e - 1.0 - 1.5 * (i - 1.0)) / 3.0),
            aggregator_baseline: i,
        },
        MarketType::Direct => PlayerShares {
            user: (e - 1.0 - 2.0 * (i - 1.0)) / 2.0,
            aggregator: (e - 1.0) / 2.0,
            market: None,
            aggregator_baseline: i,
        },
        MarketType::DntMediated => PlayerShares {
            user: (e - 1.0) / 3.0,
            aggregator: (e - 1.0) / 3.0,
            market: Some((e - 1.0) / 3.0),
            aggregator_baseline: 0.0,
        },
        MarketType::DntDirect => PlayerShares {
            user: (e - 1.0) / 2.0,
            aggregator: (e - 1.0) / 2.0,
            market: None,
            aggregator_baseline: 0.0,
        },
    })
}

/// Whether selling consent strictly profits the user: their closed-form
/// share is positive. Equivalent to the lift thresholds 3/2 (mediated) and
/// 2 (direct) when implicit > 1.
pub fn user_gains(market: MarketType, explicit: f64, implicit: f64) -> Result<bool, GameError> {
    Ok(shapley_closed_form(market, explicit, implicit)?.user > 0.0)
}

/// Per-period data payments for one transaction. A non-positive user share
/// means the user declines: no payment flows and the pair does not
/// cooperate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataPrice {
    pub user_payment: Money,
    pub market_payment: Money,
    pub participating: bool,
}

pub fn data_price(shares: &PlayerShares, params: &CpmParams, impressions: u64) -> DataPrice {
    let base = params.base_per_mille(1.0) * impressions as f64 / 1000.0;
    let participating = shares.user > 0.0;
    if !participating {
        return DataPrice {
            user_payment: Money::ZERO,
            market_payment: Money::ZERO,
            participating,
        };
    }
    DataPrice {
        user_payment: Money::from_units_rounded(shares.user * base),
        market_payment: Money::from_units_rounded(shares.market.unwrap_or(0.0).max(0.0) * base),
        participating,
    }
}

/// The publisher's fixed cut of gross ad revenue. `alpha` is the fraction
/// the ad network keeps, so the publisher receives (1 - alpha) x gross.
pub fn publisher_share(alpha: f64, gross: Money) -> Money {
    debug_assert!((0.0..=1.0).contains(&alpha));
    Money::from_units_rounded((1.0 - alpha) * gross.to_units())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const U: Player = Player::User;
    const A: Player = Player::Aggregator;
    const M: Player = Player::Market;

    #[test]
    fn mediated_worth_table() {
        let w = |c: &[Player]| worth(MarketType::Mediated, 4.0, 2.0, Coalition::of(c)).unwrap();
        assert_eq!(w(&[]), 2.0);
        assert_eq!(w(&[U]), 2.0);
        assert_eq!(w(&[A]), 2.0);
        assert_eq!(w(&[M]), 2.0);
        assert_eq!(w(&[U, A]), 2.0);
        assert_eq!(w(&[A, M]), 2.0);
        assert_eq!(w(&[U, M]), 1.0);
        assert_eq!(w(&[U, A, M]), 4.0);
    }

    #[test]
    fn direct_worth_table() {
        let w = |c: &[Player]| worth(MarketType::Direct, 3.0, 2.0, Coalition::of(c)).unwrap();
        assert_eq!(w(&[]), 2.0);
        assert_eq!(w(&[U]), 1.0);
        assert_eq!(w(&[A]), 2.0);
        assert_eq!(w(&[U, A]), 3.0);
    }

    #[test]
    fn dnt_worth_tables() {
        let wm = |c: &[Player]| worth(MarketType::DntMediated, 4.0, 2.0, Coalition::of(c)).unwrap();
        assert_eq!(wm(&[]), 1.0);
        assert_eq!(wm(&[A]), 1.0);
        assert_eq!(wm(&[U, A]), 1.0);
        assert_eq!(wm(&[U, A, M]), 4.0);
        let wd = |c: &[Player]| worth(MarketType::DntDirect, 3.0, 2.0, Coalition::of(c)).unwrap();
        assert_eq!(wd(&[]), 1.0);
        assert_eq!(wd(&[U]), 1.0);
        assert_eq!(wd(&[A]), 1.0);
        assert_eq!(wd(&[U, A]), 3.0);
    }

    #[test]
    fn worth_rejects_market_player_in_direct_games() {
        assert_eq!(
            worth(MarketType::Direct, 3.0, 2.0, Coalition::of(&[U, M])),
            Err(GameError::MarketPlayerNotInGame(MarketType::Direct))
        );
        assert!(worth(MarketType::DntDirect, 3.0, 2.0, Coalition::of(&[M])).is_err());
    }

    #[test]
    fn worth_rejects_bad_intents() {
        assert!(worth(MarketType::Mediated, 1.5, 2.0, Coalition::EMPTY).is_err());
        assert!(worth(MarketType::Mediated, 2.0, 0.5, Coalition::EMPTY).is_err());
    }

    #[test]
    fn enumerated_shares_mediated_example() {
        let s = shapley_enumerate_market(MarketType::Mediated, 4.0, 2.0).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12); // user
        assert!((s[1] - 1.0).abs() < 1e-12); // aggregator surplus
        assert!((s[2] - 0.5).abs() < 1e-12); // market
    }

    #[test]
    fn closed_form_mediated_example() {
        let s = shapley_closed_form(MarketType::Mediated, 4.0, 2.0).unwrap();
        assert_eq!(s.user, 0.5);
        assert_eq!(s.market, Some(0.5));
        assert_eq!(s.aggregator_total(), 3.0);
        assert!((s.surplus_total() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_direct_boundary_is_exactly_zero() {
        let s = shapley_closed_form(MarketType::Direct, 3.0, 2.0).unwrap();
        assert_eq!(s.user, 0.0);
        assert_eq!(s.aggregator_total(), 3.0);
    }

    #[test]
    fn closed_form_dnt_examples() {
        let s = shapley_closed_form(MarketType::DntDirect, 3.0, 1.0).unwrap();
        assert_eq!(s.user, 1.0);
        assert_eq!(s.aggregator, 1.0);
        assert_eq!(s.aggregator_baseline, 0.0);
        let s = shapley_closed_form(MarketType::DntMediated, 4.0, 2.5).unwrap();
        assert_eq!(s.user, 1.0);
        assert_eq!(s.aggregator, 1.0);
        assert_eq!(s.market, Some(1.0));
    }

    #[test]
    fn user_gains_threshold_cases() {
        // lift 3 > 3/2
        assert!(user_gains(MarketType::Mediated, 4.0, 2.0).unwrap());
        // lift exactly 3/2: not strict
        assert!(!user_gains(MarketType::Mediated, 4.0, 3.0).unwrap());
        // lift 4 > 2
        assert!(user_gains(MarketType::Direct, 4.0, 1.5).unwrap());
        // lift exactly 2: not strict
        assert!(!user_gains(MarketType::Direct, 3.0, 2.0).unwrap());
        // blind tracking, any explicit value helps
        assert!(user_gains(MarketType::Direct, 1.1, 1.0).unwrap());
        // worthless data
        assert!(!user_gains(MarketType::Mediated, 1.0, 1.0).unwrap());
        // DNT: gains whenever consent is worth anything
        assert!(user_gains(MarketType::DntMediated, 1.5, 1.5).unwrap());
        assert!(!user_gains(MarketType::DntDirect, 1.0, 1.0).unwrap());
    }

    #[test]
    fn data_price_scales_and_clamps() {
        let params = CpmParams::new(Money::from_units(1), 1.0).unwrap();
        let shares = shapley_closed_form(MarketType::Mediated, 4.0, 2.0).unwrap();
        let price = data_price(&shares, &params, 2000);
        assert_eq!(price.user_payment, Money::from_units(1));
        assert_eq!(price.market_payment, Money::from_units(1));
        assert!(price.participating);

        // negative user share: no payments at all, flagged out
        let shares = shapley_closed_form(MarketType::Mediated, 4.0, 3.5).unwrap();
        assert!(shares.user < 0.0);
        let price = data_price(&shares, &params, 2000);
        assert_eq!(price.user_payment, Money::ZERO);
        assert_eq!(price.market_payment, Money::ZERO);
        assert!(!price.participating);
    }

    #[test]
    fn publisher_takes_the_complement() {
        assert_eq!(publisher_share(0.8, Money::from_units(10)), Money::from_units(2));
        assert_eq!(publisher_share(1.0, Money::from_units(10)), Money::ZERO);
        assert_eq!(publisher_share(0.0, Money::from_units(10)), Money::from_units(10));
    }

    #[test]
    fn enumeration_cap() {
        assert_eq!(
            shapley_enumerate(13, |_| 0.0).unwrap_err(),
            GameError::TooManyPlayers(13)
        );
    }

    fn intent_pair() -> impl Strategy<Value = (f64, f64)> {
        // implicit in [1, 5], explicit = implicit + delta
        (1.0f64..5.0, 0.0f64..6.0).prop_map(|(i, d)| (i + d, i))
    }

    proptest! {
        #[test]
        fn closed_form_matches_enumeration((e, i) in intent_pair()) {
            for market in MarketType::ALL {
                let closed = shapley_closed_form(market, e, i).unwrap();
                let enumerated = shapley_enumerate_market(market, e, i).unwrap();
                prop_assert!((closed.user - enumerated[0]).abs() < 1e-12);
                prop_assert!((closed.aggregator - enumerated[1]).abs() < 1e-12);
                if let Some(m) = closed.market {
                    prop_assert!((m - enumerated[2]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn efficiency_and_symmetry((e, i) in intent_pair()) {
            for market in MarketType::ALL {
                let s = shapley_closed_form(market, e, i).unwrap();
                let grand = Coalition::of(players(market));
                let v_grand = worth(market, e, i, grand).unwrap();
                let v_empty = worth(market, e, i, Coalition::EMPTY).unwrap();
                prop_assert!((s.surplus_total() - (v_grand - v_empty)).abs() < 1e-12);
                // user and market provider contribute identically in mediated games
                if let Some(m) = s.market {
                    prop_assert_eq!(m, s.user);
                }
                // the ad network never ends up below its baseline
                prop_assert!(s.aggregator >= -1e-15);
            }
        }

        #[test]
        fn threshold_law_matches_lift((e, i) in intent_pair()) {
            prop_assume!(i > 1.0 + 1e-9);
            let lift = (e - 1.0) / (i - 1.0);
            // within an ulp of the threshold the two algebraic routes may
            // legitimately differ; the exact-boundary case is pinned in
            // closed_form_direct_boundary_is_exactly_zero
            prop_assume!((lift - 1.5).abs() > 1e-9 && (lift - 2.0).abs() > 1e-9);
            prop_assert_eq!(user_gains(MarketType::Mediated, e, i).unwrap(), lift > 1.5);
            prop_assert_eq!(user_gains(MarketType::Direct, e, i).unwrap(), lift > 2.0);
        }
    }
}
