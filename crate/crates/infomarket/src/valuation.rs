//! What is a browsing profile worth to an ad network?
//!
//! An advertiser is eligible for a user when they share a keyword; showing
//! it `n` impressions earns its cost-per-click times the chance at least
//! one click lands, CPC x (1 - (1 - pi)^n), with a constant per-impression
//! click probability pi. Allocating a period's impression budget across
//! eligible advertisers maximizes the sum of those terms. Marginal gains
//! shrink as an advertiser accumulates impressions, so assigning each
//! impression to the currently best marginal gain is exactly optimal, and
//! a capped exhaustive search double-checks that claim in tests.
//!
//! The same value function prices consent: a user's explicit coefficient
//! grows with the value of their full profile per impression, an ad
//! network's implicit coefficient with the part of the profile it can see.

use crate::engine::IntentProfile;
use crate::money::Money;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ValuationError {
    #[error("click probability must be in [0, 1], got {0}")]
    InvalidClickProbability(f64),
    #[error("cpc must be finite and >= 0, got {cpc} for advertiser {advertiser:?}")]
    InvalidCpc { advertiser: String, cpc: f64 },
    #[error("duplicate catalog row for advertiser {advertiser:?} keyword {keyword:?}")]
    DuplicateCatalogRow { advertiser: String, keyword: String },
    #[error("allocation names unknown advertiser {0:?}")]
    UnknownAdvertiser(String),
    #[error("advertiser {0:?} shares no keyword with the profile but was allocated impressions")]
    IneligibleAdvertiser(String),
    #[error("exhaustive search capped at {max_n} impressions / {max_ads} advertisers, got {n} / {ads}")]
    ExhaustiveSearchTooLarge { n: u64, ads: usize, max_n: u64, max_ads: usize },
    #[error("beta must be finite and >= 0, got {0}")]
    InvalidBeta(f64),
}

/// Constant per-impression click probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickModel {
    pub pi: f64,
}

impl ClickModel {
    pub fn new(pi: f64) -> Result<ClickModel, ValuationError> {
        if !pi.is_finite() || !(0.0..=1.0).contains(&pi) {
            return Err(ValuationError::InvalidClickProbability(pi));
        }
        Ok(ClickModel { pi })
    }

    /// Expected payout of `n` impressions for one advertiser at this CPC.
    fn payout(&self, cpc: f64, n: u64) -> f64 {
        cpc * (1.0 - (1.0 - self.pi).powi(n as i32))
    }

    /// Gain of the (n+1)-th impression: cpc x pi x (1 - pi)^n.
    fn marginal_gain(&self, cpc: f64, n: u64) -> f64 {
        cpc * self.pi * (1.0 - self.pi).powi(n as i32)
    }
}

/// An advertiser-catalog row: one (advertiser, keyword, cpc) triple per
/// line-delimited JSON record. Advertisers spanning several keywords repeat
/// across rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogRecord {
    pub advertiser: String,
    pub keyword: String,
    pub cpc: f64,
}

/// All advertisers in the market, keyed by id, each with its keyword -> CPC
/// map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    ads: BTreeMap<String, BTreeMap<String, f64>>,
}

impl Catalog {
    pub fn from_records(records: impl IntoIterator<Item = CatalogRecord>) -> Result<Catalog, ValuationError> {
        let mut ads: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for r in records {
            if !r.cpc.is_finite() || r.cpc < 0.0 {
                return Err(ValuationError::InvalidCpc { advertiser: r.advertiser, cpc: r.cpc });
            }
            let prev = ads.entry(r.advertiser.clone()).or_default().insert(r.keyword.clone(), r.cpc);
            if prev.is_some() {
                return Err(ValuationError::DuplicateCatalogRow {
                    advertiser: r.advertiser,
                    keyword: r.keyword,
                });
            }
        }
        Ok(Catalog { ads })
    }

    pub fn to_records(&self) -> Vec<CatalogRecord> {
        self.ads
            .iter()
            .flat_map(|(a, kws)| {
                kws.iter().map(move |(k, &cpc)| CatalogRecord {
                    advertiser: a.clone(),
                    keyword: k.clone(),
                    cpc,
                })
            })
            .collect()
    }

    pub fn advertisers(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, f64>)> {
        self.ads.iter().map(|(a, k)| (a.as_str(), k))
    }

    pub fn keywords_of(&self, advertiser: &str) -> Option<&BTreeMap<String, f64>> {
        self.ads.get(advertiser)
    }

    pub fn len(&self) -> usize {
        self.ads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ads.is_empty()
    }
}

/// One site's slice of a browsing profile: visit count plus the site's
/// topic keywords. Profiles shown to ad networks carry no URLs or
/// identifiers beyond this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub site: String,
    pub count: u64,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnonymizedProfile {
    sites: BTreeMap<String, SiteData>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct SiteData {
    count: u64,
    keywords: BTreeSet<String>,
}

impl AnonymizedProfile {
    pub fn new() -> AnonymizedProfile {
        AnonymizedProfile::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = ProfileRecord>) -> AnonymizedProfile {
        let mut p = AnonymizedProfile::new();
        for r in records {
            p.add_visits(&r.site, r.count, r.keywords.iter().map(|k| k.as_str()));
        }
        p
    }

    pub fn to_records(&self) -> Vec<ProfileRecord> {
        self.sites
            .iter()
            .map(|(site, d)| ProfileRecord {
                site: site.clone(),
                count: d.count,
                keywords: d.keywords.iter().cloned().collect(),
            })
            .collect()
    }

    pub fn add_visits<'a>(&mut self, site: &str, count: u64, keywords: impl IntoIterator<Item = &'a str>) {
        let d = self.sites.entry(site.to_string()).or_default();
        d.count += count;
        d.keywords.extend(keywords.into_iter().map(|k| k.to_string()));
    }

    /// Total impressions this profile represents: one per recorded visit.
    pub fn total_impressions(&self) -> u64 {
        self.sites.values().map(|d| d.count).sum()
    }

    pub fn keywords(&self) -> BTreeSet<&str> {
        self.sites
            .values()
            .flat_map(|d| d.keywords.iter().map(|k| k.as_str()))
            .collect()
    }

    /// The sub-profile an observer sees: only sites it was embedded on.
    pub fn restricted_to(&self, visible: &BTreeSet<String>) -> AnonymizedProfile {
        AnonymizedProfile {
            sites: self
                .sites
                .iter()
                .filter(|(site, _)| visible.contains(*site))
                .map(|(s, d)| (s.clone(), d.clone()))
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

/// Keywords an advertiser shares with a profile.
pub fn relevant_keywords<'a>(
    profile: &'a AnonymizedProfile,
    advertiser_keywords: &'a BTreeMap<String, f64>,
) -> BTreeSet<&'a str> {
    let profile_kw = profile.keywords();
    advertiser_keywords
        .keys()
        .map(|k| k.as_str())
        .filter(|k| profile_kw.contains(k))
        .collect()
}

/// The keyword an eligible advertiser is charged under: its highest-CPC
/// shared keyword, ties to the lexicographically smallest.
fn effective_cpc(profile: &AnonymizedProfile, advertiser_keywords: &BTreeMap<String, f64>) -> Option<f64> {
    let profile_kw = profile.keywords();
    advertiser_keywords
        .iter()
        .filter(|(k, _)| profile_kw.contains(k.as_str()))
        .map(|(_, &cpc)| cpc)
        // BTreeMap iterates keywords in ascending order, so max_by keeping
        // strict improvements lands on the smallest keyword among CPC ties
        .fold(None, |best: Option<f64>, cpc| match best {
            Some(b) if b >= cpc => Some(b),
            _ => Some(cpc),
        })
}

/// An impression split across advertisers and the value it realizes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Allocation {
    pub counts: BTreeMap<String, u64>,
    pub value: f64,
}

/// Value of a given impression split: sum over allocated advertisers of
/// effective CPC x (1 - (1 - pi)^count). Rejects advertisers that are
/// unknown or share no keyword with the profile.
pub fn allocation_value(
    counts: &BTreeMap<String, u64>,
    catalog: &Catalog,
    profile: &AnonymizedProfile,
    model: &ClickModel,
) -> Result<f64, ValuationError> {
    let mut value = 0.0;
    for (advertiser, &n) in counts {
        let keywords = catalog
            .keywords_of(advertiser)
            .ok_or_else(|| ValuationError::UnknownAdvertiser(advertiser.clone()))?;
        let cpc = effective_cpc(profile, keywords)
            .ok_or_else(|| ValuationError::IneligibleAdvertiser(advertiser.clone()))?;
        if n > 0 {
            value += model.payout(cpc, n);
        }
    }
    Ok(value)
}

fn eligible_cpcs(catalog: &Catalog, profile: &AnonymizedProfile) -> Vec<(String, f64)> {
    catalog
        .advertisers()
        .filter_map(|(id, kws)| effective_cpc(profile, kws).map(|cpc| (id.to_string(), cpc)))
        .collect()
}

/// Splits `n` impressions one at a time, always to the advertiser with the
/// best next-impression gain (ties to the smaller advertiser id). Gains
/// only shrink as impressions accumulate, so this is exactly optimal. With
/// no eligible advertiser the allocation is empty and worth zero.
pub fn greedy_allocate(
    n: u64,
    catalog: &Catalog,
    profile: &AnonymizedProfile,
    model: &ClickModel,
) -> Allocation {
    let eligible = eligible_cpcs(catalog, profile);
    if eligible.is_empty() || n == 0 {
        let counts: BTreeMap<String, u64> = eligible.into_iter().map(|(id, _)| (id, 0)).collect();
        return Allocation { counts, value: 0.0 };
    }

    use std::cmp::Ordering;
    use std::collections::BinaryHeap;

    struct Slot {
        gain: f64,
        idx: usize,
        assigned: u64,
    }
    impl PartialEq for Slot {
        fn eq(&self, other: &Self) -> bool {
            self.cmp(other) == Ordering::Equal
        }
    }
    impl Eq for Slot {}
    impl PartialOrd for Slot {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Slot {
        fn cmp(&self, other: &Self) -> Ordering {
            // max-heap: larger gain first, then smaller advertiser index
            self.gain.total_cmp(&other.gain).then_with(|| other.idx.cmp(&self.idx))
        }
    }

    let mut heap: BinaryHeap<Slot> = eligible
        .iter()
        .enumerate()
        .map(|(idx, (_, cpc))| Slot { gain: model.marginal_gain(*cpc, 0), idx, assigned: 0 })
        .collect();
    for _ in 0..n {
        let mut top = heap.pop().expect("eligible set is non-empty");
        top.assigned += 1;
        top.gain = model.marginal_gain(eligible[top.idx].1, top.assigned);
        heap.push(top);
    }

    let mut counts: BTreeMap<String, u64> = eligible.iter().map(|(id, _)| (id.clone(), 0)).collect();
    for slot in heap {
        counts.insert(eligible[slot.idx].0.clone(), slot.assigned);
    }
    let value = allocation_value(&counts, catalog, profile, model).expect("counts built from eligible set");
    Allocation { counts, value }
}

pub const EXHAUSTIVE_MAX_IMPRESSIONS: u64 = 8;
pub const EXHAUSTIVE_MAX_ADVERTISERS: usize = 5;

/// Independent optimum: enumerates every split of `n` impressions across
/// eligible advertisers. Factorially expensive, so capped; exists to keep
/// the greedy honest.
pub fn exhaustive_allocate(
    n: u64,
    catalog: &Catalog,
    profile: &AnonymizedProfile,
    model: &ClickModel,
) -> Result<Allocation, ValuationError> {
    let eligible = eligible_cpcs(catalog, profile);
    if eligible.is_empty() || n == 0 {
        let counts: BTreeMap<String, u64> = eligible.into_iter().map(|(id, _)| (id, 0)).collect();
        return Ok(Allocation { counts, value: 0.0 });
    }
    if n > EXHAUSTIVE_MAX_IMPRESSIONS || eligible.len() > EXHAUSTIVE_MAX_ADVERTISERS {
        return Err(ValuationError::ExhaustiveSearchTooLarge {
            n,
            ads: eligible.len(),
            max_n: EXHAUSTIVE_MAX_IMPRESSIONS,
            max_ads: EXHAUSTIVE_MAX_ADVERTISERS,
        });
    }

    let mut split = vec![0u64; eligible.len()];
    let mut best: Option<(Vec<u64>, f64)> = None;
    fn walk(
        split: &mut Vec<u64>,
        slot: usize,
        remaining: u64,
        eligible: &[(String, f64)],
        model: &ClickModel,
        best: &mut Option<(Vec<u64>, f64)>,
    ) {
        if slot + 1 == split.len() {
            split[slot] = remaining;
            let value: f64 = split
                .iter()
                .zip(eligible)
                .map(|(&c, (_, cpc))| if c > 0 { model.payout(*cpc, c) } else { 0.0 })
                .sum();
            // strict improvement keeps the first (lexicographically
            // smallest) optimal split, so results are deterministic
            if best.as_ref().is_none_or(|(_, v)| value > *v) {
                *best = Some((split.clone(), value));
            }
            return;
        }
        for c in 0..=remaining {
            split[slot] = c;
            walk(split, slot + 1, remaining - c, eligible, model, best);
        }
    }
    walk(&mut split, 0, n, &eligible, model, &mut best);

    let (split, value) = best.expect("at least one split exists");
    let counts = eligible.iter().zip(&split).map(|((id, _), &c)| (id.clone(), c)).collect();
    Ok(Allocation { counts, value })
}

/// What an ad network bids for one period of access: the greedy value of
/// the profile slice it can see, converted to money.
pub fn bid_for_user(
    visible: &AnonymizedProfile,
    catalog: &Catalog,
    model: &ClickModel,
    currency_scale: f64,
) -> Money {
    let n = visible.total_impressions();
    if n == 0 {
        return Money::ZERO;
    }
    let allocation = greedy_allocate(n, catalog, visible, model);
    Money::from_units_rounded(allocation.value * currency_scale)
}

/// Derives a user's intent coefficients from profile value.
///
/// Both the full profile and each observer's visible slice are valued at
/// the same impression budget (the full profile's), so a smaller slice can
/// only match or lose value and explicit >= implicit >= 1 holds by
/// construction. `beta` converts per-impression value into intent lift.
pub fn derive_intents(
    full: &AnonymizedProfile,
    visible: &BTreeMap<String, AnonymizedProfile>,
    beta: f64,
    catalog: &Catalog,
    model: &ClickModel,
) -> Result<IntentProfile, ValuationError> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(ValuationError::InvalidBeta(beta));
    }
    let n = full.total_impressions();
    if n == 0 {
        let ones = visible.keys().map(|a| (a.clone(), 1.0)).collect();
        return Ok(IntentProfile::new(1.0, ones).expect("constant profile is valid"));
    }
    let per_impression = |p: &AnonymizedProfile| greedy_allocate(n, catalog, p, model).value / n as f64;
    let explicit = 1.0 + beta * per_impression(full);
    let implicit = visible
        .iter()
        .map(|(agg, p)| {
            // min guards the half-ulp where a slice's float value edges past
            // the full profile's
            (agg.clone(), (1.0 + beta * per_impression(p)).min(explicit))
        })
        .collect();
    Ok(IntentProfile::new(explicit, implicit).expect("explicit >= implicit >= 1 by construction"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn catalog(rows: &[(&str, &str, f64)]) -> Catalog {
        Catalog::from_records(rows.iter().map(|(a, k, c)| CatalogRecord {
            advertiser: a.to_string(),
            keyword: k.to_string(),
            cpc: *c,
        }))
        .unwrap()
    }

    fn profile(rows: &[(&str, u64, &[&str])]) -> AnonymizedProfile {
        let mut p = AnonymizedProfile::new();
        for (site, count, kws) in rows {
            p.add_visits(site, *count, kws.iter().copied());
        }
        p
    }

    #[test]
    fn relevant_keywords_intersects() {
        let p = profile(&[("s1.example", 3, &["sports", "travel"])]);
        let cat = catalog(&[("ad1", "travel", 1.0), ("ad1", "music", 2.0)]);
        let kws = relevant_keywords(&p, cat.keywords_of("ad1").unwrap());
        assert_eq!(kws, BTreeSet::from(["travel"]));
    }

    #[test]
    fn catalog_rejects_bad_rows() {
        assert!(matches!(
            Catalog::from_records([CatalogRecord { advertiser: "a".into(), keyword: "k".into(), cpc: -1.0 }]),
            Err(ValuationError::InvalidCpc { .. })
        ));
        let dup = CatalogRecord { advertiser: "a".into(), keyword: "k".into(), cpc: 1.0 };
        assert!(matches!(
            Catalog::from_records([dup.clone(), dup]),
            Err(ValuationError::DuplicateCatalogRow { .. })
        ));
    }

    #[test]
    fn allocation_value_single_advertiser() {
        let p = profile(&[("s1", 2, &["travel"])]);
        let cat = catalog(&[("ad1", "travel", 1.0)]);
        let model = ClickModel::new(0.5).unwrap();
        let counts = BTreeMap::from([("ad1".to_string(), 2u64)]);
        let v = allocation_value(&counts, &cat, &p, &model).unwrap();
        assert!((v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn allocation_value_rejects_strangers() {
        let p = profile(&[("s1", 2, &["travel"])]);
        let cat = catalog(&[("ad1", "music", 1.0)]);
        let model = ClickModel::new(0.5).unwrap();
        let unknown = BTreeMap::from([("nobody".to_string(), 1u64)]);
        assert!(matches!(
            allocation_value(&unknown, &cat, &p, &model),
            Err(ValuationError::UnknownAdvertiser(_))
        ));
        let ineligible = BTreeMap::from([("ad1".to_string(), 1u64)]);
        assert!(matches!(
            allocation_value(&ineligible, &cat, &p, &model),
            Err(ValuationError::IneligibleAdvertiser(_))
        ));
    }

    #[test]
    fn effective_keyword_prefers_highest_cpc() {
        let p = profile(&[("s1", 1, &["travel", "music"])]);
        let cat = catalog(&[("ad1", "travel", 1.0), ("ad1", "music", 2.0)]);
        let model = ClickModel::new(1.0).unwrap();
        let counts = BTreeMap::from([("ad1".to_string(), 1u64)]);
        // one impression at pi = 1 pays the full effective CPC
        assert_eq!(allocation_value(&counts, &cat, &p, &model).unwrap(), 2.0);
    }

    #[test]
    fn greedy_splits_by_marginal_gain() {
        let p = profile(&[("s1", 2, &["travel"])]);
        let cat = catalog(&[("ad1", "travel", 2.0), ("ad2", "travel", 1.0)]);
        let model = ClickModel::new(0.5).unwrap();
        let a = greedy_allocate(2, &cat, &p, &model);
        // both optima are worth 1.5; the tie at gain 0.5 goes to ad1
        assert!((a.value - 1.5).abs() < 1e-15);
        assert_eq!(a.counts[&"ad1".to_string()], 2);
        assert_eq!(a.counts[&"ad2".to_string()], 0);
    }

    #[test]
    fn greedy_degenerate_cases() {
        let model = ClickModel::new(0.5).unwrap();
        let p = profile(&[("s1", 2, &["travel"])]);
        let cat = catalog(&[("ad1", "music", 1.0)]);
        // nothing eligible
        let a = greedy_allocate(2, &cat, &p, &model);
        assert_eq!(a.value, 0.0);
        assert!(a.counts.is_empty());
        // zero impressions
        let cat = catalog(&[("ad1", "travel", 1.0)]);
        let a = greedy_allocate(0, &cat, &p, &model);
        assert_eq!(a.value, 0.0);
        assert_eq!(a.counts[&"ad1".to_string()], 0);
        // zero click probability: impressions still all assigned
        let a = greedy_allocate(3, &cat, &p, &ClickModel::new(0.0).unwrap());
        assert_eq!(a.value, 0.0);
        assert_eq!(a.counts.values().sum::<u64>(), 3);
    }

    #[test]
    fn exhaustive_caps() {
        let p = profile(&[("s1", 20, &["travel"])]);
        let cat = catalog(&[("ad1", "travel", 1.0)]);
        let model = ClickModel::new(0.5).unwrap();
        assert!(matches!(
            exhaustive_allocate(20, &cat, &p, &model),
            Err(ValuationError::ExhaustiveSearchTooLarge { .. })
        ));
    }

    #[test]
    fn bid_scales_value_into_money() {
        let p = profile(&[("s1", 2, &["travel"])]);
        let cat = catalog(&[("ad1", "travel", 1.0)]);
        let model = ClickModel::new(0.5).unwrap();
        assert_eq!(bid_for_user(&p, &cat, &model, 1.0), Money::from_micros(750_000));
        assert_eq!(bid_for_user(&p, &cat, &model, 2.0), Money::from_micros(1_500_000));
        assert_eq!(bid_for_user(&AnonymizedProfile::new(), &cat, &model, 1.0), Money::ZERO);
    }

    #[test]
    fn derive_intents_brackets() {
        let full = profile(&[("s1", 2, &["travel"]), ("s2", 2, &["music"])]);
        let all_sites: BTreeSet<String> = ["s1".to_string(), "s2".to_string()].into();
        let s1_only: BTreeSet<String> = ["s1".to_string()].into();
        let cat = catalog(&[("ad1", "travel", 1.0), ("ad2", "music", 1.0)]);
        let model = ClickModel::new(0.5).unwrap();
        let visible = BTreeMap::from([
            ("agg_all".to_string(), full.restricted_to(&all_sites)),
            ("agg_s1".to_string(), full.restricted_to(&s1_only)),
            ("agg_none".to_string(), AnonymizedProfile::new()),
        ]);
        let intents = derive_intents(&full, &visible, 2.0, &cat, &model).unwrap();
        // full visibility earns the explicit coefficient, no visibility 1
        assert_eq!(intents.implicit("agg_all"), intents.explicit());
        assert_eq!(intents.implicit("agg_none"), 1.0);
        let partial = intents.implicit("agg_s1");
        assert!(1.0 < partial && partial < intents.explicit());
        assert!(intents.explicit() > 1.0);

        // beta 0 flattens everything to 1
        let flat = derive_intents(&full, &visible, 0.0, &cat, &model).unwrap();
        assert_eq!(flat.explicit(), 1.0);
        assert_eq!(flat.implicit("agg_all"), 1.0);

        // empty browsing history is worthless
        let empty = derive_intents(&AnonymizedProfile::new(), &visible, 2.0, &cat, &model).unwrap();
        assert_eq!(empty.explicit(), 1.0);
    }

    #[test]
    fn greedy_matches_exhaustive_on_spec_grid() {
        let p = profile(&[("s1", 1, &["travel", "music"])]);
        for pi in [0.1, 0.3, 0.5, 0.9] {
            let model = ClickModel::new(pi).unwrap();
            for cpc_hi in [0.5, 1.0, 2.0] {
                let cat = catalog(&[("ad1", "travel", cpc_hi), ("ad2", "music", 1.0), ("ad3", "travel", 0.5)]);
                for n in 0..=6u64 {
                    let g = greedy_allocate(n, &cat, &p, &model);
                    let b = exhaustive_allocate(n, &cat, &p, &model).unwrap();
                    assert!(
                        (g.value - b.value).abs() <= 1e-12,
                        "pi {pi} cpc {cpc_hi} n {n}: greedy {} exhaustive {}",
                        g.value,
                        b.value
                    );
                }
            }
        }
    }

    prop_compose! {
        fn small_instance()(
            n_ads in 1usize..5,
            n in 0u64..7,
            pi in 0.05f64..0.95,
        )(
            cpcs in proptest::collection::vec(0.0f64..3.0, n_ads),
            kw_mask in proptest::collection::vec(0u8..3, n_ads),
            n in Just(n),
            pi in Just(pi),
        ) -> (Vec<f64>, Vec<u8>, u64, f64) {
            (cpcs, kw_mask, n, pi)
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn greedy_is_optimal((cpcs, kw_mask, n, pi) in small_instance()) {
            let p = profile(&[("s1", 8, &["kw0", "kw1"])]);
            let rows: Vec<CatalogRecord> = cpcs
                .iter()
                .zip(&kw_mask)
                .enumerate()
                .map(|(i, (&cpc, &m))| CatalogRecord {
                    advertiser: format!("ad{i}"),
                    // kw2 never matches the profile
                    keyword: format!("kw{}", m),
                    cpc,
                })
                .collect();
            let cat = Catalog::from_records(rows).unwrap();
            let model = ClickModel::new(pi).unwrap();
            let g = greedy_allocate(n, &cat, &p, &model);
            let b = exhaustive_allocate(n, &cat, &p, &model).unwrap();
            prop_assert!((g.value - b.value).abs() <= 1e-12, "greedy {} exhaustive {}", g.value, b.value);
        }

        #[test]
        fn value_is_monotone(n in 0u64..30, pi in 0.05f64..0.95) {
            let full = profile(&[("s1", 10, &["travel"]), ("s2", 5, &["music"])]);
            let cat = catalog(&[("ad1", "travel", 2.0), ("ad2", "music", 1.0)]);
            let model = ClickModel::new(pi).unwrap();
            // more impressions never lose value
            let v0 = greedy_allocate(n, &cat, &full, &model).value;
            let v1 = greedy_allocate(n + 1, &cat, &full, &model).value;
            prop_assert!(v1 >= v0 - 1e-12);
            // a sub-profile at the same budget never beats the full profile
            let sub = full.restricted_to(&BTreeSet::from(["s1".to_string()]));
            let vs = greedy_allocate(n, &cat, &sub, &model).value;
            prop_assert!(vs <= v0 + 1e-12);
        }

        #[test]
        fn value_scales_with_cpc(scale in 0.1f64..10.0, n in 1u64..20) {
            let p = profile(&[("s1", 10, &["travel", "music"])]);
            let base = catalog(&[("ad1", "travel", 2.0), ("ad2", "music", 1.0)]);
            let scaled = catalog(&[("ad1", "travel", 2.0 * scale), ("ad2", "music", scale)]);
            let model = ClickModel::new(0.3).unwrap();
            let v = greedy_allocate(n, &base, &p, &model).value;
            let vs = greedy_allocate(n, &scaled, &p, &model).value;
            prop_assert!((vs - v * scale).abs() <= 1e-9 * (1.0 + v * scale));
        }
    }
}
