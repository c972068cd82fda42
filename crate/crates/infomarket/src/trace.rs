//! Synthetic browsing traces: who visited which publisher, which ad
//! networks were embedded there, and what the page was about.
//!
//! Publishers get a fixed identity at generation time: a popularity rank,
//! one to three topic keywords, and zero to three embedded ad networks.
//! Both publisher popularity and ad-network embedding follow power-law
//! weights (weight of rank i is 1/(i+1)^skew), so a high skew concentrates
//! traffic on few sites and tracking on few networks. Every event then
//! picks a uniform user and a popularity-weighted publisher. Timestamps
//! are the event index, trivially nondecreasing.

use crate::io::{read_jsonl, write_jsonl, IoError};
use crate::seed::rng_for;
use crate::valuation::AnonymizedProfile;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TraceError {
    #[error("{0} must be positive")]
    NonPositiveCount(&'static str),
    #[error("keyword catalog is empty")]
    EmptyKeywordCatalog,
    #[error("skew {0} must be finite and >= 0, got {1}")]
    BadSkew(&'static str, f64),
    #[error("timestamps decrease at event {0}")]
    TimestampsDecrease(usize),
}

/// One page visit: `aggregators` are the ad networks embedded on the
/// publisher, `keywords` the publisher's topics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub ts: u64,
    pub user: String,
    pub publisher: String,
    pub aggregators: Vec<String>,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceParams {
    pub users: u64,
    pub publishers: u64,
    pub aggregators: u64,
    pub events: u64,
    pub popularity_skew: f64,
    pub embedding_skew: f64,
    pub keywords: Vec<String>,
}

impl TraceParams {
    fn validate(&self) -> Result<(), TraceError> {
        if self.users == 0 {
            return Err(TraceError::NonPositiveCount("users"));
        }
        if self.publishers == 0 {
            return Err(TraceError::NonPositiveCount("publishers"));
        }
        if self.events == 0 {
            return Err(TraceError::NonPositiveCount("events"));
        }
        if self.keywords.is_empty() {
            return Err(TraceError::EmptyKeywordCatalog);
        }
        for (name, skew) in [("popularity_skew", self.popularity_skew), ("embedding_skew", self.embedding_skew)] {
            if !skew.is_finite() || skew < 0.0 {
                return Err(TraceError::BadSkew(name, skew));
            }
        }
        Ok(())
    }
}

/// Power-law sampler over ranks 0..n: cumulative weights plus binary
/// search.
struct RankSampler {
    cumulative: Vec<f64>,
}

impl RankSampler {
    fn new(n: u64, skew: f64) -> RankSampler {
        let mut cumulative = Vec::with_capacity(n as usize);
        let mut total = 0.0;
        for i in 0..n {
            total += 1.0 / ((i + 1) as f64).powf(skew);
            cumulative.push(total);
        }
        RankSampler { cumulative }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty sampler");
        let x = rng.gen_range(0.0..total);
        self.cumulative.partition_point(|&c| c <= x)
    }
}

pub fn generate_trace(params: &TraceParams, seed: u64) -> Result<Vec<TraceEvent>, TraceError> {
    params.validate()?;
    let mut site_rng = rng_for(seed, "trace", &["sites"]);

    // fixed per-publisher identity: keywords and embedded ad networks
    let embedding = (params.aggregators > 0).then(|| RankSampler::new(params.aggregators, params.embedding_skew));
    let mut publisher_keywords: Vec<Vec<String>> = Vec::new();
    let mut publisher_aggs: Vec<Vec<String>> = Vec::new();
    for _ in 0..params.publishers {
        let n_kw = site_rng.gen_range(1..=3usize.min(params.keywords.len()));
        let mut kws = BTreeSet::new();
        while kws.len() < n_kw {
            kws.insert(params.keywords[site_rng.gen_range(0..params.keywords.len())].clone());
        }
        publisher_keywords.push(kws.into_iter().collect());

        let mut aggs = BTreeSet::new();
        if let Some(embedding) = &embedding {
            let n_aggs = site_rng.gen_range(0..=3u64.min(params.aggregators)) as usize;
            let mut attempts = 0;
            while aggs.len() < n_aggs && attempts < 64 {
                aggs.insert(format!("a{:03}", embedding.sample(&mut site_rng)));
                attempts += 1;
            }
        }
        publisher_aggs.push(aggs.into_iter().collect());
    }

    let mut event_rng = rng_for(seed, "trace", &["events"]);
    let popularity = RankSampler::new(params.publishers, params.popularity_skew);
    let mut events = Vec::with_capacity(params.events as usize);
    for ts in 0..params.events {
        let user = format!("u{:04}", event_rng.gen_range(0..params.users));
        let p = popularity.sample(&mut event_rng);
        events.push(TraceEvent {
            ts,
            user,
            publisher: format!("p{:04}", p),
            aggregators: publisher_aggs[p].clone(),
            keywords: publisher_keywords[p].clone(),
        });
    }
    Ok(events)
}

/// An ordered trace plus the lookups the market needs: per-user browsing
/// profiles and, per ad network, the set of sites it is embedded on (its
/// view of any user's profile is exactly those sites).
#[derive(Debug, Clone)]
pub struct Trace {
    events: Vec<TraceEvent>,
    profiles: BTreeMap<String, AnonymizedProfile>,
    agg_sites: BTreeMap<String, BTreeSet<String>>,
    publishers: BTreeSet<String>,
}

impl Trace {
    pub fn new(events: Vec<TraceEvent>) -> Result<Trace, TraceError> {
        let mut profiles: BTreeMap<String, AnonymizedProfile> = BTreeMap::new();
        let mut agg_sites: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut publishers = BTreeSet::new();
        for (i, event) in events.iter().enumerate() {
            if i > 0 && event.ts < events[i - 1].ts {
                return Err(TraceError::TimestampsDecrease(i));
            }
            profiles
                .entry(event.user.clone())
                .or_default()
                .add_visits(&event.publisher, 1, event.keywords.iter().map(|k| k.as_str()));
            for a in &event.aggregators {
                agg_sites.entry(a.clone()).or_default().insert(event.publisher.clone());
            }
            publishers.insert(event.publisher.clone());
        }
        Ok(Trace { events, profiles, agg_sites, publishers })
    }

    pub fn load(path: &Path) -> Result<Trace, TraceLoadError> {
        let events = read_jsonl(path)?;
        Ok(Trace::new(events)?)
    }

    pub fn save(events: &[TraceEvent], path: &Path) -> Result<(), IoError> {
        write_jsonl(path, events)
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.profiles.keys().map(|u| u.as_str())
    }

    pub fn aggregators(&self) -> impl Iterator<Item = &str> {
        self.agg_sites.keys().map(|a| a.as_str())
    }

    pub fn publisher_count(&self) -> usize {
        self.publishers.len()
    }

    pub fn profile_of(&self, user: &str) -> Option<&AnonymizedProfile> {
        self.profiles.get(user)
    }

    pub fn sites_of(&self, aggregator: &str) -> Option<&BTreeSet<String>> {
        self.agg_sites.get(aggregator)
    }

    /// The slice of `user`'s profile that `aggregator` observes.
    pub fn visible_profile(&self, user: &str, aggregator: &str) -> AnonymizedProfile {
        match (self.profiles.get(user), self.agg_sites.get(aggregator)) {
            (Some(profile), Some(sites)) => profile.restricted_to(sites),
            _ => AnonymizedProfile::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceLoadError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}
