//! Per-request tracking policy: who may see this user's headers?
//!
//! Every proxied request is classified first-party or third-party by
//! comparing the registrable root domains of its Host and Referer. A
//! third-party request carries the user's tracking headers only when the
//! user has whitelisted the page being visited and the third party holds
//! an unexpired paid grant for this user. Otherwise the identifying
//! headers are stripped in both directions: Cookie, Referer and
//! If-None-Match on the way out, Set-Cookie and Etag on the way back.
//! Requests are never blocked, only cleaned.
//!
//! `decide` and the transforms are pure. State loads from a directory:
//! `whitelists/<user>.txt` and `cdn_allowlist.txt` hold one root domain
//! per line (blank lines and `#` comments ignored), `grants.jsonl` holds
//! line-delimited grant records.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: bad grant record: {source}")]
    BadGrant {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Request headers that identify the user to a tracker.
pub const REQUEST_TRACKING_HEADERS: [&str; 3] = ["Cookie", "Referer", "If-None-Match"];
/// Response headers a tracker uses to (re)mark the user.
pub const RESPONSE_TRACKING_HEADERS: [&str; 2] = ["Set-Cookie", "Etag"];

/// Registrable domain (eTLD+1) of a host under the bundled public-suffix
/// snapshot. Ports are dropped and case folded. Literal network addresses,
/// single labels, and bare public suffixes come back as themselves.
pub fn root_domain(host: &str) -> String {
    let host = strip_port(host.trim()).to_ascii_lowercase();
    if host.starts_with('[') || host.parse::<std::net::IpAddr>().is_ok() {
        return host;
    }
    match psl::domain_str(&host) {
        Some(root) => root.to_string(),
        None => host,
    }
}

fn strip_port(host: &str) -> &str {
    if let Some(end) = host.strip_prefix('[').and_then(|_| host.find(']')) {
        return &host[..=end];
    }
    match host.rsplit_once(':') {
        Some((h, port)) if !port.is_empty() && port.bytes().all(|b| b.is_ascii_digit()) => h,
        _ => host,
    }
}

/// Host part of a Referer value (full URL or bare origin).
pub fn referer_host(referer: &str) -> Option<String> {
    let s = referer.trim();
    let after_scheme = match s.split_once("://") {
        Some((_, rest)) => rest,
        None => s,
    };
    let authority = after_scheme
        .split(['/', '?', '#'])
        .next()
        .unwrap_or("");
    let host = match authority.rsplit_once('@') {
        Some((_, h)) => h,
        None => authority,
    };
    if host.is_empty() {
        None
    } else {
        Some(host.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    FirstParty,
    ThirdParty,
}

impl std::fmt::Display for Party {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Party::FirstParty => "first_party",
            Party::ThirdParty => "third_party",
        })
    }
}

/// A request is first-party when it goes where the user is deliberately
/// browsing: no Referer (direct navigation), same root domain as the
/// Referer, or a host on the CDN allowlist.
pub fn classify(host: &str, referer: Option<&str>, cdn_allowlist: &BTreeSet<String>) -> Party {
    let host_root = root_domain(host);
    if cdn_allowlist.contains(&host_root) {
        return Party::FirstParty;
    }
    match referer.and_then(referer_host) {
        None => Party::FirstParty,
        Some(ref_host) => {
            if root_domain(&ref_host) == host_root {
                Party::FirstParty
            } else {
                Party::ThirdParty
            }
        }
    }
}

/// One paid-access record: `aggregator` may track `user` through the end
/// of auction period `period`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantRecord {
    pub user: String,
    pub aggregator: String,
    pub period: u64,
}

/// Per-user consent and payment state consulted on every request.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyState {
    whitelists: BTreeMap<String, BTreeSet<String>>,
    grants: BTreeMap<String, BTreeMap<String, u64>>,
    cdn_allowlist: BTreeSet<String>,
}

impl PolicyState {
    pub fn new() -> PolicyState {
        PolicyState::default()
    }

    pub fn add_whitelist(&mut self, user: &str, domain: &str) {
        self.whitelists
            .entry(user.to_string())
            .or_default()
            .insert(root_domain(domain));
    }

    /// Duplicate grants keep the latest expiry.
    pub fn add_grant(&mut self, grant: &GrantRecord) {
        let expiry = self
            .grants
            .entry(grant.user.clone())
            .or_default()
            .entry(root_domain(&grant.aggregator))
            .or_insert(grant.period);
        *expiry = (*expiry).max(grant.period);
    }

    pub fn add_cdn(&mut self, domain: &str) {
        self.cdn_allowlist.insert(root_domain(domain));
    }

    pub fn cdn_allowlist(&self) -> &BTreeSet<String> {
        &self.cdn_allowlist
    }

    pub fn is_whitelisted(&self, user: &str, root: &str) -> bool {
        self.whitelists.get(user).is_some_and(|w| w.contains(root))
    }

    pub fn has_unexpired_grant(&self, user: &str, aggregator_root: &str, current_period: u64) -> bool {
        self.grants
            .get(user)
            .and_then(|g| g.get(aggregator_root))
            .is_some_and(|&expiry| current_period <= expiry)
    }

    /// New state with the whole grant table replaced; whitelists and CDN
    /// allowlist carry over.
    pub fn with_grants(&self, grants: &[GrantRecord]) -> PolicyState {
        let mut next = PolicyState {
            whitelists: self.whitelists.clone(),
            grants: BTreeMap::new(),
            cdn_allowlist: self.cdn_allowlist.clone(),
        };
        for g in grants {
            next.add_grant(g);
        }
        next
    }

    /// Loads `whitelists/<user>.txt`, `cdn_allowlist.txt`, and
    /// `grants.jsonl` from a state directory. Missing pieces mean empty.
    pub fn load(dir: &Path) -> Result<PolicyState, PolicyError> {
        let mut state = PolicyState::new();
        let wl_dir = dir.join("whitelists");
        if wl_dir.is_dir() {
            let entries = std::fs::read_dir(&wl_dir).map_err(|source| PolicyError::Io {
                path: wl_dir.display().to_string(),
                source,
            })?;
            let mut paths: Vec<_> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            paths.sort();
            for path in paths {
                let user = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
                for domain in read_domain_lines(&path)? {
                    state.add_whitelist(&user, &domain);
                }
            }
        }
        let cdn = dir.join("cdn_allowlist.txt");
        if cdn.is_file() {
            for domain in read_domain_lines(&cdn)? {
                state.add_cdn(&domain);
            }
        }
        let grants = dir.join("grants.jsonl");
        if grants.is_file() {
            let text = std::fs::read_to_string(&grants).map_err(|source| PolicyError::Io {
                path: grants.display().to_string(),
                source,
            })?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let grant: GrantRecord =
                    serde_json::from_str(line).map_err(|source| PolicyError::BadGrant {
                        path: grants.display().to_string(),
                        line: i + 1,
                        source,
                    })?;
                state.add_grant(&grant);
            }
        }
        Ok(state)
    }
}

/// One root domain per line; blank lines and `#` comments skipped.
pub fn read_domain_lines(path: &Path) -> Result<Vec<String>, PolicyError> {
    let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// What the proxy sees of one request before forwarding it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestMeta {
    pub user: String,
    pub host: String,
    pub referer: Option<String>,
}

/// The policy verdict for one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub party: Party,
    pub pass_tracking: bool,
    pub headers_to_strip_request: Vec<&'static str>,
    pub headers_to_strip_response: Vec<&'static str>,
}

/// Pure gating rule. Tracking headers pass only for a third party that is
/// both whitelisted (via the visited page's root) and holding an unexpired
/// grant; first-party traffic is never touched; unknown users have empty
/// whitelists and grants, so their third-party headers always strip.
pub fn decide(req: &RequestMeta, state: &PolicyState, current_period: u64) -> Decision {
    let party = classify(&req.host, req.referer.as_deref(), state.cdn_allowlist());
    let whitelisted = req
        .referer
        .as_deref()
        .and_then(referer_host)
        .is_some_and(|h| state.is_whitelisted(&req.user, &root_domain(&h)));
    let paid = state.has_unexpired_grant(&req.user, &root_domain(&req.host), current_period);
    let pass_tracking = whitelisted && paid;
    let strip = party == Party::ThirdParty && !pass_tracking;
    Decision {
        party,
        pass_tracking,
        headers_to_strip_request: if strip { REQUEST_TRACKING_HEADERS.to_vec() } else { Vec::new() },
        headers_to_strip_response: if strip { RESPONSE_TRACKING_HEADERS.to_vec() } else { Vec::new() },
    }
}

/// An ordered HTTP/1.1 header block that preserves the exact bytes of
/// every line it keeps. Lines starting with space or tab continue the
/// previous header and travel with it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeaderList {
    lines: Vec<Vec<u8>>,
}

fn is_continuation(line: &[u8]) -> bool {
    matches!(line.first(), Some(b' ') | Some(b'\t'))
}

fn line_name(line: &[u8]) -> Option<&[u8]> {
    if is_continuation(line) {
        return None;
    }
    let colon = line.iter().position(|&b| b == b':')?;
    Some(trim_ascii(&line[..colon]))
}

fn trim_ascii(mut bytes: &[u8]) -> &[u8] {
    while let Some((b' ' | b'\t', rest)) = bytes.split_first().map(|(f, r)| (*f, r)) {
        bytes = rest;
    }
    while let Some((rest, b' ' | b'\t')) = bytes.split_last().map(|(l, r)| (r, *l)) {
        bytes = rest;
    }
    bytes
}

impl HeaderList {
    pub fn new() -> HeaderList {
        HeaderList::default()
    }

    pub fn from_lines(lines: Vec<Vec<u8>>) -> HeaderList {
        HeaderList { lines }
    }

    pub fn push_raw(&mut self, line: Vec<u8>) {
        self.lines.push(line);
    }

    pub fn push(&mut self, name: &str, value: &str) {
        self.lines.push(format!("{name}: {value}").into_bytes());
    }

    pub fn raw_lines(&self) -> impl Iterator<Item = &[u8]> {
        self.lines.iter().map(|l| l.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// First value for `name`, trimmed; names compare case-insensitively.
    pub fn get(&self, name: &str) -> Option<String> {
        self.lines.iter().find_map(|line| {
            let n = line_name(line)?;
            if n.eq_ignore_ascii_case(name.as_bytes()) {
                let colon = line.iter().position(|&b| b == b':').unwrap();
                Some(String::from_utf8_lossy(trim_ascii(&line[colon + 1..])).into_owned())
            } else {
                None
            }
        })
    }

    pub fn values<'a>(&'a self, name: &'a str) -> impl Iterator<Item = String> + 'a {
        self.lines.iter().filter_map(move |line| {
            let n = line_name(line)?;
            if n.eq_ignore_ascii_case(name.as_bytes()) {
                let colon = line.iter().position(|&b| b == b':').unwrap();
                Some(String::from_utf8_lossy(trim_ascii(&line[colon + 1..])).into_owned())
            } else {
                None
            }
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Copy without the named headers (and their continuation lines); all
    /// kept lines are byte-identical. Returns the canonical names actually
    /// removed, in strip-list order.
    pub fn without(&self, names: &[&str]) -> (HeaderList, Vec<String>) {
        let mut kept = Vec::with_capacity(self.lines.len());
        let mut removed: Vec<&str> = Vec::new();
        let mut removing = false;
        for line in &self.lines {
            if is_continuation(line) {
                if !removing {
                    kept.push(line.clone());
                }
                continue;
            }
            let hit = line_name(line).and_then(|n| {
                names.iter().find(|c| c.as_bytes().eq_ignore_ascii_case(n)).copied()
            });
            match hit {
                Some(canonical) => {
                    removing = true;
                    if !removed.contains(&canonical) {
                        removed.push(canonical);
                    }
                }
                None => {
                    removing = false;
                    kept.push(line.clone());
                }
            }
        }
        let mut stripped: Vec<String> = Vec::new();
        for c in names {
            if removed.contains(c) {
                stripped.push((*c).to_string());
            }
        }
        (HeaderList { lines: kept }, stripped)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for line in &self.lines {
            out.extend_from_slice(line);
            out.extend_from_slice(b"\r\n");
        }
        out
    }
}

/// Applies the decision's request-side strips; everything else is
/// byte-identical. Also returns the header names actually removed.
pub fn transform_request(headers: &HeaderList, decision: &Decision) -> (HeaderList, Vec<String>) {
    headers.without(&decision.headers_to_strip_request)
}

/// Applies the decision's response-side strips; everything else is
/// byte-identical. Also returns the header names actually removed.
pub fn transform_response(headers: &HeaderList, decision: &Decision) -> (HeaderList, Vec<String>) {
    headers.without(&decision.headers_to_strip_response)
}
