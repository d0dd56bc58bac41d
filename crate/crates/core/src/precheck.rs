//! Per-type validation rules applied between detection and LLM scoring.
//!
//! Each validator returns a [`PrecheckVerdict`] listing the rules the
//! value failed; a candidate passes precheck iff no rule failed. The
//! 300-character secret ceiling is applied before any type-specific
//! rule.

use std::collections::BTreeSet;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PiiCandidate, PiiType};

/// Longest value accepted for any type before type rules run.
pub const MAX_VALUE_LEN: usize = 300;

/// Outcome of prechecking one candidate value.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PrecheckVerdict {
    pub candidate_id: String,
    pub passed: bool,
    pub failed_rules: Vec<String>,
}

impl PrecheckVerdict {
    fn from_failures(candidate_id: &str, failed_rules: Vec<String>) -> Self {
        PrecheckVerdict {
            candidate_id: candidate_id.to_owned(),
            passed: failed_rules.is_empty(),
            failed_rules,
        }
    }
}

/// Total classification of an address string. Only `Public` passes
/// precheck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpClass {
    Public,
    Private,
    Loopback,
    LinkLocal,
    Unspecified,
    Multicast,
    Reserved,
    Broadcast,
    Invalid,
}

#[derive(Debug, Error)]
pub enum PrecheckError {
    #[error("entropy of an empty string is undefined")]
    EmptyString,
    #[error("cannot read list file {path}: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
}

/// Shannon entropy in bits per character over exact character
/// frequencies.
pub fn shannon_entropy(s: &str) -> Result<f64, PrecheckError> {
    if s.is_empty() {
        return Err(PrecheckError::EmptyString);
    }
    let mut counts: std::collections::HashMap<char, usize> = std::collections::HashMap::new();
    let mut total = 0usize;
    for c in s.chars() {
        *counts.entry(c).or_insert(0) += 1;
        total += 1;
    }
    let total = total as f64;
    let mut h = 0.0;
    for &count in counts.values() {
        let p = count as f64 / total;
        h -= p * p.log2();
    }
    Ok(h)
}

/// Classify an IPv4 or IPv6 address string into its most specific
/// special-purpose class.
pub fn classify_ip(s: &str) -> IpClass {
    match s.parse::<IpAddr>() {
        Ok(IpAddr::V4(addr)) => classify_v4(addr),
        Ok(IpAddr::V6(addr)) => classify_v6(addr),
        Err(_) => IpClass::Invalid,
    }
}

fn classify_v4(addr: Ipv4Addr) -> IpClass {
    let octets = addr.octets();
    let n = u32::from(addr);
    if addr.is_broadcast() {
        return IpClass::Broadcast;
    }
    if addr.is_unspecified() {
        return IpClass::Unspecified;
    }
    if addr.is_loopback() {
        return IpClass::Loopback;
    }
    if addr.is_link_local() {
        return IpClass::LinkLocal;
    }
    if addr.is_private() {
        return IpClass::Private;
    }
    if addr.is_multicast() {
        return IpClass::Multicast;
    }
    let in_block = |base: [u8; 4], prefix: u32| {
        let base = u32::from(Ipv4Addr::from(base));
        let mask = if prefix == 0 { 0 } else { u32::MAX << (32 - prefix) };
        (n & mask) == base
    };
    // Remaining special-purpose IPv4 registries
    if octets[0] == 0 // "this network" 0.0.0.0/8 (0.0.0.0 handled above)
        || in_block([100, 64, 0, 0], 10) // shared address space (CGNAT)
        || in_block([192, 0, 0, 0], 24) // IETF protocol assignments
        || in_block([192, 0, 2, 0], 24) // TEST-NET-1
        || in_block([192, 88, 99, 0], 24) // deprecated 6to4 relay
        || in_block([198, 18, 0, 0], 15) // benchmarking
        || in_block([198, 51, 100, 0], 24) // TEST-NET-2
        || in_block([203, 0, 113, 0], 24) // TEST-NET-3
        || octets[0] >= 240
    // class E future use (255.255.255.255 handled above)
    {
        return IpClass::Reserved;
    }
    IpClass::Public
}

fn classify_v6(addr: Ipv6Addr) -> IpClass {
    if addr.is_unspecified() {
        return IpClass::Unspecified;
    }
    if addr.is_loopback() {
        return IpClass::Loopback;
    }
    if addr.is_multicast() {
        return IpClass::Multicast;
    }
    let seg = addr.segments();
    if (seg[0] & 0xffc0) == 0xfe80 {
        return IpClass::LinkLocal;
    }
    if (seg[0] & 0xfe00) == 0xfc00 {
        return IpClass::Private; // unique local
    }
    if let Some(v4) = addr.to_ipv4_mapped() {
        return classify_v4(v4);
    }
    if seg[0] == 0x2001 && seg[1] == 0x0db8 {
        return IpClass::Reserved; // documentation
    }
    IpClass::Public
}

/// Load a one-entry-per-line list file. Lines starting with '#' are
/// comments; entries are lowercased.
pub fn load_list(path: &Path) -> Result<BTreeSet<String>, PrecheckError> {
    let text = std::fs::read_to_string(path).map_err(|source| PrecheckError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_ascii_lowercase())
        .collect())
}

fn length_check(s: &str, failed: &mut Vec<String>) {
    if s.chars().count() > MAX_VALUE_LEN {
        failed.push("max_length".to_owned());
    }
}

pub fn validate_email(candidate_id: &str, s: &str, tld_set: &BTreeSet<String>) -> PrecheckVerdict {
    let mut failed = Vec::new();
    length_check(s, &mut failed);
    let at_count = s.matches('@').count();
    if at_count != 1 {
        failed.push("exactly_one_at".to_owned());
        return PrecheckVerdict::from_failures(candidate_id, failed);
    }
    let (local, domain) = s.split_once('@').unwrap();
    if local.is_empty() || domain.is_empty() {
        failed.push("nonempty_parts".to_owned());
    }
    if local.starts_with('.') || local.ends_with('.') {
        failed.push("edge_dots".to_owned());
    }
    if s.contains("..") {
        failed.push("consecutive_dots".to_owned());
    }
    if s.chars()
        .any(|c| c.is_whitespace() || c == '/' || c == '\\' || c == '(' || c == ')')
    {
        failed.push("forbidden_chars".to_owned());
    }
    if domain.starts_with('.') || domain.ends_with('.') {
        failed.push("domain_edge_dots".to_owned());
    }
    let tld = domain.rsplit('.').next().unwrap_or("");
    if !tld_set.contains(&tld.to_ascii_lowercase()) {
        failed.push("tld".to_owned());
    }
    PrecheckVerdict::from_failures(candidate_id, failed)
}

pub fn validate_key(candidate_id: &str, s: &str) -> PrecheckVerdict {
    let mut failed = Vec::new();
    length_check(s, &mut failed);
    if s.chars()
        .any(|c| c.is_whitespace() || c == '/' || c == '\\' || c == '{' || c == '}')
    {
        failed.push("forbidden_chars".to_owned());
    }
    if s.chars().count() < 16 {
        failed.push("min_length".to_owned());
    }
    let unique: BTreeSet<char> = s.chars().collect();
    if unique.len() < 8 {
        failed.push("unique_chars".to_owned());
    }
    match shannon_entropy(s) {
        Ok(h) if h > 3.0 => {}
        _ => failed.push("entropy".to_owned()),
    }
    PrecheckVerdict::from_failures(candidate_id, failed)
}

pub fn validate_name(candidate_id: &str, s: &str) -> PrecheckVerdict {
    let mut failed = Vec::new();
    length_check(s, &mut failed);
    let parts: Vec<&str> = s
        .split(|c| c == ' ' || c == '.' || c == '-' || c == ',')
        .filter(|p| !p.is_empty())
        .collect();
    if parts.len() < 2 {
        failed.push("single_part".to_owned());
    }
    if parts
        .iter()
        .any(|p| !p.chars().all(|c| c.is_alphabetic()))
    {
        failed.push("non_alphabetic".to_owned());
    }
    PrecheckVerdict::from_failures(candidate_id, failed)
}

pub fn validate_password(
    candidate_id: &str,
    s: &str,
    weak_list: &BTreeSet<String>,
) -> PrecheckVerdict {
    let mut failed = Vec::new();
    length_check(s, &mut failed);
    if s.chars().count() < 8 {
        failed.push("min_length".to_owned());
    }
    // allowed secure charset: printable ASCII excluding space
    if !s.chars().all(|c| ('!'..='~').contains(&c)) {
        failed.push("charset".to_owned());
    }
    if weak_list.contains(&s.to_ascii_lowercase()) {
        failed.push("weak_list".to_owned());
    }
    PrecheckVerdict::from_failures(candidate_id, failed)
}

pub fn validate_username(
    candidate_id: &str,
    s: &str,
    false_list: &BTreeSet<String>,
) -> PrecheckVerdict {
    let mut failed = Vec::new();
    length_check(s, &mut failed);
    if !s
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        failed.push("charset".to_owned());
    }
    if s.chars().count() < 6 {
        failed.push("min_length".to_owned());
    }
    if false_list.contains(&s.to_ascii_lowercase()) {
        failed.push("false_list".to_owned());
    }
    PrecheckVerdict::from_failures(candidate_id, failed)
}

pub fn validate_ip(candidate_id: &str, s: &str) -> PrecheckVerdict {
    let mut failed = Vec::new();
    length_check(s, &mut failed);
    let class = classify_ip(s);
    if class != IpClass::Public {
        failed.push(format!("ip_{}", serde_json::to_value(class).unwrap().as_str().unwrap()));
    }
    PrecheckVerdict::from_failures(candidate_id, failed)
}

/// Rule lists used by [`precheck_candidate`].
pub struct PrecheckLists {
    pub tld_set: BTreeSet<String>,
    pub weak_passwords: BTreeSet<String>,
    pub false_usernames: BTreeSet<String>,
}

/// Dispatch a candidate to its type validator.
pub fn precheck_candidate(candidate: &PiiCandidate, lists: &PrecheckLists) -> PrecheckVerdict {
    let id = candidate.candidate_id.as_str();
    let v = candidate.value.as_str();
    match candidate.pii_type {
        PiiType::Email => validate_email(id, v, &lists.tld_set),
        PiiType::Key => validate_key(id, v),
        PiiType::IpAddress => validate_ip(id, v),
        PiiType::Name => validate_name(id, v),
        PiiType::Username => validate_username(id, v, &lists.false_usernames),
        PiiType::Password => validate_password(id, v, &lists.weak_passwords),
    }
}
