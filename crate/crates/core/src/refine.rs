//! LLM-backed sensitivity scoring: prompt construction, batch scoring
//! against a pluggable endpoint with retries and an append-only resume
//! log, and threshold application.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CandidateStatus, CodeFile, PiiCandidate, PiiType};

/// What gets sent to the scorer for one candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoringRequest {
    pub candidate_id: String,
    pub pii_type: PiiType,
    pub value: String,
    pub context_before: String,
    pub context_after: String,
    pub prompt_template_id: String,
}

/// Scorer reply for one candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoringResponse {
    pub candidate_id: String,
    pub sensitivity_score: u8,
    pub rationale: Option<String>,
    pub latency_ms: u64,
}

/// Per-type acceptance thresholds plus the balance floor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub per_type_threshold: BTreeMap<PiiType, u8>,
    pub min_per_type: usize,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        let mut per_type_threshold = BTreeMap::new();
        for ty in PiiType::ALL {
            let t = match ty {
                PiiType::Password | PiiType::IpAddress => 95,
                _ => 90,
            };
            per_type_threshold.insert(ty, t);
        }
        ThresholdPolicy {
            per_type_threshold,
            min_per_type: 1500,
        }
    }
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("no prompt template for type {0}")]
    MissingTemplate(PiiType),
    #[error("candidate {0} has no sensitivity score")]
    Unscored(String),
    #[error("candidate {candidate_id}: scoring failed after {attempts} attempts: {message}")]
    ScoringFailed {
        candidate_id: String,
        attempts: u32,
        message: String,
    },
    #[error("score log {path}: {message}")]
    ScoreLog { path: String, message: String },
}

/// Number of context characters kept on each side of the value.
pub const CONTEXT_CHARS: usize = 500;

/// Build a scoring request with exact character windows around the span,
/// truncated at file boundaries.
pub fn build_request(file: &CodeFile, candidate: &PiiCandidate) -> ScoringRequest {
    let before_slice = &file.content[..candidate.span.0];
    let after_slice = &file.content[candidate.span.1..];
    let context_before: String = {
        let chars: Vec<char> = before_slice.chars().collect();
        let start = chars.len().saturating_sub(CONTEXT_CHARS);
        chars[start..].iter().collect()
    };
    let context_after: String = after_slice.chars().take(CONTEXT_CHARS).collect();
    ScoringRequest {
        candidate_id: candidate.candidate_id.clone(),
        pii_type: candidate.pii_type,
        value: candidate.value.clone(),
        context_before,
        context_after,
        prompt_template_id: format!("{}-v1", candidate.pii_type.as_str()),
    }
}

fn type_guidance(ty: PiiType) -> &'static str {
    match ty {
        PiiType::Email => {
            "Generic or role addresses (noreply@, support@, example domains) are not sensitive."
        }
        PiiType::Key => {
            "Keys matching documented provider formats with high randomness are sensitive; \
             sample keys from documentation are not."
        }
        PiiType::IpAddress => {
            "Only publicly routable addresses that plausibly identify real infrastructure are \
             sensitive."
        }
        PiiType::Name => {
            "Only full personal names of real individuals are sensitive; API symbols and \
             fictional names are not."
        }
        PiiType::Username => {
            "Nicknames, single first or last names, and service accounts are not sensitive."
        }
        PiiType::Password => {
            "If the VALUE is used in a test case, such as in a Test function or @Test \
             annotation, it should be given a low score. Placeholder passwords are not sensitive."
        }
    }
}

/// Render the one-shot scoring prompt. Deterministic: the same request
/// always yields byte-identical text.
pub fn build_prompt(request: &ScoringRequest) -> String {
    format!(
        "You are auditing source code for sensitive personally identifiable information.\n\
         Evaluate the VALUE below on three dimensions and reply with a single JSON object\n\
         {{\"score\": <integer 0-100>}}.\n\
         \n\
         Format: What is the valid format for this type of PII, and what are the common\n\
         invalid cases?\n\
         Context: In what contexts is this type of PII typically sensitive, and does the\n\
         candidate occur within a test file?\n\
         Realness: Is the candidate a placeholder, a dummy value, or only a partial PII value?\n\
         \n\
         Type-specific guidance: {guidance}\n\
         \n\
         Example:\n\
         TYPE: email\n\
         VALUE: noreply@example.com\n\
         ANSWER: {{\"score\": 5}}\n\
         \n\
         TYPE: {ty}\n\
         CONTEXT BEFORE:\n{before}\n\
         VALUE: {value}\n\
         CONTEXT AFTER:\n{after}\n\
         ANSWER:",
        guidance = type_guidance(request.pii_type),
        ty = request.pii_type,
        before = request.context_before,
        value = request.value,
        after = request.context_after,
    )
}

/// A scoring backend. Implementations must be safe to call from several
/// worker threads at once.
pub trait ScoreProvider: Send + Sync {
    /// Score one request. A returned error is retryable.
    fn score(&self, request: &ScoringRequest) -> Result<u32, String>;
}

/// Deterministic offline scorer: hashes the value into [0, 100].
pub struct MockScorer;

impl ScoreProvider for MockScorer {
    fn score(&self, request: &ScoringRequest) -> Result<u32, String> {
        Ok(hash_score(&request.value))
    }
}

/// FNV-1a over the value, folded into 0..=100.
pub fn hash_score(value: &str) -> u32 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in value.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    (h % 101) as u32
}

/// Scorer that always returns one fixed score.
pub struct FixedScorer(pub u32);

impl ScoreProvider for FixedScorer {
    fn score(&self, _request: &ScoringRequest) -> Result<u32, String> {
        Ok(self.0)
    }
}

/// HTTP scorer: POSTs the rendered prompt as JSON and expects an integer
/// `score` field in the reply.
pub struct HttpScorer {
    pub base_url: String,
    pub model: String,
    pub auth_token: Option<String>,
    pub timeout: Duration,
    client: reqwest::blocking::Client,
}

impl HttpScorer {
    pub fn new(base_url: String, model: String, auth_token: Option<String>, timeout: Duration) -> Self {
        HttpScorer {
            base_url,
            model,
            auth_token,
            timeout,
            client: reqwest::blocking::Client::new(),
        }
    }
}

#[derive(Serialize)]
struct ScoreWireRequest<'a> {
    model: &'a str,
    candidate_id: &'a str,
    prompt: String,
}

#[derive(Deserialize)]
struct ScoreWireResponse {
    score: serde_json::Value,
}

impl ScoreProvider for HttpScorer {
    fn score(&self, request: &ScoringRequest) -> Result<u32, String> {
        let body = ScoreWireRequest {
            model: &self.model,
            candidate_id: &request.candidate_id,
            prompt: build_prompt(request),
        };
        let mut req = self
            .client
            .post(&self.base_url)
            .timeout(self.timeout)
            .json(&body);
        if let Some(token) = &self.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("http status {}", resp.status()));
        }
        let parsed: ScoreWireResponse = resp.json().map_err(|e| e.to_string())?;
        parsed
            .score
            .as_u64()
            .map(|v| v as u32)
            .ok_or_else(|| format!("non-integer score {}", parsed.score))
    }
}

/// One line of the append-only score log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreLogRecord {
    pub candidate_id: String,
    pub score: u8,
    pub attempt: u32,
    pub ts: String,
}

/// Batch-scoring configuration.
#[derive(Debug, Clone)]
pub struct BatchConfig {
    /// Maximum requests in flight.
    pub concurrency: usize,
    /// Retry attempts per request.
    pub max_attempts: u32,
    /// Base backoff delay, doubled per retry.
    pub backoff: Duration,
    /// Append-only log for crash-safe resume.
    pub log_path: Option<PathBuf>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            concurrency: 4,
            max_attempts: 3,
            backoff: Duration::from_millis(50),
            log_path: None,
        }
    }
}

/// Read previously logged scores so an interrupted run resumes without
/// re-scoring.
pub fn read_score_log(path: &Path) -> Result<BTreeMap<String, u8>, RefineError> {
    let mut scores = BTreeMap::new();
    if !path.exists() {
        return Ok(scores);
    }
    let text = std::fs::read_to_string(path).map_err(|e| RefineError::ScoreLog {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from a crashed run is not an error.
        if let Ok(rec) = serde_json::from_str::<ScoreLogRecord>(line) {
            scores.insert(rec.candidate_id, rec.score);
        }
    }
    Ok(scores)
}

fn now_ts() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

/// Score a batch with bounded concurrency, retrying failures with
/// exponential backoff. Responses are appended to the log as they
/// arrive; already-logged candidates are skipped.
pub fn score_batch(
    requests: &[ScoringRequest],
    provider: &dyn ScoreProvider,
    config: &BatchConfig,
) -> Result<Vec<ScoringResponse>, RefineError> {
    let mut done: BTreeMap<String, u8> = match &config.log_path {
        Some(p) => read_score_log(p)?,
        None => BTreeMap::new(),
    };
    let log = match &config.log_path {
        Some(p) => {
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| RefineError::ScoreLog {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?;
            Some(Arc::new(Mutex::new(f)))
        }
        None => None,
    };

    let pending: Vec<&ScoringRequest> = requests
        .iter()
        .filter(|r| !done.contains_key(&r.candidate_id))
        .collect();

    let (tx, rx) = mpsc::channel::<Result<ScoringResponse, RefineError>>();
    let workers = config.concurrency.max(1);
    std::thread::scope(|scope| {
        let queue = Arc::new(Mutex::new(pending.into_iter()));
        for _ in 0..workers {
            let queue = Arc::clone(&queue);
            let tx = tx.clone();
            let log = log.clone();
            scope.spawn(move || loop {
                let request = {
                    let mut q = queue.lock().unwrap();
                    q.next()
                };
                let Some(request) = request else { break };
                let outcome = score_one(request, provider, config, log.as_deref());
                if tx.send(outcome).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut responses = Vec::new();
        let mut first_err = None;
        for outcome in rx {
            match outcome {
                Ok(resp) => {
                    done.insert(resp.candidate_id.clone(), resp.sensitivity_score);
                    responses.push(resp);
                }
                Err(e) => {
                    if first_err.is_none() {
                        first_err = Some(e);
                    }
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        // Responses restored from the log for requests scored in an
        // earlier run.
        for req in requests {
            if !responses.iter().any(|r| r.candidate_id == req.candidate_id) {
                if let Some(&score) = done.get(&req.candidate_id) {
                    responses.push(ScoringResponse {
                        candidate_id: req.candidate_id.clone(),
                        sensitivity_score: score,
                        rationale: None,
                        latency_ms: 0,
                    });
                }
            }
        }
        responses.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
        Ok(responses)
    })
}

fn score_one(
    request: &ScoringRequest,
    provider: &dyn ScoreProvider,
    config: &BatchConfig,
    log: Option<&Mutex<std::fs::File>>,
) -> Result<ScoringResponse, RefineError> {
    let mut last_err = String::new();
    for attempt in 1..=config.max_attempts {
        let start = std::time::Instant::now();
        match provider.score(request) {
            Ok(score) if score <= 100 => {
                let score = score as u8;
                if let Some(log) = log {
                    let record = ScoreLogRecord {
                        candidate_id: request.candidate_id.clone(),
                        score,
                        attempt,
                        ts: now_ts(),
                    };
                    let mut f = log.lock().unwrap();
                    let line = serde_json::to_string(&record).expect("log record serializes");
                    writeln!(f, "{}", line).map_err(|e| RefineError::ScoreLog {
                        path: "<score log>".to_owned(),
                        message: e.to_string(),
                    })?;
                }
                return Ok(ScoringResponse {
                    candidate_id: request.candidate_id.clone(),
                    sensitivity_score: score,
                    rationale: None,
                    latency_ms: start.elapsed().as_millis() as u64,
                });
            }
            Ok(bad) => {
                last_err = format!("score {} outside [0,100]", bad);
            }
            Err(e) => {
                last_err = e;
            }
        }
        if attempt < config.max_attempts {
            std::thread::sleep(config.backoff * 2u32.pow(attempt - 1));
        }
    }
    Err(RefineError::ScoringFailed {
        candidate_id: request.candidate_id.clone(),
        attempts: config.max_attempts,
        message: last_err,
    })
}

/// Per-type accounting emitted by [`apply_thresholds`].
#[derive(Debug, Clone, Serialize)]
pub struct TypeThresholdStats {
    pub pii_type: PiiType,
    pub scored: usize,
    pub accepted: usize,
    pub exceed_rate: f64,
    pub below_min: bool,
}

/// Accept candidates whose score strictly exceeds their type threshold.
pub fn apply_thresholds(
    scored: Vec<PiiCandidate>,
    policy: &ThresholdPolicy,
) -> Result<(Vec<PiiCandidate>, Vec<PiiCandidate>, Vec<TypeThresholdStats>), RefineError> {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut counts: BTreeMap<PiiType, (usize, usize)> = BTreeMap::new();
    for mut cand in scored {
        let score = cand
            .sensitivity_score
            .ok_or_else(|| RefineError::Unscored(cand.candidate_id.clone()))?;
        let threshold = policy
            .per_type_threshold
            .get(&cand.pii_type)
            .copied()
            .unwrap_or(90);
        let entry = counts.entry(cand.pii_type).or_insert((0, 0));
        entry.0 += 1;
        if score > threshold {
            entry.1 += 1;
            cand.status = CandidateStatus::Accepted;
            accepted.push(cand);
        } else {
            cand.status = CandidateStatus::Rejected;
            rejected.push(cand);
        }
    }
    let report = counts
        .into_iter()
        .map(|(pii_type, (scored, acc))| TypeThresholdStats {
            pii_type,
            scored,
            accepted: acc,
            exceed_rate: if scored == 0 {
                0.0
            } else {
                acc as f64 / scored as f64
            },
            below_min: acc < policy.min_per_type,
        })
        .collect();
    Ok((accepted, rejected, report))
}
