//! Corpus ingestion, candidate merging, and dataset partitioning.
//!
//! A corpus is a line-delimited JSON file with one code-file record per
//! line. Candidates detected by multiple detectors are merged on
//! `(file_id, value)`, and the accepted set is partitioned into
//! train/validation/test splits stratified by PII type.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One source file from the corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CodeFile {
    pub file_id: String,
    pub path: String,
    pub language: String,
    pub content: String,
}

impl CodeFile {
    pub fn byte_len(&self) -> usize {
        self.content.len()
    }
}

/// The six PII categories under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiiType {
    Email,
    Key,
    IpAddress,
    Name,
    Username,
    Password,
}

impl PiiType {
    pub const ALL: [PiiType; 6] = [
        PiiType::Email,
        PiiType::Key,
        PiiType::IpAddress,
        PiiType::Name,
        PiiType::Username,
        PiiType::Password,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PiiType::Email => "email",
            PiiType::Key => "key",
            PiiType::IpAddress => "ip_address",
            PiiType::Name => "name",
            PiiType::Username => "username",
            PiiType::Password => "password",
        }
    }

    pub fn parse(s: &str) -> Option<PiiType> {
        match s {
            "email" => Some(PiiType::Email),
            "key" => Some(PiiType::Key),
            "ip_address" => Some(PiiType::IpAddress),
            "name" => Some(PiiType::Name),
            "username" => Some(PiiType::Username),
            "password" => Some(PiiType::Password),
            _ => None,
        }
    }
}

impl fmt::Display for PiiType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which detector produced a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Regex,
    ExternalNer,
}

/// Lifecycle status of a candidate. Transitions are monotone:
/// detected -> prechecked -> scored -> accepted | rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Detected,
    Prechecked,
    Scored,
    Accepted,
    Rejected,
}

/// A detected PII occurrence. `span` is a half-open byte interval into
/// the owning file's content, and `content[span] == value` always holds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PiiCandidate {
    pub candidate_id: String,
    pub file_id: String,
    pub pii_type: PiiType,
    pub value: String,
    pub span: (usize, usize),
    pub detectors: BTreeSet<Detector>,
    pub status: CandidateStatus,
    pub sensitivity_score: Option<u8>,
}

impl PiiCandidate {
    /// Deterministic id derived from the merge-stable coordinates.
    pub fn make_id(file_id: &str, pii_type: PiiType, span: (usize, usize)) -> String {
        format!("{}:{}-{}:{}", file_id, span.0, span.1, pii_type.as_str())
    }
}

/// Train/validation/test split manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus at {path}: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("split ratios {0:?} do not sum to 1.0")]
    BadRatios((f64, f64, f64)),
    #[error("cannot partition an empty accepted set")]
    EmptyAccepted,
}

/// Per-run ingestion summary.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LoadSummary {
    pub loaded: usize,
    pub skipped: usize,
    /// One message per malformed line, with its 1-based line number.
    pub warnings: Vec<String>,
}

/// Streaming reader over a line-delimited corpus file.
pub struct CorpusReader {
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    language_filter: Option<String>,
    pub summary: LoadSummary,
}

impl CorpusReader {
    pub fn open(path: &Path, language_filter: Option<&str>) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|source| CorpusError::Unreadable {
            path: path.display().to_string(),
            source,
        })?;
        Ok(CorpusReader {
            lines: BufReader::new(file).lines(),
            line_no: 0,
            language_filter: language_filter.map(str::to_owned),
            summary: LoadSummary::default(),
        })
    }
}

impl Iterator for CorpusReader {
    type Item = CodeFile;

    fn next(&mut self) -> Option<CodeFile> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.line_no += 1;
                    self.summary.skipped += 1;
                    self.summary
                        .warnings
                        .push(format!("line {}: read error: {}", self.line_no, e));
                    continue;
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CodeFile>(&line) {
                Ok(record) => {
                    if let Some(filter) = &self.language_filter {
                        if &record.language != filter {
                            continue;
                        }
                    }
                    self.summary.loaded += 1;
                    return Some(record);
                }
                Err(e) => {
                    self.summary.skipped += 1;
                    self.summary
                        .warnings
                        .push(format!("line {}: malformed record: {}", self.line_no, e));
                }
            }
        }
    }
}

/// Load a whole corpus into memory, returning the records plus a summary
/// of skipped lines.
pub fn load_corpus(
    path: &Path,
    language_filter: Option<&str>,
) -> Result<(Vec<CodeFile>, LoadSummary), CorpusError> {
    let mut reader = CorpusReader::open(path, language_filter)?;
    let files: Vec<CodeFile> = reader.by_ref().collect();
    Ok((files, reader.summary))
}

/// Convert a directory tree of source files into the line-delimited
/// corpus format. File ids are the relative paths.
pub fn ingest_directory(
    root: &Path,
    language: &str,
    extension: &str,
) -> Result<Vec<CodeFile>, CorpusError> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| CorpusError::Unreadable {
            path: root.display().to_string(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        if entry.path().extension().and_then(|e| e.to_str()) != Some(extension) {
            continue;
        }
        let content = match std::fs::read_to_string(entry.path()) {
            Ok(c) => c,
            Err(_) => continue, // non-UTF-8 files are not corpus material
        };
        let rel = entry
            .path()
            .strip_prefix(root)
            .unwrap_or(entry.path())
            .display()
            .to_string();
        files.push(CodeFile {
            file_id: rel.clone(),
            path: rel,
            language: language.to_owned(),
            content,
        });
    }
    Ok(files)
}

/// Merge candidates that share `(file_id, value)`: the detector sets are
/// unioned and the earliest span is kept. Output is ordered by
/// `(file_id, byte_start)`.
pub fn merge_candidates(candidates: Vec<PiiCandidate>) -> Vec<PiiCandidate> {
    let mut merged: BTreeMap<(String, String), PiiCandidate> = BTreeMap::new();
    for cand in candidates {
        let key = (cand.file_id.clone(), cand.value.clone());
        match merged.get_mut(&key) {
            Some(existing) => {
                existing.detectors.extend(cand.detectors.iter().copied());
                if cand.span.0 < existing.span.0 {
                    existing.span = cand.span;
                    existing.candidate_id =
                        PiiCandidate::make_id(&existing.file_id, existing.pii_type, existing.span);
                }
            }
            None => {
                let mut cand = cand;
                cand.candidate_id =
                    PiiCandidate::make_id(&cand.file_id, cand.pii_type, cand.span);
                merged.insert(key, cand);
            }
        }
    }
    let mut out: Vec<PiiCandidate> = merged.into_values().collect();
    out.sort_by(|a, b| (&a.file_id, a.span.0).cmp(&(&b.file_id, b.span.0)));
    out
}

/// Stratified train/validation/test partition. Deterministic for a given
/// seed; global validation/test sizes are `floor(n * ratio)` with the
/// remainder going to train, and per-type counts stay within one
/// instance of exact proportionality in every split.
pub fn partition(
    accepted: &[PiiCandidate],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    let (r_train, r_val, r_test) = ratios;
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    if accepted.is_empty() {
        return Err(CorpusError::EmptyAccepted);
    }
    let n = accepted.len();
    let n_val = (n as f64 * r_val).floor() as usize;
    let n_test = (n as f64 * r_test).floor() as usize;

    // Group ids per type, shuffled with a per-type substream.
    let mut by_type: BTreeMap<PiiType, Vec<String>> = BTreeMap::new();
    for cand in accepted {
        by_type
            .entry(cand.pii_type)
            .or_default()
            .push(cand.candidate_id.clone());
    }
    for (ty, ids) in by_type.iter_mut() {
        ids.sort();
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ ((*ty as u64 + 1) << 32));
        ids.shuffle(&mut rng);
    }

    let types: Vec<PiiType> = by_type.keys().copied().collect();
    let counts: Vec<usize> = types.iter().map(|t| by_type[t].len()).collect();
    let val_alloc = apportion(&counts, n_val);
    let mut test_alloc = apportion(&counts, n_test);
    // Test allocations draw from what validation left behind.
    for i in 0..types.len() {
        let avail = counts[i] - val_alloc[i];
        if test_alloc[i] > avail {
            let overflow = test_alloc[i] - avail;
            test_alloc[i] = avail;
            // push overflow onto the type with the most remaining slack
            for _ in 0..overflow {
                if let Some(j) = (0..types.len())
                    .filter(|&j| counts[j] - val_alloc[j] - test_alloc[j] > 0)
                    .max_by_key(|&j| counts[j] - val_alloc[j] - test_alloc[j])
                {
                    test_alloc[j] += 1;
                }
            }
        }
    }

    // Validation and test counts are within 1 of exact proportionality by
    // construction; the train remainder can drift to 2 when both roundings
    // landed the same way. Shift single units between types until every
    // split is within 1.
    let mut val_alloc = val_alloc;
    loop {
        let train_dev = |i: usize, va: &[usize], ta: &[usize]| -> f64 {
            let n_train = n - n_val - n_test;
            (counts[i] - va[i] - ta[i]) as f64 - counts[i] as f64 * n_train as f64 / n as f64
        };
        let over = (0..types.len())
            .find(|&i| train_dev(i, &val_alloc, &test_alloc) > 1.0 + 1e-9);
        let under = (0..types.len())
            .find(|&i| train_dev(i, &val_alloc, &test_alloc) < -1.0 - 1e-9);
        match (over, under) {
            (Some(i), _) => {
                // type i has too many train rows: move one into validation
                // (or test), compensating with the most train-starved type
                let j = (0..types.len())
                    .filter(|&j| {
                        j != i && val_alloc[j] > 0 && train_dev(j, &val_alloc, &test_alloc) < 0.0
                    })
                    .min_by(|&a, &b| {
                        train_dev(a, &val_alloc, &test_alloc)
                            .partial_cmp(&train_dev(b, &val_alloc, &test_alloc))
                            .unwrap()
                    });
                match j {
                    Some(j) => {
                        val_alloc[i] += 1;
                        val_alloc[j] -= 1;
                    }
                    None => break,
                }
            }
            (None, Some(i)) => {
                // type i has too few train rows: pull one back from its
                // validation or test allocation and hand the slot to the
                // most train-heavy type
                let j = (0..types.len())
                    .filter(|&j| {
                        j != i
                            && counts[j] > val_alloc[j] + test_alloc[j]
                            && train_dev(j, &val_alloc, &test_alloc) > 0.0
                    })
                    .max_by(|&a, &b| {
                        train_dev(a, &val_alloc, &test_alloc)
                            .partial_cmp(&train_dev(b, &val_alloc, &test_alloc))
                            .unwrap()
                    });
                match j {
                    Some(j) if val_alloc[i] > 0 => {
                        val_alloc[i] -= 1;
                        val_alloc[j] += 1;
                    }
                    Some(j) if test_alloc[i] > 0 => {
                        test_alloc[i] -= 1;
                        test_alloc[j] += 1;
                    }
                    _ => break,
                }
            }
            (None, None) => break,
        }
    }

    let mut split = DatasetSplit {
        seed,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (i, ty) in types.iter().enumerate() {
        let ids = &by_type[ty];
        let (v, t) = (val_alloc[i], test_alloc[i]);
        split.validation.extend_from_slice(&ids[..v]);
        split.test.extend_from_slice(&ids[v..v + t]);
        split.train.extend_from_slice(&ids[v + t..]);
    }
    split.train.sort();
    split.validation.sort();
    split.test.sort();
    Ok(split)
}

/// Largest-remainder apportionment of `total` slots across groups with
/// the given sizes, proportional to size.
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 || total == 0 {
        return vec![0; sizes.len()];
    }
    let quotas: Vec<f64> = sizes
        .iter()
        .map(|&s| s as f64 * total as f64 / n as f64)
        .collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut assigned: usize = alloc.iter().sum();
    // Distribute leftovers by descending fractional part; ties break by index.
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut i = 0;
    while assigned < total {
        let g = order[i % order.len()];
        if alloc[g] < sizes[g] {
            alloc[g] += 1;
            assigned += 1;
        }
        i += 1;
    }
    alloc
}
