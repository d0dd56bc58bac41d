//! Expert-evaluation support: finite-population sample sizing,
//! proportion confidence intervals, and annotation sheet export/import.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::corpus::{CodeFile, PiiCandidate, PiiType};

/// A computed sampling plan.
#[derive(Debug, Clone, Serialize)]
pub struct SamplingPlan {
    pub population_n: usize,
    pub confidence: f64,
    pub margin: f64,
    pub expected_p: f64,
    pub required_n: usize,
}

/// One expert rating on the three-point scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub candidate_id: String,
    pub annotator_id: String,
    /// 1 = Disagree, 2 = Uncertain, 3 = Agree.
    pub rating: u8,
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("not enough candidates of type {0}: have {1}, need {2}")]
    Insufficient(PiiType, usize, usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: rating {rating} outside 1..=3")]
    BadRating { row: usize, rating: u8 },
}

/// Two-sided normal critical value for the given confidence level.
pub fn z_value(confidence: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - (1.0 - confidence) / 2.0)
}

/// Minimum sample size with finite-population correction:
/// `ceil(n0 / (1 + (n0 - 1) / N))` where `n0 = z^2 p (1-p) / d^2`.
pub fn sample_size(
    population_n: usize,
    confidence: f64,
    margin: f64,
    expected_p: f64,
) -> Result<usize, AuditError> {
    if margin <= 0.0 || margin >= 1.0 {
        return Err(AuditError::InvalidInput(format!("margin {}", margin)));
    }
    if expected_p <= 0.0 || expected_p >= 1.0 {
        return Err(AuditError::InvalidInput(format!("expected_p {}", expected_p)));
    }
    if confidence <= 0.0 || confidence >= 1.0 {
        return Err(AuditError::InvalidInput(format!("confidence {}", confidence)));
    }
    if population_n == 0 {
        return Err(AuditError::InvalidInput("population_n 0".to_owned()));
    }
    let z = z_value(confidence);
    let n0 = z * z * expected_p * (1.0 - expected_p) / (margin * margin);
    let corrected = n0 / (1.0 + (n0 - 1.0) / population_n as f64);
    Ok((corrected.ceil() as usize).min(population_n))
}

/// Interval method for [`proportion_ci`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// Normal approximation with finite-population correction (default).
    NormalFpc,
    /// Wilson score interval with finite-population correction.
    WilsonFpc,
}

/// Confidence interval for a sample proportion drawn without replacement
/// from a finite population, clipped to [0, 1].
pub fn proportion_ci(
    successes: usize,
    n: usize,
    population_n: usize,
    confidence: f64,
    method: CiMethod,
) -> Result<(f64, f64), AuditError> {
    if n == 0 {
        return Err(AuditError::InvalidInput("n = 0".to_owned()));
    }
    if successes > n || n > population_n {
        return Err(AuditError::InvalidInput(format!(
            "need successes <= n <= N, got {} / {} / {}",
            successes, n, population_n
        )));
    }
    let z = z_value(confidence);
    let p_hat = successes as f64 / n as f64;
    let fpc = if population_n > 1 {
        ((population_n - n) as f64 / (population_n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let (low, high) = match method {
        CiMethod::NormalFpc => {
            let se = (p_hat * (1.0 - p_hat) / n as f64).sqrt() * fpc;
            (p_hat - z * se, p_hat + z * se)
        }
        CiMethod::WilsonFpc => {
            let nf = n as f64;
            let z2 = z * z;
            let center = (p_hat + z2 / (2.0 * nf)) / (1.0 + z2 / nf);
            let half = (z / (1.0 + z2 / nf))
                * ((p_hat * (1.0 - p_hat) / nf + z2 / (4.0 * nf * nf)).sqrt())
                * fpc;
            (center - half, center + half)
        }
    };
    Ok((low.clamp(0.0, 1.0), high.clamp(0.0, 1.0)))
}

/// One row of the exported annotation sheet.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SheetRow {
    pub candidate_id: String,
    pub pii_type: String,
    pub value: String,
    pub context: String,
    pub rating: String,
}

/// Question shown to annotators, one per sheet.
pub const ANNOTATION_QUESTION: &str =
    "Is the highlighted PII value in the code file considered sensitive information?";

/// Export a deterministic stratified annotation sample as CSV. The
/// rating column is left blank for the annotator.
pub fn export_annotation_sheet(
    candidates: &[PiiCandidate],
    files: &BTreeMap<String, CodeFile>,
    per_type_n: usize,
    seed: u64,
    out: &Path,
) -> Result<usize, AuditError> {
    let mut by_type: BTreeMap<PiiType, Vec<&PiiCandidate>> = BTreeMap::new();
    for cand in candidates {
        by_type.entry(cand.pii_type).or_default().push(cand);
    }
    let mut rows: Vec<SheetRow> = Vec::new();
    for (ty, mut cands) in by_type {
        if cands.len() < per_type_n {
            return Err(AuditError::Insufficient(ty, cands.len(), per_type_n));
        }
        cands.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ ((ty as u64 + 1) << 40));
        cands.shuffle(&mut rng);
        for cand in cands.into_iter().take(per_type_n) {
            let context = files
                .get(&cand.file_id)
                .map(|f| highlight(&f.content, cand.span))
                .unwrap_or_default();
            rows.push(SheetRow {
                candidate_id: cand.candidate_id.clone(),
                pii_type: cand.pii_type.to_string(),
                value: cand.value.clone(),
                context,
                rating: String::new(),
            });
        }
    }
    let mut writer = csv::Writer::from_path(out)?;
    // The question rides along as a comment-style header row.
    writer.write_record(["# question", ANNOTATION_QUESTION, "", "", ""])?;
    writer.write_record(["candidate_id", "pii_type", "value", "context", "rating"])?;
    let count = rows.len();
    for row in rows {
        writer.write_record([
            &row.candidate_id,
            &row.pii_type,
            &row.value,
            &row.context,
            &row.rating,
        ])?;
    }
    writer.flush()?;
    Ok(count)
}

/// Surround the highlighted span with markers inside its full context.
fn highlight(content: &str, span: (usize, usize)) -> String {
    let (start, end) = span;
    if end > content.len() || start > end {
        return content.to_owned();
    }
    format!(
        "{}>>>{}<<<{}",
        &content[..start],
        &content[start..end],
        &content[end..]
    )
}

/// Import a filled annotation sheet, validating ratings.
pub fn import_annotations(
    path: &Path,
    annotator_id: &str,
) -> Result<Vec<AnnotationRecord>, AuditError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let first = record.get(0).unwrap_or_default();
        if first.starts_with('#') || first == "candidate_id" {
            continue;
        }
        let rating_str = record.get(4).unwrap_or_default().trim();
        if rating_str.is_empty() {
            continue;
        }
        let rating: u8 = rating_str
            .parse()
            .map_err(|_| AuditError::BadRating { row: i + 1, rating: 0 })?;
        if !(1..=3).contains(&rating) {
            return Err(AuditError::BadRating { row: i + 1, rating });
        }
        out.push(AnnotationRecord {
            candidate_id: first.to_owned(),
            annotator_id: annotator_id.to_owned(),
            rating,
        });
    }
    Ok(out)
}

/// Per-type share of "Agree" (rating 3) responses.
pub fn agreement_by_type(
    records: &[AnnotationRecord],
    type_of: &BTreeMap<String, PiiType>,
) -> BTreeMap<PiiType, f64> {
    let mut counts: BTreeMap<PiiType, (usize, usize)> = BTreeMap::new();
    for rec in records {
        if let Some(&ty) = type_of.get(&rec.candidate_id) {
            let entry = counts.entry(ty).or_insert((0, 0));
            entry.0 += 1;
            if rec.rating == 3 {
                entry.1 += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(ty, (total, agree))| (ty, agree as f64 / total as f64))
        .collect()
}
