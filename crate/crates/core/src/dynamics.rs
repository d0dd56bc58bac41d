//! Training-dynamics cartography: per-instance confidence and
//! variability from per-epoch probability logs, quantile-based
//! easy/ambiguous/hard classification, and dataset-map export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PiiType;

/// Probabilities the model assigned to the ground-truth PII tokens of
/// one instance at the end of one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochProbLog {
    pub candidate_id: String,
    pub epoch: usize,
    pub token_probs: Vec<f64>,
}

/// Difficulty region of the dataset map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Ambiguous,
    Hard,
}

impl Difficulty {
    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Ambiguous => "ambiguous",
            Difficulty::Hard => "hard",
        }
    }
}

/// Per-instance dynamics summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub candidate_id: String,
    pub confidence: f64,
    pub variability: f64,
    pub label: Difficulty,
}

/// How multi-token instance probabilities are pooled per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Length-normalized sequence likelihood (default).
    GeometricMean,
    ArithmeticMean,
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("empty token probability list")]
    EmptyProbs,
    #[error("token probability {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("instance {candidate_id} is missing epoch {epoch}")]
    MissingEpoch { candidate_id: String, epoch: usize },
    #[error("need at least 4 records to classify, got {0}")]
    TooFewRecords(usize),
    #[error("cannot read probability log {path}: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Pool per-token probabilities into one instance probability.
pub fn instance_prob(token_probs: &[f64], pooling: Pooling) -> Result<f64, DynamicsError> {
    if token_probs.is_empty() {
        return Err(DynamicsError::EmptyProbs);
    }
    for &p in token_probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(DynamicsError::OutOfRange(p));
        }
    }
    let n = token_probs.len() as f64;
    Ok(match pooling {
        Pooling::GeometricMean => {
            if token_probs.iter().any(|&p| p == 0.0) {
                0.0
            } else {
                (token_probs.iter().map(|p| p.ln()).sum::<f64>() / n).exp()
            }
        }
        Pooling::ArithmeticMean => token_probs.iter().sum::<f64>() / n,
    })
}

/// Confidence (mean over epochs) and variability (population standard
/// deviation, divisor E) of the per-epoch instance probabilities.
pub fn compute_dynamics(
    logs: &[EpochProbLog],
    epochs: usize,
    pooling: Pooling,
) -> Result<Vec<(String, f64, f64)>, DynamicsError> {
    let mut by_instance: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for log in logs {
        let p = instance_prob(&log.token_probs, pooling)?;
        by_instance
            .entry(log.candidate_id.clone())
            .or_default()
            .insert(log.epoch, p);
    }
    let mut out = Vec::with_capacity(by_instance.len());
    for (candidate_id, series) in by_instance {
        for epoch in 1..=epochs {
            if !series.contains_key(&epoch) {
                return Err(DynamicsError::MissingEpoch { candidate_id, epoch });
            }
        }
        let probs: Vec<f64> = (1..=epochs).map(|e| series[&e]).collect();
        let e = epochs as f64;
        let mean = probs.iter().sum::<f64>() / e;
        let var = probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / e;
        out.push((candidate_id, mean, var.sqrt()));
    }
    Ok(out)
}

/// Linearly interpolated empirical quantile (the common "type 7" rule).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Classify instances by the quantile rules: easy when confidence is
/// above its 75th percentile and variability below its 25th; hard when
/// both confidence and variability are below their 25th percentiles;
/// ambiguous when variability is above its 75th percentile. Remaining
/// instances take the label of the region reached along whichever axis
/// is further from its median in IQR-normalized units.
pub fn classify_difficulty(
    records: &[(String, f64, f64)],
) -> Result<Vec<DynamicsRecord>, DynamicsError> {
    if records.len() < 4 {
        return Err(DynamicsError::TooFewRecords(records.len()));
    }
    let mut confs: Vec<f64> = records.iter().map(|r| r.1).collect();
    let mut vars: Vec<f64> = records.iter().map(|r| r.2).collect();
    confs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vars.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let conf_p25 = quantile(&confs, 0.25);
    let conf_p50 = quantile(&confs, 0.50);
    let conf_p75 = quantile(&confs, 0.75);
    let var_p25 = quantile(&vars, 0.25);
    let var_p50 = quantile(&vars, 0.50);
    let var_p75 = quantile(&vars, 0.75);
    let conf_iqr = (conf_p75 - conf_p25).max(f64::EPSILON);
    let var_iqr = (var_p75 - var_p25).max(f64::EPSILON);

    let out = records
        .iter()
        .map(|(id, conf, var)| {
            let label = if *conf > conf_p75 && *var < var_p25 {
                Difficulty::Easy
            } else if *conf < conf_p25 && *var < var_p25 {
                Difficulty::Hard
            } else if *var > var_p75 {
                Difficulty::Ambiguous
            } else {
                // Between thresholds: the decisive axis is the one with
                // the larger normalized distance from its median.
                let conf_dist = (conf - conf_p50).abs() / conf_iqr;
                let var_dist = (var - var_p50).abs() / var_iqr;
                // Ties (within fp noise) resolve to the confidence axis
                // so the rule is stable under data shifts.
                if var_dist > conf_dist + 1e-9 {
                    if *var >= var_p50 {
                        Difficulty::Ambiguous
                    } else if *conf >= conf_p50 {
                        Difficulty::Easy
                    } else {
                        Difficulty::Hard
                    }
                } else if *conf >= conf_p50 {
                    Difficulty::Easy
                } else {
                    Difficulty::Hard
                }
            };
            DynamicsRecord {
                candidate_id: id.clone(),
                confidence: *conf,
                variability: *var,
                label,
            }
        })
        .collect();
    Ok(out)
}

/// Read a line-delimited probability log.
pub fn read_prob_log(path: &Path) -> Result<Vec<EpochProbLog>, DynamicsError> {
    let f = File::open(path).map_err(|source| DynamicsError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(rec) = serde_json::from_str::<EpochProbLog>(&line) {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Map-export options.
#[derive(Debug, Clone)]
pub struct MapExportConfig {
    /// Points above this cap are down-sampled deterministically.
    pub point_cap: usize,
    /// Bin width for the confidence/variability histograms.
    pub bin_width: f64,
    /// Jitter seed for coincident points in the scatter.
    pub seed: u64,
}

impl Default for MapExportConfig {
    fn default() -> Self {
        MapExportConfig {
            point_cap: 5000,
            bin_width: 0.1,
            seed: 0,
        }
    }
}

/// Histogram of one metric, bins covering [0, 1].
pub fn binned_distribution(values: &[f64], bin_width: f64) -> Vec<usize> {
    let bins = (1.0 / bin_width).round() as usize;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = ((v / bin_width).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
}

/// Emit the dataset map: a CSV of records, an SVG scatter
/// (x = variability, y = confidence, color = type), and binned
/// confidence/variability distributions.
pub fn export_map(
    records: &[DynamicsRecord],
    type_of: &BTreeMap<String, PiiType>,
    config: &MapExportConfig,
    out_dir: &Path,
    tag: &str,
) -> Result<(), DynamicsError> {
    std::fs::create_dir_all(out_dir)?;

    let csv_path = out_dir.join(format!("map-{}.csv", tag));
    let mut csv = File::create(&csv_path)?;
    writeln!(csv, "candidate_id,pii_type,confidence,variability,label")?;
    for rec in records {
        let ty = type_of
            .get(&rec.candidate_id)
            .map(|t| t.as_str())
            .unwrap_or("unknown");
        writeln!(
            csv,
            "{},{},{:.6},{:.6},{}",
            rec.candidate_id,
            ty,
            rec.confidence,
            rec.variability,
            rec.label.as_str()
        )?;
    }

    // Deterministic down-sample: stable stride over the sorted records.
    let mut sorted: Vec<&DynamicsRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
    let plotted: Vec<&DynamicsRecord> = if sorted.len() > config.point_cap {
        let stride = sorted.len() as f64 / config.point_cap as f64;
        (0..config.point_cap)
            .map(|i| sorted[(i as f64 * stride) as usize])
            .collect()
    } else {
        sorted
    };

    let svg_path = out_dir.join(format!("map-{}.svg", tag));
    let mut svg = File::create(&svg_path)?;
    let (w, h, margin) = (640.0, 480.0, 40.0);
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )?;
    writeln!(
        svg,
        r#"<rect width="{w}" height="{h}" fill="white"/><text x="{}" y="{}" font-size="12">variability</text><text x="8" y="{}" font-size="12" transform="rotate(-90 12 {})">confidence</text>"#,
        w / 2.0 - 30.0,
        h - 8.0,
        h / 2.0,
        h / 2.0
    )?;
    let max_var = records
        .iter()
        .map(|r| r.variability)
        .fold(0.5f64, f64::max);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut seen = std::collections::HashSet::new();
    for rec in plotted {
        let mut x = margin + (rec.variability / max_var) * (w - 2.0 * margin);
        let mut y = h - margin - rec.confidence * (h - 2.0 * margin);
        let key = (x.to_bits(), y.to_bits());
        if !seen.insert(key) {
            // coincident point: seeded jitter keeps the plot readable
            x += rng.gen_range(-2.0..2.0);
            y += rng.gen_range(-2.0..2.0);
        }
        let color = type_of
            .get(&rec.candidate_id)
            .map(type_color)
            .unwrap_or("#888888");
        writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#, x, y, color)?;
    }
    writeln!(svg, "</svg>")?;

    let bins_path = out_dir.join(format!("bins-{}.csv", tag));
    let mut bins = File::create(&bins_path)?;
    writeln!(bins, "metric,bin_start,bin_end,count")?;
    let confs: Vec<f64> = records.iter().map(|r| r.confidence).collect();
    let vars: Vec<f64> = records.iter().map(|r| r.variability).collect();
    for (metric, values) in [("confidence", confs), ("variability", vars)] {
        for (i, count) in binned_distribution(&values, config.bin_width).iter().enumerate() {
            writeln!(
                bins,
                "{},{:.3},{:.3},{}",
                metric,
                i as f64 * config.bin_width,
                (i + 1) as f64 * config.bin_width,
                count
            )?;
        }
    }
    Ok(())
}

fn type_color(ty: &PiiType) -> &'static str {
    match ty {
        PiiType::Email => "#1f77b4",
        PiiType::Key => "#d62728",
        PiiType::IpAddress => "#2ca02c",
        PiiType::Name => "#9467bd",
        PiiType::Username => "#ff7f0e",
        PiiType::Password => "#8c564b",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_prob_cases() {
        assert_eq!(instance_prob(&[0.5], Pooling::GeometricMean).unwrap(), 0.5);
        assert_eq!(
            instance_prob(&[1.0, 1.0, 1.0], Pooling::GeometricMean).unwrap(),
            1.0
        );
        let p = instance_prob(&[0.25, 1.0], Pooling::GeometricMean).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert!(instance_prob(&[], Pooling::GeometricMean).is_err());
    }

    fn logs(id: &str, probs: &[f64]) -> Vec<EpochProbLog> {
        probs
            .iter()
            .enumerate()
            .map(|(i, &p)| EpochProbLog {
                candidate_id: id.to_owned(),
                epoch: i + 1,
                token_probs: vec![p],
            })
            .collect()
    }

    #[test]
    fn dynamics_direct_arithmetic() {
        let out = compute_dynamics(&logs("a", &[0.8, 0.9, 1.0]), 3, Pooling::GeometricMean).unwrap();
        let (_, conf, var) = &out[0];
        assert!((conf - 0.9).abs() < 1e-12);
        assert!((var - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dynamics_constant_series() {
        let out = compute_dynamics(&logs("a", &[0.4; 10]), 10, Pooling::GeometricMean).unwrap();
        assert!((out[0].1 - 0.4).abs() < 1e-12);
        assert!(out[0].2.abs() < 1e-12);
    }

    #[test]
    fn dynamics_two_point_spread() {
        let out = compute_dynamics(&logs("a", &[0.0, 1.0]), 2, Pooling::GeometricMean).unwrap();
        assert!((out[0].1 - 0.5).abs() < 1e-12);
        assert!((out[0].2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dynamics_missing_epoch_names_instance() {
        let mut l = logs("inst-7", &[0.5, 0.5, 0.5]);
        l.remove(1);
        match compute_dynamics(&l, 3, Pooling::GeometricMean) {
            Err(DynamicsError::MissingEpoch { candidate_id, epoch }) => {
                assert_eq!(candidate_id, "inst-7");
                assert_eq!(epoch, 2);
            }
            other => panic!("unexpected {:?}", other),
        }
    }

    fn grid_records(n: usize) -> Vec<(String, f64, f64)> {
        (0..n)
            .map(|i| {
                let conf = (i % 10) as f64 / 9.0;
                let var = (i / 10) as f64 / 19.0 * 0.5;
                (format!("r{}", i), conf, var)
            })
            .collect()
    }

    #[test]
    fn extremes_classified() {
        let mut records = grid_records(100);
        records.push(("top".into(), 1.0, 0.0));
        records.push(("bottom".into(), 0.0, 0.0));
        let labels = classify_difficulty(&records).unwrap();
        let get = |id: &str| labels.iter().find(|r| r.candidate_id == id).unwrap().label;
        assert_eq!(get("top"), Difficulty::Easy);
        assert_eq!(get("bottom"), Difficulty::Hard);
    }

    #[test]
    fn every_record_labeled_once() {
        let labels = classify_difficulty(&grid_records(200)).unwrap();
        assert_eq!(labels.len(), 200);
    }

    #[test]
    fn too_few_records() {
        assert!(classify_difficulty(&grid_records(3)).is_err());
    }

    #[test]
    fn shift_invariance_of_partition() {
        let records = grid_records(100);
        let shifted: Vec<_> = records
            .iter()
            .map(|(id, c, v)| (id.clone(), c + 3.0, *v))
            .collect();
        let a = classify_difficulty(&records).unwrap();
        let b = classify_difficulty(&shifted).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.label, y.label, "{}", x.candidate_id);
        }
    }

    #[test]
    fn bins_partition_count() {
        let values: Vec<f64> = (0..37).map(|i| i as f64 / 36.0).collect();
        let bins = binned_distribution(&values, 0.1);
        assert_eq!(bins.len(), 10);
        assert_eq!(bins.iter().sum::<usize>(), 37);
    }

    #[test]
    fn export_map_writes_files() {
        let records = classify_difficulty(&grid_records(50)).unwrap();
        let type_of: BTreeMap<String, PiiType> = records
            .iter()
            .map(|r| (r.candidate_id.clone(), PiiType::Email))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        export_map(&records, &type_of, &MapExportConfig::default(), dir.path(), "t").unwrap();
        let csv = std::fs::read_to_string(dir.path().join("map-t.csv")).unwrap();
        assert_eq!(csv.lines().count(), 51);
        assert!(dir.path().join("map-t.svg").exists());
        // determinism of the rendered SVG
        let dir2 = tempfile::tempdir().unwrap();
        export_map(&records, &type_of, &MapExportConfig::default(), dir2.path(), "t").unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("map-t.svg")).unwrap(),
            std::fs::read(dir2.path().join("map-t.svg")).unwrap()
        );
    }
}
