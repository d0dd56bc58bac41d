//! Pipeline orchestration: stage-per-subcommand with file handoffs, a
//! single TOML config, and a manifest per artifact.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attack::{
    self, AttackQuery, AttackResult, CompletionProvider, EchoProvider, HttpFimProvider,
    OfflineProvider,
};
use crate::audit;
use crate::causal::{self, CausalUnit, Estimator, Refutation};
use crate::corpus::{self, CandidateStatus, CodeFile, PiiCandidate, PiiType};
use crate::detect;
use crate::dynamics::{self, Difficulty, DynamicsRecord, MapExportConfig, Pooling};
use crate::metrics;
use crate::precheck::{self, PrecheckLists};
use crate::refine::{self, BatchConfig, ScoreProvider, ThresholdPolicy};

#[derive(Parser, Debug)]
#[command(name = "piiscope", version, about = "PII curation and leakage analysis pipeline")]
pub struct Cli {
    /// Pipeline config file.
    #[arg(long, global = true, default_value = "piiscope.toml")]
    pub config: PathBuf,
    /// Override every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override worker parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Detect PII candidates in the corpus with regex rules (plus
    /// optional external detections).
    Scan,
    /// Apply the rule-based prechecks to scanned candidates.
    Precheck,
    /// Score prechecked candidates for sensitivity and apply thresholds.
    Refine,
    /// Partition accepted candidates into train/validation/test.
    Split,
    /// Build the expert-audit sampling plan and annotation sheet.
    Audit,
    /// Extract structural code features from the corpus.
    Features,
    /// Compute per-instance training dynamics from a probability log.
    Dynamics,
    /// Render the dataset map from computed dynamics.
    Map,
    /// Construct masked extraction queries for accepted candidates.
    AttackBuild,
    /// Fetch completions and evaluate leakage.
    AttackEval,
    /// Estimate the difficulty-to-leakage treatment effect.
    CausalEstimate,
    /// Run the refutation suite against the causal estimate.
    CausalRefute,
    /// Render the leakage and causal summary tables.
    Report,
    /// Refresh the bundled TLD snapshot from the IANA registry.
    TldsRefresh,
    /// Write the built-in detection rule set to a rules file.
    RulesExport {
        /// Destination path.
        #[arg(long, default_value = "rules.json")]
        path: PathBuf,
    },
}

// ---------------------------------------------------------------------
// Config

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub rules: RulesConfig,
    pub lists: ListsConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub causal: CausalConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CorpusConfig {
    pub path: PathBuf,
    pub language: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RulesConfig {
    /// Rule file; the built-in default rule set is used when absent.
    pub path: Option<PathBuf>,
    /// Optional external detections to merge during `scan`.
    pub external: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ListsConfig {
    pub tlds: PathBuf,
    pub weak_passwords: PathBuf,
    pub false_usernames: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    /// `mock`, `fixed`, or `http`.
    pub provider: String,
    pub endpoint: String,
    pub model: String,
    pub fixed_score: u32,
    pub concurrency: usize,
    pub max_attempts: u32,
    pub timeout_secs: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            provider: "mock".into(),
            endpoint: String::new(),
            model: String::new(),
            fixed_score: 0,
            concurrency: 4,
            max_attempts: 3,
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub email: u8,
    pub key: u8,
    pub ip_address: u8,
    pub name: u8,
    pub password: u8,
    pub username: u8,
    pub min_per_type: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            email: 90,
            key: 90,
            ip_address: 95,
            name: 90,
            password: 95,
            username: 90,
            min_per_type: 1500,
        }
    }
}

impl ThresholdConfig {
    fn policy(&self) -> ThresholdPolicy {
        let mut per_type_threshold = BTreeMap::new();
        per_type_threshold.insert(PiiType::Email, self.email);
        per_type_threshold.insert(PiiType::Key, self.key);
        per_type_threshold.insert(PiiType::IpAddress, self.ip_address);
        per_type_threshold.insert(PiiType::Name, self.name);
        per_type_threshold.insert(PiiType::Password, self.password);
        per_type_threshold.insert(PiiType::Username, self.username);
        ThresholdPolicy {
            per_type_threshold,
            min_per_type: self.min_per_type,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub confidence: f64,
    pub margin: f64,
    pub expected_p: f64,
    pub per_type_n: usize,
    pub seed: u64,
    /// Completed annotation sheet to import, if any.
    pub annotations: Option<PathBuf>,
    pub annotator_id: String,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            confidence: 0.95,
            margin: 0.05,
            expected_p: 0.9,
            per_type_n: 25,
            seed: 0,
            annotations: None,
            annotator_id: "annotator-1".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub prob_log: Option<PathBuf>,
    pub epochs: usize,
    /// `geometric_mean` or `arithmetic_mean`.
    pub pooling: String,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            prob_log: None,
            epochs: 10,
            pooling: "geometric_mean".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub window: usize,
    pub attempts: usize,
    /// `offline`, `echo`, or `http`.
    pub provider: String,
    pub completions: Option<PathBuf>,
    pub endpoint: String,
    pub model: String,
    pub sentinel_template: String,
    pub seed: u64,
    pub timeout_secs: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            window: attack::DEFAULT_WINDOW,
            attempts: 1,
            provider: "offline".into(),
            completions: None,
            endpoint: String::new(),
            model: "model".into(),
            sentinel_template: "<PRE>{prefix}<SUF>{suffix}<MID>".into(),
            seed: 0,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct CausalConfig {
    /// `regression_adjustment` or `ipw`.
    pub estimator: String,
    /// Difficulty label treated as the intervention.
    pub treatment_label: String,
    pub refutation_repetitions: usize,
    pub seed: u64,
}

impl Default for CausalConfig {
    fn default() -> Self {
        CausalConfig {
            estimator: "regression_adjustment".into(),
            treatment_label: "hard".into(),
            refutation_repetitions: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        config.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(config)
    }

    /// Paths in the config resolve relative to the config file itself.
    fn validate(&self, _base: &Path) -> Result<()> {
        for (label, path) in [
            ("corpus.path", Some(&self.corpus.path)),
            ("lists.tlds", Some(&self.lists.tlds)),
            ("lists.weak_passwords", Some(&self.lists.weak_passwords)),
            ("lists.false_usernames", Some(&self.lists.false_usernames)),
            ("rules.path", self.rules.path.as_ref()),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    bail!("config {} refers to missing path {}", label, p.display());
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Manifests and artifact plumbing

/// Everything needed to re-run a stage exactly. Deliberately excludes
/// wall-clock time so reruns are byte-identical.
#[derive(Debug, Serialize)]
struct Manifest {
    #[serde(skip)]
    out_dir: PathBuf,
    stage: String,
    version: String,
    inputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    counts: BTreeMap<String, u64>,
}

impl Manifest {
    fn new(stage: &str, out_dir: &Path) -> Self {
        Manifest {
            out_dir: out_dir.to_owned(),
            stage: stage.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            inputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            counts: BTreeMap::new(),
        }
    }

    /// Artifacts inside the output directory are recorded by relative
    /// name so reruns into different directories stay byte-identical.
    fn input(&mut self, key: &str, path: &Path) -> &mut Self {
        let shown = path
            .strip_prefix(&self.out_dir)
            .unwrap_or(path)
            .display()
            .to_string();
        self.inputs.insert(key.to_owned(), shown);
        self
    }

    fn seed(&mut self, key: &str, value: u64) -> &mut Self {
        self.seeds.insert(key.to_owned(), value);
        self
    }

    fn count(&mut self, key: &str, value: usize) -> &mut Self {
        self.counts.insert(key.to_owned(), value as u64);
        self
    }

    fn write(&self) -> Result<()> {
        let path = self.out_dir.join(format!("manifest-{}.json", self.stage));
        let mut f = File::create(&path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Fail with a message naming the stage that produces a missing input.
fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "missing input {}; run the `{}` stage first",
            path.display(),
            produced_by
        );
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line)
            .with_context(|| format!("{}: bad record at line {}", path.display(), i + 1))?;
        out.push(item);
    }
    Ok(out)
}

fn load_corpus_map(config: &PipelineConfig) -> Result<(Vec<CodeFile>, corpus::LoadSummary)> {
    corpus::load_corpus(&config.corpus.path, config.corpus.language.as_deref())
        .context("loading corpus")
}

fn files_by_id(files: Vec<CodeFile>) -> BTreeMap<String, CodeFile> {
    files.into_iter().map(|f| (f.file_id.clone(), f)).collect()
}

/// 64-bit FNV-1a, used to derive per-candidate seed substreams.
fn fnv64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// The type segment is the last colon-separated field of a candidate id.
fn file_id_of(candidate_id: &str) -> &str {
    match candidate_id.rsplitn(3, ':').nth(2) {
        Some(rest) => rest,
        None => candidate_id,
    }
}

fn type_of_candidate(candidate_id: &str) -> Option<PiiType> {
    candidate_id.rsplit(':').next().and_then(PiiType::parse)
}

// ---------------------------------------------------------------------
// Entry point

pub fn run(cli: Cli) -> Result<()> {
    // rules-export has no inputs and must work without a config file.
    if let Command::RulesExport { path } = &cli.command {
        return cmd_rules_export(path);
    }
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(out) = cli.out {
        config.output.dir = out;
    }
    if let Some(seed) = cli.seed {
        config.split.seed = seed;
        config.audit.seed = seed;
        config.attack.seed = seed;
        config.causal.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        config.scorer.concurrency = jobs.max(1);
    }
    std::fs::create_dir_all(&config.output.dir)
        .with_context(|| format!("cannot create {}", config.output.dir.display()))?;

    match cli.command {
        Command::Scan => cmd_scan(&config),
        Command::Precheck => cmd_precheck(&config),
        Command::Refine => cmd_refine(&config),
        Command::Split => cmd_split(&config),
        Command::Audit => cmd_audit(&config),
        Command::Features => cmd_features(&config),
        Command::Dynamics => cmd_dynamics(&config),
        Command::Map => cmd_map(&config),
        Command::AttackBuild => cmd_attack_build(&config),
        Command::AttackEval => cmd_attack_eval(&config),
        Command::CausalEstimate => cmd_causal_estimate(&config),
        Command::CausalRefute => cmd_causal_refute(&config),
        Command::Report => cmd_report(&config),
        Command::TldsRefresh => cmd_tlds_refresh(&config),
        Command::RulesExport { .. } => unreachable!("handled before config load"),
    }
}

const IANA_TLD_URL: &str = "https://data.iana.org/TLD/tlds-alpha-by-domain.txt";

fn cmd_tlds_refresh(config: &PipelineConfig) -> Result<()> {
    let body = reqwest::blocking::get(IANA_TLD_URL)
        .and_then(|r| r.error_for_status())
        .and_then(|r| r.text())
        .with_context(|| format!("fetching {}", IANA_TLD_URL))?;
    let mut out = String::from("# Top-level domain snapshot from the IANA registry.\n");
    let mut n = 0usize;
    for line in body.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push_str(&line.to_ascii_lowercase());
        out.push('\n');
        n += 1;
    }
    if n == 0 {
        bail!("registry response contained no TLD entries");
    }
    std::fs::write(&config.lists.tlds, out)
        .with_context(|| format!("writing {}", config.lists.tlds.display()))?;
    println!("tlds-refresh: {} entries written to {}", n, config.lists.tlds.display());
    Ok(())
}

fn cmd_rules_export(path: &Path) -> Result<()> {
    let rules = detect::default_rules();
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &rules)?;
    f.write_all(b"\n")?;
    println!("rules-export: {} rules written to {}", rules.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------------
// Stages

fn cmd_scan(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let (files, summary) = load_corpus_map(config)?;
    let rules = match &config.rules.path {
        Some(p) => detect::load_rules(p)?,
        None => detect::compile_rules(detect::default_rules())?,
    };
    let mut candidates = Vec::new();
    for file in &files {
        candidates.extend(detect::scan_regex(file, &rules));
    }
    let mut external_count = 0usize;
    if let Some(ext_path) = &config.rules.external {
        require(ext_path, "external detector")?;
        let map = files_by_id(files);
        let (detections, _ingest) = detect::ingest_external(ext_path, &map)?;
        let ext = detect::external_to_candidates(detections);
        external_count = ext.len();
        candidates.extend(ext);
    }
    let merged = corpus::merge_candidates(candidates);

    let artifact = out_dir.join("candidates-scan.jsonl");
    write_jsonl(&merged, &artifact)?;

    let mut manifest = Manifest::new("scan", out_dir);
    manifest
        .input("corpus", &config.corpus.path)
        .count("files_loaded", summary.loaded)
        .count("files_skipped", summary.skipped)
        .count("rules", rules.len())
        .count("external_detections", external_count)
        .count("candidates", merged.len());
    if let Some(p) = &config.rules.path {
        manifest.input("rules", p);
    }
    manifest.write()?;
    println!("scan: {} candidates from {} files", merged.len(), summary.loaded);
    Ok(())
}

fn load_lists(config: &PipelineConfig) -> Result<PrecheckLists> {
    Ok(PrecheckLists {
        tld_set: precheck::load_list(&config.lists.tlds)?,
        weak_passwords: precheck::load_list(&config.lists.weak_passwords)?,
        false_usernames: precheck::load_list(&config.lists.false_usernames)?,
    })
}

fn cmd_precheck(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let input = out_dir.join("candidates-scan.jsonl");
    require(&input, "scan")?;
    let candidates: Vec<PiiCandidate> = read_jsonl(&input)?;
    let lists = load_lists(config)?;

    let total = candidates.len();
    let mut passed = Vec::new();
    let mut rule_failures: BTreeMap<String, usize> = BTreeMap::new();
    for mut cand in candidates {
        let verdict = precheck::precheck_candidate(&cand, &lists);
        if verdict.passed {
            cand.status = CandidateStatus::Prechecked;
            passed.push(cand);
        } else {
            for rule in &verdict.failed_rules {
                *rule_failures.entry(rule.clone()).or_insert(0) += 1;
            }
        }
    }

    let artifact = out_dir.join("candidates-precheck.jsonl");
    write_jsonl(&passed, &artifact)?;

    let mut manifest = Manifest::new("precheck", out_dir);
    manifest
        .input("candidates", &input)
        .input("tlds", &config.lists.tlds)
        .input("weak_passwords", &config.lists.weak_passwords)
        .input("false_usernames", &config.lists.false_usernames)
        .count("input", total)
        .count("passed", passed.len())
        .count("failed", total - passed.len());
    for (rule, n) in &rule_failures {
        manifest.count(&format!("failed_{}", rule), *n);
    }
    manifest.write()?;
    println!("precheck: {} of {} candidates passed", passed.len(), total);
    Ok(())
}

fn make_scorer(config: &ScorerConfig) -> Result<Box<dyn ScoreProvider>> {
    match config.provider.as_str() {
        "mock" => Ok(Box::new(refine::MockScorer)),
        "fixed" => Ok(Box::new(refine::FixedScorer(config.fixed_score))),
        "http" => {
            if config.endpoint.is_empty() {
                bail!("scorer.provider = \"http\" requires scorer.endpoint");
            }
            Ok(Box::new(refine::HttpScorer::new(
                config.endpoint.clone(),
                config.model.clone(),
                std::env::var("PII_SCORER_TOKEN").ok(),
                Duration::from_secs(config.timeout_secs),
            )))
        }
        other => bail!("unknown scorer provider {:?}", other),
    }
}

fn cmd_refine(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let input = out_dir.join("candidates-precheck.jsonl");
    require(&input, "precheck")?;
    let candidates: Vec<PiiCandidate> = read_jsonl(&input)?;
    let (files, _) = load_corpus_map(config)?;
    let files = files_by_id(files);

    let mut requests = Vec::new();
    for cand in &candidates {
        let file = files.get(&cand.file_id).with_context(|| {
            format!("candidate {} references unknown file {}", cand.candidate_id, cand.file_id)
        })?;
        requests.push(refine::build_request(file, cand));
    }
    let scorer = make_scorer(&config.scorer)?;
    let batch = BatchConfig {
        concurrency: config.scorer.concurrency,
        max_attempts: config.scorer.max_attempts,
        log_path: Some(out_dir.join("score-log.jsonl")),
        ..BatchConfig::default()
    };
    let responses = refine::score_batch(&requests, scorer.as_ref(), &batch)?;
    let scores: BTreeMap<&str, u8> = responses
        .iter()
        .map(|r| (r.candidate_id.as_str(), r.sensitivity_score))
        .collect();

    let scored: Vec<PiiCandidate> = candidates
        .into_iter()
        .map(|mut c| {
            c.sensitivity_score = scores.get(c.candidate_id.as_str()).copied();
            c.status = CandidateStatus::Scored;
            c
        })
        .collect();
    let policy = config.thresholds.policy();
    let (accepted, rejected, stats) = refine::apply_thresholds(scored, &policy)?;

    let artifact = out_dir.join("candidates-refine.jsonl");
    write_jsonl(&accepted, &artifact)?;
    let mut report = File::create(out_dir.join("thresholds.csv"))?;
    writeln!(report, "pii_type,scored,accepted,exceed_rate,below_min")?;
    for s in &stats {
        writeln!(
            report,
            "{},{},{},{:.6},{}",
            s.pii_type, s.scored, s.accepted, s.exceed_rate, s.below_min
        )?;
    }

    let mut manifest = Manifest::new("refine", out_dir);
    manifest
        .input("candidates", &input)
        .input("corpus", &config.corpus.path)
        .count("scored", scores.len())
        .count("accepted", accepted.len())
        .count("rejected", rejected.len());
    manifest.write()?;
    println!(
        "refine: {} accepted, {} rejected of {} scored",
        accepted.len(),
        rejected.len(),
        scores.len()
    );
    Ok(())
}

fn cmd_split(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let input = out_dir.join("candidates-refine.jsonl");
    require(&input, "refine")?;
    let accepted: Vec<PiiCandidate> = read_jsonl(&input)?;
    let ratios = (
        config.split.train,
        config.split.validation,
        config.split.test,
    );
    let split = corpus::partition(&accepted, ratios, config.split.seed)?;
    let artifact = out_dir.join("split.json");
    let mut f = File::create(&artifact)?;
    serde_json::to_writer_pretty(&mut f, &split)?;
    f.write_all(b"\n")?;

    let mut manifest = Manifest::new("split", out_dir);
    manifest
        .input("candidates", &input)
        .seed("split", config.split.seed)
        .count("train", split.train.len())
        .count("validation", split.validation.len())
        .count("test", split.test.len());
    manifest.write()?;
    println!(
        "split: {}/{}/{} train/validation/test",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}

fn cmd_audit(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let input = out_dir.join("candidates-refine.jsonl");
    require(&input, "refine")?;
    let accepted: Vec<PiiCandidate> = read_jsonl(&input)?;
    let (files, _) = load_corpus_map(config)?;
    let files = files_by_id(files);

    let required_n = audit::sample_size(
        accepted.len().max(1),
        config.audit.confidence,
        config.audit.margin,
        config.audit.expected_p,
    )?;
    let plan = audit::SamplingPlan {
        population_n: accepted.len(),
        confidence: config.audit.confidence,
        margin: config.audit.margin,
        expected_p: config.audit.expected_p,
        required_n,
    };
    let mut f = File::create(out_dir.join("audit-plan.json"))?;
    serde_json::to_writer_pretty(&mut f, &plan)?;
    f.write_all(b"\n")?;

    let sheet = out_dir.join("annotation-sheet.csv");
    let exported = audit::export_annotation_sheet(
        &accepted,
        &files,
        config.audit.per_type_n,
        config.audit.seed,
        &sheet,
    )?;

    let mut manifest = Manifest::new("audit", out_dir);
    manifest
        .input("candidates", &input)
        .input("corpus", &config.corpus.path)
        .seed("sample", config.audit.seed)
        .count("population", accepted.len())
        .count("required_n", required_n)
        .count("sheet_rows", exported);

    if let Some(ann_path) = &config.audit.annotations {
        require(ann_path, "annotation (external)")?;
        let records = audit::import_annotations(ann_path, &config.audit.annotator_id)?;
        let type_of: BTreeMap<String, PiiType> = accepted
            .iter()
            .map(|c| (c.candidate_id.clone(), c.pii_type))
            .collect();
        let agreement = audit::agreement_by_type(&records, &type_of);
        let mut agf = File::create(out_dir.join("agreement.csv"))?;
        writeln!(agf, "pii_type,agree_rate,ci_low,ci_high")?;
        for (ty, rate) in &agreement {
            let n_ty = records
                .iter()
                .filter(|r| type_of.get(&r.candidate_id) == Some(ty))
                .count();
            let successes = (rate * n_ty as f64).round() as usize;
            let pop = accepted.iter().filter(|c| c.pii_type == *ty).count();
            let (low, high) = audit::proportion_ci(
                successes,
                n_ty,
                pop.max(n_ty),
                config.audit.confidence,
                audit::CiMethod::NormalFpc,
            )?;
            writeln!(agf, "{},{:.6},{:.6},{:.6}", ty, rate, low, high)?;
        }
        manifest.input("annotations", ann_path);
        manifest.count("annotations", records.len());
    }
    manifest.write()?;
    println!("audit: required sample {} of {}", required_n, accepted.len());
    Ok(())
}

fn cmd_features(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let (files, summary) = load_corpus_map(config)?;
    let artifact = out_dir.join("features.csv");
    let mut f = File::create(&artifact)?;
    writeln!(
        f,
        "file_id,nloc,token_counts,ast_levels,ast_nodes,identifiers,ast_errors,complexity"
    )?;
    for file in &files {
        let feats = metrics::extract_features(file);
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            feats.file_id,
            feats.nloc,
            feats.token_counts,
            feats.ast_levels,
            feats.ast_nodes,
            feats.identifiers,
            feats.ast_errors,
            feats.complexity
        )?;
    }

    let mut manifest = Manifest::new("features", out_dir);
    manifest
        .input("corpus", &config.corpus.path)
        .count("files", summary.loaded);
    manifest.write()?;
    println!("features: {} files", summary.loaded);
    Ok(())
}

fn parse_pooling(s: &str) -> Result<Pooling> {
    match s {
        "geometric_mean" => Ok(Pooling::GeometricMean),
        "arithmetic_mean" => Ok(Pooling::ArithmeticMean),
        other => bail!("unknown pooling {:?}", other),
    }
}

fn cmd_dynamics(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let prob_log = config
        .dynamics
        .prob_log
        .as_ref()
        .context("dynamics requires dynamics.prob_log (per-epoch probability log) in the config")?;
    require(prob_log, "training probability export (external)")?;
    let logs = dynamics::read_prob_log(prob_log)?;
    let pooling = parse_pooling(&config.dynamics.pooling)?;
    let stats = dynamics::compute_dynamics(&logs, config.dynamics.epochs, pooling)?;
    let records = dynamics::classify_difficulty(&stats)?;

    let artifact = out_dir.join("dynamics.csv");
    let mut f = File::create(&artifact)?;
    writeln!(f, "candidate_id,confidence,variability,label")?;
    for rec in &records {
        writeln!(
            f,
            "{},{:.12},{:.12},{}",
            rec.candidate_id,
            rec.confidence,
            rec.variability,
            rec.label.as_str()
        )?;
    }

    let mut manifest = Manifest::new("dynamics", out_dir);
    manifest
        .input("prob_log", prob_log)
        .count("epochs", config.dynamics.epochs)
        .count("instances", records.len());
    for label in [Difficulty::Easy, Difficulty::Ambiguous, Difficulty::Hard] {
        manifest.count(
            label.as_str(),
            records.iter().filter(|r| r.label == label).count(),
        );
    }
    manifest.write()?;
    println!("dynamics: {} instances", records.len());
    Ok(())
}

fn read_dynamics_csv(path: &Path) -> Result<Vec<DynamicsRecord>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            bail!("{}: bad row at line {}", path.display(), i + 1);
        }
        let label = match parts[3] {
            "easy" => Difficulty::Easy,
            "ambiguous" => Difficulty::Ambiguous,
            "hard" => Difficulty::Hard,
            other => bail!("{}: unknown label {:?} at line {}", path.display(), other, i + 1),
        };
        out.push(DynamicsRecord {
            candidate_id: parts[0].to_owned(),
            confidence: parts[1].parse()?,
            variability: parts[2].parse()?,
            label,
        });
    }
    Ok(out)
}

fn cmd_map(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let input = out_dir.join("dynamics.csv");
    require(&input, "dynamics")?;
    let records = read_dynamics_csv(&input)?;
    let type_of: BTreeMap<String, PiiType> = records
        .iter()
        .filter_map(|r| type_of_candidate(&r.candidate_id).map(|t| (r.candidate_id.clone(), t)))
        .collect();
    let map_config = MapExportConfig {
        seed: config.causal.seed,
        ..MapExportConfig::default()
    };
    dynamics::export_map(&records, &type_of, &map_config, out_dir, "all")?;

    let mut manifest = Manifest::new("map", out_dir);
    manifest
        .input("dynamics", &input)
        .seed("jitter", map_config.seed)
        .count("points", records.len());
    manifest.write()?;
    println!("map: {} points", records.len());
    Ok(())
}

fn cmd_attack_build(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let input = out_dir.join("candidates-refine.jsonl");
    require(&input, "refine")?;
    let mut accepted: Vec<PiiCandidate> = read_jsonl(&input)?;
    // Attack only the held-out test instances when a split exists.
    let split_path = out_dir.join("split.json");
    if split_path.exists() {
        let split: corpus::DatasetSplit = serde_json::from_reader(File::open(&split_path)?)?;
        let test: BTreeSet<String> = split.test.into_iter().collect();
        accepted.retain(|c| test.contains(&c.candidate_id));
    }
    let (files, _) = load_corpus_map(config)?;
    let files = files_by_id(files);

    let mut queries = Vec::new();
    let mut skipped = 0usize;
    for cand in &accepted {
        let file = files.get(&cand.file_id).with_context(|| {
            format!("candidate {} references unknown file {}", cand.candidate_id, cand.file_id)
        })?;
        let seed = config.attack.seed ^ fnv64(&cand.candidate_id);
        match attack::build_query(file, cand, config.attack.window, seed) {
            Ok(q) => queries.push(q),
            Err(_) => skipped += 1,
        }
    }
    let artifact = out_dir.join("queries.jsonl");
    write_jsonl(&queries, &artifact)?;

    let mut manifest = Manifest::new("attack-build", out_dir);
    manifest
        .input("candidates", &input)
        .input("corpus", &config.corpus.path)
        .seed("attack", config.attack.seed)
        .count("window", config.attack.window)
        .count("queries", queries.len())
        .count("skipped", skipped);
    manifest.write()?;
    println!("attack-build: {} queries, {} skipped", queries.len(), skipped);
    Ok(())
}

fn make_completion_provider(config: &AttackConfig) -> Result<Box<dyn CompletionProvider>> {
    match config.provider.as_str() {
        "offline" => {
            let path = config
                .completions
                .as_ref()
                .context("attack.provider = \"offline\" requires attack.completions")?;
            require(path, "completion collection (external)")?;
            Ok(Box::new(OfflineProvider::from_file(path)?))
        }
        "echo" => Ok(Box::new(EchoProvider)),
        "http" => {
            if config.endpoint.is_empty() {
                bail!("attack.provider = \"http\" requires attack.endpoint");
            }
            Ok(Box::new(HttpFimProvider::new(
                config.endpoint.clone(),
                config.model.clone(),
                config.sentinel_template.clone(),
                Duration::from_secs(config.timeout_secs),
            )))
        }
        other => bail!("unknown attack provider {:?}", other),
    }
}

fn cmd_attack_eval(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let queries_path = out_dir.join("queries.jsonl");
    require(&queries_path, "attack-build")?;
    let queries: Vec<AttackQuery> = read_jsonl(&queries_path)?;
    let cand_path = out_dir.join("candidates-refine.jsonl");
    require(&cand_path, "refine")?;
    let candidates: Vec<PiiCandidate> = read_jsonl(&cand_path)?;
    let targets: BTreeMap<String, String> = candidates
        .iter()
        .map(|c| (c.candidate_id.clone(), c.value.clone()))
        .collect();
    let type_of: BTreeMap<String, PiiType> = candidates
        .iter()
        .map(|c| (c.candidate_id.clone(), c.pii_type))
        .collect();

    let provider = make_completion_provider(&config.attack)?;
    let (results, summary) =
        attack::fetch_completions(&queries, &targets, provider.as_ref(), config.attack.attempts);
    write_jsonl(&results, &out_dir.join("attack-results.jsonl"))?;
    let cells = attack::aggregate(&results, &config.attack.model, &type_of);
    attack::write_leakage_csv(&cells, &out_dir.join("leakage.csv"))?;

    let mut manifest = Manifest::new("attack-eval", out_dir);
    manifest
        .input("queries", &queries_path)
        .input("candidates", &cand_path)
        .count("attempts", summary.attempts)
        .count("errors", summary.errors)
        .count("results", results.len())
        .count("leaked", results.iter().filter(|r| r.success).count());
    if let Some(p) = &config.attack.completions {
        manifest.input("completions", p);
    }
    manifest.write()?;
    println!(
        "attack-eval: {} results, {} provider errors",
        results.len(),
        summary.errors
    );
    Ok(())
}

struct FeatureTable {
    names: Vec<String>,
    rows: BTreeMap<String, Vec<f64>>,
}

fn read_features_csv(path: &Path) -> Result<FeatureTable> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines.next().context("empty features file")??;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_owned).collect();
    let mut rows = BTreeMap::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let file_id = parts.next().unwrap_or_default().to_owned();
        let values: Vec<f64> = parts.map(|p| p.parse().unwrap_or(0.0)).collect();
        rows.insert(file_id, values);
    }
    Ok(FeatureTable { names, rows })
}

/// Join dynamics labels, attack outcomes, and per-file features into
/// causal units: treatment = difficulty label, outcome = leaked,
/// covariates = structural features of the owning file.
fn build_causal_units(config: &PipelineConfig) -> Result<(Vec<CausalUnit>, Vec<String>)> {
    let out_dir = &config.output.dir;
    let dyn_path = out_dir.join("dynamics.csv");
    require(&dyn_path, "dynamics")?;
    let results_path = out_dir.join("attack-results.jsonl");
    require(&results_path, "attack-eval")?;
    let feat_path = out_dir.join("features.csv");
    require(&feat_path, "features")?;

    let records = read_dynamics_csv(&dyn_path)?;
    let results: Vec<AttackResult> = read_jsonl(&results_path)?;
    let features = read_features_csv(&feat_path)?;

    let mut leaked: BTreeMap<String, bool> = BTreeMap::new();
    for r in &results {
        *leaked.entry(r.candidate_id.clone()).or_insert(false) |= r.success;
    }

    let mut units = Vec::new();
    for rec in &records {
        let Some(&outcome) = leaked.get(&rec.candidate_id) else {
            continue;
        };
        let file_id = file_id_of(&rec.candidate_id);
        let Some(covariates) = features.rows.get(file_id) else {
            continue;
        };
        units.push(CausalUnit {
            id: rec.candidate_id.clone(),
            treatment: rec.label.as_str() == config.causal.treatment_label,
            outcome,
            covariates: covariates.clone(),
        });
    }
    if units.is_empty() {
        bail!("no joinable units across dynamics, attack results, and features");
    }
    // Constant covariate columns carry no adjustment information and
    // make the regression design singular; drop them.
    let dim = units[0].covariates.len();
    let keep: Vec<usize> = (0..dim)
        .filter(|&j| {
            let first = units[0].covariates[j];
            units.iter().any(|u| u.covariates[j] != first)
        })
        .collect();
    let names: Vec<String> = keep
        .iter()
        .filter_map(|&j| features.names.get(j).cloned())
        .collect();
    for u in &mut units {
        u.covariates = keep.iter().map(|&j| u.covariates[j]).collect();
    }
    Ok((units, names))
}

fn parse_estimator(s: &str) -> Result<Estimator> {
    match s {
        "regression_adjustment" => Ok(Estimator::RegressionAdjustment),
        "ipw" => Ok(Estimator::Ipw),
        other => bail!("unknown estimator {:?}", other),
    }
}

fn cmd_causal_estimate(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let (units, feature_names) = build_causal_units(config)?;

    let mut ate_file = File::create(out_dir.join("causal-ate.csv"))?;
    writeln!(ate_file, "estimator,ate,n,n_treated")?;
    for est in [Estimator::RegressionAdjustment, Estimator::Ipw] {
        let estimate = causal::estimate_ate(&units, est)?;
        let name = match est {
            Estimator::RegressionAdjustment => "regression_adjustment",
            Estimator::Ipw => "ipw",
        };
        writeln!(
            ate_file,
            "{},{:.6},{},{}",
            name, estimate.ate, estimate.n, estimate.n_treated
        )?;
    }

    let outcomes: Vec<f64> = units
        .iter()
        .map(|u| if u.outcome { 1.0 } else { 0.0 })
        .collect();
    let mut corr_file = File::create(out_dir.join("causal-correlations.csv"))?;
    writeln!(corr_file, "feature,pearson_with_leakage")?;
    for (j, name) in feature_names.iter().enumerate() {
        let col: Vec<f64> = units.iter().map(|u| u.covariates[j]).collect();
        match causal::pearson(&col, &outcomes) {
            Some(r) => writeln!(corr_file, "{},{:.6}", name, r)?,
            None => writeln!(corr_file, "{},", name)?,
        }
    }

    let mut manifest = Manifest::new("causal-estimate", out_dir);
    manifest
        .input("dynamics", &out_dir.join("dynamics.csv"))
        .input("attack_results", &out_dir.join("attack-results.jsonl"))
        .input("features", &out_dir.join("features.csv"))
        .count("units", units.len())
        .count("treated", units.iter().filter(|u| u.treatment).count());
    manifest.write()?;
    println!("causal-estimate: {} units", units.len());
    Ok(())
}

fn cmd_causal_refute(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let (units, _) = build_causal_units(config)?;
    let estimator = parse_estimator(&config.causal.estimator)?;

    let mut f = File::create(out_dir.join("causal-refutations.csv"))?;
    writeln!(f, "refutation,original_ate,mean_refuted_ate,repetitions")?;
    for (name, refutation) in [
        ("random_common_cause", Refutation::RandomCommonCause),
        ("placebo_treatment", Refutation::PlaceboTreatment),
        ("simulated_confounder", Refutation::SimulatedConfounder),
        ("subset_validation", Refutation::SubsetValidation),
    ] {
        let result = causal::refute(
            &units,
            estimator,
            refutation,
            config.causal.refutation_repetitions,
            config.causal.seed,
        )?;
        writeln!(
            f,
            "{},{:.6},{:.6},{}",
            name,
            result.original_ate,
            result.mean_refuted_ate,
            result.refuted_ates.len()
        )?;
    }

    let mut manifest = Manifest::new("causal-refute", out_dir);
    manifest
        .input("dynamics", &out_dir.join("dynamics.csv"))
        .input("attack_results", &out_dir.join("attack-results.jsonl"))
        .input("features", &out_dir.join("features.csv"))
        .seed("refute", config.causal.seed)
        .count("units", units.len())
        .count("repetitions", config.causal.refutation_repetitions);
    manifest.write()?;
    println!("causal-refute: 4 refutations on {} units", units.len());
    Ok(())
}

fn cmd_report(config: &PipelineConfig) -> Result<()> {
    let out_dir = &config.output.dir;
    let leakage_path = out_dir.join("leakage.csv");
    require(&leakage_path, "attack-eval")?;
    let ate_path = out_dir.join("causal-ate.csv");
    require(&ate_path, "causal-estimate")?;
    let corr_path = out_dir.join("causal-correlations.csv");
    require(&corr_path, "causal-estimate")?;

    let mut report = String::new();
    report.push_str("# Leakage and causal summary\n\n");
    report.push_str("## Leakage by PII type\n\n");
    report.push_str("| Model | PII type | Leaked | Queries | Rate |\n");
    report.push_str("|---|---|---:|---:|---:|\n");
    for line in std::fs::read_to_string(&leakage_path)?.lines().skip(1) {
        let p: Vec<&str> = line.split(',').collect();
        if p.len() == 5 {
            report.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                p[0], p[1], p[2], p[3], p[4]
            ));
        }
    }
    report.push_str("\n## Average treatment effect of difficulty on leakage\n\n");
    report.push_str("| Estimator | ATE | n | Treated |\n|---|---:|---:|---:|\n");
    for line in std::fs::read_to_string(&ate_path)?.lines().skip(1) {
        let p: Vec<&str> = line.split(',').collect();
        if p.len() == 4 {
            report.push_str(&format!("| {} | {} | {} | {} |\n", p[0], p[1], p[2], p[3]));
        }
    }
    report.push_str("\n## Feature correlations with leakage\n\n");
    report.push_str("| Feature | Pearson r |\n|---|---:|\n");
    for line in std::fs::read_to_string(&corr_path)?.lines().skip(1) {
        let p: Vec<&str> = line.split(',').collect();
        if p.len() == 2 {
            report.push_str(&format!("| {} | {} |\n", p[0], p[1]));
        }
    }
    let refutations_path = out_dir.join("causal-refutations.csv");
    if refutations_path.exists() {
        report.push_str("\n## Refutations\n\n");
        report.push_str("| Check | Original ATE | Mean refuted ATE | Reps |\n|---|---:|---:|---:|\n");
        for line in std::fs::read_to_string(&refutations_path)?.lines().skip(1) {
            let p: Vec<&str> = line.split(',').collect();
            if p.len() == 4 {
                report.push_str(&format!("| {} | {} | {} | {} |\n", p[0], p[1], p[2], p[3]));
            }
        }
    }
    std::fs::write(out_dir.join("report.md"), &report)?;

    let mut manifest = Manifest::new("report", out_dir);
    manifest
        .input("leakage", &leakage_path)
        .input("causal_ate", &ate_path)
        .input("causal_correlations", &corr_path);
    manifest.write()?;
    println!("report: written to {}", out_dir.join("report.md").display());
    Ok(())
}
