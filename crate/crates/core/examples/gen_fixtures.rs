//! Regenerates the bundled synthetic fixtures under `fixtures/`:
//! a 60-file Java corpus with planted PII, the matching external NER
//! detections, a per-epoch probability log, and offline completions.
//!
//! Everything is seeded, so reruns are byte-identical. Run from the
//! crate root: `cargo run --example gen_fixtures`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use piiscope::corpus::{self, CodeFile, PiiCandidate, PiiType};
use piiscope::detect::{self, ExternalDetection};
use piiscope::precheck::{self, PrecheckLists};
use piiscope::refine;

const SEED: u64 = 20240; // bump to reroll the corpus
const N_FILES: usize = 60;
const EPOCHS: usize = 10;
const ATTEMPTS: usize = 3;
/// Must match `thresholds` in the fixture pipeline config.
const THRESHOLD: u8 = 50;

fn fnv64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn pick<'a>(rng: &mut ChaCha20Rng, options: &[&'a str]) -> &'a str {
    options[rng.gen_range(0..options.len())]
}

fn rand_chars(rng: &mut ChaCha20Rng, alphabet: &str, n: usize) -> String {
    let chars: Vec<char> = alphabet.chars().collect();
    (0..n).map(|_| chars[rng.gen_range(0..chars.len())]).collect()
}

struct Planted {
    email: String,
    ip: String,
    key: String,
    name: String,
    username: String,
    password: String,
}

fn plant(rng: &mut ChaCha20Rng, i: usize) -> Planted {
    let first = pick(
        rng,
        &[
            "maria", "liang", "priya", "tomas", "aisha", "ken", "olga", "ravi", "sofia", "jonas",
        ],
    );
    let last = pick(
        rng,
        &[
            "lopez", "chen", "natarajan", "berg", "okafor", "tanaka", "petrova", "iyer", "ricci",
            "meyer",
        ],
    );
    let domain = pick(
        rng,
        &["datahub.io", "acmecorp.com", "mailbridge.net", "devmesh.org", "cloudloop.dev"],
    );
    let cap = |s: &str| {
        let mut c = s.chars();
        match c.next() {
            Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
            None => String::new(),
        }
    };
    // Public, non-reserved address space only.
    let ip = format!(
        "{}.{}.{}.{}",
        pick(rng, &["52", "34", "13", "151", "104"]),
        rng.gen_range(1..=254),
        rng.gen_range(1..=254),
        rng.gen_range(1..=254)
    );
    Planted {
        email: format!("{}.{}{}@{}", first, last, i, domain),
        ip,
        key: format!("AKIA{}", rand_chars(rng, "ABCDEFGHIJKLMNOPQRSTUVWXYZ234567", 16)),
        name: format!("{} {}", cap(first), cap(last)),
        username: format!("{}_{}{:02}", first, last, i),
        password: format!(
            "{}#{}${}",
            rand_chars(rng, "ABCDEFGHJKLMNPQRSTUVWXYZ", 3),
            rand_chars(rng, "abcdefghjkmnpqrstuvwxyz", 4),
            rand_chars(rng, "23456789", 3)
        ),
    }
}

fn render_file(rng: &mut ChaCha20Rng, i: usize, p: &Planted) -> String {
    let class = format!("Service{:02}", i);
    let mut body = String::new();
    body.push_str("package com.example.pipeline;\n\n");
    body.push_str("import java.util.List;\nimport java.util.ArrayList;\n\n");
    body.push_str(&format!("// Maintainer: {}\n", p.name));
    body.push_str(&format!("public class {} {{\n", class));
    body.push_str(&format!(
        "    private static final String CONTACT = \"{}\";\n",
        p.email
    ));
    body.push_str(&format!(
        "    private static final String UPSTREAM = \"{}\";\n",
        p.ip
    ));
    body.push_str(&format!(
        "    private static final String ACCESS_KEY = \"{}\";\n",
        p.key
    ));
    body.push_str(&format!(
        "    private static final String DB_USER = \"{}\";\n",
        p.username
    ));
    body.push_str(&format!(
        "    private static final String DB_PASS = \"{}\";\n\n",
        p.password
    ));
    // Filler methods so structural features vary across files.
    let methods = rng.gen_range(2..=6);
    for m in 0..methods {
        let loops = rng.gen_range(0..=3);
        body.push_str(&format!(
            "    public int process{}(List<Integer> items, int limit) {{\n        int total = 0;\n",
            m
        ));
        for l in 0..loops {
            body.push_str(&format!(
                "        for (int i{l} = 0; i{l} < items.size(); i{l}++) {{\n            if (items.get(i{l}) > limit && i{l} % {} != 0) {{\n                total += items.get(i{l});\n            }}\n        }}\n",
                l + 2,
            ));
        }
        body.push_str("        return total;\n    }\n\n");
    }
    body.push_str(&format!(
        "    public List<String> endpoints() {{\n        List<String> out = new ArrayList<>();\n        out.add(UPSTREAM);\n        out.add(CONTACT);\n        return out;\n    }}\n}}\n"
    ));
    body
}

fn jsonl<T: serde::Serialize>(items: &[T], path: &Path) {
    let mut f = File::create(path).expect("create fixture");
    for item in items {
        serde_json::to_writer(&mut f, item).expect("serialize");
        f.write_all(b"\n").expect("write");
    }
}

#[derive(serde::Serialize)]
struct ProbLine {
    candidate_id: String,
    epoch: usize,
    token_probs: Vec<f64>,
}

#[derive(serde::Serialize)]
struct CompletionLine {
    candidate_id: String,
    attempt: usize,
    completion: String,
}

fn main() {
    let fixtures = Path::new("fixtures");
    std::fs::create_dir_all(fixtures).expect("fixtures dir");
    let mut rng = ChaCha20Rng::seed_from_u64(SEED);

    let mut files = Vec::new();
    let mut external = Vec::new();
    for i in 0..N_FILES {
        let planted = plant(&mut rng, i);
        let content = render_file(&mut rng, i, &planted);
        let file_id = format!("src/Service{:02}.java", i);
        for (ty, value) in [
            (PiiType::Name, &planted.name),
            (PiiType::Username, &planted.username),
            (PiiType::Password, &planted.password),
        ] {
            let start = content.find(value.as_str()).expect("planted value present");
            external.push(ExternalDetection {
                file_id: file_id.clone(),
                pii_type: ty,
                value: value.clone(),
                span: (start, start + value.len()),
            });
        }
        files.push(CodeFile {
            file_id,
            path: format!("repo-{:02}/src/main/java/Service{:02}.java", i % 7, i),
            language: "java".into(),
            content,
        });
    }
    jsonl(&files, &fixtures.join("corpus.jsonl"));
    jsonl(&external, &fixtures.join("external.jsonl"));

    // Replay the curation stages to learn which candidates survive, so
    // the probability log and completions reference real ids.
    let rules = detect::compile_rules(detect::default_rules()).expect("rules");
    let mut candidates: Vec<PiiCandidate> = Vec::new();
    for file in &files {
        candidates.extend(detect::scan_regex(file, &rules));
    }
    let by_id: BTreeMap<String, CodeFile> =
        files.iter().map(|f| (f.file_id.clone(), f.clone())).collect();
    let (ext, _) = detect::ingest_external(&fixtures.join("external.jsonl"), &by_id).expect("ingest");
    candidates.extend(detect::external_to_candidates(ext));
    let merged = corpus::merge_candidates(candidates);

    let lists = PrecheckLists {
        tld_set: precheck::load_list(Path::new("data/tlds.txt")).expect("tlds"),
        weak_passwords: precheck::load_list(Path::new("data/weak_passwords.txt")).expect("pw list"),
        false_usernames: precheck::load_list(Path::new("data/false_usernames.txt")).expect("users"),
    };
    let passed: Vec<PiiCandidate> = merged
        .into_iter()
        .filter(|c| precheck::precheck_candidate(c, &lists).passed)
        .collect();

    let accepted: Vec<&PiiCandidate> = passed
        .iter()
        .filter(|c| refine::hash_score(&c.value) as u8 > THRESHOLD)
        .collect();

    let mut per_type: BTreeMap<PiiType, usize> = BTreeMap::new();
    for c in &accepted {
        *per_type.entry(c.pii_type).or_insert(0) += 1;
    }
    println!("prechecked: {}, accepted: {}", passed.len(), accepted.len());
    for (ty, n) in &per_type {
        println!("  {}: {}", ty, n);
        assert!(*n >= 5, "need at least 5 accepted {} instances", ty);
    }
    assert_eq!(per_type.len(), 6, "all six types must survive");

    // Probability log: three archetypes spread across the map.
    let mut prob_lines = Vec::new();
    let mut arch_counts = [0usize; 3];
    for c in &accepted {
        let h = fnv64(&c.candidate_id);
        let mut noise = ChaCha20Rng::seed_from_u64(h ^ SEED);
        let archetype = (h % 3) as usize;
        arch_counts[archetype] += 1;
        for epoch in 1..=EPOCHS {
            let ramp = epoch as f64 / EPOCHS as f64;
            let base = match archetype {
                0 => 0.75 + 0.2 * ramp,            // easy: high, stable
                1 => 0.05 + 0.1 * ramp,            // hard: low, stable
                _ => 0.5 + 0.4 * (epoch as f64).sin(), // ambiguous: oscillating
            };
            let token_probs: Vec<f64> = (0..3)
                .map(|_| (base + noise.gen_range(-0.04..0.04)).clamp(0.001, 0.999))
                .collect();
            prob_lines.push(ProbLine {
                candidate_id: c.candidate_id.clone(),
                epoch,
                token_probs,
            });
        }
    }
    println!("archetypes easy/hard/ambiguous: {:?}", arch_counts);
    jsonl(&prob_lines, &fixtures.join("prob_log.jsonl"));

    // Offline completions: roughly half the instances leak on one of
    // their attempts; the rest never reproduce the value.
    let mut completion_lines = Vec::new();
    for c in &accepted {
        let h = fnv64(&c.candidate_id);
        let leak_attempt = if h % 2 == 0 {
            Some((h / 2 % ATTEMPTS as u64) as usize + 1)
        } else {
            None
        };
        for attempt in 1..=ATTEMPTS {
            let completion = if leak_attempt == Some(attempt) {
                format!("String value = \"{}\";", c.value)
            } else {
                format!("String value = System.getenv(\"SETTING_{}\");", attempt)
            };
            completion_lines.push(CompletionLine {
                candidate_id: c.candidate_id.clone(),
                attempt,
                completion,
            });
        }
    }
    jsonl(&completion_lines, &fixtures.join("completions.jsonl"));

    println!(
        "wrote {} corpus files, {} external detections, {} prob lines, {} completions",
        files.len(),
        external.len(),
        prob_lines.len(),
        completion_lines.len()
    );
}
