//! PII curation and leakage-analysis toolkit for source-code corpora:
//! detection, rule prechecks, LLM-based sensitivity refinement, expert
//! audit statistics, training-dynamics cartography, masked extraction
//! attacks, and causal effect estimation.

pub mod attack;
pub mod audit;
pub mod causal;
pub mod cli;
pub mod corpus;
pub mod detect;
pub mod dynamics;
pub mod metrics;
pub mod precheck;
pub mod refine;
