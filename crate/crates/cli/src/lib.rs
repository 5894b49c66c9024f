//! Command-line front end: `analyze`, `evaluate` and `rules`.
//!
//! Exit codes: 0 success, 1 evaluation with too many failed samples,
//! 2 configuration, 3 backend, 4 unparseable model output, 5 input/output.

pub mod commands;
pub mod config;

use std::fmt;

use forensic_core::chain::{ChainError, ChainFailure};
use forensic_core::evaluation::DatasetError;
use forensic_core::rulebase::RuleError;
use forensic_core::tools::ToolError;
use forensic_core::BackendError;

pub use commands::{cmd_analyze, cmd_evaluate, cmd_rules};
pub use config::{Config, Overrides};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;
pub const EXIT_PARSE: u8 = 4;
pub const EXIT_IO: u8 = 5;

/// Invalid configuration or arguments.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// More than the tolerated share of samples failed in the pipeline.
#[derive(Debug)]
pub struct EvaluationFailed {
    pub failed: usize,
    pub total: usize,
}

impl fmt::Display for EvaluationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} of {} samples failed", self.failed, self.total)
    }
}

impl std::error::Error for EvaluationFailed {}

fn rule_code(e: &RuleError) -> u8 {
    match e {
        RuleError::Io { .. } => EXIT_IO,
        RuleError::Backend(_) | RuleError::MissingEmbedding(_) | RuleError::DimensionMismatch(..) | RuleError::ZeroNorm => {
            EXIT_BACKEND
        }
        RuleError::Parse(_) | RuleError::Validation(_) | RuleError::Threshold(_) | RuleError::EmptyRules => EXIT_CONFIG,
    }
}

fn chain_code(e: &ChainError) -> u8 {
    match e {
        ChainError::Config(_) => EXIT_CONFIG,
        ChainError::Backend { .. } => EXIT_BACKEND,
        ChainError::Rules(r) => rule_code(r),
        ChainError::Parse { .. } | ChainError::MissingLabel { .. } => EXIT_PARSE,
        ChainError::Tool(_) => EXIT_IO,
        ChainError::InvalidState(_) => EXIT_FAILURE,
    }
}

/// One-line rendering of an error and its causes. A cause whose message is
/// already part of the previous one is left out.
pub fn render_error(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if prev.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
        prev = msg;
    }
    out
}

/// Process exit code for an error, from the first recognised cause.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<EvaluationFailed>() {
            return EXIT_FAILURE;
        }
        if let Some(f) = cause.downcast_ref::<ChainFailure>() {
            return chain_code(&f.error);
        }
        if let Some(e) = cause.downcast_ref::<ChainError>() {
            return chain_code(e);
        }
        if let Some(e) = cause.downcast_ref::<RuleError>() {
            return rule_code(e);
        }
        if cause.is::<BackendError>() {
            return EXIT_BACKEND;
        }
        if let Some(e) = cause.downcast_ref::<DatasetError>() {
            return match e {
                DatasetError::Empty(_) => EXIT_CONFIG,
                DatasetError::MissingRoot(_) | DatasetError::Io { .. } => EXIT_IO,
            };
        }
        if cause.is::<ToolError>() || cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_FAILURE
}
