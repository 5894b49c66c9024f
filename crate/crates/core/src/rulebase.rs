//! Forensic rule set: loading, validation, embedding cache and per-image
//! relevance filtering.
//!
//! A rule is kept for an image when the cosine similarity between the image
//! embedding and the rule-text embedding is strictly greater than the
//! threshold `t` (default 0.2). When nothing clears `t`, the top-k rules by
//! similarity are returned instead and the selection is flagged as a fallback.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, EmbeddingBackend, EmbeddingVector};

/// Longest accepted rule text, in characters.
pub const MAX_RULE_CHARS: usize = 512;

/// Rules returned when no rule clears the threshold.
pub const DEFAULT_FALLBACK_TOP_K: usize = 5;

/// The reconstructed rule set shipped with the crate.
pub const BUILTIN_RULE_SET: &str = include_str!("../assets/rules/builtin-rules.json");

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("could not read rule set {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed rule set: {0}")]
    Parse(String),
    #[error("invalid rule set: {0}")]
    Validation(String),
    #[error("no embedding for rule `{0}`")]
    MissingEmbedding(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("threshold {0} outside [-1, 1]")]
    Threshold(f64),
    #[error("cannot render an empty rule list")]
    EmptyRules,
    #[error("embedding backend failed: {0}")]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub category: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity_hint: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub version: String,
    pub categories: Vec<String>,
    pub rules: Vec<Rule>,
}

impl RuleSet {
    /// Hash over every rule id and text, in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.rules {
            h.update(r.id.as_bytes());
            h.update([0]);
            h.update(r.text.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    pub fn from_json(text: &str) -> Result<Self, RuleError> {
        let set: RuleSet = serde_json::from_str(text).map_err(|e| RuleError::Parse(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_RULE_SET).expect("bundled rule set is valid")
    }

    pub fn validate(&self) -> Result<(), RuleError> {
        let invalid = |msg: String| Err(RuleError::Validation(msg));
        if self.rules.is_empty() {
            return invalid("rule set has no rules".into());
        }
        let categories: HashSet<&str> = self.categories.iter().map(String::as_str).collect();
        if categories.len() != self.categories.len() {
            return invalid("duplicate category names".into());
        }
        let mut seen = HashSet::new();
        let mut used = HashSet::new();
        for rule in &self.rules {
            if !seen.insert(rule.id.as_str()) {
                return invalid(format!("duplicate rule id `{}`", rule.id));
            }
            if rule.id.trim().is_empty() {
                return invalid("rule with empty id".into());
            }
            if rule.text.trim().is_empty() {
                return invalid(format!("rule `{}` has empty text", rule.id));
            }
            if rule.text.chars().count() > MAX_RULE_CHARS {
                return invalid(format!(
                    "rule `{}` text exceeds {MAX_RULE_CHARS} characters",
                    rule.id
                ));
            }
            if !categories.contains(rule.category.as_str()) {
                return invalid(format!(
                    "rule `{}` has unknown category `{}`",
                    rule.id, rule.category
                ));
            }
            if let Some(s) = rule.severity_hint {
                if !(1..=3).contains(&s) {
                    return invalid(format!("rule `{}` severity_hint {s} outside 1-3", rule.id));
                }
            }
            used.insert(rule.category.as_str());
        }
        if let Some(empty) = self.categories.iter().find(|c| !used.contains(c.as_str())) {
            return invalid(format!("category `{empty}` has no rules"));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }
}

pub fn load_rule_set(path: &Path) -> Result<RuleSet, RuleError> {
    let text = std::fs::read_to_string(path).map_err(|source| RuleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RuleSet::from_json(&text)
}

/// Cosine-similarity threshold in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RelevanceThreshold(f64);

impl RelevanceThreshold {
    pub fn new(t: f64) -> Result<Self, RuleError> {
        if (-1.0..=1.0).contains(&t) {
            Ok(Self(t))
        } else {
            Err(RuleError::Threshold(t))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for RelevanceThreshold {
    fn default() -> Self {
        Self(0.2)
    }
}

impl TryFrom<f64> for RelevanceThreshold {
    type Error = RuleError;
    fn try_from(t: f64) -> Result<Self, RuleError> {
        Self::new(t)
    }
}

impl From<RelevanceThreshold> for f64 {
    fn from(t: RelevanceThreshold) -> f64 {
        t.0
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, RuleError> {
    if a.len() != b.len() {
        return Err(RuleError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(RuleError::ZeroNorm);
    }
    Ok(dot / (na * nb))
}

/// A rule paired with its similarity to the current image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredRule {
    pub rule: Rule,
    pub similarity: f64,
}

/// Outcome of relevance filtering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleSelection {
    pub rules: Vec<ScoredRule>,
    /// True when no rule cleared the threshold and top-k were substituted.
    pub fallback: bool,
}

impl RuleSelection {
    pub fn rule_list(&self) -> Vec<Rule> {
        self.rules.iter().map(|s| s.rule.clone()).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rules.iter().map(|s| s.rule.id.clone()).collect()
    }
}

/// Similarity of every rule to the image, sorted descending with ties broken
/// by rule id ascending.
pub fn score_rules(
    image_embedding: &[f64],
    rule_embeddings: &HashMap<String, Vec<f64>>,
    rules: &RuleSet,
) -> Result<Vec<ScoredRule>, RuleError> {
    let mut scored = rules
        .rules
        .iter()
        .map(|rule| {
            let emb = rule_embeddings
                .get(&rule.id)
                .ok_or_else(|| RuleError::MissingEmbedding(rule.id.clone()))?;
            Ok(ScoredRule {
                rule: rule.clone(),
                similarity: cosine_similarity(image_embedding, emb)?,
            })
        })
        .collect::<Result<Vec<_>, RuleError>>()?;
    scored.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.rule.id.cmp(&b.rule.id))
    });
    Ok(scored)
}

/// Rules whose similarity strictly exceeds `threshold`, most similar first;
/// the `fallback_k` most similar rules when none does.
pub fn filter_relevant_rules(
    image_embedding: &[f64],
    rule_embeddings: &HashMap<String, Vec<f64>>,
    rules: &RuleSet,
    threshold: RelevanceThreshold,
    fallback_k: usize,
) -> Result<RuleSelection, RuleError> {
    let scored = score_rules(image_embedding, rule_embeddings, rules)?;
    let kept: Vec<ScoredRule> = scored
        .iter()
        .filter(|s| s.similarity > threshold.value())
        .cloned()
        .collect();
    if kept.is_empty() {
        Ok(RuleSelection {
            rules: scored.into_iter().take(fallback_k.max(1)).collect(),
            fallback: true,
        })
    } else {
        Ok(RuleSelection {
            rules: kept,
            fallback: false,
        })
    }
}

/// One numbered line per rule: `N. [category] text`.
pub fn render_rules_prompt(rules: &[Rule]) -> Result<String, RuleError> {
    if rules.is_empty() {
        return Err(RuleError::EmptyRules);
    }
    let mut out = String::new();
    for (i, rule) in rules.iter().enumerate() {
        let _ = writeln!(out, "{}. [{}] {}", i + 1, rule.category, rule.text);
    }
    Ok(out)
}

/// On-disk embedding cache for one rule set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingCacheFile {
    model_id: String,
    rule_set_version: String,
    #[serde(default)]
    rules_digest: String,
    embeddings: BTreeMap<String, Vec<f64>>,
}

/// Rule set plus per-rule text embeddings from one embedding model.
#[derive(Debug, Clone)]
pub struct RuleIndex {
    pub rules: RuleSet,
    pub model_id: String,
    pub embeddings: HashMap<String, Vec<f64>>,
}

impl RuleIndex {
    /// Embed every rule text with `embedder`.
    pub fn build(rules: RuleSet, embedder: &dyn EmbeddingBackend) -> Result<Self, RuleError> {
        let mut model_id = None;
        let mut embeddings = HashMap::with_capacity(rules.rules.len());
        for rule in &rules.rules {
            let EmbeddingVector { values, model_id: m } = embedder.embed_text(&rule.text)?;
            model_id.get_or_insert(m);
            embeddings.insert(rule.id.clone(), values);
        }
        Ok(Self {
            rules,
            model_id: model_id.unwrap_or_default(),
            embeddings,
        })
    }

    /// Reuse the sidecar cache at `cache` when it matches the rule set version,
    /// the embedding model and every rule id and text; otherwise rebuild and
    /// rewrite it.
    pub fn load_or_build(
        rules: RuleSet,
        embedder: &dyn EmbeddingBackend,
        cache: &Path,
    ) -> Result<Self, RuleError> {
        let model_id = embedder.model_id()?;
        if let Ok(text) = std::fs::read_to_string(cache) {
            if let Ok(file) = serde_json::from_str::<EmbeddingCacheFile>(&text) {
                let complete = rules.rules.iter().all(|r| file.embeddings.contains_key(&r.id));
                if file.model_id == model_id
                    && file.rule_set_version == rules.version
                    && file.rules_digest == rules.digest()
                    && complete
                {
                    log::debug!("rule embeddings loaded from {}", cache.display());
                    return Ok(Self {
                        rules,
                        model_id: file.model_id,
                        embeddings: file.embeddings.into_iter().collect(),
                    });
                }
            }
            log::info!("rule embedding cache {} is stale; rebuilding", cache.display());
        }
        let index = Self::build(rules, embedder)?;
        let file = EmbeddingCacheFile {
            model_id: index.model_id.clone(),
            rule_set_version: index.rules.version.clone(),
            rules_digest: index.rules.digest(),
            embeddings: index
                .embeddings
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        };
        if let Some(dir) = cache.parent() {
            let _ = std::fs::create_dir_all(dir);
        }
        let body = serde_json::to_string_pretty(&file).expect("cache serializes");
        std::fs::write(cache, body).map_err(|source| RuleError::Io {
            path: cache.display().to_string(),
            source,
        })?;
        Ok(index)
    }

    pub fn filter(
        &self,
        image_embedding: &[f64],
        threshold: RelevanceThreshold,
        fallback_k: usize,
    ) -> Result<RuleSelection, RuleError> {
        filter_relevant_rules(image_embedding, &self.embeddings, &self.rules, threshold, fallback_k)
    }
}
