//! The three subcommands. Each returns its outcome for the caller to print.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context as _;
use forensic_core::backends::http::{HttpChat, HttpEmbedder, HttpSegmenter, HttpTransport};
use forensic_core::backends::{Backends, RetryPolicy};
use forensic_core::chain::{run_chain, ForensicResult, Trace};
use forensic_core::evaluation::{
    evaluate_dataset, load_datasets, result_to_prediction, EvalSample, Report, ScoredPrediction, SkipRecord,
};
use forensic_core::rulebase::{score_rules, RuleIndex, RuleSelection, ScoredRule};
use forensic_core::tools::{render_overlay, ImageBuffer, MaskImage};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Config, Overrides};
use crate::EvaluationFailed;

/// Share of samples allowed to fail before `evaluate` reports failure.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

const CACHE_FILE: &str = ".cache/rule-embeddings.json";

/// Resolved configuration plus live backends and the rule index.
pub struct Context {
    pub config: Config,
    pub backends: Backends,
    pub index: RuleIndex,
    pub stub: bool,
}

fn http_backends(config: &Config) -> Backends {
    let b = &config.backends;
    let transport = |url: &str| HttpTransport::new(url, b.timeout());
    Backends::new(
        Arc::new(HttpChat::new(transport(&b.chat_url))),
        Arc::new(HttpEmbedder::new(transport(&b.embed_url))),
        Arc::new(HttpSegmenter::new(transport(&b.segment_url))),
    )
    .with_retry(RetryPolicy {
        max_attempts: b.retry_attempts,
        base_delay_ms: b.retry_base_delay_ms,
    })
}

impl Context {
    pub fn build(config: Config, stub: bool) -> anyhow::Result<Self> {
        let backends = if stub { Backends::stub() } else { http_backends(&config) };
        let rules = config.rule_set()?;
        let cache = config.output_dir.join(CACHE_FILE);
        let index = RuleIndex::load_or_build(rules, backends.embedder.as_ref(), &cache)
            .context("building the rule embedding index")?;
        Ok(Self {
            config,
            backends,
            index,
            stub,
        })
    }

    fn run(&self, target: Arc<ImageBuffer>) -> Result<ForensicResult, forensic_core::ChainFailure> {
        run_chain(&self.config.query, target, &self.index, &self.config.chain, &self.backends)
    }

    /// Hash of everything that determines the pipeline's behaviour.
    pub fn config_digest(&self) -> String {
        #[derive(Serialize)]
        struct Fingerprint<'a> {
            query: &'a str,
            chain: &'a forensic_core::ChainConfig,
            rule_set_version: &'a str,
            rule_ids: Vec<&'a str>,
            embedding_model: &'a str,
            stub: bool,
        }
        let fp = Fingerprint {
            query: &self.config.query,
            chain: &self.config.chain,
            rule_set_version: &self.index.rules.version,
            rule_ids: self.index.rules.rules.iter().map(|r| r.id.as_str()).collect(),
            embedding_model: &self.index.model_id,
            stub: self.stub,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&fp).expect("fingerprint serializes")))
    }

    fn method_name(&self) -> String {
        if self.stub { "forensic-stub" } else { "forensic" }.into()
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn write_trace(dir: &Path, trace: &Trace) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("trace.jsonl"), trace.to_jsonl())
}

/// `result.json`, `mask.png` (tampered only), `overlay.png` and `trace.jsonl`.
pub fn write_artifacts(dir: &Path, target: &ImageBuffer, result: &ForensicResult) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    let mask_name = match &result.mask {
        Some(mask) => {
            files.push(write(&dir.join("mask.png"), mask.encode_png()?)?);
            Some("mask.png")
        }
        None => None,
    };
    let shown = result.mask.clone().unwrap_or_else(|| MaskImage::zeros(target.width(), target.height()));
    files.push(write(&dir.join("overlay.png"), render_overlay(target, &shown)?.encode_png()?)?);
    files.push(write_trace(dir, &result.trace)?);
    let mut doc = serde_json::to_string_pretty(&result.document(mask_name))?;
    doc.push('\n');
    files.push(write(&dir.join("result.json"), doc)?);
    Ok(files)
}

pub struct AnalyzeOutcome {
    pub result: ForensicResult,
    pub files: Vec<PathBuf>,
}

pub fn cmd_analyze(image: &Path, flags: &Overrides) -> anyhow::Result<AnalyzeOutcome> {
    let config = Config::resolve(flags)?;
    let target = Arc::new(ImageBuffer::open(image)?);
    let ctx = Context::build(config, flags.stub)?;
    let out = ctx.config.output_dir.clone();
    match ctx.run(target.clone()) {
        Ok(result) => {
            let files = write_artifacts(&out, &target, &result)?;
            Ok(AnalyzeOutcome { result, files })
        }
        Err(failure) => {
            write_trace(&out, &failure.trace)?;
            Err(failure.into())
        }
    }
}

enum SampleOutcome {
    Skipped(String),
    Scored(Result<ScoredPrediction, String>),
}

fn evaluate_sample(ctx: &Context, sample: &EvalSample, out: &Path) -> anyhow::Result<SampleOutcome> {
    let target = match ImageBuffer::open(&sample.image_path) {
        Ok(img) => Arc::new(img),
        Err(e) => return Ok(SampleOutcome::Skipped(format!("unreadable image: {e}"))),
    };
    if let Some(gt) = &sample.gt_mask {
        if gt.dims() != target.dims() {
            return Ok(SampleOutcome::Skipped(format!("mask is {:?}, image is {:?}", gt.dims(), target.dims())));
        }
    }
    let dir = out.join("samples").join(&sample.dataset).join(&sample.id);
    Ok(SampleOutcome::Scored(match ctx.run(target.clone()) {
        Ok(result) => {
            write_artifacts(&dir, &target, &result)?;
            result_to_prediction(&result, target.dims()).map_err(|e| e.to_string())
        }
        Err(failure) => {
            log::warn!("{}/{}: {failure}", sample.dataset, sample.id);
            write_trace(&dir, &failure.trace)?;
            Err(failure.to_string())
        }
    }))
}

pub struct EvaluateOutcome {
    pub report: Report,
    pub files: Vec<PathBuf>,
}

/// Run the pipeline over every sample under `dataset` and write
/// `report.json` and `report.txt`. Input problems are skip records; pipeline
/// failures are listed and fail the command above a tenth of the samples.
pub fn cmd_evaluate(dataset: &Path, flags: &Overrides) -> anyhow::Result<EvaluateOutcome> {
    let config = Config::resolve(flags)?;
    let listing = load_datasets(dataset)?;
    let ctx = Context::build(config, flags.stub)?;
    let out = ctx.config.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.config.parallelism)
        .build()
        .context("starting the worker pool")?;
    let outcomes: Vec<SampleOutcome> = pool.install(|| {
        listing
            .samples
            .par_iter()
            .map(|s| evaluate_sample(&ctx, s, &out))
            .collect::<anyhow::Result<_>>()
    })?;

    let mut skipped = listing.skipped.clone();
    let mut samples = Vec::new();
    let mut predictions = Vec::new();
    for (sample, outcome) in listing.samples.iter().zip(outcomes) {
        match outcome {
            SampleOutcome::Skipped(reason) => skipped.push(SkipRecord {
                dataset: sample.dataset.clone(),
                id: sample.id.clone(),
                reason,
            }),
            SampleOutcome::Scored(p) => {
                samples.push(sample.clone());
                predictions.push(p);
            }
        }
    }
    let mut report = evaluate_dataset(&samples, &predictions)?;
    report.method = ctx.method_name();
    report.config_digest = ctx.config_digest();
    skipped.append(&mut report.skipped);
    report.skipped = skipped;

    let files = vec![
        write(&out.join("report.json"), report.to_json())?,
        write(&out.join("report.txt"), report.to_table())?,
    ];
    let total = samples.len();
    if total > 0 && report.failed.len() as f64 > MAX_FAILED_FRACTION * total as f64 {
        return Err(EvaluationFailed {
            failed: report.failed.len(),
            total,
        }
        .into());
    }
    Ok(EvaluateOutcome { report, files })
}

pub struct RulesOutcome {
    pub threshold: f64,
    pub scored: Vec<ScoredRule>,
    pub selection: RuleSelection,
}

/// Score every rule against `image` and apply the relevance threshold.
pub fn cmd_rules(image: &Path, flags: &Overrides) -> anyhow::Result<RulesOutcome> {
    let config = Config::resolve(flags)?;
    let target = ImageBuffer::open(image)?;
    let ctx = Context::build(config, flags.stub)?;
    let embedding = ctx.backends.embedder.embed_image(&target)?;
    let scored = score_rules(&embedding.values, &ctx.index.embeddings, &ctx.index.rules)?;
    let chain = &ctx.config.chain;
    let selection = ctx.index.filter(&embedding.values, chain.relevance_threshold, chain.fallback_top_k)?;
    Ok(RulesOutcome {
        threshold: chain.relevance_threshold.value(),
        scored,
        selection,
    })
}

#[derive(Serialize)]
struct RuleLine<'a> {
    id: &'a str,
    category: &'a str,
    similarity: f64,
    kept: bool,
}

#[derive(Serialize)]
struct RulesJson<'a> {
    threshold: f64,
    fallback: bool,
    kept: usize,
    rules: Vec<RuleLine<'a>>,
}

impl RulesOutcome {
    fn is_kept(&self, id: &str) -> bool {
        self.selection.rules.iter().any(|s| s.rule.id == id)
    }

    pub fn to_json(&self) -> String {
        let doc = RulesJson {
            threshold: self.threshold,
            fallback: self.selection.fallback,
            kept: self.selection.rules.len(),
            rules: self
                .scored
                .iter()
                .map(|s| RuleLine {
                    id: &s.rule.id,
                    category: &s.rule.category,
                    similarity: s.similarity,
                    kept: self.is_kept(&s.rule.id),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("rules serialize");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let kept = self.selection.rules.len();
        let _ = writeln!(out, "threshold {:.3}: {kept} of {} rules kept", self.threshold, self.scored.len());
        if self.selection.fallback {
            let _ = writeln!(
                out,
                "no rule scored above the threshold; falling back to the top {kept} by similarity"
            );
        }
        let width = self.scored.iter().map(|s| s.rule.id.len()).max().unwrap_or(0);
        for s in &self.scored {
            let mark = match (self.is_kept(&s.rule.id), self.selection.fallback) {
                (true, false) => "kept",
                (true, true) => "fallback",
                (false, _) => "dropped",
            };
            let _ = writeln!(
                out,
                "{mark:<8} {:>7.4}  {:<width$}  [{}] {}",
                s.similarity, s.rule.id, s.rule.category, s.rule.text
            );
        }
        out
    }
}
