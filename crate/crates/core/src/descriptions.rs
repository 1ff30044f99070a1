//! Semantic descriptions from the multimodal language model.
//!
//! Each image is sent to the description service with a single prompt. The
//! free-text reply is parsed into exactly `K` descriptions and cached with
//! its provenance so reruns never hit the service for known samples.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CacheEntry, CacheError, DescriptionCache, Provenance, SampleRecord};
use crate::service::{DescribeResponse, RetryPolicy, ServiceError, SidecarClient};

pub const DEFAULT_PROMPT: &str = "Give 10 semantic descriptions of the image";
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescriptionError {
    #[error("expected {expected} descriptions, got {actual}")]
    WrongCount { expected: usize, actual: usize },
    #[error("description {index} is empty")]
    EmptyText { index: usize },
    #[error("no descriptions could be extracted from the response")]
    Unparseable,
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
}

/// The `K` descriptions generated for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionSet {
    pub sample_id: String,
    pub texts: Vec<String>,
    pub raw_response: String,
    /// Set when the response held fewer than `K` items and the last one was repeated.
    pub padded: bool,
}

impl DescriptionSet {
    pub fn validate(&self, k: usize) -> Result<(), DescriptionError> {
        if self.texts.len() != k {
            return Err(DescriptionError::WrongCount {
                expected: k,
                actual: self.texts.len(),
            });
        }
        if let Some(index) = self.texts.iter().position(|t| t.trim().is_empty()) {
            return Err(DescriptionError::EmptyText { index });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    template: String,
    k: usize,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            template: DEFAULT_PROMPT.to_string(),
            k: DEFAULT_K,
        }
    }
}

impl PromptSpec {
    pub fn new(template: impl Into<String>, k: usize) -> Result<Self, DescriptionError> {
        let template = template.into();
        if template.trim().is_empty() {
            return Err(DescriptionError::InvalidPrompt("empty template".into()));
        }
        if k == 0 {
            return Err(DescriptionError::InvalidPrompt("k must be at least 1".into()));
        }
        if template == DEFAULT_PROMPT && k != DEFAULT_K {
            return Err(DescriptionError::InvalidPrompt(format!(
                "default prompt asks for {DEFAULT_K} descriptions, k is {k}"
            )));
        }
        Ok(Self { template, k })
    }

    /// The default prompt rephrased to request `k` descriptions.
    pub fn with_count(k: usize) -> Result<Self, DescriptionError> {
        if k == DEFAULT_K {
            return Ok(Self::default());
        }
        Self::new(format!("Give {k} semantic descriptions of the image"), k)
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub texts: Vec<String>,
    pub padded: bool,
}

/// Strips a leading `N.`, `N)`, `-` or `•` enumerator followed by whitespace.
fn strip_enumerator(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    let rest = if digits > 0 {
        let after = &t[digits..];
        after.strip_prefix('.').or_else(|| after.strip_prefix(')'))?
    } else {
        t.strip_prefix('-').or_else(|| t.strip_prefix('•'))?
    };
    if rest.is_empty() {
        return Some(rest);
    }
    if rest.starts_with(char::is_whitespace) {
        Some(rest.trim())
    } else {
        None
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_content(s: &str) -> bool {
    s.chars().any(char::is_alphanumeric)
}

fn enumerated_items(raw: &str) -> Vec<String> {
    let mut items: Vec<String> = Vec::new();
    // Whether the previous line belonged to an item, so an unbroken
    // non-enumerated line continues it.
    let mut open = false;
    for line in raw.lines() {
        if let Some(rest) = strip_enumerator(line) {
            items.push(rest.to_string());
            open = true;
        } else if line.trim().is_empty() {
            open = false;
        } else if open {
            let last = items.last_mut().expect("open implies an item");
            last.push(' ');
            last.push_str(line.trim());
        }
    }
    items
        .into_iter()
        .map(|s| normalize_ws(&s))
        .filter(|s| is_content(s))
        .collect()
}

fn sentence_items(raw: &str) -> Vec<String> {
    let body: String = raw
        .lines()
        .map(|l| strip_enumerator(l).unwrap_or(l))
        .collect::<Vec<_>>()
        .join(" ");
    let mut items = Vec::new();
    let mut current = String::new();
    for ch in body.chars() {
        current.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            items.push(std::mem::take(&mut current));
        }
    }
    items.push(current);
    items
        .into_iter()
        .map(|s| normalize_ws(&s))
        .filter(|s| is_content(s))
        .collect()
}

/// Turns a free-text reply into exactly `k` descriptions.
///
/// Enumerated lines (`1.`, `1)`, `-`, `•`) are preferred. With fewer than `k`
/// of them the whole reply is split into sentences instead, if that yields
/// more items. Extra items are dropped; a shortfall is filled by repeating
/// the last item and reported through `padded`.
pub fn parse_response(raw: &str, k: usize) -> Result<ParsedResponse, DescriptionError> {
    if k == 0 {
        return Err(DescriptionError::InvalidPrompt("k must be at least 1".into()));
    }
    let mut items = enumerated_items(raw);
    if items.len() < k {
        let sentences = sentence_items(raw);
        if sentences.len() > items.len() {
            items = sentences;
        }
    }
    if items.is_empty() {
        return Err(DescriptionError::Unparseable);
    }
    items.truncate(k);
    let padded = items.len() < k;
    while items.len() < k {
        let last = items.last().expect("non-empty").clone();
        items.push(last);
    }
    Ok(ParsedResponse {
        texts: items,
        padded,
    })
}

/// Renders descriptions back as a numbered list, one per line.
pub fn join_enumerated(texts: &[String]) -> String {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A raw reply from the description service.
#[derive(Debug, Clone, PartialEq)]
pub struct DescribeReply {
    pub text: String,
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl From<DescribeResponse> for DescribeReply {
    fn from(r: DescribeResponse) -> Self {
        Self {
            text: r.text,
            metadata: r.metadata,
        }
    }
}

/// Anything that can describe an image given a prompt.
pub trait DescriptionService: Send + Sync {
    fn describe(&self, image_ref: &str, prompt: &str) -> Result<DescribeReply, ServiceError>;
}

impl DescriptionService for SidecarClient {
    fn describe(&self, image_ref: &str, prompt: &str) -> Result<DescribeReply, ServiceError> {
        SidecarClient::describe(self, image_ref, prompt).map(Into::into)
    }
}

#[derive(Debug, Error)]
pub enum DescribeFailure {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("unparseable response: {0}")]
    Parse(#[from] DescriptionError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Cache,
    Service,
}

/// Fetches descriptions through a cache.
pub struct Describer<'a, S: ?Sized> {
    service: &'a S,
    cache: &'a DescriptionCache,
    prompt: PromptSpec,
    retry: RetryPolicy,
}

#[derive(Debug, Default)]
pub struct DescribeReport {
    pub from_cache: usize,
    pub fetched: usize,
    pub padded: Vec<String>,
    pub failures: Vec<(String, String)>,
}

impl DescribeReport {
    pub fn total(&self) -> usize {
        self.from_cache + self.fetched + self.failures.len()
    }
}

fn model_name(metadata: &serde_json::Map<String, serde_json::Value>) -> String {
    metadata
        .get("model_name")
        .or_else(|| metadata.get("model"))
        .and_then(|v| v.as_str())
        .unwrap_or("unknown")
        .to_string()
}

impl<'a, S: DescriptionService + ?Sized> Describer<'a, S> {
    pub fn new(service: &'a S, cache: &'a DescriptionCache, prompt: PromptSpec, retry: RetryPolicy) -> Self {
        Self {
            service,
            cache,
            prompt,
            retry,
        }
    }

    /// Cached descriptions when present under the same prompt; otherwise one
    /// service call (with retries), parsed and cached.
    pub fn request_descriptions(&self, sample: &SampleRecord) -> Result<(DescriptionSet, Source), DescribeFailure> {
        if let Some(entry) = self.cache.get(&sample.id) {
            if entry.provenance.prompt == self.prompt.template() {
                return Ok((entry.descriptions, Source::Cache));
            }
            log::info!("cached descriptions for {} use a different prompt, refetching", sample.id);
        }
        let reply = self
            .retry
            .run(|| self.service.describe(&sample.image_ref, self.prompt.template()))?;
        let parsed = parse_response(&reply.text, self.prompt.k())?;
        let set = DescriptionSet {
            sample_id: sample.id.clone(),
            texts: parsed.texts,
            raw_response: reply.text,
            padded: parsed.padded,
        };
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.cache.put(CacheEntry {
            descriptions: set.clone(),
            provenance: Provenance {
                model_name: model_name(&reply.metadata),
                prompt: self.prompt.template().to_string(),
                timestamp,
                decoding: reply.metadata,
            },
        })?;
        Ok((set, Source::Service))
    }

    /// Describes every sample with up to `concurrency` requests in flight.
    /// Failures are collected per sample; the pass itself never aborts.
    pub fn describe_all(&self, samples: &[SampleRecord], concurrency: usize) -> DescribeReport {
        let next = AtomicUsize::new(0);
        let results = std::sync::Mutex::new(Vec::with_capacity(samples.len()));
        std::thread::scope(|s| {
            for _ in 0..concurrency.max(1).min(samples.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(sample) = samples.get(i) else { break };
                    let r = self.request_descriptions(sample);
                    results.lock().unwrap().push((i, r));
                });
            }
        });
        let mut results = results.into_inner().unwrap();
        results.sort_by_key(|(i, _)| *i);
        let mut report = DescribeReport::default();
        for (i, r) in results {
            let id = &samples[i].id;
            match r {
                Ok((set, source)) => {
                    match source {
                        Source::Cache => report.from_cache += 1,
                        Source::Service => report.fetched += 1,
                    }
                    if set.padded {
                        report.padded.push(id.clone());
                    }
                }
                Err(e) => {
                    log::warn!("describing {id} failed: {e}");
                    report.failures.push((id.clone(), e.to_string()));
                }
            }
        }
        report
    }
}
