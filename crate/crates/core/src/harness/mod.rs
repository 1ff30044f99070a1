//! Ablation runs over fusion strategies, reports, and replay.
//!
//! A [`RunSpec`] names the input files, the strategies to compare and one
//! [`TrainConfig`] shared by all of them. [`run_ablation`] trains one probe
//! per strategy from the same seed and writes:
//!
//! - `report.jsonl`: a `run` record (spec echo + provenance) followed by one
//!   `result` record per strategy
//! - `report.txt`: aligned accuracy table
//! - `curves.csv`: test accuracy per epoch, one column per strategy
//! - `trace_<STRATEGY>.csv` and `model_<STRATEGY>.fprb` per strategy

pub mod curves;
pub mod synth;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    file_sha256, load_manifest, read_embeddings, sha256_hex, CacheError, DatasetManifest, DescriptionCache,
    EmbeddingStore, ManifestError, Split, StoreError,
};
use crate::embedding::{fuse, pool_descriptions, EmbeddingError, EmbeddingVector, FusionStrategy};
use crate::encoder::{EncoderProfile, Modality};
use crate::probe::{train, Accuracy, LabeledFeatures, ProbeError, TrainConfig, TrainTrace};

pub use curves::emit_curves;
pub use synth::{synth_dataset, write_synth, SynthConfig, SynthDataset, SynthFiles};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("{strategy}: {count} samples lack embeddings (e.g. {examples:?}); pass tolerate_missing to exclude them")]
    MissingEmbeddings {
        strategy: FusionStrategy,
        count: usize,
        examples: Vec<String>,
    },
    #[error("{strategy} needs image and text embeddings of equal dim, got {image} and {text}")]
    StrategyDim {
        strategy: FusionStrategy,
        image: usize,
        text: usize,
    },
    #[error("{strategy}: no {split} samples with usable embeddings")]
    EmptySplit { strategy: FusionStrategy, split: Split },
    #[error("trace for {strategy} has {actual} epochs, expected {expected}")]
    EpochMismatch {
        strategy: FusionStrategy,
        expected: usize,
        actual: usize,
    },
    #[error("{what} changed since the report was written ({recorded} != {current})")]
    ChecksumChanged {
        what: String,
        recorded: String,
        current: String,
    },
    #[error("bad report: {0}")]
    Report(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_embeddings: Option<PathBuf>,
    /// Defaults to `image_embeddings` when a single store holds both channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desc_cache: Option<PathBuf>,
    pub strategies: Vec<FusionStrategy>,
    #[serde(default)]
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// L2-normalize image and pooled text embeddings before fusion.
    #[serde(default)]
    pub normalize: bool,
    /// Exclude samples with missing embeddings instead of failing.
    #[serde(default)]
    pub tolerate_missing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_profile: Option<String>,
}

impl RunSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run spec serializes")
    }

    fn text_store_path(&self) -> Option<&Path> {
        self.text_embeddings
            .as_deref()
            .or(self.image_embeddings.as_deref())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.strategies.is_empty() {
            return Err(HarnessError::InvalidConfig("at least one strategy is required".into()));
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return Err(HarnessError::InvalidConfig("strategies must be distinct".into()));
        }
        self.train.validate()?;
        let needs_image = self.strategies.iter().any(|s| s.needs_image());
        let needs_text = self.strategies.iter().any(|s| s.needs_text());
        if needs_image && self.image_embeddings.is_none() {
            return Err(HarnessError::InvalidConfig("image_embeddings is required".into()));
        }
        if needs_text && self.text_store_path().is_none() {
            return Err(HarnessError::InvalidConfig("text_embeddings is required".into()));
        }
        let files = std::iter::once(Some(self.manifest.as_path()))
            .chain([
                self.image_embeddings.as_deref(),
                self.text_embeddings.as_deref(),
                self.desc_cache.as_deref(),
            ])
            .flatten();
        for f in files {
            if !f.exists() {
                return Err(HarnessError::MissingFile(f.to_path_buf()));
            }
        }
        if let Some(p) = &self.encoder_profile {
            EncoderProfile::named(p, Modality::Image)
                .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileInfo {
    pub model_name: String,
    pub dim: usize,
}

/// Everything needed to tell whether a rerun used the same inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub tool_version: String,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_protocol: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_profile: Option<ProfileInfo>,
    pub embedding_dim: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<String>,
    pub manifest_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_store_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_store_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desc_cache_sha256: Option<String>,
    pub seed: u64,
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub strategy: FusionStrategy,
    pub method: String,
    /// Test accuracy in percent, three decimals, ties to even.
    pub accuracy_percent: String,
    pub correct: usize,
    pub total: usize,
    pub train_samples: usize,
    pub feature_dim: usize,
    pub final_train_loss: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
    pub trace_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
}

impl ReportEntry {
    pub fn accuracy(&self) -> Accuracy {
        Accuracy {
            correct: self.correct,
            total: self.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub spec: RunSpec,
    pub provenance: RunProvenance,
    pub entries: Vec<ReportEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
#[serde(tag = "record", rename_all = "lowercase")]
enum ReportLine {
    Run {
        spec: RunSpec,
        provenance: RunProvenance,
    },
    Result(ReportEntry),
}

impl RunReport {
    pub fn entry(&self, strategy: FusionStrategy) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.strategy == strategy)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ReportLine::Run {
            spec: self.spec.clone(),
            provenance: self.provenance.clone(),
        })
        .expect("report serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&ReportLine::Result(e.clone())).expect("report serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, HarnessError> {
        let mut head = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: ReportLine = serde_json::from_str(line)
                .map_err(|e| HarnessError::Report(format!("line {}: {e}", i + 1)))?;
            match parsed {
                ReportLine::Run { spec, provenance } if head.is_none() => head = Some((spec, provenance)),
                ReportLine::Run { .. } => {
                    return Err(HarnessError::Report(format!("line {}: second run record", i + 1)))
                }
                ReportLine::Result(e) => entries.push(e),
            }
        }
        let (spec, provenance) = head.ok_or_else(|| HarnessError::Report("missing run record".into()))?;
        Ok(Self {
            spec,
            provenance,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// Aligned text table in the layout of the accuracy tables.
    pub fn render_table(&self) -> String {
        let p = &self.provenance;
        let mut out = format!("Dataset: {}\n", p.dataset);
        if let Some(e) = &p.encoder_profile {
            out.push_str(&format!("Encoder: {} (d={})\n", e.model_name, e.dim));
        }
        let t = &self.spec.train;
        out.push_str(&format!(
            "Training: {} epochs, lr {}, {:?}, batch {}, seed {}, normalize {}\n\n",
            t.epochs, t.learning_rate, t.optimizer, t.batch_size, p.seed, p.normalize
        ));
        let header = ("Method", "Test Accuracy");
        let width = self
            .entries
            .iter()
            .map(|e| e.method.len())
            .chain([header.0.len()])
            .max()
            .unwrap_or(0);
        let acc_width = header.1.len();
        out.push_str(&format!("{:<width$} | {:>acc_width$}\n", header.0, header.1));
        out.push_str(&format!("{}-+-{}\n", "-".repeat(width), "-".repeat(acc_width)));
        for e in &self.entries {
            out.push_str(&format!("{:<width$} | {:>acc_width$}\n", e.method, e.accuracy_percent));
        }
        out
    }
}

fn checksum(path: &Path) -> Result<String, HarnessError> {
    file_sha256(path).map_err(|e| HarnessError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// Per-sample inputs before fusion.
struct SampleInputs {
    image: Option<EmbeddingVector>,
    text: Option<EmbeddingVector>,
}

struct Prepared {
    train: LabeledFeatures,
    test: LabeledFeatures,
    excluded: Vec<String>,
}

fn prepare(
    manifest: &DatasetManifest,
    inputs: &[SampleInputs],
    strategy: FusionStrategy,
    dim: usize,
    tolerate_missing: bool,
) -> Result<Prepared, HarnessError> {
    let fdim = strategy.output_dim(dim);
    let mut train = LabeledFeatures::new(fdim);
    let mut test = LabeledFeatures::new(fdim);
    let mut excluded = Vec::new();
    for (s, inp) in manifest.samples.iter().zip(inputs) {
        let missing = (strategy.needs_image() && inp.image.is_none()) || (strategy.needs_text() && inp.text.is_none());
        if missing {
            excluded.push(s.id.clone());
            continue;
        }
        let f = fuse(s.id.clone(), inp.image.as_ref(), inp.text.as_ref(), strategy)?;
        let label = manifest
            .class_index(&s.label)
            .expect("manifest labels are validated");
        let target = match s.split {
            Split::Train => &mut train,
            Split::Test => &mut test,
        };
        target.push(s.id.clone(), f.values.values(), label)?;
    }
    if !excluded.is_empty() && !tolerate_missing {
        return Err(HarnessError::MissingEmbeddings {
            strategy,
            count: excluded.len(),
            examples: excluded.iter().take(5).cloned().collect(),
        });
    }
    for (set, split) in [(&train, Split::Train), (&test, Split::Test)] {
        if set.is_empty() {
            return Err(HarnessError::EmptySplit { strategy, split });
        }
    }
    Ok(Prepared { train, test, excluded })
}

/// Trains one probe per strategy under identical data, seed and config.
pub fn run_ablation(spec: &RunSpec) -> Result<RunReport, HarnessError> {
    spec.validate()?;
    let manifest = load_manifest(&spec.manifest)?;
    let needs_image = spec.strategies.iter().any(|s| s.needs_image());
    let needs_text = spec.strategies.iter().any(|s| s.needs_text());

    let image_path = spec.image_embeddings.as_deref().filter(|_| needs_image);
    let text_path = spec.text_store_path().filter(|_| needs_text);
    let image_store = image_path.map(read_embeddings).transpose()?;
    let text_store: Option<EmbeddingStore> = match (text_path, image_path) {
        (Some(t), Some(i)) if t == i => None,
        (Some(t), _) => Some(read_embeddings(t)?),
        (None, _) => None,
    };
    let text_store_ref = text_store.as_ref().or(if text_path.is_some() {
        image_store.as_ref()
    } else {
        None
    });

    let image_dim = image_store.as_ref().map(EmbeddingStore::dim);
    let text_dim = text_store_ref.map(EmbeddingStore::dim);
    for &s in &spec.strategies {
        if let (true, true, Some(i), Some(t)) = (s.needs_image(), s.needs_text(), image_dim, text_dim) {
            if i != t {
                return Err(HarnessError::StrategyDim {
                    strategy: s,
                    image: i,
                    text: t,
                });
            }
        }
    }
    let dim = image_dim.or(text_dim).expect("validated: some store is needed");

    let profile = spec
        .encoder_profile
        .as_deref()
        .map(|p| EncoderProfile::named(p, Modality::Image))
        .transpose()
        .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
    if let Some(p) = &profile {
        if let Some(other) = [image_dim, text_dim].into_iter().flatten().find(|&d| d != p.dim) {
            return Err(HarnessError::InvalidConfig(format!(
                "encoder profile {} has dim {}, store has dim {other}",
                p.model_name, p.dim
            )));
        }
    }

    let prompts = match &spec.desc_cache {
        Some(path) => {
            let k = text_store_ref.map(EmbeddingStore::k).unwrap_or(crate::descriptions::DEFAULT_K);
            DescriptionCache::open(path, k)?.prompts()
        }
        None => Vec::new(),
    };

    let norm = |v: EmbeddingVector| if spec.normalize { v.l2_normalized() } else { v };
    let inputs: Vec<SampleInputs> = manifest
        .samples
        .iter()
        .map(|s| SampleInputs {
            image: image_store.as_ref().and_then(|st| st.image(&s.id)).map(norm),
            text: text_store_ref
                .and_then(|st| st.texts(&s.id))
                .map(|e| norm(pool_descriptions(&e))),
        })
        .collect();

    let prepared: Vec<Prepared> = spec
        .strategies
        .iter()
        .map(|&s| {
            let channel_dim = match s {
                FusionStrategy::TextOnly => text_dim,
                _ => image_dim,
            };
            prepare(&manifest, &inputs, s, channel_dim.unwrap_or(dim), spec.tolerate_missing)
        })
        .collect::<Result<_, _>>()?;

    // Arms are independent, so they train side by side.
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = spec
            .strategies
            .iter()
            .zip(&prepared)
            .map(|(&s, p)| {
                let classes = manifest.classes.clone();
                scope.spawn(move || train(&p.train, &p.test, classes, s, &spec.train))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });

    std::fs::create_dir_all(&spec.out_dir).map_err(|e| HarnessError::io(&spec.out_dir, e))?;
    let mut entries = Vec::with_capacity(results.len());
    let mut traces: Vec<(FusionStrategy, TrainTrace)> = Vec::new();
    for ((&s, p), result) in spec.strategies.iter().zip(&prepared).zip(results) {
        let (model, trace) = result?;
        let accuracy = model.accuracy(&p.test)?;
        let checkpoint = spec.out_dir.join(format!("model_{s}.fprb"));
        let trace_csv = spec.out_dir.join(format!("trace_{s}.csv"));
        let bytes = model.to_checkpoint_bytes();
        write_file(&checkpoint, &bytes)?;
        write_file(&trace_csv, trace.to_csv().as_bytes())?;
        entries.push(ReportEntry {
            strategy: s,
            method: s.method_label().to_string(),
            accuracy_percent: accuracy.percent_string(),
            correct: accuracy.correct,
            total: accuracy.total,
            train_samples: p.train.len(),
            feature_dim: model.feature_dim,
            final_train_loss: trace.final_record().map_or(f64::NAN, |r| r.train_loss),
            excluded: p.excluded.clone(),
            trace_csv,
            checkpoint,
            checkpoint_sha256: sha256_hex(&bytes),
        });
        traces.push((s, trace));
    }

    let provenance = RunProvenance {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: manifest.name.clone(),
        split_protocol: manifest.split_protocol.clone(),
        encoder_profile: profile.map(|p| ProfileInfo {
            model_name: p.model_name,
            dim: p.dim,
        }),
        embedding_dim: dim,
        prompts,
        manifest_sha256: checksum(&spec.manifest)?,
        image_store_sha256: image_path.map(checksum).transpose()?,
        text_store_sha256: text_path.map(checksum).transpose()?,
        desc_cache_sha256: spec.desc_cache.as_deref().map(checksum).transpose()?,
        seed: spec.train.seed,
        normalize: spec.normalize,
    };
    let report = RunReport {
        spec: spec.clone(),
        provenance,
        entries,
    };

    let refs: Vec<(FusionStrategy, &TrainTrace)> = traces.iter().map(|(s, t)| (*s, t)).collect();
    write_file(&spec.out_dir.join("curves.csv"), emit_curves(&refs)?.as_bytes())?;
    write_file(&spec.out_dir.join("report.jsonl"), report.to_jsonl().as_bytes())?;
    write_file(&spec.out_dir.join("report.txt"), report.render_table().as_bytes())?;
    Ok(report)
}

/// Test accuracies (percent) a full-scale UCF-101 run with the ViT-L-14
/// encoder and 10 descriptions per frame is expected to land near. These
/// need GPU-backed sidecar runs, so they are regression targets for
/// [`compare_to_targets`], never unit-test assertions.
pub const UCF101_TARGETS: [(FusionStrategy, f64); 4] = [
    (FusionStrategy::Concat, 91.753),
    (FusionStrategy::Mean, 91.277),
    (FusionStrategy::ImageOnly, 89.981),
    (FusionStrategy::TextOnly, 80.333),
];

/// Tolerance in accuracy points for full-scale regression runs.
pub const TARGET_TOLERANCE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDeviation {
    pub strategy: FusionStrategy,
    pub target: f64,
    pub actual: f64,
    pub within_tolerance: bool,
}

/// Compares each reported strategy that has a target. Out-of-tolerance
/// entries are returned, not raised: the caller reports them together
/// with the run's provenance.
pub fn compare_to_targets(report: &RunReport, targets: &[(FusionStrategy, f64)], tolerance: f64) -> Vec<TargetDeviation> {
    targets
        .iter()
        .filter_map(|&(strategy, target)| {
            let actual = report.entry(strategy)?.accuracy().fraction() * 100.0;
            Some(TargetDeviation {
                strategy,
                target,
                actual,
                within_tolerance: (actual - target).abs() <= tolerance,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub report: RunReport,
    /// Strategies whose accuracy or checkpoint differs from the original.
    pub mismatches: Vec<String>,
}

impl ReplayOutcome {
    pub fn is_exact(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Reruns a report's recorded spec into `out_dir` and compares results.
///
/// Fails up front if any input file's checksum no longer matches.
pub fn replay(original: &RunReport, out_dir: &Path) -> Result<ReplayOutcome, HarnessError> {
    let spec = RunSpec {
        out_dir: out_dir.to_path_buf(),
        ..original.spec.clone()
    };
    let p = &original.provenance;
    let mut checks = vec![("manifest".to_string(), Some(spec.manifest.clone()), Some(p.manifest_sha256.clone()))];
    let needs_image = spec.strategies.iter().any(|s| s.needs_image());
    let needs_text = spec.strategies.iter().any(|s| s.needs_text());
    checks.push((
        "image store".into(),
        spec.image_embeddings.clone().filter(|_| needs_image),
        p.image_store_sha256.clone(),
    ));
    checks.push((
        "text store".into(),
        spec.text_store_path().map(Path::to_path_buf).filter(|_| needs_text),
        p.text_store_sha256.clone(),
    ));
    checks.push(("description cache".into(), spec.desc_cache.clone(), p.desc_cache_sha256.clone()));
    for (what, path, recorded) in checks {
        if let (Some(path), Some(recorded)) = (path, recorded) {
            let current = checksum(&path)?;
            if current != recorded {
                return Err(HarnessError::ChecksumChanged {
                    what,
                    recorded,
                    current,
                });
            }
        }
    }

    let report = run_ablation(&spec)?;
    let before: HashMap<FusionStrategy, &ReportEntry> =
        original.entries.iter().map(|e| (e.strategy, e)).collect();
    let mut mismatches = Vec::new();
    for e in &report.entries {
        match before.get(&e.strategy) {
            Some(o) if o.correct == e.correct && o.total == e.total && o.checkpoint_sha256 == e.checkpoint_sha256 => {}
            Some(o) => mismatches.push(format!(
                "{}: {} -> {} ({} -> {})",
                e.strategy, o.accuracy_percent, e.accuracy_percent, o.checkpoint_sha256, e.checkpoint_sha256
            )),
            None => mismatches.push(format!("{}: not in original report", e.strategy)),
        }
    }
    Ok(ReplayOutcome { report, mismatches })
}
