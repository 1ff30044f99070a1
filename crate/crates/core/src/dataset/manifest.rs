//! JSON-lines dataset manifests.
//!
//! Line 1 is a header object `{name, classes, expected_counts?, split_protocol?}`.
//! Every following non-blank line is one sample
//! `{id, split, label, image_ref, image_meta?}`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("failed to read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest has no header line")]
    MissingHeader,
    #[error("manifest declares no classes")]
    NoClasses,
    #[error("class `{0}` is listed more than once")]
    DuplicateClass(String),
    #[error("line {line}: unknown label `{label}` for sample `{id}`")]
    UnknownLabel {
        line: usize,
        id: String,
        label: String,
    },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("{split} split has {actual} samples, manifest expects {expected}")]
    CountMismatch {
        split: Split,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[serde(alias = "TRAIN")]
    Train,
    #[serde(alias = "TEST")]
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Pixel geometry, kept as metadata only. Images are never decoded here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub label: String,
    /// Path or URL handed to the sidecar as-is.
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_meta: Option<ImageMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    name: String,
    classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expected_counts: Option<SplitCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split_protocol: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
    pub expected_counts: Option<SplitCounts>,
    /// Which official train/test partition the samples follow, when the
    /// dataset ships several (UCF-101 has three).
    pub split_protocol: Option<String>,
    class_index: HashMap<String, usize>,
}

impl DatasetManifest {
    /// Builds and validates a manifest. Sample lines are numbered from 2 in
    /// error messages, matching their position in the file.
    pub fn new(
        name: impl Into<String>,
        classes: Vec<String>,
        samples: Vec<SampleRecord>,
        expected_counts: Option<SplitCounts>,
        split_protocol: Option<String>,
    ) -> Result<Self, ManifestError> {
        if classes.is_empty() {
            return Err(ManifestError::NoClasses);
        }
        let mut class_index = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if class_index.insert(c.clone(), i).is_some() {
                return Err(ManifestError::DuplicateClass(c.clone()));
            }
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let line = i + 2;
            if !class_index.contains_key(&s.label) {
                return Err(ManifestError::UnknownLabel {
                    line,
                    id: s.id.clone(),
                    label: s.label.clone(),
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(ManifestError::DuplicateId {
                    line,
                    id: s.id.clone(),
                });
            }
        }
        let manifest = Self {
            name: name.into(),
            classes,
            samples,
            expected_counts,
            split_protocol,
            class_index,
        };
        if let Some(expected) = manifest.expected_counts {
            let actual = manifest.split_counts();
            for (split, e, a) in [
                (Split::Train, expected.train, actual.train),
                (Split::Test, expected.test, actual.test),
            ] {
                if e != a {
                    return Err(ManifestError::CountMismatch {
                        split,
                        expected: e,
                        actual: a,
                    });
                }
            }
        }
        Ok(manifest)
    }

    /// Class index by position in the class list.
    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_index.get(label).copied()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split_counts(&self) -> SplitCounts {
        let train = self
            .samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .count();
        SplitCounts {
            train,
            test: self.samples.len() - train,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let (header_line, header_text) = lines.next().ok_or(ManifestError::MissingHeader)?;
        let header: Header = serde_json::from_str(header_text).map_err(|e| ManifestError::Parse {
            line: header_line,
            message: e.to_string(),
        })?;
        let mut samples = Vec::new();
        let mut line_numbers = Vec::new();
        for (line, l) in lines {
            let s: SampleRecord = serde_json::from_str(l).map_err(|e| ManifestError::Parse {
                line,
                message: e.to_string(),
            })?;
            samples.push(s);
            line_numbers.push(line);
        }
        Self::new(
            header.name,
            header.classes,
            samples,
            header.expected_counts,
            header.split_protocol,
        )
        .map_err(|e| remap_line(e, &line_numbers))
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            name: self.name.clone(),
            classes: self.classes.clone(),
            expected_counts: self.expected_counts,
            split_protocol: self.split_protocol.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        let io = |source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        Ok(())
    }
}

// `new` numbers samples assuming no blank lines; translate to real file lines.
fn remap_line(err: ManifestError, line_numbers: &[usize]) -> ManifestError {
    let real = |line: usize| line_numbers.get(line - 2).copied().unwrap_or(line);
    match err {
        ManifestError::UnknownLabel { line, id, label } => ManifestError::UnknownLabel {
            line: real(line),
            id,
            label,
        },
        ManifestError::DuplicateId { line, id } => ManifestError::DuplicateId {
            line: real(line),
            id,
        },
        other => other,
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    DatasetManifest::parse(&text)
}
