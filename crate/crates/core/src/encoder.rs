//! Access to the frozen image and text encoders.
//!
//! An [`EncoderAdapter`] fetches raw vectors, either from a precomputed store
//! ([`FileAdapter`]) or from the sidecar ([`RemoteAdapter`]). The
//! [`EncoderGateway`] in front of it enforces the profile dimension and
//! finiteness, and memoizes results per sample id.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EmbeddingStore, SampleRecord, StoreError};
use crate::descriptions::DescriptionSet;
use crate::embedding::{DescriptionEmbeddings, EmbeddingVector};
use crate::service::{RetryPolicy, Retryable, ServiceError, SidecarClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderProfile {
    pub model_name: String,
    pub dim: usize,
    pub modality: Modality,
}

/// Known encoder backbones: `(key, model name, embedding dim)`.
pub const KNOWN_PROFILES: &[(&str, &str, usize)] = &[
    ("vit-l-14", "CLIP ViT-L-14", 768),
    ("vit-b-32", "CLIP ViT-B-32", 512),
    ("vit-b-16", "CLIP ViT-B-16", 512),
];

impl EncoderProfile {
    pub fn new(model_name: impl Into<String>, dim: usize, modality: Modality) -> Result<Self, GatewayError> {
        if dim == 0 {
            return Err(GatewayError::InvalidProfile("dim must be positive".into()));
        }
        Ok(Self {
            model_name: model_name.into(),
            dim,
            modality,
        })
    }

    pub fn named(key: &str, modality: Modality) -> Result<Self, GatewayError> {
        KNOWN_PROFILES
            .iter()
            .find(|(k, _, _)| k.eq_ignore_ascii_case(key))
            .map(|&(_, name, dim)| Self {
                model_name: name.to_string(),
                dim,
                modality,
            })
            .ok_or_else(|| GatewayError::InvalidProfile(format!("unknown profile `{key}`")))
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no {modality:?} embedding for `{id}`")]
    MissingId { id: String, modality: Modality },
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{modality:?} encoder returned dim {actual} for `{id}`, profile dim is {expected}")]
    DimMismatch {
        id: String,
        modality: Modality,
        expected: usize,
        actual: usize,
    },
    #[error("encoder returned a non-finite value for `{0}`")]
    NonFinite(String),
    #[error("description {index} of `{id}` is empty")]
    EmptyText { id: String, index: usize },
    #[error("expected {expected} text embeddings for `{id}`, got {actual}")]
    CountMismatch {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid encoder profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A source of raw encoder output.
pub trait EncoderAdapter: Send + Sync {
    fn embed_image(&self, sample: &SampleRecord) -> Result<Vec<f32>, GatewayError>;
    fn embed_texts(&self, sample_id: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError>;
}

/// Serves vectors from a precomputed store, keyed by sample id.
#[derive(Debug)]
pub struct FileAdapter {
    store: EmbeddingStore,
}

impl FileAdapter {
    pub fn new(store: EmbeddingStore) -> Self {
        Self { store }
    }
}

impl EncoderAdapter for FileAdapter {
    fn embed_image(&self, sample: &SampleRecord) -> Result<Vec<f32>, GatewayError> {
        self.store
            .image_raw(&sample.id)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| GatewayError::MissingId {
                id: sample.id.clone(),
                modality: Modality::Image,
            })
    }

    fn embed_texts(&self, sample_id: &str, _texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        self.store
            .texts_raw(sample_id)
            .map(|blocks| blocks.into_iter().map(<[f32]>::to_vec).collect())
            .ok_or_else(|| GatewayError::MissingId {
                id: sample_id.to_string(),
                modality: Modality::Text,
            })
    }
}

/// Calls the sidecar's embed endpoints. Retries are applied by the gateway.
#[derive(Debug)]
pub struct RemoteAdapter {
    client: SidecarClient,
}

impl RemoteAdapter {
    pub fn new(client: SidecarClient) -> Self {
        Self { client }
    }

    pub fn client(&self) -> &SidecarClient {
        &self.client
    }
}

impl EncoderAdapter for RemoteAdapter {
    fn embed_image(&self, sample: &SampleRecord) -> Result<Vec<f32>, GatewayError> {
        Ok(self.client.embed_image(&sample.image_ref)?)
    }

    fn embed_texts(&self, _sample_id: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        Ok(self.client.embed_texts(texts)?)
    }
}

impl Retryable for GatewayError {
    fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Service(e) if e.is_transient())
    }

    fn exhausted(attempts: u32, last: Self) -> Self {
        match last {
            GatewayError::Service(e) => GatewayError::Service(ServiceError::exhausted(attempts, e)),
            other => other,
        }
    }
}

type KeyLocks = Mutex<HashMap<String, Arc<Mutex<()>>>>;

/// Dimension-checked, memoizing front for an adapter.
pub struct EncoderGateway<A> {
    adapter: A,
    image_profile: EncoderProfile,
    text_profile: EncoderProfile,
    retry: RetryPolicy,
    store: RwLock<EmbeddingStore>,
    image_locks: KeyLocks,
    text_locks: KeyLocks,
}

fn key_lock(locks: &KeyLocks, id: &str) -> Arc<Mutex<()>> {
    locks
        .lock()
        .unwrap()
        .entry(id.to_string())
        .or_default()
        .clone()
}

impl<A: EncoderAdapter> EncoderGateway<A> {
    /// `k` is the description count per sample. Both profiles must share a dim.
    pub fn new(
        adapter: A,
        image_profile: EncoderProfile,
        text_profile: EncoderProfile,
        k: usize,
        retry: RetryPolicy,
    ) -> Result<Self, GatewayError> {
        if image_profile.dim != text_profile.dim {
            return Err(GatewayError::InvalidProfile(format!(
                "image dim {} differs from text dim {}",
                image_profile.dim, text_profile.dim
            )));
        }
        let store = EmbeddingStore::new(image_profile.dim, k)?;
        Ok(Self {
            adapter,
            image_profile,
            text_profile,
            retry,
            store: RwLock::new(store),
            image_locks: Mutex::default(),
            text_locks: Mutex::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.image_profile.dim
    }

    pub fn image_profile(&self) -> &EncoderProfile {
        &self.image_profile
    }

    pub fn text_profile(&self) -> &EncoderProfile {
        &self.text_profile
    }

    /// Seeds the memo table, e.g. from a store written by an earlier run.
    pub fn preload(&self, store: &EmbeddingStore) -> Result<(), GatewayError> {
        self.store.write().unwrap().merge(store)?;
        Ok(())
    }

    /// Everything embedded so far.
    pub fn snapshot(&self) -> EmbeddingStore {
        self.store.read().unwrap().clone()
    }

    pub fn into_store(self) -> EmbeddingStore {
        self.store.into_inner().unwrap()
    }

    fn check(&self, id: &str, modality: Modality, raw: &[f32]) -> Result<(), GatewayError> {
        let expected = self.dim();
        if raw.len() != expected {
            return Err(GatewayError::DimMismatch {
                id: id.to_string(),
                modality,
                expected,
                actual: raw.len(),
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::NonFinite(id.to_string()));
        }
        Ok(())
    }

    pub fn embed_image(&self, sample: &SampleRecord) -> Result<EmbeddingVector, GatewayError> {
        if let Some(v) = self.store.read().unwrap().image(&sample.id) {
            return Ok(v);
        }
        let lock = key_lock(&self.image_locks, &sample.id);
        let _held = lock.lock().unwrap();
        if let Some(v) = self.store.read().unwrap().image(&sample.id) {
            return Ok(v);
        }
        let raw = self.retry.run(|| self.adapter.embed_image(sample))?;
        self.check(&sample.id, Modality::Image, &raw)?;
        let v = EmbeddingVector::from_f32(&raw).expect("checked finite and non-empty");
        self.store
            .write()
            .unwrap()
            .insert_image_f32(sample.id.clone(), raw)?;
        Ok(v)
    }

    pub fn embed_texts(&self, descs: &DescriptionSet) -> Result<DescriptionEmbeddings, GatewayError> {
        let id = &descs.sample_id;
        if let Some(index) = descs.texts.iter().position(|t| t.trim().is_empty()) {
            return Err(GatewayError::EmptyText { id: id.clone(), index });
        }
        let k = self.store.read().unwrap().k();
        if descs.texts.len() != k {
            return Err(GatewayError::CountMismatch {
                id: id.clone(),
                expected: k,
                actual: descs.texts.len(),
            });
        }
        if let Some(e) = self.store.read().unwrap().texts(id) {
            return Ok(e);
        }
        let lock = key_lock(&self.text_locks, id);
        let _held = lock.lock().unwrap();
        if let Some(e) = self.store.read().unwrap().texts(id) {
            return Ok(e);
        }
        let blocks = self.retry.run(|| self.adapter.embed_texts(id, &descs.texts))?;
        if blocks.len() != k {
            return Err(GatewayError::CountMismatch {
                id: id.clone(),
                expected: k,
                actual: blocks.len(),
            });
        }
        for b in &blocks {
            self.check(id, Modality::Text, b)?;
        }
        self.store.write().unwrap().insert_texts_f32(id.clone(), &blocks)?;
        Ok(self
            .store
            .read()
            .unwrap()
            .texts(id)
            .expect("just inserted"))
    }
}
