//! Dataset manifests, the binary embedding store and the description cache.

pub mod cache;
pub mod manifest;
pub mod store;

pub use cache::{CacheEntry, CacheError, DescriptionCache, Provenance, PutOutcome};
pub use manifest::{
    load_manifest, DatasetManifest, ImageMeta, ManifestError, SampleRecord, Split, SplitCounts,
};
pub use store::{file_sha256, read_embeddings, sha256_hex, write_embeddings, EmbeddingStore, StoreError};
