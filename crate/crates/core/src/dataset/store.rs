//! Binary embedding store (`.femb`).
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    b"FEMB"
//! version  u32     (currently 1)
//! dim      u32
//! count    u64     number of records that follow
//! k        u32     description embeddings per text record
//! record*  kind u8 (0 = image, 1 = text)
//!          id_len u16, id (UTF-8)
//!          f32 x dim          for image records
//!          f32 x dim, k times for text records
//! ```
//!
//! Image records come first, then text records, each sorted by id, so a
//! store always serializes to the same bytes.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{DescriptionEmbeddings, EmbeddingError, EmbeddingVector};

pub const MAGIC: &[u8; 4] = b"FEMB";
pub const FORMAT_VERSION: u32 = 1;

const KIND_IMAGE: u8 = 0;
const KIND_TEXT: u8 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic, not an embedding store")]
    BadMagic,
    #[error("unsupported store format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated store: record {record} of {count} is incomplete")]
    Truncated { record: u64, count: u64 },
    #[error("corrupt record {record}: {message}")]
    CorruptRecord { record: u64, message: String },
    #[error("vector for `{id}` has dim {actual}, store dim is {expected}")]
    DimMismatch {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("text entry `{id}` has {actual} descriptions, store expects {expected}")]
    WrongDescriptionCount {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("id `{0}` is too long for the store format")]
    IdTooLong(String),
    #[error("value for `{0}` does not fit in a finite f32")]
    NotRepresentable(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Image and description embeddings keyed by sample id.
///
/// Vectors are held as `f32`, the on-disk precision, so that
/// `read(write(s)) == s` holds bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    k: usize,
    images: BTreeMap<String, Vec<f32>>,
    // k * dim floats per id, description-major.
    texts: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, k: usize) -> Result<Self, StoreError> {
        if dim == 0 || u32::try_from(dim).is_err() {
            return Err(StoreError::CorruptHeader(format!("invalid dim {dim}")));
        }
        if k == 0 || u32::try_from(k).is_err() {
            return Err(StoreError::CorruptHeader(format!("invalid k {k}")));
        }
        Ok(Self {
            dim,
            k,
            images: BTreeMap::new(),
            texts: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.images.len() + self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn num_texts(&self) -> usize {
        self.texts.len()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    pub fn text_ids(&self) -> impl Iterator<Item = &str> {
        self.texts.keys().map(String::as_str)
    }

    fn check_id(id: &str) -> Result<(), StoreError> {
        if id.len() > u16::MAX as usize {
            return Err(StoreError::IdTooLong(id.to_string()));
        }
        Ok(())
    }

    fn check_raw(&self, id: &str, raw: &[f32]) -> Result<(), StoreError> {
        if raw.len() != self.dim {
            return Err(StoreError::DimMismatch {
                id: id.to_string(),
                expected: self.dim,
                actual: raw.len(),
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NotRepresentable(id.to_string()));
        }
        Ok(())
    }

    fn narrow(id: &str, v: &EmbeddingVector) -> Result<Vec<f32>, StoreError> {
        let raw = v.to_f32();
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(StoreError::NotRepresentable(id.to_string()));
        }
        Ok(raw)
    }

    pub fn insert_image_f32(&mut self, id: impl Into<String>, raw: Vec<f32>) -> Result<(), StoreError> {
        let id = id.into();
        Self::check_id(&id)?;
        self.check_raw(&id, &raw)?;
        self.images.insert(id, raw);
        Ok(())
    }

    /// Stores an image embedding, rounding to `f32`.
    pub fn insert_image(&mut self, id: impl Into<String>, v: &EmbeddingVector) -> Result<(), StoreError> {
        let id = id.into();
        let raw = Self::narrow(&id, v)?;
        self.insert_image_f32(id, raw)
    }

    pub fn insert_texts_f32(&mut self, id: impl Into<String>, blocks: &[Vec<f32>]) -> Result<(), StoreError> {
        let id = id.into();
        Self::check_id(&id)?;
        if blocks.len() != self.k {
            return Err(StoreError::WrongDescriptionCount {
                id,
                expected: self.k,
                actual: blocks.len(),
            });
        }
        let mut flat = Vec::with_capacity(self.k * self.dim);
        for b in blocks {
            self.check_raw(&id, b)?;
            flat.extend_from_slice(b);
        }
        self.texts.insert(id, flat);
        Ok(())
    }

    pub fn insert_texts(&mut self, embs: &DescriptionEmbeddings) -> Result<(), StoreError> {
        let id = embs.sample_id();
        let blocks = embs
            .vectors()
            .iter()
            .map(|v| Self::narrow(id, v))
            .collect::<Result<Vec<_>, _>>()?;
        self.insert_texts_f32(id, &blocks)
    }

    pub fn image_raw(&self, id: &str) -> Option<&[f32]> {
        self.images.get(id).map(Vec::as_slice)
    }

    pub fn image(&self, id: &str) -> Option<EmbeddingVector> {
        self.image_raw(id)
            .map(|raw| EmbeddingVector::from_f32(raw).expect("store holds finite, non-empty vectors"))
    }

    pub fn texts_raw(&self, id: &str) -> Option<Vec<&[f32]>> {
        self.texts.get(id).map(|flat| flat.chunks_exact(self.dim).collect())
    }

    pub fn texts(&self, id: &str) -> Option<DescriptionEmbeddings> {
        self.texts.get(id).map(|flat| {
            let vectors = flat
                .chunks_exact(self.dim)
                .map(|c| EmbeddingVector::from_f32(c).expect("store holds finite vectors"))
                .collect();
            DescriptionEmbeddings::new(id, vectors).expect("store holds k >= 1 equal-dim vectors")
        })
    }

    pub fn contains_image(&self, id: &str) -> bool {
        self.images.contains_key(id)
    }

    pub fn contains_texts(&self, id: &str) -> bool {
        self.texts.contains_key(id)
    }

    /// Copies every entry of `other` into `self`; entries already present are overwritten.
    pub fn merge(&mut self, other: &EmbeddingStore) -> Result<(), StoreError> {
        if other.dim != self.dim {
            return Err(StoreError::DimMismatch {
                id: "<store>".into(),
                expected: self.dim,
                actual: other.dim,
            });
        }
        if other.k != self.k && !other.texts.is_empty() {
            return Err(StoreError::WrongDescriptionCount {
                id: "<store>".into(),
                expected: self.k,
                actual: other.k,
            });
        }
        self.images
            .extend(other.images.iter().map(|(k, v)| (k.clone(), v.clone())));
        self.texts
            .extend(other.texts.iter().map(|(k, v)| (k.clone(), v.clone())));
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), StoreError> {
        let mut w = BufWriter::new(w);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        let records = self
            .images
            .iter()
            .map(|(id, v)| (KIND_IMAGE, id, v))
            .chain(self.texts.iter().map(|(id, v)| (KIND_TEXT, id, v)));
        let mut buf = Vec::new();
        for (kind, id, values) in records {
            buf.clear();
            buf.push(kind);
            buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            buf.extend(values.iter().flat_map(|x| x.to_le_bytes()));
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.len() * (self.dim * 4 + 16));
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, StoreError> {
        let mut r = BufReader::new(r);
        let mut header = [0u8; 24];
        r.read_exact(&mut header).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => StoreError::CorruptHeader("file shorter than header".into()),
            _ => StoreError::Io(e),
        })?;
        if &header[0..4] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
        let k = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        let mut store = Self::new(dim, k)?;

        let truncated = |record| move |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => StoreError::Truncated { record, count },
            _ => StoreError::Io(e),
        };
        let mut buf = vec![0u8; dim * 4];
        for record in 0..count {
            let mut head = [0u8; 3];
            r.read_exact(&mut head).map_err(truncated(record))?;
            let kind = head[0];
            let id_len = u16::from_le_bytes([head[1], head[2]]) as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id).map_err(truncated(record))?;
            let id = String::from_utf8(id).map_err(|_| StoreError::CorruptRecord {
                record,
                message: "id is not UTF-8".into(),
            })?;
            let blocks = match kind {
                KIND_IMAGE => 1,
                KIND_TEXT => k,
                other => {
                    return Err(StoreError::CorruptRecord {
                        record,
                        message: format!("unknown record kind {other}"),
                    })
                }
            };
            let mut values = Vec::with_capacity(blocks * dim);
            for _ in 0..blocks {
                r.read_exact(&mut buf).map_err(truncated(record))?;
                values.extend(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
                );
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::CorruptRecord {
                    record,
                    message: format!("non-finite value in `{id}`"),
                });
            }
            let map = if kind == KIND_IMAGE {
                &mut store.images
            } else {
                &mut store.texts
            };
            if map.insert(id.clone(), values).is_some() {
                return Err(StoreError::CorruptRecord {
                    record,
                    message: format!("duplicate id `{id}`"),
                });
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(StoreError::CorruptRecord {
                record: count,
                message: "trailing bytes after last record".into(),
            });
        }
        Ok(store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        Self::read_from(bytes)
    }
}

pub fn write_embeddings(store: &EmbeddingStore, path: &Path) -> Result<(), StoreError> {
    let f = std::fs::File::create(path)?;
    store.write_to(f)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore, StoreError> {
    let f = std::fs::File::open(path)?;
    EmbeddingStore::read_from(f)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(4, 2).unwrap();
        s.insert_image_f32("a", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        s.insert_image_f32("b", vec![-0.0, 1e-30, f32::MAX, 0.1]).unwrap();
        s.insert_image_f32("c", vec![5.0; 4]).unwrap();
        s.insert_texts_f32("a", &[vec![0.5; 4], vec![0.25; 4]]).unwrap();
        s
    }

    #[test]
    fn three_vectors_round_trip() {
        let s = small_store();
        let back = EmbeddingStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(s, back);
        assert_eq!(back.image_raw("b").unwrap()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn empty_store_has_count_zero() {
        let s = EmbeddingStore::new(768, 10).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[0..4], b"FEMB");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 768);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 0);
        assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn exact_layout_of_one_image_record() {
        let mut s = EmbeddingStore::new(2, 1).unwrap();
        s.insert_image_f32("id", vec![1.0, -2.0]).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"FEMB");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(0);
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"id");
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(s.to_bytes(), expected);
    }

    #[test]
    fn rejects_wrong_dim_and_count() {
        let mut s = EmbeddingStore::new(4, 2).unwrap();
        assert!(matches!(
            s.insert_image_f32("x", vec![1.0; 3]),
            Err(StoreError::DimMismatch { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(
            s.insert_texts_f32("x", &[vec![1.0; 4]]),
            Err(StoreError::WrongDescriptionCount { expected: 2, actual: 1, .. })
        ));
        assert!(matches!(
            s.insert_image_f32("x", vec![f32::NAN; 4]),
            Err(StoreError::NotRepresentable(_))
        ));
        let big = EmbeddingVector::new(vec![1e300; 4]).unwrap();
        assert!(matches!(s.insert_image("x", &big), Err(StoreError::NotRepresentable(_))));
    }

    #[test]
    fn missing_ids_are_distinguishable() {
        let s = small_store();
        assert!(s.image("zzz").is_none());
        assert!(s.texts("b").is_none());
        assert_eq!(s.texts("a").unwrap().k(), 2);
    }

    #[test]
    fn detects_corruption() {
        let bytes = small_store().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(StoreError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(StoreError::UnsupportedVersion(9))));
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes[..bytes.len() - 3]),
            Err(StoreError::Truncated { record: 3, count: 4 })
        ));
        assert!(matches!(EmbeddingStore::from_bytes(&bytes[..10]), Err(StoreError::CorruptHeader(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(EmbeddingStore::from_bytes(&extra), Err(StoreError::CorruptRecord { .. })));
    }

    fn arb_store() -> impl Strategy<Value = EmbeddingStore> {
        (1usize..9, 1usize..4).prop_flat_map(|(dim, k)| {
            let vecf = move || prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), dim);
            (
                prop::collection::btree_map("[a-z0-9/._-]{1,12}", vecf(), 0..8),
                prop::collection::btree_map("\\PC{1,6}", prop::collection::vec(vecf(), k), 0..5),
            )
                .prop_map(move |(images, texts)| {
                    let mut s = EmbeddingStore::new(dim, k).unwrap();
                    for (id, v) in images {
                        s.insert_image_f32(id, v).unwrap();
                    }
                    for (id, blocks) in texts {
                        s.insert_texts_f32(id, &blocks).unwrap();
                    }
                    s
                })
        })
    }

    proptest! {
        #[test]
        fn random_stores_round_trip_bit_exactly(s in arb_store()) {
            let bytes = s.to_bytes();
            let back = EmbeddingStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for id in s.image_ids() {
                let a: Vec<u32> = s.image_raw(id).unwrap().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = back.image_raw(id).unwrap().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
            prop_assert_eq!(back, s);
        }
    }
}
