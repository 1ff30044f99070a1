//! Seeded synthetic datasets for desk-scale checks of the whole pipeline.
//!
//! Every class gets one prototype per channel. A sample's image embedding is
//! `image_signal * prototype + N(0, I)`. Its `k` description embeddings share
//! a per-sample draw `text_signal * prototype + N(0, I)` and each adds its
//! own `N(0, desc_noise^2 I)`, so pooling only averages away the
//! description-level noise.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, EmbeddingStore, SampleRecord, Split, SplitCounts};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    pub dim: usize,
    pub classes: usize,
    pub samples: usize,
    pub k: usize,
    pub test_fraction: f64,
    pub image_signal: f64,
    pub text_signal: f64,
    pub desc_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            dim: 16,
            classes: 4,
            samples: 400,
            k: 10,
            test_fraction: 0.25,
            image_signal: 0.5,
            text_signal: 0.5,
            desc_noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.classes == 0 {
            return bad("classes must be positive");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must be in [0, 1)");
        }
        let (train, test) = self.split_sizes();
        if train == 0 || test == 0 {
            return bad("need at least one train and one test sample");
        }
        for (v, name) in [
            (self.image_signal, "image_signal"),
            (self.text_signal, "text_signal"),
            (self.desc_noise, "desc_noise"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(HarnessError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    fn split_sizes(&self) -> (usize, usize) {
        let test = (self.samples as f64 * self.test_fraction).round() as usize;
        (self.samples - test.min(self.samples), test.min(self.samples))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub store: EmbeddingStore,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn synth_dataset(config: &SynthConfig) -> Result<SynthDataset, HarnessError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let image_protos: Vec<Vec<f64>> = (0..config.classes).map(|_| gaussian(&mut rng, d)).collect();
    let text_protos: Vec<Vec<f64>> = (0..config.classes).map(|_| gaussian(&mut rng, d)).collect();

    let (train, test) = config.split_sizes();
    let mut order: Vec<usize> = (0..config.samples).collect();
    order.shuffle(&mut rng);
    let mut is_test = vec![false; config.samples];
    for &i in &order[..test] {
        is_test[i] = true;
    }

    let classes: Vec<String> = (0..config.classes).map(|c| format!("class_{c:03}")).collect();
    let mut store = EmbeddingStore::new(d, config.k)?;
    let mut samples = Vec::with_capacity(config.samples);
    for (i, &test) in is_test.iter().enumerate() {
        let c = i % config.classes;
        let id = format!("{}-{i:06}", config.name);
        let image: Vec<f32> = image_protos[c]
            .iter()
            .zip(gaussian(&mut rng, d))
            .map(|(p, n)| (config.image_signal * p + n) as f32)
            .collect();
        let base: Vec<f64> = text_protos[c]
            .iter()
            .zip(gaussian(&mut rng, d))
            .map(|(p, n)| config.text_signal * p + n)
            .collect();
        let descs: Vec<Vec<f32>> = (0..config.k)
            .map(|_| {
                base.iter()
                    .zip(gaussian(&mut rng, d))
                    .map(|(b, n)| (b + config.desc_noise * n) as f32)
                    .collect()
            })
            .collect();
        store.insert_image_f32(id.clone(), image)?;
        store.insert_texts_f32(id.clone(), &descs)?;
        samples.push(SampleRecord {
            image_ref: format!("synthetic://{id}"),
            id,
            split: if test { Split::Test } else { Split::Train },
            label: classes[c].clone(),
            image_meta: None,
        });
    }
    let manifest = DatasetManifest::new(
        config.name.clone(),
        classes,
        samples,
        Some(SplitCounts { train, test }),
        Some(format!("synthetic seed {}", config.seed)),
    )?;
    Ok(SynthDataset { manifest, store })
}

/// Paths written by [`write_synth`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub manifest: PathBuf,
    pub embeddings: PathBuf,
}

/// Writes `manifest.jsonl` and `embeddings.femb` into `dir`.
pub fn write_synth(dataset: &SynthDataset, dir: &Path) -> Result<SynthFiles, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let files = SynthFiles {
        manifest: dir.join("manifest.jsonl"),
        embeddings: dir.join("embeddings.femb"),
    };
    dataset.manifest.write(&files.manifest)?;
    crate::dataset::write_embeddings(&dataset.store, &files.embeddings)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let config = SynthConfig { classes: 2, dim: 8, samples: 200, seed: 17, ..SynthConfig::default() };
        let a = synth_dataset(&config).unwrap();
        let b = synth_dataset(&config).unwrap();
        assert_eq!(a.store.to_bytes(), b.store.to_bytes());
        assert_eq!(a.manifest.to_jsonl(), b.manifest.to_jsonl());
        let c = synth_dataset(&SynthConfig { seed: 18, ..config }).unwrap();
        assert_ne!(a.store.to_bytes(), c.store.to_bytes());
    }

    #[test]
    fn shape_matches_config() {
        let config = SynthConfig { classes: 3, dim: 5, samples: 40, k: 4, test_fraction: 0.25, ..SynthConfig::default() };
        let ds = synth_dataset(&config).unwrap();
        assert_eq!(ds.manifest.split_counts(), SplitCounts { train: 30, test: 10 });
        assert_eq!(ds.store.num_images(), 40);
        assert_eq!(ds.store.num_texts(), 40);
        assert_eq!(ds.store.k(), 4);
        assert_eq!(ds.store.dim(), 5);
    }

    #[test]
    fn invalid_configs() {
        for c in [
            SynthConfig { dim: 0, ..SynthConfig::default() },
            SynthConfig { classes: 0, ..SynthConfig::default() },
            SynthConfig { samples: 1, ..SynthConfig::default() },
            SynthConfig { test_fraction: 1.0, ..SynthConfig::default() },
            SynthConfig { image_signal: -1.0, ..SynthConfig::default() },
        ] {
            assert!(matches!(synth_dataset(&c), Err(HarnessError::InvalidConfig(_))), "{c:?}");
        }
    }
}
