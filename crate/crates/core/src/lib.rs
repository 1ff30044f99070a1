//! Linear probes over fused image and description embeddings.
//!
//! The pipeline: describe each image with a multimodal model
//! ([`descriptions`]), embed images and descriptions with one contrastive
//! encoder ([`encoder`]), average the description embeddings and fuse them
//! with the image embedding ([`embedding`]), then train and evaluate a
//! softmax linear probe per fusion strategy ([`probe`], [`harness`]).

pub mod dataset;
pub mod descriptions;
pub mod embedding;
pub mod encoder;
pub mod harness;
pub mod probe;
pub mod service;
