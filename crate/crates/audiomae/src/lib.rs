//! Self-supervised pretraining for audio: log-mel features, patch/frame
//! tokenization, token masking, an asymmetric transformer encoder/decoder
//! trained with reconstruction and contrastive objectives, plus a benchmark
//! harness comparing the asymmetric model against a full-depth baseline.
//!
//! The numerically heavy pieces (tensor ops, autodiff graph, attention) live
//! in [`nn`]; everything else builds on top of it. All randomness flows
//! through explicitly seeded generators so every entry point is reproducible
//! bit-for-bit across runs and thread counts.

pub mod audio;
pub mod bench;
pub mod mask;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod tokenize;
pub mod trainer;
