//! Matched-pair training-throughput benchmark.
//!
//! The interesting comparison is the asymmetric model (encoder sees only
//! unmasked tokens) against the all-tokens baseline of the same depth and
//! width. Both run the identical synthetic workload — same clips, same mask
//! plans, same joint loss, forward + backward each batch — so the only
//! difference is how many tokens the layers process.
//!
//! Data generation and model init happen outside the timed region. Peak
//! memory comes from the tensor tracker, which is process-global: run
//! benchmarks without other concurrent tensor work for meaningful numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;
use thiserror::Error;

use crate::audio::Spectrogram;
use crate::mask::{mask_random, MaskError, MaskPlan, MaskStrategy};
use crate::model::{flops_estimate, Model, ModelConfig, ModelError, Variant};
use crate::nn::tensor::mem;
use crate::nn::{Graph, NnError};
use crate::objectives::{loss_nodes, LossConfig, ObjectiveError};
use crate::tokenize::{tokenize, TokenBatch, TokenizeError, TokenizeMode};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub d: usize,
    pub heads: usize,
    pub mode: TokenizeMode,
    /// Tokens per clip; must be a multiple of the mode's channel rows.
    pub n_tokens: usize,
    pub p: f64,
    /// Depth of the asymmetric model. The baseline runs the same total
    /// depth (`enc_layers + dec_layers`) over all tokens.
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub clips_per_batch: usize,
    /// Batches in the timed region; the median batch time is reported.
    pub n_batches: usize,
    pub warmup_batches: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            d: 256,
            heads: 4,
            mode: TokenizeMode::Patch,
            n_tokens: 496,
            p: 0.75,
            enc_layers: 6,
            dec_layers: 2,
            clips_per_batch: 32,
            n_batches: 3,
            warmup_batches: 3,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub variant: Variant,
    pub d: usize,
    pub heads: usize,
    pub n_tokens: usize,
    pub p: f64,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub clips_per_batch: usize,
    pub n_batches: usize,
    pub threads: usize,
    pub precision: String,
    /// Median wall-clock seconds per forward+backward batch.
    pub sec_per_batch: f64,
    /// Median batch time scaled to a nominal 100-batch epoch.
    pub sec_per_epoch: f64,
    pub tokens_per_sec: f64,
    /// Tracker high-water mark across the measured batches.
    pub peak_bytes: usize,
    /// Modeled training cost (backward ≈ 2× forward, so 3× forward total).
    pub train_flops_per_batch: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchComparison {
    pub mae: BenchReport,
    pub baseline: BenchReport,
    /// baseline / mae batch time: > 1 means the asymmetric model is faster.
    pub speedup: f64,
    /// Modeled cost ratio under the same convention as the timings.
    pub flops_ratio: f64,
    /// baseline / mae peak tracker bytes.
    pub memory_ratio: f64,
}

fn validate(cfg: &BenchConfig) -> Result<(), BenchError> {
    if cfg.threads == 0 {
        return Err(BenchError::BadConfig(
            "threads must be pinned to a fixed count ≥ 1".into(),
        ));
    }
    if cfg.n_batches == 0 || cfg.clips_per_batch == 0 {
        return Err(BenchError::BadConfig(
            "need at least one batch of at least one clip".into(),
        ));
    }
    let rows = cfg.mode.n_channel_rows();
    if cfg.n_tokens == 0 || cfg.n_tokens % rows != 0 {
        return Err(BenchError::BadConfig(format!(
            "n_tokens {} is not a positive multiple of {} channel rows",
            cfg.n_tokens, rows
        )));
    }
    Ok(())
}

fn model_config(cfg: &BenchConfig, variant: Variant) -> ModelConfig {
    match variant {
        Variant::MaeAst => ModelConfig {
            enc_layers: cfg.enc_layers,
            dec_layers: cfg.dec_layers,
            d: cfg.d,
            heads: cfg.heads,
            mode: cfg.mode,
            variant,
        },
        // Same total depth, all of it over the full token sequence.
        Variant::WithMaskTokens => ModelConfig {
            enc_layers: 0,
            dec_layers: cfg.enc_layers + cfg.dec_layers,
            d: cfg.d,
            heads: cfg.heads,
            mode: cfg.mode,
            variant,
        },
    }
}

/// Seeded noise clips shaped like real tokenized features, plus one uniform
/// random mask plan per clip. Identical across variants for a fixed config.
fn synthetic_batch(cfg: &BenchConfig) -> Result<(Vec<TokenBatch>, Vec<MaskPlan>), BenchError> {
    let rows = cfg.mode.n_channel_rows();
    let n_frames = (cfg.n_tokens / rows) * cfg.mode.patch_frames();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clips = Vec::with_capacity(cfg.clips_per_batch);
    let mut plans = Vec::with_capacity(cfg.clips_per_batch);
    for i in 0..cfg.clips_per_batch {
        let vals: Vec<f32> = (0..128 * n_frames)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let s = Spectrogram::from_values(vals, n_frames, true);
        let tb = tokenize(&s, cfg.mode, format!("bench{i:03}"))?;
        let plan = mask_random(tb.n_tokens(), cfg.p, MaskStrategy::PatchRandom, rng.gen())?;
        clips.push(tb);
        plans.push(plan);
    }
    Ok((clips, plans))
}

fn run_batch(
    model: &Model<f32>,
    clips: &[TokenBatch],
    plans: &[MaskPlan],
    loss: &LossConfig,
    pool: &rayon::ThreadPool,
) -> Result<(), BenchError> {
    pool.install(|| {
        clips
            .par_iter()
            .zip(plans.par_iter())
            .map(|(tb, plan)| {
                let mut g = Graph::new();
                let nodes = model.pretrain_nodes(&mut g, tb, plan)?;
                let l = loss_nodes(&mut g, &nodes, loss)?;
                g.backward(l.total)?;
                let _grads = g.take_named_grads();
                Ok(())
            })
            .collect::<Result<Vec<()>, BenchError>>()
    })?;
    Ok(())
}

fn median(times: &mut [f64]) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

/// Time one variant over the synthetic workload.
pub fn bench_variant(cfg: &BenchConfig, variant: Variant) -> Result<BenchReport, BenchError> {
    validate(cfg)?;
    let mcfg = model_config(cfg, variant);
    mcfg.validate()?;
    let model = Model::<f32>::init(mcfg, cfg.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| BenchError::BadConfig(format!("thread pool: {e}")))?;
    let (clips, plans) = synthetic_batch(cfg)?;
    let loss = LossConfig::default();

    for _ in 0..cfg.warmup_batches {
        run_batch(&model, &clips, &plans, &loss, &pool)?;
    }
    mem::reset_peak();
    let mut times = Vec::with_capacity(cfg.n_batches);
    for _ in 0..cfg.n_batches {
        let t0 = Instant::now();
        run_batch(&model, &clips, &plans, &loss, &pool)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let peak_bytes = mem::peak_bytes();
    let sec_per_batch = median(&mut times);
    let forward = flops_estimate(&mcfg, cfg.n_tokens, cfg.p) * cfg.clips_per_batch as f64;
    Ok(BenchReport {
        variant,
        d: cfg.d,
        heads: cfg.heads,
        n_tokens: cfg.n_tokens,
        p: cfg.p,
        enc_layers: mcfg.enc_layers,
        dec_layers: mcfg.dec_layers,
        clips_per_batch: cfg.clips_per_batch,
        n_batches: cfg.n_batches,
        threads: cfg.threads,
        precision: "f32".into(),
        sec_per_batch,
        sec_per_epoch: sec_per_batch * 100.0,
        tokens_per_sec: (cfg.clips_per_batch * cfg.n_tokens) as f64 / sec_per_batch.max(1e-12),
        peak_bytes,
        train_flops_per_batch: 3.0 * forward,
    })
}

/// Both variants over the identical workload, plus the derived ratios.
pub fn compare(cfg: &BenchConfig) -> Result<BenchComparison, BenchError> {
    let mae = bench_variant(cfg, Variant::MaeAst)?;
    let baseline = bench_variant(cfg, Variant::WithMaskTokens)?;
    Ok(BenchComparison {
        speedup: baseline.sec_per_batch / mae.sec_per_batch.max(1e-12),
        flops_ratio: baseline.train_flops_per_batch / mae.train_flops_per_batch.max(1e-12),
        memory_ratio: baseline.peak_bytes as f64 / (mae.peak_bytes as f64).max(1.0),
        mae,
        baseline,
    })
}
