//! Masked/unmasked index partitions. Random strategies draw a uniform
//! subset of exactly round-half-up(p·N) tokens; patch-chunked stamps C×C
//! grid squares and trims back to the exact count; frame-chunked drops
//! length-M spans with a start probability calibrated so expected coverage
//! is p despite overlap. All draws are pure functions of an explicit seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::TokenBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    PatchRandom,
    PatchChunked,
    FrameRandom,
    FrameChunked,
}

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask ratio must lie strictly between 0 and 1, got {0}")]
    BadRatio(f64),
    #[error("need at least 2 tokens to split, got {0}")]
    TooFewTokens(usize),
    #[error("p={p} over {n} tokens leaves an empty side (need 1 <= round(p*N) <= N-1)")]
    DegenerateRatio { p: f64, n: usize },
    #[error("span length must be >= 1, got {0}")]
    BadSpan(usize),
    #[error("sequence of {n} tokens is not longer than the span length {m}")]
    SequenceTooShort { n: usize, m: usize },
    #[error("{0} consecutive span draws came out fully masked or fully unmasked")]
    DegenerateDraws(usize),
    #[error("chunk placement stalled after {0} attempts")]
    PlacementStalled(usize),
    #[error("broadcast requires a patch-chunked plan, got {0:?}")]
    NotBroadcastable(MaskStrategy),
    #[error(
        "broadcast across unequal clip lengths: plan covers {plan} tokens, clip '{clip}' has {got}"
    )]
    UnequalLengths {
        plan: usize,
        clip: String,
        got: usize,
    },
}

/// A partition of token indices 0..N into masked and unmasked sides, both
/// kept sorted. `fell_back` records a chunked request that was served by
/// random masking because the grid was too small.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
    pub p_target: f64,
    pub strategy: MaskStrategy,
    pub fell_back: bool,
}

impl MaskPlan {
    pub fn n_tokens(&self) -> usize {
        self.masked.len() + self.unmasked.len()
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn check_exact_count_args(n: usize, p: f64) -> Result<usize, MaskError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MaskError::BadRatio(p));
    }
    if n < 2 {
        return Err(MaskError::TooFewTokens(n));
    }
    let k = round_half_up(p * n as f64);
    if k == 0 || k >= n {
        return Err(MaskError::DegenerateRatio { p, n });
    }
    Ok(k)
}

fn plan_from_flags(flags: &[bool], p: f64, strategy: MaskStrategy, fell_back: bool) -> MaskPlan {
    let mut masked = Vec::new();
    let mut unmasked = Vec::new();
    for (i, &m) in flags.iter().enumerate() {
        if m {
            masked.push(i);
        } else {
            unmasked.push(i);
        }
    }
    MaskPlan {
        masked,
        unmasked,
        p_target: p,
        strategy,
        fell_back,
    }
}

/// Uniformly random subset of exactly round(p·N) masked indices.
pub fn mask_random(
    n: usize,
    p: f64,
    strategy: MaskStrategy,
    seed: u64,
) -> Result<MaskPlan, MaskError> {
    let k = check_exact_count_args(n, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first k slots end up a uniform k-subset.
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut flags = vec![false; n];
    for &i in &idx[..k] {
        flags[i] = true;
    }
    Ok(plan_from_flags(&flags, p, strategy, false))
}

/// Stamps C×C squares (C drawn once per plan from {3,4,5}) at uniform grid
/// anchors, clipped at the edges, until coverage reaches round(p·N); then
/// un-masks uniformly random masked cells back down to the exact count.
/// Grids thinner than 3 in either direction fall back to random masking.
pub fn mask_patch_chunked(
    n_time: usize,
    n_rows: usize,
    p: f64,
    seed: u64,
) -> Result<MaskPlan, MaskError> {
    let n = n_time * n_rows;
    let k = check_exact_count_args(n, p)?;
    if n_time < 3 || n_rows < 3 {
        log::warn!(
            "grid {}x{} too small for 3x3 chunks; falling back to random masking",
            n_time,
            n_rows
        );
        let mut plan = mask_random(n, p, MaskStrategy::PatchRandom, seed)?;
        plan.fell_back = true;
        return Ok(plan);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_size = *[3usize, 4, 5].choose(&mut rng).unwrap();
    let mut flags = vec![false; n];
    let mut covered = 0usize;
    let mut attempts = 0usize;
    let cap = 1000 + 100 * n;
    while covered < k {
        attempts += 1;
        if attempts > cap {
            return Err(MaskError::PlacementStalled(attempts));
        }
        let t0 = rng.gen_range(0..n_time);
        let r0 = rng.gen_range(0..n_rows);
        for t in t0..(t0 + c_size).min(n_time) {
            for r in r0..(r0 + c_size).min(n_rows) {
                let i = t * n_rows + r;
                if !flags[i] {
                    flags[i] = true;
                    covered += 1;
                }
            }
        }
    }
    // Trim overshoot: un-mask uniformly random masked cells.
    let mut masked_cells: Vec<usize> = (0..n).filter(|&i| flags[i]).collect();
    while covered > k {
        let pick = rng.gen_range(0..masked_cells.len());
        flags[masked_cells.swap_remove(pick)] = false;
        covered -= 1;
    }
    Ok(plan_from_flags(
        &flags,
        p,
        MaskStrategy::PatchChunked,
        false,
    ))
}

/// Span-start probability calibrated so that expected coverage is p_target
/// once span overlap is accounted for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanMaskCalibration {
    pub span_len: usize,
    pub p_start: f64,
    pub p_target: f64,
}

pub fn calibrate_span_p(p_target: f64, span_len: usize) -> Result<SpanMaskCalibration, MaskError> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(MaskError::BadRatio(p_target));
    }
    if span_len == 0 {
        return Err(MaskError::BadSpan(span_len));
    }
    // An index stays unmasked iff none of the (up to) span_len potential
    // starts covering it fire: (1-P)^span_len = 1-p ⇒ P = 1-(1-p)^(1/span_len).
    let p_start = 1.0 - (1.0 - p_target).powf(1.0 / span_len as f64);
    Ok(SpanMaskCalibration {
        span_len,
        p_start,
        p_target,
    })
}

/// Each index independently starts a masked span of `span_len` (clipped at
/// the sequence end) with probability `p_start`. The masked count is random;
/// fully-masked or fully-unmasked draws are retried a bounded number of times.
pub fn mask_frame_chunked(
    n: usize,
    cal: &SpanMaskCalibration,
    seed: u64,
) -> Result<MaskPlan, MaskError> {
    if n <= cal.span_len {
        return Err(MaskError::SequenceTooShort { n, m: cal.span_len });
    }
    const MAX_REDRAWS: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_REDRAWS {
        let mut flags = vec![false; n];
        for i in 0..n {
            if rng.gen_range(0.0..1.0) < cal.p_start {
                for flag in flags.iter_mut().take((i + cal.span_len).min(n)).skip(i) {
                    *flag = true;
                }
            }
        }
        let covered = flags.iter().filter(|&&f| f).count();
        if covered > 0 && covered < n {
            return Ok(plan_from_flags(
                &flags,
                cal.p_target,
                MaskStrategy::FrameChunked,
                false,
            ));
        }
    }
    Err(MaskError::DegenerateDraws(MAX_REDRAWS))
}

/// The identical partition applied to every clip of an equal-length batch.
/// Only chunked patch plans are shared this way; the point is to amortize
/// one plan over a batch, and the fallback path (random) stays per-clip.
pub fn broadcast_mask<'a, I>(plan: &MaskPlan, batch: I) -> Result<Vec<MaskPlan>, MaskError>
where
    I: IntoIterator<Item = &'a TokenBatch>,
{
    if plan.strategy != MaskStrategy::PatchChunked {
        return Err(MaskError::NotBroadcastable(plan.strategy));
    }
    let mut n = 0;
    for tb in batch {
        if tb.n_tokens() != plan.n_tokens() {
            return Err(MaskError::UnequalLengths {
                plan: plan.n_tokens(),
                clip: tb.clip_id.clone(),
                got: tb.n_tokens(),
            });
        }
        n += 1;
    }
    Ok(vec![plan.clone(); n])
}

/// Mean number of masked 4-neighbors per masked token on the (time × row)
/// grid. Frame sequences are the n_rows = 1 special case, where this
/// degenerates to left/right adjacency.
pub fn clustering_stat(plan: &MaskPlan, n_time: usize, n_rows: usize) -> f64 {
    assert_eq!(plan.n_tokens(), n_time * n_rows, "plan does not fit grid");
    if plan.masked.is_empty() {
        return 0.0;
    }
    let mut flags = vec![false; plan.n_tokens()];
    for &i in &plan.masked {
        flags[i] = true;
    }
    let mut total = 0usize;
    for &i in &plan.masked {
        let (t, r) = (i / n_rows, i % n_rows);
        if t > 0 && flags[i - n_rows] {
            total += 1;
        }
        if t + 1 < n_time && flags[i + n_rows] {
            total += 1;
        }
        if r > 0 && flags[i - 1] {
            total += 1;
        }
        if r + 1 < n_rows && flags[i + 1] {
            total += 1;
        }
    }
    total as f64 / plan.masked.len() as f64
}

/// Monte Carlo summary of a strategy's behavior, serialized by the CLI.
#[derive(Debug, Serialize)]
pub struct MaskStats {
    pub strategy: MaskStrategy,
    pub n: usize,
    pub p: f64,
    pub trials: usize,
    pub mean_fraction: f64,
    pub std_fraction: f64,
    pub clustering_stat: f64,
}

/// Runs `trials` independent draws (seeds seed, seed+1, …) on an
/// n_time × n_rows grid and averages coverage and clustering.
pub fn mask_stats(
    strategy: MaskStrategy,
    n_time: usize,
    n_rows: usize,
    p: f64,
    trials: usize,
    seed: u64,
) -> Result<MaskStats, MaskError> {
    assert!(trials > 0, "need at least one trial");
    let n = n_time * n_rows;
    let cal = calibrate_span_p(p, 10).ok();
    let mut fractions = Vec::with_capacity(trials);
    let mut cluster_sum = 0.0;
    for t in 0..trials {
        let s = seed.wrapping_add(t as u64);
        let plan = match strategy {
            MaskStrategy::PatchRandom | MaskStrategy::FrameRandom => {
                mask_random(n, p, strategy, s)?
            }
            MaskStrategy::PatchChunked => mask_patch_chunked(n_time, n_rows, p, s)?,
            MaskStrategy::FrameChunked => {
                mask_frame_chunked(n, cal.as_ref().expect("calibration failed"), s)?
            }
        };
        fractions.push(plan.masked.len() as f64 / n as f64);
        cluster_sum += clustering_stat(&plan, n_time, n_rows);
    }
    let mean = fractions.iter().sum::<f64>() / trials as f64;
    let var = fractions
        .iter()
        .map(|f| (f - mean) * (f - mean))
        .sum::<f64>()
        / trials as f64;
    Ok(MaskStats {
        strategy,
        n,
        p,
        trials,
        mean_fraction: mean,
        std_fraction: var.sqrt(),
        clustering_stat: cluster_sum / trials as f64,
    })
}
