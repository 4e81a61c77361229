//! Training drivers.
//!
//! [`pretrain`] runs the self-supervised masked-prediction loop over a
//! directory of `.fbank` features and emits a checkpoint plus a JSONL
//! metrics stream. [`finetune`] loads such a checkpoint and trains a
//! classification head (optionally unfreezing the encoder) against a labels
//! file.
//!
//! Every random choice — parameter init, epoch shuffling, mask draws, the
//! train/eval split, head init — derives from the single `seed` in the
//! config via independent ChaCha8 streams, so a run is reproducible
//! bit-for-bit for a fixed worker count: loss values, metrics loss fields,
//! and checkpoint bytes all match across repeats. (Throughput fields such as
//! `tokens_per_sec` and `peak_bytes` are measurements, not functions of the
//! seed.)

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{fit_normalizer, normalize, read_fbank, FeatureError, Normalizer};
use crate::mask::{
    broadcast_mask, calibrate_span_p, mask_frame_chunked, mask_patch_chunked, mask_random,
    MaskError, MaskPlan, MaskStrategy, SpanMaskCalibration,
};
use crate::model::{Model, ModelConfig, ModelError};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::init::trunc_normal;
use crate::nn::tensor::mem;
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, LrSchedule, NnError, Tensor};
use crate::objectives::{loss_nodes, LossConfig, ObjectiveError};
use crate::tokenize::{tokenize, TokenBatch, TokenizeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no .fbank files in {0}")]
    EmptyDataDir(PathBuf),
    #[error("clip '{clip}' spans {tokens} tokens, over the {budget}-token batch budget")]
    OversizedClip {
        clip: String,
        tokens: usize,
        budget: usize,
    },
    #[error("config: {0}")]
    BadConfig(String),
    #[error("labels file lists {labels} clips but the data dir holds {clips}")]
    LabelMismatch { labels: usize, clips: usize },
    #[error("labels file line {line}: {detail}")]
    BadLabel { line: usize, detail: String },
    #[error("masking clip '{clip}': {source}")]
    ClipMask {
        clip: String,
        #[source]
        source: MaskError,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pretraining hyperparameters. Everything that influences the trained
/// weights lives here; two runs with equal configs and data are identical.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub mask_strategy: MaskStrategy,
    pub mask_p: f64,
    /// Span length for the frame-chunked strategy; ignored otherwise.
    pub span_len: usize,
    /// Greedy batching budget: clips are packed in corpus order until the
    /// next one would push the batch past this many tokens.
    pub max_tokens_per_batch: usize,
    pub total_steps: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    /// Polynomial decay exponent for the learning-rate schedule.
    pub lr_power: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Emit a metrics line every this many steps (the last step always logs).
    pub log_every: usize,
    /// Overwrite the checkpoint every this many steps; 0 = only at the end.
    pub checkpoint_every: usize,
    /// Worker threads for the per-clip forward/backward fan-out. Must be
    /// pinned (≥ 1) so runs are reproducible.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            mask_strategy: MaskStrategy::PatchRandom,
            mask_p: 0.75,
            span_len: 10,
            max_tokens_per_batch: 16_384,
            total_steps: 1000,
            lr0: 1e-4,
            weight_decay: 0.01,
            lr_power: 1.0,
            warmup_steps: 0,
            seed: 0,
            log_every: 1,
            checkpoint_every: 1000,
            threads: 1,
        }
    }
}

/// Sidecar stored with every checkpoint: enough to rebuild the model and
/// feed it correctly-scaled features. `n_classes` is present once a
/// classification head has been attached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptMeta {
    pub model: ModelConfig,
    pub normalizer: Normalizer,
    #[serde(default)]
    pub n_classes: Option<usize>,
}

/// One line of `metrics.jsonl`. Loss fields and `lr` are deterministic for
/// a fixed seed and worker count; the throughput fields are wall-clock
/// measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub nce: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    /// Batch-mean total loss at the last step; absent when no steps ran.
    pub final_total: Option<f64>,
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
}

/// Classifier fine-tuning hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    /// Fraction of clips held out for evaluation (at least one clip held
    /// out and at least one kept whenever the corpus has ≥ 2 clips).
    pub eval_fraction: f64,
    /// When false (the default) the encoder is frozen: clip embeddings are
    /// computed once and only the head trains. When true, gradients flow
    /// into the encoder as well. The decoder never trains here.
    pub unfreeze_encoder: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 200,
            lr0: 1e-3,
            weight_decay: 0.01,
            eval_fraction: 0.2,
            unfreeze_encoder: false,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// True when the task cannot support a meaningful held-out evaluation
    /// (fewer than two clips or fewer than two classes).
    pub degenerate: bool,
    pub encoder_updated: bool,
}

// Disjoint ChaCha8 stream domains hung off the one user-facing seed. The
// model init itself runs on the default stream 0, so domains start at 1.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_HEAD: u64 = 4;

fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 56) | index);
    rng
}

/// Greedy order-preserving packing: walk the clips, starting a new batch
/// whenever the next clip would overflow the budget. A single clip larger
/// than the budget is an error rather than a silent solo batch.
pub fn batch_by_tokens<'a>(
    clips: &[&'a TokenBatch],
    max_tokens: usize,
) -> Result<Vec<Vec<&'a TokenBatch>>, TrainError> {
    let mut out: Vec<Vec<&TokenBatch>> = Vec::new();
    let mut cur: Vec<&TokenBatch> = Vec::new();
    let mut used = 0usize;
    for &tb in clips {
        let n = tb.n_tokens();
        if n > max_tokens {
            return Err(TrainError::OversizedClip {
                clip: tb.clip_id.clone(),
                tokens: n,
                budget: max_tokens,
            });
        }
        if used + n > max_tokens && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(tb);
        used += n;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

fn list_fbank(dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().map_or(false, |x| x == "fbank"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(TrainError::EmptyDataDir(dir.to_path_buf()));
    }
    Ok(files)
}

fn clip_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool, TrainError> {
    if threads == 0 {
        return Err(TrainError::BadConfig(
            "threads must be pinned to a fixed count ≥ 1".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TrainError::BadConfig(format!("thread pool: {e}")))
}

fn draw_plan(
    strategy: MaskStrategy,
    tb: &TokenBatch,
    p: f64,
    cal: Option<&SpanMaskCalibration>,
    seed: u64,
) -> Result<MaskPlan, TrainError> {
    let plan = match strategy {
        MaskStrategy::PatchRandom | MaskStrategy::FrameRandom => {
            mask_random(tb.n_tokens(), p, strategy, seed)
        }
        MaskStrategy::PatchChunked => {
            mask_patch_chunked(tb.n_time_steps, tb.n_channel_rows, p, seed)
        }
        MaskStrategy::FrameChunked => {
            let cal = cal.expect("span calibration precomputed for frame-chunked");
            mask_frame_chunked(tb.n_tokens(), cal, seed)
        }
    };
    plan.map_err(|source| TrainError::ClipMask {
        clip: tb.clip_id.clone(),
        source,
    })
}

/// One plan per clip. A chunked-patch batch whose clips all share a grid
/// draws a single plan and broadcasts it; anything else (mixed lengths, a
/// thin grid falling back to random, the other strategies) draws per clip.
fn draw_batch_plans(
    batch: &[&TokenBatch],
    strategy: MaskStrategy,
    p: f64,
    cal: Option<&SpanMaskCalibration>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MaskPlan>, TrainError> {
    if strategy == MaskStrategy::PatchChunked {
        let (t0, r0) = (batch[0].n_time_steps, batch[0].n_channel_rows);
        if batch
            .iter()
            .all(|tb| tb.n_time_steps == t0 && tb.n_channel_rows == r0)
        {
            let plan = draw_plan(strategy, batch[0], p, cal, rng.gen())?;
            if !plan.fell_back {
                return Ok(broadcast_mask(&plan, batch.iter().copied())?);
            }
            // Thin grid: the shared draw degraded to random, which must not
            // be broadcast. Fall through to independent per-clip draws.
        }
    }
    batch
        .iter()
        .map(|tb| draw_plan(strategy, tb, p, cal, rng.gen()))
        .collect()
}

struct ClipOut {
    total: f64,
    recon: f64,
    nce: f64,
    grads: BTreeMap<String, Tensor<f32>>,
}

/// Forward + backward each clip on its own graph (in parallel), then reduce
/// gradients in clip order and take one optimizer step. The reduction is a
/// plain sequential sum scaled by 1/B, so its result does not depend on how
/// the pool scheduled the clips.
#[allow(clippy::too_many_arguments)]
fn pretrain_step(
    model: &mut Model<f32>,
    batch: &[&TokenBatch],
    plans: &[MaskPlan],
    loss: &LossConfig,
    pool: &rayon::ThreadPool,
    adam: &mut AdamState<f32>,
    adam_cfg: &AdamConfig,
    t: usize,
    lr: f64,
) -> Result<(f64, f64, f64), TrainError> {
    let model_ref: &Model<f32> = model;
    let outs: Vec<ClipOut> = pool.install(|| {
        batch
            .par_iter()
            .zip(plans.par_iter())
            .map(|(tb, plan)| {
                let mut g = Graph::new();
                let nodes = model_ref.pretrain_nodes(&mut g, tb, plan)?;
                let l = loss_nodes(&mut g, &nodes, loss)?;
                // Read the losses before backward: the tape frees forward
                // values as soon as they are consumed.
                let total = g.scalar(l.total) as f64;
                let recon = g.scalar(l.recon) as f64;
                let nce = g.scalar(l.nce) as f64;
                g.backward(l.total)?;
                Ok(ClipOut {
                    total,
                    recon,
                    nce,
                    grads: g.take_named_grads(),
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()
    })?;

    let b = outs.len();
    let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let (mut total, mut recon, mut nce) = (0.0f64, 0.0f64, 0.0f64);
    for o in outs {
        total += o.total;
        recon += o.recon;
        nce += o.nce;
        for (name, g) in o.grads {
            match grads.entry(name) {
                Entry::Vacant(v) => {
                    v.insert(g);
                }
                Entry::Occupied(mut e) => e.get_mut().add_assign(&g),
            }
        }
    }
    let inv = 1.0 / b as f64;
    for g in grads.values_mut() {
        g.scale_assign(inv as f32);
    }
    adam_step(&mut model.params, &grads, adam, t, lr, adam_cfg)?;
    Ok((total * inv, recon * inv, nce * inv))
}

/// Self-supervised pretraining over every `.fbank` clip in `data_dir`.
///
/// Feature scaling: if `data_dir/normalizer.json` exists it is used,
/// otherwise statistics are fit over the corpus. Either way the scaler is
/// stored in the checkpoint sidecar, so downstream consumers never need the
/// data dir again.
///
/// Outputs under `out_dir`: `metrics.jsonl` (one record per logged step)
/// and `checkpoint/` (overwritten in place at every save). A non-finite
/// value anywhere in a step aborts the run with an error, leaving the most
/// recent periodic checkpoint on disk.
pub fn pretrain(
    data_dir: &Path,
    out_dir: &Path,
    cfg: &TrainConfig,
) -> Result<TrainSummary, TrainError> {
    cfg.model.validate()?;
    if !cfg.loss.use_generative && !cfg.loss.use_discriminative {
        return Err(ObjectiveError::NoLossEnabled.into());
    }
    let pool = build_pool(cfg.threads)?;
    let cal = match cfg.mask_strategy {
        MaskStrategy::FrameChunked => Some(calibrate_span_p(cfg.mask_p, cfg.span_len)?),
        _ => None,
    };

    let files = list_fbank(data_dir)?;
    let mut specs = Vec::with_capacity(files.len());
    for f in &files {
        specs.push(read_fbank(f)?);
    }
    let norm_path = data_dir.join("normalizer.json");
    let normalizer: Normalizer = if norm_path.is_file() {
        serde_json::from_reader(File::open(&norm_path)?)?
    } else {
        fit_normalizer(&specs)?
    };
    let mut clips = Vec::with_capacity(specs.len());
    for (f, s) in files.iter().zip(&specs) {
        let ns = normalize(s, &normalizer)?;
        clips.push(tokenize(&ns, cfg.model.mode, clip_name(f))?);
    }
    drop(specs);

    let mut model = Model::<f32>::init(cfg.model, cfg.seed)?;
    let meta = CkptMeta {
        model: cfg.model,
        normalizer,
        n_classes: None,
    };
    let schedule = LrSchedule {
        lr0: cfg.lr0,
        total_steps: cfg.total_steps,
        power: cfg.lr_power,
        warmup_steps: cfg.warmup_steps,
    };
    let adam_cfg = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new();

    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let ckpt_dir = out_dir.join("checkpoint");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);

    let mut step = 0usize;
    let mut epoch = 0u64;
    let mut final_total = None;
    'train: while step < cfg.total_steps {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut substream(cfg.seed, STREAM_SHUFFLE, epoch));
        let refs: Vec<&TokenBatch> = order.iter().map(|&i| &clips[i]).collect();
        let batches = batch_by_tokens(&refs, cfg.max_tokens_per_batch)?;
        for batch in &batches {
            if step >= cfg.total_steps {
                break 'train;
            }
            step += 1;
            mem::reset_peak();
            let t0 = Instant::now();
            let mut mask_rng = substream(cfg.seed, STREAM_MASK, step as u64);
            let plans = draw_batch_plans(
                batch,
                cfg.mask_strategy,
                cfg.mask_p,
                cal.as_ref(),
                &mut mask_rng,
            )?;
            let lr = schedule.at(step - 1);
            let (total, recon, nce) = pretrain_step(
                &mut model, batch, &plans, &cfg.loss, &pool, &mut adam, &adam_cfg, step, lr,
            )?;
            final_total = Some(total);
            let elapsed = t0.elapsed().as_secs_f64();
            if step % cfg.log_every == 0 || step == cfg.total_steps {
                let batch_tokens: usize = batch.iter().map(|tb| tb.n_tokens()).sum();
                let rec = MetricsRecord {
                    step,
                    total,
                    recon,
                    nce,
                    lr,
                    tokens_per_sec: batch_tokens as f64 / elapsed.max(1e-12),
                    peak_bytes: mem::peak_bytes(),
                };
                serde_json::to_writer(&mut metrics, &rec)?;
                metrics.write_all(b"\n")?;
                metrics.flush()?;
            }
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                checkpoint::save(&ckpt_dir, &model.params, &meta)?;
            }
        }
        epoch += 1;
    }
    checkpoint::save(&ckpt_dir, &model.params, &meta)?;
    metrics.flush()?;
    Ok(TrainSummary {
        steps: step,
        final_total,
        checkpoint_dir: ckpt_dir,
        metrics_path,
    })
}

fn parse_labels(path: &Path) -> Result<Vec<(usize, String, usize)>, TrainError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (name, label) = line.split_once(',').ok_or_else(|| TrainError::BadLabel {
            line: i + 1,
            detail: "expected `file,label`".into(),
        })?;
        let label: usize = label.trim().parse().map_err(|_| TrainError::BadLabel {
            line: i + 1,
            detail: format!("label `{}` is not a class index", label.trim()),
        })?;
        out.push((i + 1, name.trim().to_string(), label));
    }
    if out.is_empty() {
        return Err(TrainError::BadLabel {
            line: 0,
            detail: "no labeled clips".into(),
        });
    }
    Ok(out)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Logits for a batch of precomputed clip embeddings, outside any graph.
fn head_logits(embs: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let (n, _) = embs.dim2();
    let (_, c) = w.dim2();
    let mut out = Tensor::zeros(&[n, c]);
    for r in 0..n {
        let e = embs.row(r);
        for j in 0..c {
            let mut acc = b.data()[j];
            for (k, &ev) in e.iter().enumerate() {
                acc += ev * w.at(k, j);
            }
            *out.at_mut(r, j) = acc;
        }
    }
    out
}

fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(logits.row(r)) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Train a classifier on top of a pretrained checkpoint.
///
/// `labels_path` maps every `.fbank` file in `data_dir` (by file name) to a
/// class index, one `file,label` pair per line. The clip set and the label
/// set must match exactly. Features are scaled with the normalizer stored
/// in the checkpoint, never refit.
///
/// Writes `out_dir/checkpoint/` (backbone + `head.*`, sidecar carrying
/// `n_classes`) and `out_dir/report.json`.
pub fn finetune(
    ckpt_dir: &Path,
    data_dir: &Path,
    labels_path: &Path,
    out_dir: &Path,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport, TrainError> {
    if !(0.0..1.0).contains(&cfg.eval_fraction) {
        return Err(TrainError::BadConfig(format!(
            "eval_fraction {} outside [0, 1)",
            cfg.eval_fraction
        )));
    }
    if cfg.steps == 0 {
        return Err(TrainError::BadConfig(
            "finetune needs at least one step".into(),
        ));
    }
    let pool = build_pool(cfg.threads)?;
    let meta: CkptMeta = checkpoint::load_sidecar(ckpt_dir)?;
    let params = checkpoint::load_params(ckpt_dir)?;
    let mut model = Model::from_params(meta.model, params)?;

    let labels = parse_labels(labels_path)?;
    let files = list_fbank(data_dir)?;
    if labels.len() != files.len() {
        return Err(TrainError::LabelMismatch {
            labels: labels.len(),
            clips: files.len(),
        });
    }
    let mut clips = Vec::with_capacity(labels.len());
    let mut y: Vec<usize> = Vec::with_capacity(labels.len());
    for (line, name, label) in &labels {
        let path = data_dir.join(name);
        if !path.is_file() {
            return Err(TrainError::BadLabel {
                line: *line,
                detail: format!("`{name}` not found in data dir"),
            });
        }
        let ns = normalize(&read_fbank(&path)?, &meta.normalizer)?;
        clips.push(tokenize(&ns, model.cfg.mode, name.clone())?);
        y.push(*label);
    }
    let n = clips.len();
    let n_classes = y.iter().copied().max().unwrap_or(0) + 1;

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(cfg.seed, STREAM_SPLIT, 0));
    let n_eval = if n >= 2 {
        ((cfg.eval_fraction * n as f64).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let (eval_idx, train_idx) = idx.split_at(n_eval);
    let degenerate = n_classes < 2 || n_eval == 0;

    let d = model.cfg.d;
    let mut head_rng = substream(cfg.seed, STREAM_HEAD, 0);
    model.params.insert(
        "head.w".into(),
        Arc::new(trunc_normal::<f32, _>(&mut head_rng, &[d, n_classes], 0.02)),
    );
    model
        .params
        .insert("head.b".into(), Arc::new(Tensor::zeros(&[n_classes])));

    let schedule = LrSchedule {
        lr0: cfg.lr0,
        total_steps: cfg.steps,
        power: 1.0,
        warmup_steps: 0,
    };
    let adam_cfg = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new();

    let train_labels: Vec<usize> = train_idx.iter().map(|&i| y[i]).collect();
    let eval_labels: Vec<usize> = eval_idx.iter().map(|&i| y[i]).collect();

    let (train_accuracy, heldout_accuracy) = if cfg.unfreeze_encoder {
        for t in 1..=cfg.steps {
            let model_ref = &model;
            let outs: Vec<BTreeMap<String, Tensor<f32>>> = pool.install(|| {
                train_idx
                    .par_iter()
                    .map(|&i| {
                        let mut g = Graph::new();
                        let w = g.param_named("head.w", Arc::clone(&model_ref.params["head.w"]));
                        let b = g.param_named("head.b", Arc::clone(&model_ref.params["head.b"]));
                        let logits = model_ref.finetune_logits(&mut g, &clips[i], w, b)?;
                        let ce = g.cross_entropy(logits, Arc::new(vec![y[i]]))?;
                        g.backward(ce)?;
                        Ok(g.take_named_grads())
                    })
                    .collect::<Result<Vec<_>, TrainError>>()
            })?;
            let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for o in outs {
                for (name, g) in o {
                    match grads.entry(name) {
                        Entry::Vacant(v) => {
                            v.insert(g);
                        }
                        Entry::Occupied(mut e) => e.get_mut().add_assign(&g),
                    }
                }
            }
            let inv = 1.0 / train_idx.len().max(1) as f32;
            for g in grads.values_mut() {
                g.scale_assign(inv);
            }
            adam_step(
                &mut model.params,
                &grads,
                &mut adam,
                t,
                schedule.at(t - 1),
                &adam_cfg,
            )?;
        }
        let eval_set = |ids: &[usize], labels: &[usize]| -> Result<f64, TrainError> {
            if ids.is_empty() {
                return Ok(0.0);
            }
            let hw = &model.params["head.w"];
            let hb = &model.params["head.b"];
            let mut hits = 0usize;
            for (&i, &l) in ids.iter().zip(labels) {
                let logits = model.finetune_forward(&clips[i], hw, hb)?;
                if argmax(logits.row(0)) == l {
                    hits += 1;
                }
            }
            Ok(hits as f64 / ids.len() as f64)
        };
        (
            eval_set(train_idx, &train_labels)?,
            eval_set(eval_idx, &eval_labels)?,
        )
    } else {
        // Frozen backbone: each clip's pooled embedding is a constant, so
        // compute them all once and train the head full-batch.
        let model_ref = &model;
        let embs: Vec<Tensor<f32>> = pool.install(|| {
            clips
                .par_iter()
                .map(|tb| {
                    let mut g = Graph::new();
                    let pooled = model_ref.pooled_encoding(&mut g, tb)?;
                    Ok(g.value(pooled).clone())
                })
                .collect::<Result<Vec<_>, TrainError>>()
        })?;
        let stack = |ids: &[usize]| -> Tensor<f32> {
            let mut x = Tensor::zeros(&[ids.len(), d]);
            for (r, &i) in ids.iter().enumerate() {
                x.row_mut(r).copy_from_slice(embs[i].row(0));
            }
            x
        };
        let x_train = stack(train_idx);
        let x_eval = stack(eval_idx);
        let labels_arc = Arc::new(train_labels.clone());
        for t in 1..=cfg.steps {
            let mut g = Graph::new();
            let x = g.input(x_train.clone());
            let w = g.param_named("head.w", Arc::clone(&model.params["head.w"]));
            let b = g.param_named("head.b", Arc::clone(&model.params["head.b"]));
            let logits = g.linear(x, w, b)?;
            let ce = g.cross_entropy(logits, Arc::clone(&labels_arc))?;
            g.backward(ce)?;
            let grads = g.take_named_grads();
            drop(g);
            adam_step(
                &mut model.params,
                &grads,
                &mut adam,
                t,
                schedule.at(t - 1),
                &adam_cfg,
            )?;
        }
        let hw = &model.params["head.w"];
        let hb = &model.params["head.b"];
        let train_acc = accuracy(&head_logits(&x_train, hw, hb), &train_labels);
        let eval_acc = if n_eval == 0 {
            0.0
        } else {
            accuracy(&head_logits(&x_eval, hw, hb), &eval_labels)
        };
        (train_acc, eval_acc)
    };

    fs::create_dir_all(out_dir)?;
    let out_meta = CkptMeta {
        model: model.cfg,
        normalizer: meta.normalizer,
        n_classes: Some(n_classes),
    };
    checkpoint::save(&out_dir.join("checkpoint"), &model.params, &out_meta)?;
    let report = FinetuneReport {
        train_accuracy,
        heldout_accuracy,
        n_classes,
        n_train: train_idx.len(),
        n_eval,
        degenerate,
        encoder_updated: cfg.unfreeze_encoder,
    };
    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_fbank, Spectrogram};
    use crate::model::Variant;
    use crate::tokenize::TokenizeMode;

    fn toy_clip(n_frames: usize, id: &str, fill: f32) -> TokenBatch {
        let s = Spectrogram::from_values(vec![fill; 128 * n_frames], n_frames, true);
        tokenize(&s, TokenizeMode::Patch, id).unwrap()
    }

    #[test]
    fn batching_packs_greedily_in_order() {
        let clips: Vec<TokenBatch> = (0..5)
            .map(|i| toy_clip(32 + 16 * (i % 2), &format!("c{i}"), 0.0))
            .collect();
        // Token counts: 16, 24, 16, 24, 16. Budget 40 → [16,24], [16,24], [16].
        let refs: Vec<&TokenBatch> = clips.iter().collect();
        let batches = batch_by_tokens(&refs, 40).unwrap();
        let sizes: Vec<Vec<usize>> = batches
            .iter()
            .map(|b| b.iter().map(|tb| tb.n_tokens()).collect())
            .collect();
        assert_eq!(sizes, vec![vec![16, 24], vec![16, 24], vec![16]]);
        let ids: Vec<&str> = batches
            .iter()
            .flatten()
            .map(|tb| tb.clip_id.as_str())
            .collect();
        assert_eq!(ids, ["c0", "c1", "c2", "c3", "c4"]);
    }

    #[test]
    fn batching_rejects_oversized_clip_by_name() {
        let clips = [toy_clip(32, "small", 0.0), toy_clip(160, "huge", 0.0)];
        let refs: Vec<&TokenBatch> = clips.iter().collect();
        let err = batch_by_tokens(&refs, 32).unwrap_err();
        match err {
            TrainError::OversizedClip {
                clip,
                tokens,
                budget,
            } => {
                assert_eq!(clip, "huge");
                assert_eq!(tokens, 80);
                assert_eq!(budget, 32);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(batch_by_tokens(&[], 32).unwrap().is_empty());
    }

    fn tiny_cfg(total_steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                enc_layers: 1,
                dec_layers: 1,
                d: 16,
                heads: 2,
                mode: TokenizeMode::Patch,
                variant: Variant::MaeAst,
            },
            mask_p: 0.5,
            mask_strategy: MaskStrategy::PatchRandom,
            max_tokens_per_batch: 64,
            total_steps,
            log_every: 1,
            checkpoint_every: 1000,
            seed,
            ..TrainConfig::default()
        }
    }

    /// Writes `n` synthetic unnormalized feature files and returns the dir.
    fn toy_corpus(dir: &Path, n: usize, n_frames: usize) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..n {
            let vals: Vec<f32> = (0..128 * n_frames)
                .map(|_| rng.gen_range(-4.0..4.0))
                .collect();
            let s = Spectrogram::from_values(vals, n_frames, false);
            write_fbank(&dir.join(format!("clip{i:02}.fbank")), &s).unwrap();
        }
    }

    fn read_metrics(path: &Path) -> Vec<MetricsRecord> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn pretrain_smoke_emits_metrics_and_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        fs::create_dir(&data).unwrap();
        toy_corpus(&data, 3, 32);
        let out = tmp.path().join("run");
        let cfg = tiny_cfg(3, 1);
        let summary = pretrain(&data, &out, &cfg).unwrap();
        assert_eq!(summary.steps, 3);
        assert!(summary.final_total.unwrap().is_finite());

        let recs = read_metrics(&summary.metrics_path);
        assert_eq!(recs.len(), 3);
        assert_eq!(
            recs.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert!(recs
            .iter()
            .all(|r| r.total.is_finite() && r.tokens_per_sec > 0.0));
        // Poly-decay schedule: lr strictly decreasing from lr0.
        assert_eq!(recs[0].lr, cfg.lr0);
        assert!(recs[1].lr < recs[0].lr && recs[2].lr < recs[1].lr);

        let meta: CkptMeta = checkpoint::load_sidecar(&summary.checkpoint_dir).unwrap();
        assert_eq!(meta.model, cfg.model);
        assert!(meta.n_classes.is_none());
        let params = checkpoint::load_params(&summary.checkpoint_dir).unwrap();
        let mut expected: Vec<String> = cfg
            .model
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        expected.sort();
        let got: Vec<String> = params.keys().cloned().collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn zero_steps_checkpoints_the_init() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        fs::create_dir(&data).unwrap();
        toy_corpus(&data, 2, 32);
        let cfg = tiny_cfg(0, 5);
        let summary = pretrain(&data, &tmp.path().join("run"), &cfg).unwrap();
        assert_eq!(summary.steps, 0);
        assert!(summary.final_total.is_none());
        assert!(read_metrics(&summary.metrics_path).is_empty());
        let params = checkpoint::load_params(&summary.checkpoint_dir).unwrap();
        let init = Model::<f32>::init(cfg.model, cfg.seed).unwrap();
        for (name, t) in &init.params {
            assert_eq!(params[name].data(), t.data(), "{name} differs from init");
        }
    }

    #[test]
    fn repeat_runs_are_bitwise_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        fs::create_dir(&data).unwrap();
        toy_corpus(&data, 4, 48);
        let cfg = tiny_cfg(5, 42);
        let a = pretrain(&data, &tmp.path().join("a"), &cfg).unwrap();
        let b = pretrain(&data, &tmp.path().join("b"), &cfg).unwrap();
        let (ra, rb) = (read_metrics(&a.metrics_path), read_metrics(&b.metrics_path));
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.total.to_bits(), y.total.to_bits());
            assert_eq!(x.recon.to_bits(), y.recon.to_bits());
            assert_eq!(x.nce.to_bits(), y.nce.to_bits());
            assert_eq!(x.lr.to_bits(), y.lr.to_bits());
        }
        let blob_a = fs::read(a.checkpoint_dir.join("params.blob")).unwrap();
        let blob_b = fs::read(b.checkpoint_dir.join("params.blob")).unwrap();
        assert_eq!(blob_a, blob_b);
    }

    #[test]
    fn disabled_branch_leaves_its_head_untouched() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        fs::create_dir(&data).unwrap();
        toy_corpus(&data, 3, 32);
        let init = Model::<f32>::init(tiny_cfg(0, 3).model, 3).unwrap();

        let mut disc_only = tiny_cfg(2, 3);
        disc_only.loss = LossConfig {
            use_generative: false,
            ..LossConfig::default()
        };
        let s = pretrain(&data, &tmp.path().join("disc"), &disc_only).unwrap();
        let p = checkpoint::load_params(&s.checkpoint_dir).unwrap();
        assert_eq!(p["recon_head.w"].data(), init.params["recon_head.w"].data());
        assert_ne!(p["class_head.w"].data(), init.params["class_head.w"].data());

        let mut gen_only = tiny_cfg(2, 3);
        gen_only.loss = LossConfig {
            use_discriminative: false,
            ..LossConfig::default()
        };
        let s = pretrain(&data, &tmp.path().join("gen"), &gen_only).unwrap();
        let p = checkpoint::load_params(&s.checkpoint_dir).unwrap();
        assert_eq!(p["class_head.w"].data(), init.params["class_head.w"].data());
        assert_ne!(p["recon_head.w"].data(), init.params["recon_head.w"].data());
    }

    /// Three classes of trivially separable clips: every value of a class-c
    /// clip sits at a class-specific level (with a small per-clip wobble so
    /// the corpus std is nonzero).
    fn labeled_corpus(dir: &Path, per_class: usize) -> String {
        let mut lines = String::new();
        let mut k = 0;
        for c in 0..3usize {
            for j in 0..per_class {
                let level = [-3.0f32, 0.0, 3.0][c] + 0.05 * j as f32;
                let s = Spectrogram::from_values(vec![level; 128 * 32], 32, false);
                let name = format!("clip{k:02}.fbank");
                write_fbank(&dir.join(&name), &s).unwrap();
                lines.push_str(&format!("{name},{c}\n"));
                k += 1;
            }
        }
        lines
    }

    fn pretrained_ckpt(tmp: &Path) -> PathBuf {
        let data = tmp.join("ptdata");
        fs::create_dir(&data).unwrap();
        toy_corpus(&data, 3, 32);
        pretrain(&data, &tmp.join("ptrun"), &tiny_cfg(2, 11))
            .unwrap()
            .checkpoint_dir
    }

    #[test]
    fn frozen_probe_separates_constant_classes() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = pretrained_ckpt(tmp.path());
        let data = tmp.path().join("ft");
        fs::create_dir(&data).unwrap();
        let labels = labeled_corpus(&data, 5);
        let labels_path = tmp.path().join("labels.csv");
        fs::write(&labels_path, labels).unwrap();
        let cfg = FinetuneConfig {
            steps: 300,
            lr0: 5e-2,
            seed: 7,
            ..FinetuneConfig::default()
        };
        let out = tmp.path().join("ftrun");
        let report = finetune(&ckpt, &data, &labels_path, &out, &cfg).unwrap();
        assert_eq!(report.n_classes, 3);
        assert_eq!(report.n_train + report.n_eval, 15);
        assert_eq!(report.n_eval, 3);
        assert!(!report.degenerate);
        assert!(!report.encoder_updated);
        assert!(
            report.train_accuracy >= 0.9,
            "train acc {}",
            report.train_accuracy
        );
        assert!(
            report.heldout_accuracy >= 0.9,
            "eval acc {}",
            report.heldout_accuracy
        );
        // Classifier checkpoint carries the head and the class count.
        let meta: CkptMeta = checkpoint::load_sidecar(&out.join("checkpoint")).unwrap();
        assert_eq!(meta.n_classes, Some(3));
        let p = checkpoint::load_params(&out.join("checkpoint")).unwrap();
        assert_eq!(p["head.w"].shape(), &[16, 3]);
        // Frozen: the backbone bytes match the pretrained checkpoint.
        let before = checkpoint::load_params(&ckpt).unwrap();
        assert_eq!(p["enc.00.attn.wq"].data(), before["enc.00.attn.wq"].data());
    }

    #[test]
    fn unfreezing_updates_the_encoder() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = pretrained_ckpt(tmp.path());
        let data = tmp.path().join("ft");
        fs::create_dir(&data).unwrap();
        let labels = labeled_corpus(&data, 2);
        let labels_path = tmp.path().join("labels.csv");
        fs::write(&labels_path, labels).unwrap();
        let cfg = FinetuneConfig {
            steps: 3,
            unfreeze_encoder: true,
            seed: 7,
            ..FinetuneConfig::default()
        };
        let out = tmp.path().join("ftrun");
        let report = finetune(&ckpt, &data, &labels_path, &out, &cfg).unwrap();
        assert!(report.encoder_updated);
        let before = checkpoint::load_params(&ckpt).unwrap();
        let after = checkpoint::load_params(&out.join("checkpoint")).unwrap();
        assert_ne!(
            after["enc.00.attn.wq"].data(),
            before["enc.00.attn.wq"].data()
        );
        // The decoder is not part of the classification pass.
        assert_eq!(
            after["dec.00.attn.wq"].data(),
            before["dec.00.attn.wq"].data()
        );
        assert_eq!(after["recon_head.w"].data(), before["recon_head.w"].data());
    }

    #[test]
    fn finetune_rejects_label_set_mismatches() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = pretrained_ckpt(tmp.path());
        let data = tmp.path().join("ft");
        fs::create_dir(&data).unwrap();
        let labels = labeled_corpus(&data, 2);
        let cfg = FinetuneConfig::default();
        let out = tmp.path().join("ftrun");

        // Count mismatch: one label line dropped.
        let short: String = labels.lines().skip(1).map(|l| format!("{l}\n")).collect();
        let p = tmp.path().join("short.csv");
        fs::write(&p, short).unwrap();
        match finetune(&ckpt, &data, &p, &out, &cfg).unwrap_err() {
            TrainError::LabelMismatch {
                labels: 5,
                clips: 6,
            } => {}
            other => panic!("unexpected error {other:?}"),
        }

        // Right count, wrong file name.
        let renamed = labels.replacen("clip00.fbank", "missing.fbank", 1);
        let p = tmp.path().join("renamed.csv");
        fs::write(&p, renamed).unwrap();
        match finetune(&ckpt, &data, &p, &out, &cfg).unwrap_err() {
            TrainError::BadLabel { line: 1, detail } => assert!(detail.contains("missing.fbank")),
            other => panic!("unexpected error {other:?}"),
        }

        // Unparsable label.
        let bad = labels.replacen(",0", ",zero", 1);
        let p = tmp.path().join("bad.csv");
        fs::write(&p, bad).unwrap();
        assert!(matches!(
            finetune(&ckpt, &data, &p, &out, &cfg).unwrap_err(),
            TrainError::BadLabel { line: 1, .. }
        ));
    }

    #[test]
    fn single_class_run_is_flagged_degenerate() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = pretrained_ckpt(tmp.path());
        let data = tmp.path().join("ft");
        fs::create_dir(&data).unwrap();
        let mut lines = String::new();
        for i in 0..3 {
            let s = Spectrogram::from_values(vec![0.3 + 0.2 * i as f32; 128 * 32], 32, false);
            let name = format!("only{i}.fbank");
            write_fbank(&data.join(&name), &s).unwrap();
            lines.push_str(&format!("{name},0\n"));
        }
        let labels_path = tmp.path().join("labels.csv");
        fs::write(&labels_path, lines).unwrap();
        let cfg = FinetuneConfig {
            steps: 5,
            ..FinetuneConfig::default()
        };
        let report = finetune(&ckpt, &data, &labels_path, &tmp.path().join("ftrun"), &cfg).unwrap();
        assert_eq!(report.n_classes, 1);
        assert!(report.degenerate);
    }

    #[test]
    fn unpinned_thread_count_is_rejected() {
        let cfg = TrainConfig {
            threads: 0,
            ..tiny_cfg(1, 0)
        };
        let tmp = tempfile::tempdir().unwrap();
        let err = pretrain(tmp.path(), &tmp.path().join("o"), &cfg).unwrap_err();
        assert!(matches!(err, TrainError::BadConfig(_)), "{err:?}");
    }

    #[test]
    fn empty_data_dir_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        fs::create_dir(&data).unwrap();
        let err = pretrain(&data, &tmp.path().join("o"), &tiny_cfg(1, 0)).unwrap_err();
        assert!(matches!(err, TrainError::EmptyDataDir(_)), "{err:?}");
    }
}
