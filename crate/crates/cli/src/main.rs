//! `audiomae` — feature extraction, pretraining, fine-tuning, benchmarking,
//! and checkpoint inspection from one binary.
//!
//! Exit codes: 0 success, 1 runtime failure (bad data, I/O, training
//! divergence), 2 configuration error (malformed config file, unknown or
//! unparsable key, invalid flag combination).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use audiomae::audio::{fit_normalizer, load_wav, log_mel, write_fbank};
use audiomae::bench::{compare, BenchConfig, BenchError};
use audiomae::mask::{mask_stats, MaskStrategy};
use audiomae::model::Variant;
use audiomae::nn::checkpoint;
use audiomae::tokenize::TokenizeMode;
use audiomae::trainer::{finetune, pretrain, FinetuneConfig, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "audiomae", version, about = "Masked audio pretraining toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert a directory of 16 kHz mono PCM16 WAV clips to .fbank
    /// features, fitting corpus normalization statistics alongside.
    Features {
        /// Directory of .wav clips.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Output directory for .fbank files and normalizer.json.
        #[arg(long, value_name = "DIR")]
        output: PathBuf,
    },
    /// Self-supervised pretraining over a directory of .fbank features.
    Pretrain {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory for checkpoint/ and metrics.jsonl.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// key=value config file; omitted keys keep their defaults.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
    },
    /// Train a classification head on top of a pretrained checkpoint.
    Finetune {
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Labels file: one `file.fbank,class_index` per line.
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
    },
    /// Paired forward+backward throughput benchmark: asymmetric model vs
    /// the all-tokens baseline on an identical synthetic workload.
    Benchmark {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
    },
    /// Monte-Carlo coverage and clustering statistics for a mask strategy.
    MaskStats {
        /// patch-random | patch-chunked | frame-random | frame-chunked
        #[arg(long)]
        strategy: String,
        /// Time steps of the token grid.
        #[arg(long)]
        time: usize,
        /// Channel rows of the token grid (1 for frame-style tokens).
        #[arg(long, default_value_t = 8)]
        rows: usize,
        /// Target mask fraction in (0, 1).
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a checkpoint's manifest, parameter count, and sidecar.
    InspectCkpt {
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Features { input, output } => cmd_features(&input, &output),
        Cmd::Pretrain { data, out, config } => {
            let mut cfg = TrainConfig::default();
            if let Some(path) = &config {
                apply_train_keys(&mut cfg, &parse_kv(path)?)?;
            }
            let summary = pretrain(&data, &out, &cfg).map_err(train_err)?;
            print_json(&summary)
        }
        Cmd::Finetune {
            ckpt,
            data,
            labels,
            out,
            config,
        } => {
            let mut cfg = FinetuneConfig::default();
            if let Some(path) = &config {
                apply_finetune_keys(&mut cfg, &parse_kv(path)?)?;
            }
            let report = finetune(&ckpt, &data, &labels, &out, &cfg).map_err(train_err)?;
            print_json(&report)
        }
        Cmd::Benchmark { config } => {
            let mut cfg = BenchConfig::default();
            if let Some(path) = &config {
                apply_bench_keys(&mut cfg, &parse_kv(path)?)?;
            }
            let cmp = compare(&cfg).map_err(|e| match e {
                BenchError::BadConfig(m) => CliError::Config(m),
                other => CliError::Runtime(other.to_string()),
            })?;
            print_json(&cmp)
        }
        Cmd::MaskStats {
            strategy,
            time,
            rows,
            p,
            trials,
            seed,
        } => {
            let strategy = parse_strategy("strategy", &strategy)?;
            if trials == 0 {
                return Err(CliError::Config(
                    "key `trials`: need at least one trial".into(),
                ));
            }
            let stats = mask_stats(strategy, time, rows, p, trials, seed)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            print_json(&stats)
        }
        Cmd::InspectCkpt { ckpt } => cmd_inspect(&ckpt),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::BadConfig(m) => CliError::Config(m),
        other => CliError::Runtime(other.to_string()),
    }
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serializing output: {e}")))?;
    println!("{text}");
    Ok(())
}

fn cmd_features(input: &Path, output: &Path) -> Result<(), CliError> {
    let rt = |m: String| CliError::Runtime(m);
    let mut wavs: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| rt(format!("{}: {e}", input.display())))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| rt(e.to_string()))?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().map_or(false, |x| x == "wav"))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(rt(format!("no .wav files in {}", input.display())));
    }
    fs::create_dir_all(output).map_err(|e| rt(format!("{}: {e}", output.display())))?;
    let mut specs = Vec::with_capacity(wavs.len());
    let mut total_frames = 0usize;
    for w in &wavs {
        let wave = load_wav(w).map_err(|e| rt(format!("{}: {e}", w.display())))?;
        let spec = log_mel(&wave).map_err(|e| rt(format!("{}: {e}", w.display())))?;
        let stem = w.file_stem().unwrap_or_default().to_string_lossy();
        let out_path = output.join(format!("{stem}.fbank"));
        write_fbank(&out_path, &spec).map_err(|e| rt(format!("{}: {e}", out_path.display())))?;
        total_frames += spec.n_frames;
        specs.push(spec);
    }
    let normalizer = fit_normalizer(&specs).map_err(|e| rt(e.to_string()))?;
    let norm_path = output.join("normalizer.json");
    fs::write(
        &norm_path,
        serde_json::to_string_pretty(&normalizer).map_err(|e| rt(e.to_string()))?,
    )
    .map_err(|e| rt(format!("{}: {e}", norm_path.display())))?;
    print_json(&serde_json::json!({
        "clips": specs.len(),
        "total_frames": total_frames,
        "normalizer": normalizer,
    }))
}

fn cmd_inspect(ckpt: &Path) -> Result<(), CliError> {
    let rt = |m: String| CliError::Runtime(m);
    let manifest = checkpoint::load_manifest(ckpt).map_err(|e| rt(e.to_string()))?;
    let sidecar: serde_json::Value =
        checkpoint::load_sidecar(ckpt).map_err(|e| rt(e.to_string()))?;
    let param_count: usize = manifest
        .values()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    print_json(&serde_json::json!({
        "param_count": param_count,
        "params": manifest,
        "meta": sidecar,
    }))
}

// ---- key=value config files ----

/// Strict key=value parser: `#` lines are comments, blank lines are
/// skipped, duplicate keys are rejected. Values may not contain `=` only in
/// the key; everything after the first `=` (trimmed) is the value.
fn parse_kv(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {}: expected key=value, got `{line}`", i + 1))
        })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(CliError::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(prev, _)| prev == &key) {
            return Err(CliError::Config(format!(
                "line {}: duplicate key `{key}`",
                i + 1
            )));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn parse_as<T: FromStr>(key: &str, v: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| CliError::Config(format!("key `{key}`: {e} (got `{v}`)")))
}

fn parse_strategy(key: &str, v: &str) -> Result<MaskStrategy, CliError> {
    match v {
        "patch-random" => Ok(MaskStrategy::PatchRandom),
        "patch-chunked" => Ok(MaskStrategy::PatchChunked),
        "frame-random" => Ok(MaskStrategy::FrameRandom),
        "frame-chunked" => Ok(MaskStrategy::FrameChunked),
        _ => Err(CliError::Config(format!(
            "key `{key}`: unknown strategy `{v}` (expected patch-random, patch-chunked, frame-random, or frame-chunked)"
        ))),
    }
}

fn parse_mode(key: &str, v: &str) -> Result<TokenizeMode, CliError> {
    match v {
        "patch" => Ok(TokenizeMode::Patch),
        "frame" => Ok(TokenizeMode::Frame),
        _ => Err(CliError::Config(format!(
            "key `{key}`: unknown mode `{v}` (expected patch or frame)"
        ))),
    }
}

fn parse_variant(key: &str, v: &str) -> Result<Variant, CliError> {
    match v {
        "mae-ast" => Ok(Variant::MaeAst),
        "with-mask-tokens" => Ok(Variant::WithMaskTokens),
        _ => Err(CliError::Config(format!(
            "key `{key}`: unknown variant `{v}` (expected mae-ast or with-mask-tokens)"
        ))),
    }
}

fn apply_train_keys(cfg: &mut TrainConfig, kvs: &[(String, String)]) -> Result<(), CliError> {
    for (k, v) in kvs {
        match k.as_str() {
            "seed" => cfg.seed = parse_as(k, v)?,
            "total_steps" => cfg.total_steps = parse_as(k, v)?,
            "lr0" => cfg.lr0 = parse_as(k, v)?,
            "weight_decay" => cfg.weight_decay = parse_as(k, v)?,
            "lr_power" => cfg.lr_power = parse_as(k, v)?,
            "warmup_steps" => cfg.warmup_steps = parse_as(k, v)?,
            "log_every" => cfg.log_every = parse_as(k, v)?,
            "checkpoint_every" => cfg.checkpoint_every = parse_as(k, v)?,
            "threads" => cfg.threads = parse_as(k, v)?,
            "max_tokens_per_batch" => cfg.max_tokens_per_batch = parse_as(k, v)?,
            "mask_p" => cfg.mask_p = parse_as(k, v)?,
            "span_len" => cfg.span_len = parse_as(k, v)?,
            "mask_strategy" => cfg.mask_strategy = parse_strategy(k, v)?,
            "enc_layers" => cfg.model.enc_layers = parse_as(k, v)?,
            "dec_layers" => cfg.model.dec_layers = parse_as(k, v)?,
            "d" => cfg.model.d = parse_as(k, v)?,
            "heads" => cfg.model.heads = parse_as(k, v)?,
            "mode" => cfg.model.mode = parse_mode(k, v)?,
            "variant" => cfg.model.variant = parse_variant(k, v)?,
            "lambda" => cfg.loss.lambda = parse_as(k, v)?,
            "use_generative" => cfg.loss.use_generative = parse_as(k, v)?,
            "use_discriminative" => cfg.loss.use_discriminative = parse_as(k, v)?,
            _ => return Err(CliError::Config(format!("unknown key `{k}`"))),
        }
    }
    Ok(())
}

fn apply_finetune_keys(cfg: &mut FinetuneConfig, kvs: &[(String, String)]) -> Result<(), CliError> {
    for (k, v) in kvs {
        match k.as_str() {
            "steps" => cfg.steps = parse_as(k, v)?,
            "lr0" => cfg.lr0 = parse_as(k, v)?,
            "weight_decay" => cfg.weight_decay = parse_as(k, v)?,
            "eval_fraction" => cfg.eval_fraction = parse_as(k, v)?,
            "unfreeze_encoder" => cfg.unfreeze_encoder = parse_as(k, v)?,
            "seed" => cfg.seed = parse_as(k, v)?,
            "threads" => cfg.threads = parse_as(k, v)?,
            _ => return Err(CliError::Config(format!("unknown key `{k}`"))),
        }
    }
    Ok(())
}

fn apply_bench_keys(cfg: &mut BenchConfig, kvs: &[(String, String)]) -> Result<(), CliError> {
    for (k, v) in kvs {
        match k.as_str() {
            "d" => cfg.d = parse_as(k, v)?,
            "heads" => cfg.heads = parse_as(k, v)?,
            "mode" => cfg.mode = parse_mode(k, v)?,
            "n_tokens" => cfg.n_tokens = parse_as(k, v)?,
            "p" => cfg.p = parse_as(k, v)?,
            "enc_layers" => cfg.enc_layers = parse_as(k, v)?,
            "dec_layers" => cfg.dec_layers = parse_as(k, v)?,
            "clips_per_batch" => cfg.clips_per_batch = parse_as(k, v)?,
            "n_batches" => cfg.n_batches = parse_as(k, v)?,
            "warmup_batches" => cfg.warmup_batches = parse_as(k, v)?,
            "threads" => cfg.threads = parse_as(k, v)?,
            "seed" => cfg.seed = parse_as(k, v)?,
            _ => return Err(CliError::Config(format!("unknown key `{k}`"))),
        }
    }
    Ok(())
}
