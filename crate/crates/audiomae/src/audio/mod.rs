//! Audio ingestion: WAV decoding, log-mel spectrogram extraction, corpus
//! normalization, and the `.fbank` feature-file format.

mod fbank;
mod mel;
mod wav;

pub use fbank::{read_fbank, write_fbank};
pub use mel::{log_mel, FRAME_LEN, FRAME_SHIFT, N_FFT, N_MELS};
pub use wav::{load_wav, write_wav_pcm16};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("wav: {0}")]
    Wav(String),
    #[error("clip of {got} samples is shorter than one {need}-sample analysis window")]
    ClipTooShort { got: usize, need: usize },
    #[error("normalizer: empty corpus")]
    EmptyCorpus,
    #[error("normalizer: degenerate corpus (std == 0)")]
    DegenerateStd,
    #[error("feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono PCM amplitudes in [-1, 1] at 16 kHz.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, FeatureError> {
        if sample_rate != 16_000 {
            return Err(FeatureError::Wav(format!(
                "sample rate {} unsupported (need 16000)",
                sample_rate
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }
}

/// 128-bin log-mel features, mel-major: `values[m][t]` is bin `m` of frame
/// `t`, stored row-major [128 × n_frames]. Frame geometry is fixed at
/// 25 ms / 10 ms.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    values: Vec<f32>,
    pub n_frames: usize,
    pub normalized: bool,
}

impl Spectrogram {
    pub fn from_values(values: Vec<f32>, n_frames: usize, normalized: bool) -> Self {
        assert_eq!(values.len(), N_MELS * n_frames, "spectrogram value count");
        Spectrogram {
            values,
            n_frames,
            normalized,
        }
    }

    pub const fn n_mels(&self) -> usize {
        N_MELS
    }

    pub const fn frame_shift_ms(&self) -> u32 {
        10
    }

    pub const fn frame_length_ms(&self) -> u32 {
        25
    }

    #[inline]
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Corpus-level scalar statistics; dividing by 2·std targets a normalized
/// standard deviation of one half.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

/// Single-pass (Welford) mean/std over every value of every spectrogram.
/// A zero std is reported as-is; `normalize` is where it becomes an error.
pub fn fit_normalizer(specs: &[Spectrogram]) -> Result<Normalizer, FeatureError> {
    if specs.iter().map(|s| s.values.len()).sum::<usize>() == 0 {
        return Err(FeatureError::EmptyCorpus);
    }
    let mut count = 0u64;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for s in specs {
        for &v in &s.values {
            count += 1;
            let v = v as f64;
            let delta = v - mean;
            mean += delta / count as f64;
            m2 += delta * (v - mean);
        }
    }
    Ok(Normalizer {
        mean,
        std: (m2 / count as f64).sqrt(),
    })
}

/// (v − mean) / (2·std), flipping the normalized flag.
pub fn normalize(s: &Spectrogram, n: &Normalizer) -> Result<Spectrogram, FeatureError> {
    if n.std == 0.0 {
        return Err(FeatureError::DegenerateStd);
    }
    let scale = 1.0 / (2.0 * n.std);
    let values = s
        .values
        .iter()
        .map(|&v| ((v as f64 - n.mean) * scale) as f32)
        .collect();
    Ok(Spectrogram {
        values,
        n_frames: s.n_frames,
        normalized: true,
    })
}
