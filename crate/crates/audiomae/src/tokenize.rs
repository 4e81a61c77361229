//! Spectrogram → token conversion. Patch mode cuts non-overlapping
//! 16 mel × 16 frame squares; Frame mode takes 128 mel × 2 frame slabs.
//! Both yield 256-value tokens. Tokens are unrolled channel-fastest:
//! token i = t·n_channel_rows + c. Within a token, values are unrolled
//! mel-major: index = local_mel·patch_frames + local_frame.

use thiserror::Error;

use crate::audio::Spectrogram;

pub const D_IN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TokenizeMode {
    Patch,
    Frame,
}

impl TokenizeMode {
    pub const fn patch_mels(self) -> usize {
        match self {
            TokenizeMode::Patch => 16,
            TokenizeMode::Frame => 128,
        }
    }

    pub const fn patch_frames(self) -> usize {
        match self {
            TokenizeMode::Patch => 16,
            TokenizeMode::Frame => 2,
        }
    }

    pub const fn n_channel_rows(self) -> usize {
        128 / self.patch_mels()
    }
}

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("spectrogram must be normalized before tokenization")]
    NotNormalized,
    #[error("spectrogram of {got} frames is shorter than one {need}-frame token")]
    TooShort { got: usize, need: usize },
    #[error("token index {idx} out of range for {n} tokens")]
    BadIndex { idx: usize, n: usize },
}

/// Tokens for one clip, row-major [N × 256].
#[derive(Debug, Clone)]
pub struct TokenBatch {
    tokens: Vec<f32>,
    pub n_time_steps: usize,
    pub n_channel_rows: usize,
    pub mode: TokenizeMode,
    pub clip_id: String,
}

impl TokenBatch {
    pub fn n_tokens(&self) -> usize {
        self.n_time_steps * self.n_channel_rows
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * D_IN..(i + 1) * D_IN]
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }
}

/// Trailing frames that do not fill a whole token are dropped.
pub fn tokenize(
    s: &Spectrogram,
    mode: TokenizeMode,
    clip_id: impl Into<String>,
) -> Result<TokenBatch, TokenizeError> {
    if !s.normalized {
        return Err(TokenizeError::NotNormalized);
    }
    let pf = mode.patch_frames();
    if s.n_frames < pf {
        return Err(TokenizeError::TooShort {
            got: s.n_frames,
            need: pf,
        });
    }
    let pm = mode.patch_mels();
    let n_time_steps = s.n_frames / pf;
    let n_channel_rows = mode.n_channel_rows();

    let mut tokens = vec![0.0f32; n_time_steps * n_channel_rows * D_IN];
    for t in 0..n_time_steps {
        for c in 0..n_channel_rows {
            let base = (t * n_channel_rows + c) * D_IN;
            for m in 0..pm {
                for f in 0..pf {
                    tokens[base + m * pf + f] = s.at(c * pm + m, t * pf + f);
                }
            }
        }
    }
    Ok(TokenBatch {
        tokens,
        n_time_steps,
        n_channel_rows,
        mode,
        clip_id: clip_id.into(),
    })
}

/// The normalized input token exactly as fed to the model; reconstruction
/// targets are these rows.
pub fn detokenize_target(tb: &TokenBatch, idx: usize) -> Result<&[f32], TokenizeError> {
    if idx >= tb.n_tokens() {
        return Err(TokenizeError::BadIndex {
            idx,
            n: tb.n_tokens(),
        });
    }
    Ok(tb.token(idx))
}
