//! `.fbank` feature files: an 8-byte header (u32 LE n_frames, u32 LE n_mels)
//! followed by frame-major f32 LE rows, one 128-value row per frame. Files
//! always hold unnormalized features; normalization happens in memory.

use std::fs;
use std::path::Path;

use super::mel::N_MELS;
use super::{FeatureError, Spectrogram};

pub fn write_fbank(path: &Path, s: &Spectrogram) -> Result<(), FeatureError> {
    let mut out = Vec::with_capacity(8 + 4 * s.n_frames * N_MELS);
    out.extend_from_slice(&(s.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(N_MELS as u32).to_le_bytes());
    // In-memory layout is mel-major; the file is frame-major.
    for t in 0..s.n_frames {
        for m in 0..N_MELS {
            out.extend_from_slice(&s.at(m, t).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_fbank(path: &Path) -> Result<Spectrogram, FeatureError> {
    let bytes = fs::read(path)?;
    let fail = |msg: String| FeatureError::Format(format!("{}: {}", path.display(), msg));
    if bytes.len() < 8 {
        return Err(fail("shorter than the 8-byte header".into()));
    }
    let n_frames = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if n_mels != N_MELS {
        return Err(fail(format!(
            "{} mel bins unsupported (need {})",
            n_mels, N_MELS
        )));
    }
    let expect = 8 + 4 * n_frames * N_MELS;
    if bytes.len() != expect {
        return Err(fail(format!(
            "{} bytes, header implies {}",
            bytes.len(),
            expect
        )));
    }
    let mut values = vec![0.0f32; N_MELS * n_frames];
    for t in 0..n_frames {
        for m in 0..N_MELS {
            let off = 8 + 4 * (t * N_MELS + m);
            values[m * n_frames + t] = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        }
    }
    Ok(Spectrogram::from_values(values, n_frames, false))
}
