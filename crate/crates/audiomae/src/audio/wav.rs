//! Minimal RIFF/WAVE reader for the one encoding we accept: mono 16-bit PCM
//! at 16 kHz. Everything else is rejected loudly rather than resampled.

use std::fs;
use std::path::Path;

use super::{FeatureError, Waveform};

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn load_wav(path: &Path) -> Result<Waveform, FeatureError> {
    let bytes = fs::read(path)?;
    parse_wav(&bytes).map_err(|msg| FeatureError::Wav(format!("{}: {}", path.display(), msg)))
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut off = 12;
    // Chunks are word-aligned: an odd-sized chunk is followed by a pad byte.
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(bytes, off + 4) as usize;
        let body_start = off + 8;
        if body_start + size > bytes.len() {
            return Err(format!(
                "truncated: chunk {:?} declares {} bytes, {} remain",
                String::from_utf8_lossy(id),
                size,
                bytes.len() - body_start
            ));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err("fmt chunk too small".into());
                }
                fmt = Some((
                    u16_at(body, 0),
                    u16_at(body, 2),
                    u32_at(body, 4),
                    u16_at(body, 14),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        off = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or("missing fmt chunk")?;
    if format != 1 {
        return Err(format!("encoding {} unsupported (need PCM)", format));
    }
    if channels != 1 {
        return Err(format!("{} channels unsupported (need mono)", channels));
    }
    if rate != 16_000 {
        return Err(format!("sample rate {} unsupported (need 16000)", rate));
    }
    if bits != 16 {
        return Err(format!("{}-bit samples unsupported (need 16)", bits));
    }
    let data = data.ok_or("missing data chunk")?;
    if data.len() % 2 != 0 {
        return Err("data chunk has an odd byte count".into());
    }

    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: rate,
    })
}

/// Writes samples (clamped to [-1, 1]) as mono 16-bit PCM at 16 kHz.
pub fn write_wav_pcm16(path: &Path, samples: &[f32]) -> Result<(), FeatureError> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&16_000u32.to_le_bytes());
    out.extend_from_slice(&32_000u32.to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * u32::from(channels) * 2).to_le_bytes());
        out.extend_from_slice(&(channels * 2).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn parses_round_trip_with_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f32> = (0..800).map(|i| (i as f32 * 0.05).sin() * 0.5).collect();
        write_wav_pcm16(&path, &samples).unwrap();
        let w = load_wav(&path).unwrap();
        assert_eq!(w.sample_rate, 16_000);
        assert_eq!(w.samples.len(), 800);
        for (a, b) in w.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 32_000.0, "{} vs {}", a, b); // quantization only
        }
    }

    #[test]
    fn sample_scaling_hits_exact_grid_points() {
        let data: Vec<u8> = [0i16, 16384, -32768, 32767]
            .iter()
            .flat_map(|s| s.to_le_bytes())
            .collect();
        let w = parse_wav(&header(1, 16_000, 16, &data)).unwrap();
        assert_eq!(w.samples[0], 0.0);
        assert_eq!(w.samples[1], 0.5);
        assert_eq!(w.samples[2], -1.0);
        assert!((w.samples[3] - 1.0).abs() < 1e-4 && w.samples[3] < 1.0);
    }

    #[test]
    fn rejects_foreign_formats() {
        let stereo = parse_wav(&header(2, 16_000, 16, &[0; 8])).unwrap_err();
        assert!(stereo.contains("channels unsupported"), "{}", stereo);

        let rate = parse_wav(&header(1, 44_100, 16, &[0; 8])).unwrap_err();
        assert!(rate.contains("44100"), "{}", rate);

        let not_wav = parse_wav(b"OggS\0\0\0\0\0\0\0\0\0\0\0\0").unwrap_err();
        assert!(not_wav.contains("RIFF"), "{}", not_wav);
    }

    #[test]
    fn rejects_truncated_data_chunk() {
        let mut bytes = header(1, 16_000, 16, &[0; 64]);
        bytes.truncate(bytes.len() - 10);
        let err = parse_wav(&bytes).unwrap_err();
        assert!(err.contains("truncated"), "{}", err);
    }

    #[test]
    fn skips_unknown_chunks_with_odd_size_padding() {
        // LIST chunk of odd size 3 (padded to 4) inserted before fmt/data.
        let inner = header(1, 16_000, 16, &[1, 0, 2, 0]);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&((inner.len() - 8 + 12) as u32).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[9, 9, 9, 0]); // 3 bytes + 1 pad
        bytes.extend_from_slice(&inner[12..]);
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.samples.len(), 2);
    }
}
