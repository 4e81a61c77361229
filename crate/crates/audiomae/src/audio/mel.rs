//! Log-mel filterbank extraction: 25 ms periodic-Hann frames every 10 ms,
//! 512-point FFT power spectrum, 128 HTK-mel triangles spanning 0–8 kHz,
//! natural log with a 1e-10 floor.
//!
//! At this filter density the lowest triangles are narrower than one FFT bin
//! (31.25 Hz), so some low filters carry no weight and sit at the log floor;
//! that is part of the fixed reference behavior, not an error.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureError, Spectrogram, Waveform};

pub const FRAME_LEN: usize = 400; // 25 ms at 16 kHz
pub const FRAME_SHIFT: usize = 160; // 10 ms
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 128;
const FMAX_HZ: f64 = 8000.0;
const LOG_FLOOR: f32 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Triangular filters as (first FFT bin, weights). Geometry is computed in
/// f64 and frozen to f32 so the bank is bit-stable across platforms.
fn mel_filterbank() -> Vec<(usize, Vec<f32>)> {
    let n_bins = N_FFT / 2 + 1;
    let mel_max = hz_to_mel(FMAX_HZ);
    let grid: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_max * i as f64 / (N_MELS + 1) as f64)
        .collect();
    let bin_mel: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_mel(k as f64 * 16_000.0 / N_FFT as f64))
        .collect();

    (0..N_MELS)
        .map(|m| {
            let (lo, mid, hi) = (grid[m], grid[m + 1], grid[m + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for (k, &bm) in bin_mel.iter().enumerate() {
                let w = if bm <= lo || bm >= hi {
                    0.0
                } else if bm <= mid {
                    (bm - lo) / (mid - lo)
                } else {
                    (hi - bm) / (hi - mid)
                };
                if w > 0.0 {
                    start.get_or_insert(k);
                    weights.push(w as f32);
                } else if start.is_some() {
                    break;
                }
            }
            (start.unwrap_or(0), weights)
        })
        .collect()
}

pub fn log_mel(w: &Waveform) -> Result<Spectrogram, FeatureError> {
    if w.samples.len() < FRAME_LEN {
        return Err(FeatureError::ClipTooShort {
            got: w.samples.len(),
            need: FRAME_LEN,
        });
    }
    let n_frames = (w.samples.len() - FRAME_LEN) / FRAME_SHIFT + 1;

    // Periodic Hann window.
    let window: Vec<f32> = (0..FRAME_LEN)
        .map(|n| {
            0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / FRAME_LEN as f64).cos()) as f32
        })
        .collect();
    let bank = mel_filterbank();
    let fft = FftPlanner::<f32>::new().plan_fft_forward(N_FFT);

    let mut values = vec![0.0f32; N_MELS * n_frames];
    let mut buf = vec![Complex::new(0.0f32, 0.0f32); N_FFT];
    let mut power = vec![0.0f32; N_FFT / 2 + 1];
    for t in 0..n_frames {
        let frame = &w.samples[t * FRAME_SHIFT..t * FRAME_SHIFT + FRAME_LEN];
        for (slot, (&s, &wn)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *slot = Complex::new(s * wn, 0.0);
        }
        for slot in buf.iter_mut().skip(FRAME_LEN) {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, (start, weights)) in bank.iter().enumerate() {
            let energy: f32 = weights
                .iter()
                .zip(&power[*start..])
                .map(|(w, p)| w * p)
                .sum();
            values[m * n_frames + t] = (energy + LOG_FLOOR).ln();
        }
    }
    Ok(Spectrogram::from_values(values, n_frames, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(samples: Vec<f32>) -> Waveform {
        Waveform::new(samples, 16_000).unwrap()
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(log_mel(&wave(vec![0.0; 160_000])).unwrap().n_frames, 998);
        assert_eq!(log_mel(&wave(vec![0.0; 16_000])).unwrap().n_frames, 98);
        assert_eq!(log_mel(&wave(vec![0.0; 400])).unwrap().n_frames, 1);
        assert_eq!(log_mel(&wave(vec![0.0; 559])).unwrap().n_frames, 1);
        assert_eq!(log_mel(&wave(vec![0.0; 560])).unwrap().n_frames, 2);
        assert!(matches!(
            log_mel(&wave(vec![0.0; 399])),
            Err(FeatureError::ClipTooShort {
                got: 399,
                need: 400
            })
        ));
    }

    #[test]
    fn silence_sits_at_the_log_floor() {
        let s = log_mel(&wave(vec![0.0; 16_000])).unwrap();
        let floor = (1e-10f32).ln();
        for &v in s.values() {
            assert_eq!(v, floor);
        }
    }

    #[test]
    fn constant_input_gives_identical_frames() {
        let s = log_mel(&wave(vec![0.5; 4_000])).unwrap();
        for m in 0..s.n_mels() {
            for t in 1..s.n_frames {
                assert_eq!(s.at(m, t), s.at(m, 0), "mel {} frame {}", m, t);
            }
        }
    }

    #[test]
    fn tone_peaks_in_the_matching_filter() {
        // 1 kHz sits near mel 1000 ≈ grid slot 45 of the 0–8 kHz bank.
        let tone: Vec<f32> = (0..16_000)
            .map(|i| (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / 16_000.0).sin() * 0.5)
            .collect();
        let s = log_mel(&wave(tone)).unwrap();
        let t = s.n_frames / 2;
        let argmax = (0..s.n_mels())
            .max_by(|&a, &b| s.at(a, t).partial_cmp(&s.at(b, t)).unwrap())
            .unwrap();
        assert!((40..=50).contains(&argmax), "argmax filter {}", argmax);

        // And a 4 kHz tone lands strictly higher in the bank.
        let tone4: Vec<f32> = (0..16_000)
            .map(|i| (2.0 * std::f32::consts::PI * 4000.0 * i as f32 / 16_000.0).sin() * 0.5)
            .collect();
        let s4 = log_mel(&wave(tone4)).unwrap();
        let argmax4 = (0..s4.n_mels())
            .max_by(|&a, &b| s4.at(a, t).partial_cmp(&s4.at(b, t)).unwrap())
            .unwrap();
        assert!(argmax4 > argmax + 20, "{} vs {}", argmax4, argmax);
    }

    #[test]
    fn louder_input_never_lowers_a_cell() {
        let base: Vec<f32> = (0..4_000).map(|i| (i as f32 * 0.13).sin() * 0.1).collect();
        let loud: Vec<f32> = base.iter().map(|v| v * 4.0).collect();
        let a = log_mel(&wave(base)).unwrap();
        let b = log_mel(&wave(loud)).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!(y >= x, "{} vs {}", y, x);
        }
    }

    #[test]
    fn extraction_is_bitwise_deterministic() {
        let noise: Vec<f32> = (0..8_000)
            .map(|i| ((i * 2654435761usize) as f32 / usize::MAX as f32) - 0.5)
            .collect();
        let a = log_mel(&wave(noise.clone())).unwrap();
        let b = log_mel(&wave(noise)).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn filterbank_is_well_formed() {
        let bank = mel_filterbank();
        assert_eq!(bank.len(), N_MELS);
        // Weights are in (0, 1] and every filter fits inside the spectrum.
        for (start, weights) in &bank {
            assert!(start + weights.len() <= N_FFT / 2 + 1);
            for &w in weights {
                assert!(w > 0.0 && w <= 1.0);
            }
        }
        // The upper half of the bank is fully populated even though some of
        // the lowest filters are narrower than one FFT bin.
        assert!(bank[N_MELS / 2..].iter().all(|(_, w)| !w.is_empty()));
        assert!(bank.iter().any(|(_, w)| !w.is_empty()));
    }
}
