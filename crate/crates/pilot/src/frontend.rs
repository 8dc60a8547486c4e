//! Waveform chunking and STFT feature tensors.
//!
//! A 4-channel waveform is split into non-overlapping 500 ms chunks. Each
//! chunk yields a K x L x 2C tensor of spectral magnitude and phase: K = 25
//! frames at 20 ms shift, L = 1024 frequency bins (2048-point FFT over a
//! 40 ms Hamming window, DC bin dropped), C = 4 channels.

use crate::error::{PilotError, Result};
use crate::wav;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::path::Path;

pub const FOA_CHANNELS: usize = 4;
pub const SAMPLE_RATE: u32 = 44100;
pub const CHUNK_MS: usize = 500;
pub const FRAME_MS: usize = 40;
pub const SHIFT_MS: usize = 20;
pub const FFT_SIZE: usize = 2048;
/// Frames per chunk: one per 20 ms shift starting within the chunk.
pub const FRAMES_PER_CHUNK: usize = CHUNK_MS / SHIFT_MS;
/// Non-redundant frequency bins after dropping DC.
pub const FREQ_BINS: usize = FFT_SIZE / 2;

#[derive(Clone)]
pub struct Waveform {
    /// C x T samples, all channels equal length.
    pub samples: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<Vec<f64>>, sample_rate: u32) -> Result<Waveform> {
        if sample_rate == 0 {
            return Err(PilotError::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(PilotError::invalid("waveform needs at least one channel"));
        }
        let len = samples[0].len();
        if samples.iter().any(|c| c.len() != len) {
            return Err(PilotError::invalid("all channels must have equal length"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// One chunk's STFT magnitude/phase tensor, row-major `[K][L][2C]`:
/// the first C channel slices hold magnitude, the last C hold phase.
#[derive(Debug, Clone)]
pub struct SpectralChunk {
    pub data: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
    pub chunk_index: usize,
    pub chunk_start_time: f64,
}

impl SpectralChunk {
    pub fn at(&self, k: usize, l: usize, c: usize) -> f64 {
        self.data[(k * self.bins + l) * 2 * self.channels + c]
    }
}

/// Load a first-order Ambisonics WAV: exactly 4 channels at 44.1 kHz.
pub fn load_foa_wav(path: &Path) -> Result<Waveform> {
    let w = wav::read(path)?;
    if w.channels.len() != FOA_CHANNELS {
        return Err(PilotError::Format(format!(
            "{}: expected {} channels, found {}",
            path.display(),
            FOA_CHANNELS,
            w.channels.len()
        )));
    }
    if w.sample_rate != SAMPLE_RATE {
        return Err(PilotError::Format(format!(
            "{}: expected {} Hz, found {} (no resampling)",
            path.display(),
            SAMPLE_RATE,
            w.sample_rate
        )));
    }
    Waveform::new(w.channels, w.sample_rate)
}

/// Split into contiguous non-overlapping chunks; a trailing partial chunk is
/// dropped. Shorter-than-one-chunk input yields an empty list.
pub fn chunk(waveform: &Waveform, chunk_ms: usize) -> Vec<Waveform> {
    let chunk_len = waveform.sample_rate as usize * chunk_ms / 1000;
    let n = waveform.len() / chunk_len;
    (0..n)
        .map(|i| Waveform {
            samples: waveform
                .samples
                .iter()
                .map(|ch| ch[i * chunk_len..(i + 1) * chunk_len].to_vec())
                .collect(),
            sample_rate: waveform.sample_rate,
        })
        .collect()
}

fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Full redundant spectrum of one windowed frame (used internally by
/// [`stft`]; kept accessible for Parseval checks).
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn frame_spectrum(
    segment: &Waveform,
    channel: usize,
    frame: usize,
    fft_size: usize,
    frame_len: usize,
    shift_len: usize,
) -> Vec<Complex64> {
    let window = hamming(frame_len);
    let samples = &segment.samples[channel];
    let start = frame * shift_len;
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    for (i, w) in window.iter().enumerate() {
        // frames near the chunk edge read zero-padding, not the next chunk
        let v = samples.get(start + i).copied().unwrap_or(0.0);
        buf[i] = Complex64::new(v * w, 0.0);
    }
    let fft = FftPlanner::new().plan_fft_forward(fft_size);
    fft.process(&mut buf);
    buf
}

/// STFT of exactly one chunk.
pub fn stft(segment: &Waveform, chunk_index: usize) -> Result<SpectralChunk> {
    let sr = segment.sample_rate as usize;
    let frame_len = sr * FRAME_MS / 1000;
    let shift_len = sr * SHIFT_MS / 1000;
    let chunk_len = sr * CHUNK_MS / 1000;
    if FFT_SIZE < frame_len {
        return Err(PilotError::invalid(format!(
            "FFT size {} smaller than frame length {}",
            FFT_SIZE, frame_len
        )));
    }
    if segment.len() != chunk_len {
        return Err(PilotError::invalid(format!(
            "stft expects exactly one {} ms chunk ({} samples), got {}",
            CHUNK_MS,
            chunk_len,
            segment.len()
        )));
    }
    let k = FRAMES_PER_CHUNK;
    let l = FREQ_BINS;
    let c = segment.channels();
    let window = hamming(frame_len);
    let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
    let mut data = vec![0.0; k * l * 2 * c];
    let mut buf = vec![Complex64::new(0.0, 0.0); FFT_SIZE];
    for ch in 0..c {
        let samples = &segment.samples[ch];
        for frame in 0..k {
            let start = frame * shift_len;
            for i in 0..FFT_SIZE {
                let v = if i < frame_len {
                    samples.get(start + i).copied().unwrap_or(0.0) * window[i]
                } else {
                    0.0
                };
                buf[i] = Complex64::new(v, 0.0);
            }
            fft.process(&mut buf);
            // keep bins 1..=L (DC dropped)
            for bin in 0..l {
                let x = buf[bin + 1];
                let mag = x.norm();
                let mut phase = if mag == 0.0 { 0.0 } else { x.arg() };
                if phase <= -std::f64::consts::PI {
                    phase += 2.0 * std::f64::consts::PI;
                }
                let base = (frame * l + bin) * 2 * c;
                data[base + ch] = mag;
                data[base + c + ch] = phase;
            }
        }
    }
    Ok(SpectralChunk {
        data,
        frames: k,
        bins: l,
        channels: c,
        chunk_index,
        chunk_start_time: chunk_index as f64 * CHUNK_MS as f64 / 1000.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn mono_wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(vec![samples; 4], SAMPLE_RATE).unwrap()
    }

    #[test]
    fn thirty_seconds_yields_sixty_chunks() {
        let w = mono_wave(vec![0.0; 30 * SAMPLE_RATE as usize]);
        let chunks = chunk(&w, CHUNK_MS);
        assert_eq!(chunks.len(), 60);
        assert!(chunks.iter().all(|c| c.len() == 22050));
    }

    #[test]
    fn below_one_chunk_is_empty() {
        let w = mono_wave(vec![0.0; SAMPLE_RATE as usize * 499 / 1000]);
        assert!(chunk(&w, CHUNK_MS).is_empty());
    }

    #[test]
    fn trailing_partial_chunk_dropped() {
        let w = mono_wave(vec![0.0; SAMPLE_RATE as usize * 1250 / 1000]);
        assert_eq!(chunk(&w, CHUNK_MS).len(), 2);
    }

    #[test]
    fn stft_shape_is_25x1024x8() {
        let w = mono_wave(vec![0.0; 22050]);
        let s = stft(&w, 0).unwrap();
        assert_eq!((s.frames, s.bins, s.channels), (25, 1024, 4));
        assert_eq!(s.data.len(), 25 * 1024 * 8);
    }

    #[test]
    fn zero_input_gives_zero_magnitude_and_phase() {
        let w = mono_wave(vec![0.0; 22050]);
        let s = stft(&w, 0).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_peak_bin_matches_direct_dft() {
        // 1 kHz sine; peak expected near bin 1000*2048/44100 ~ 46 (1-based
        // after DC drop: index 45)
        let freq = 1000.0;
        let samples: Vec<f64> = (0..22050)
            .map(|i| (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        let w = mono_wave(samples.clone());
        let s = stft(&w, 0).unwrap();
        let k = 5;
        let mut best = (0usize, 0.0f64);
        for bin in 0..s.bins {
            let m = s.at(k, bin, 0);
            if m > best.1 {
                best = (bin, m);
            }
        }

        // direct O(N^2) DFT of the same windowed frame
        let frame_len = 1764;
        let shift = 441 * 2;
        let window = hamming(frame_len);
        let start = k * shift;
        let mut oracle_best = (0usize, 0.0f64);
        for bin in 1..=200 {
            let mut re = 0.0;
            let mut im = 0.0;
            for i in 0..frame_len {
                let v = samples[start + i] * window[i];
                let ang = -2.0 * PI * (bin as f64) * (i as f64) / FFT_SIZE as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            let mag = (re * re + im * im).sqrt();
            if mag > oracle_best.1 {
                oracle_best = (bin - 1, mag); // DC dropped -> output index bin-1
            }
        }
        assert_eq!(best.0, oracle_best.0);
        let expected_bin = (freq * FFT_SIZE as f64 / SAMPLE_RATE as f64).round() as usize - 1;
        assert!((best.0 as i64 - expected_bin as i64).abs() <= 1);
    }

    #[test]
    fn parseval_energy_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let samples: Vec<f64> = (0..22050).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = mono_wave(samples.clone());
        let frame = 3;
        let frame_len = 1764;
        let shift = 882;
        let spec = frame_spectrum(&w, 0, frame, FFT_SIZE, frame_len, shift);
        let spectral: f64 = spec.iter().map(|x| x.norm_sqr()).sum::<f64>() / FFT_SIZE as f64;
        let window = hamming(frame_len);
        let time: f64 = (0..frame_len)
            .map(|i| {
                let v = samples[frame * shift + i] * window[i];
                v * v
            })
            .sum();
        assert!((spectral - time).abs() / time < 1e-6);
    }

    #[test]
    fn stft_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<f64> = (0..22050).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = mono_wave(samples);
        let a = stft(&w, 0).unwrap();
        let b = stft(&w, 0).unwrap();
        assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn phase_within_range_and_magnitude_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<f64> = (0..22050).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = mono_wave(samples);
        let s = stft(&w, 0).unwrap();
        for k in 0..s.frames {
            for l in 0..s.bins {
                for c in 0..4 {
                    assert!(s.at(k, l, c) >= 0.0);
                    let p = s.at(k, l, 4 + c);
                    assert!(p > -PI && p <= PI);
                }
            }
        }
    }
}
