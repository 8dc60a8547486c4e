//! Minimal RIFF/WAVE reader and writer.
//!
//! Reads 16-bit integer PCM and 32-bit float files, writes 32-bit float.
//! Samples are interleaved on disk and de-interleaved into per-channel rows.

use crate::error::{PilotError, Result};
use std::fs;
use std::path::Path;

pub struct WavData {
    /// Per-channel sample rows, all equal length, in [-1, 1] nominal range.
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

fn rd_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn rd_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn read(path: &Path) -> Result<WavData> {
    let bytes = fs::read(path).map_err(|e| PilotError::io(path.display().to_string(), e))?;
    let fmt_err = |msg: &str| PilotError::Format(format!("{}: {}", path.display(), msg));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fmt_err("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = rd_u32(&bytes, pos + 4) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(fmt_err("truncated chunk"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fmt_err("fmt chunk too small"));
                }
                let mut tag = rd_u16(&bytes, pos + 8);
                let channels = rd_u16(&bytes, pos + 10);
                let rate = rd_u32(&bytes, pos + 12);
                let bits = rd_u16(&bytes, pos + 22);
                if tag == 0xFFFE && size >= 40 {
                    // WAVE_FORMAT_EXTENSIBLE: first two bytes of the GUID
                    tag = rd_u16(&bytes, pos + 32);
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[pos + 8..body_end]),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }
    let (tag, nch, rate, bits) = fmt.ok_or_else(|| fmt_err("missing fmt chunk"))?;
    let data = data.ok_or_else(|| fmt_err("missing data chunk"))?;
    let nch = nch as usize;
    if nch == 0 {
        return Err(fmt_err("zero channels"));
    }
    let decode: fn(&[u8]) -> f64 = match (tag, bits) {
        (1, 16) => |b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0,
        (3, 32) => |b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        _ => {
            return Err(fmt_err(&format!(
                "unsupported format tag {} / {} bits (need 16-bit PCM or 32-bit float)",
                tag, bits
            )))
        }
    };
    let bytes_per = bits as usize / 8;
    let frames = data.len() / (bytes_per * nch);
    let mut channels = vec![Vec::with_capacity(frames); nch];
    for f in 0..frames {
        for (c, chan) in channels.iter_mut().enumerate() {
            let at = (f * nch + c) * bytes_per;
            chan.push(decode(&data[at..at + bytes_per]));
        }
    }
    Ok(WavData {
        channels,
        sample_rate: rate,
    })
}

/// Write a 32-bit float WAV file.
pub fn write_f32(path: &Path, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    let nch = channels.len();
    assert!(nch > 0, "need at least one channel");
    let frames = channels[0].len();
    assert!(channels.iter().all(|c| c.len() == frames));
    let data_len = frames * nch * 4;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
    out.extend_from_slice(&(nch as u16).to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * nch as u32 * 4).to_le_bytes());
    out.extend_from_slice(&(nch as u16 * 4).to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for f in 0..frames {
        for chan in channels {
            out.extend_from_slice(&(chan[f] as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| PilotError::io(path.display().to_string(), e))
}
