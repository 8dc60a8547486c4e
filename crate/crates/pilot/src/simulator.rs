//! Synthetic anechoic first-order-Ambisonics scene generation.
//!
//! Events are static point sources (band-limited noise bursts or harmonic
//! tones) encoded with ACN/SN3D gains, summed and mixed with a diffuse noise
//! floor at a configured SNR. Everything is deterministic per (spec, seed).

use crate::error::{PilotError, Result};
use crate::frontend::{FOA_CHANNELS, SAMPLE_RATE};
use crate::wav;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub duration_s: f64,
    pub max_overlap: usize,
    pub num_events: usize,
    pub event_duration_s: (f64, f64),
    pub elevation_range_rad: (f64, f64),
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            duration_s: 30.0,
            max_overlap: 2,
            num_events: 12,
            event_duration_s: (1.0, 4.0),
            elevation_range_rad: (-60f64.to_radians(), 60f64.to_radians()),
            snr_db: 30.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    NoiseBurst,
    HarmonicTone,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::NoiseBurst => "noise",
            EventKind::HarmonicTone => "tone",
        }
    }

    pub fn parse(s: &str) -> Result<EventKind> {
        match s {
            "noise" => Ok(EventKind::NoiseBurst),
            "tone" => Ok(EventKind::HarmonicTone),
            other => Err(PilotError::Format(format!("unknown event kind '{}'", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Event {
    pub onset_s: f64,
    pub offset_s: f64,
    pub azimuth_rad: f64,
    pub elevation_rad: f64,
    pub kind: EventKind,
}

pub struct Scene {
    /// 4 x T waveform, FOA channels in ACN order (W, Y, Z, X), SN3D.
    pub waveform: Vec<Vec<f64>>,
    pub events: Vec<Event>,
    pub sample_rate: u32,
}

/// ACN/SN3D first-order gains for a point source.
pub fn foa_gains(azimuth: f64, elevation: f64) -> [f64; 4] {
    [
        1.0,
        azimuth.sin() * elevation.cos(),
        elevation.sin(),
        azimuth.cos() * elevation.cos(),
    ]
}

/// Encode a mono signal into 4 FOA channels.
pub fn encode_foa(mono: &[f64], azimuth: f64, elevation: f64) -> Vec<Vec<f64>> {
    let g = foa_gains(azimuth, elevation);
    g.iter()
        .map(|&gain| mono.iter().map(|&s| s * gain).collect())
        .collect()
}

fn cosine_ramp(samples: &mut [f64], ramp_len: usize) {
    let n = samples.len();
    let ramp_len = ramp_len.min(n / 2);
    for i in 0..ramp_len {
        let w = 0.5 * (1.0 - (PI * i as f64 / ramp_len as f64).cos());
        samples[i] *= w;
        samples[n - 1 - i] *= w;
    }
}

fn render_source(kind: EventKind, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut out = match kind {
        EventKind::NoiseBurst => {
            // white noise through a two-pole resonator for band limitation
            let center = rng.gen_range(300.0..4000.0);
            let bw = rng.gen_range(100.0..800.0);
            let r = (-PI * bw / sr).exp();
            let theta = 2.0 * PI * center / sr;
            let (a1, a2) = (-2.0 * r * theta.cos(), r * r);
            let mut y1 = 0.0;
            let mut y2 = 0.0;
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                let x: f64 = rng.gen_range(-1.0..1.0);
                let y = x - a1 * y1 - a2 * y2;
                out.push(y);
                y2 = y1;
                y1 = y;
            }
            let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
            for v in out.iter_mut() {
                *v *= 0.5 / peak;
            }
            out
        }
        EventKind::HarmonicTone => {
            let f0 = rng.gen_range(150.0..900.0);
            let partials = rng.gen_range(2..6);
            let phase0: f64 = rng.gen_range(0.0..2.0 * PI);
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    let mut s = 0.0;
                    for p in 1..=partials {
                        s += (2.0 * PI * f0 * p as f64 * t + phase0 * p as f64).sin() / p as f64;
                    }
                    0.3 * s
                })
                .collect()
        }
    };
    cosine_ramp(&mut out, (0.010 * sr) as usize);
    out
}

fn overlap_feasible(events: &[(usize, usize)], onset: usize, offset: usize, cap: usize) -> bool {
    // count existing events covering any instant of [onset, offset)
    let mut boundaries: Vec<usize> = vec![onset];
    for &(a, b) in events {
        if a > onset && a < offset {
            boundaries.push(a);
        }
        if b > onset && b < offset {
            boundaries.push(b);
        }
    }
    boundaries.sort_unstable();
    for &t in &boundaries {
        let count = events.iter().filter(|&&(a, b)| a <= t && t < b).count();
        if count + 1 > cap {
            return false;
        }
    }
    true
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    if spec.max_overlap == 0 || spec.max_overlap > 3 {
        return Err(PilotError::Constraint("max_overlap must be 1, 2 or 3".into()));
    }
    if spec.event_duration_s.0 <= 0.0 || spec.event_duration_s.1 < spec.event_duration_s.0 {
        return Err(PilotError::Constraint("invalid event duration range".into()));
    }
    let sr = SAMPLE_RATE as f64;
    let total = (spec.duration_s * sr) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed: Vec<(usize, usize)> = Vec::new();
    let mut events: Vec<Event> = Vec::new();
    let mut mix = vec![vec![0.0; total]; FOA_CHANNELS];

    for _ in 0..spec.num_events {
        let mut attempt = 0;
        loop {
            attempt += 1;
            if attempt > 1000 {
                return Err(PilotError::Constraint(format!(
                    "cannot place {} events of {:?} s in {} s under overlap cap {}",
                    spec.num_events, spec.event_duration_s, spec.duration_s, spec.max_overlap
                )));
            }
            let dur = rng.gen_range(spec.event_duration_s.0..=spec.event_duration_s.1);
            let dur_samp = (dur * sr) as usize;
            if dur_samp + 1 >= total {
                continue;
            }
            let onset_samp = rng.gen_range(0..total - dur_samp);
            let offset_samp = onset_samp + dur_samp;
            if !overlap_feasible(&placed, onset_samp, offset_samp, spec.max_overlap) {
                continue;
            }
            let azimuth = rng.gen_range(-PI..PI);
            let elevation = rng.gen_range(spec.elevation_range_rad.0..=spec.elevation_range_rad.1);
            let kind = if rng.gen_bool(0.5) {
                EventKind::NoiseBurst
            } else {
                EventKind::HarmonicTone
            };
            let mono = render_source(kind, dur_samp, &mut rng);
            let gains = foa_gains(azimuth, elevation);
            for (ch, &g) in gains.iter().enumerate() {
                for (i, &s) in mono.iter().enumerate() {
                    mix[ch][onset_samp + i] += g * s;
                }
            }
            placed.push((onset_samp, offset_samp));
            events.push(Event {
                onset_s: onset_samp as f64 / sr,
                offset_s: offset_samp as f64 / sr,
                azimuth_rad: azimuth,
                elevation_rad: elevation,
                kind,
            });
            break;
        }
    }

    // diffuse noise floor at the requested SNR relative to the event mix
    let signal_power: f64 =
        mix.iter().flatten().map(|v| v * v).sum::<f64>() / (FOA_CHANNELS * total) as f64;
    let noise_power = if signal_power > 0.0 {
        signal_power / 10f64.powf(spec.snr_db / 10.0)
    } else {
        1e-6
    };
    let noise_amp = noise_power.sqrt();
    for ch in mix.iter_mut() {
        for v in ch.iter_mut() {
            // sum of two uniforms approximates a triangular distribution;
            // scaled to the target rms
            let n: f64 = rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0);
            *v += noise_amp * n / (2.0 / 6.0f64.sqrt());
        }
    }

    events.sort_by(|a, b| a.onset_s.partial_cmp(&b.onset_s).unwrap());
    Ok(Scene {
        waveform: mix,
        events,
        sample_rate: SAMPLE_RATE,
    })
}

/// Write the annotation sidecar: `onset_s,offset_s,azimuth_rad,elevation_rad,kind`.
pub fn write_annotations(path: &Path, events: &[Event]) -> Result<()> {
    let mut out = String::from("onset_s,offset_s,azimuth_rad,elevation_rad,kind\n");
    for e in events {
        out.push_str(&format!(
            "{:.6},{:.6},{:.9},{:.9},{}\n",
            e.onset_s,
            e.offset_s,
            e.azimuth_rad,
            e.elevation_rad,
            e.kind.as_str()
        ));
    }
    std::fs::write(path, out).map_err(|e| PilotError::io(path.display().to_string(), e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Event>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| PilotError::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("onset_s,offset_s,azimuth_rad,elevation_rad,kind") => {}
        _ => {
            return Err(PilotError::Format(format!(
                "{}: missing annotation header",
                path.display()
            )))
        }
    }
    let mut events = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(PilotError::Format(format!(
                "{}: line {} has {} fields, expected 5",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| PilotError::Format(format!("{}: bad number '{}'", path.display(), s)))
        };
        events.push(Event {
            onset_s: num(fields[0])?,
            offset_s: num(fields[1])?,
            azimuth_rad: num(fields[2])?,
            elevation_rad: num(fields[3])?,
            kind: EventKind::parse(fields[4])?,
        });
    }
    Ok(events)
}

pub fn write_scene_wav(path: &Path, scene: &Scene) -> Result<()> {
    wav::write_f32(path, &scene.waveform, scene.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn front_direction_gains() {
        let g = foa_gains(0.0, 0.0);
        assert_eq!(g, [1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zenith_gains_ignore_azimuth() {
        for az in [0.0, 1.0, -2.0] {
            let g = foa_gains(az, PI / 2.0);
            assert!((g[0] - 1.0).abs() < 1e-12);
            assert!(g[1].abs() < 1e-12);
            assert!((g[2] - 1.0).abs() < 1e-12);
            assert!(g[3].abs() < 1e-12);
        }
    }

    #[test]
    fn gains_match_first_order_spherical_harmonics() {
        // real SH under SN3D: Y00 = 1, Y1-1 = sin(az)cos(el),
        // Y10 = sin(el), Y11 = cos(az)cos(el)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let az = rng.gen_range(-PI..PI);
            let el = rng.gen_range(-PI / 2.0..PI / 2.0);
            let g = foa_gains(az, el);
            let (x, y, z) = (el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let oracle = [1.0, y, z, x];
            for (a, b) in g.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_events_is_pure_noise_floor() {
        let spec = SceneSpec {
            num_events: 0,
            duration_s: 2.0,
            ..Default::default()
        };
        let scene = generate(&spec).unwrap();
        assert!(scene.events.is_empty());
        assert_eq!(scene.waveform.len(), 4);
        assert!(scene.waveform[0].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = SceneSpec {
            duration_s: 3.0,
            num_events: 3,
            event_duration_s: (0.3, 0.8),
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (ca, cb) in a.waveform.iter().zip(b.waveform.iter()) {
            assert!(ca.iter().zip(cb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(a.events.len(), b.events.len());
        for (ea, eb) in a.events.iter().zip(b.events.iter()) {
            assert_eq!(ea.onset_s.to_bits(), eb.onset_s.to_bits());
            assert_eq!(ea.azimuth_rad.to_bits(), eb.azimuth_rad.to_bits());
        }
    }

    #[test]
    fn overlap_cap_respected() {
        for cap in [1usize, 2] {
            let spec = SceneSpec {
                duration_s: 10.0,
                num_events: 8,
                max_overlap: cap,
                event_duration_s: (0.5, 1.5),
                seed: 3,
                ..Default::default()
            };
            let scene = generate(&spec).unwrap();
            // scan boundaries for simultaneous count
            let mut times: Vec<f64> = Vec::new();
            for e in &scene.events {
                times.push(e.onset_s);
                times.push((e.offset_s - 1e-9).max(0.0));
            }
            for &t in &times {
                let count = scene
                    .events
                    .iter()
                    .filter(|e| e.onset_s <= t && t < e.offset_s)
                    .count();
                assert!(count <= cap, "overlap {} at t={} exceeds cap {}", count, t, cap);
            }
        }
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let spec = SceneSpec {
            duration_s: 2.0,
            num_events: 10,
            max_overlap: 1,
            event_duration_s: (1.5, 1.9),
            ..Default::default()
        };
        assert!(matches!(generate(&spec), Err(PilotError::Constraint(_))));
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let spec = SceneSpec {
            duration_s: 5.0,
            num_events: 3,
            event_duration_s: (0.5, 1.5),
            ..Default::default()
        };
        let scene = generate(&spec).unwrap();
        write_annotations(&path, &scene.events).unwrap();
        let back = read_annotations(&path).unwrap();
        assert_eq!(back.len(), scene.events.len());
        for (a, b) in scene.events.iter().zip(back.iter()) {
            assert!((a.onset_s - b.onset_s).abs() < 1e-5);
            assert!((a.azimuth_rad - b.azimuth_rad).abs() < 1e-8);
            assert_eq!(a.kind, b.kind);
        }
    }
}
