use pilot::frontend::{chunk, stft, Waveform, CHUNK_MS};
use pilot::simulator::{generate, SceneSpec};

fn main() {
    let snr: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(30.0);
    let spec = SceneSpec { duration_s: 30.0, max_overlap: 2, seed: 20240915, snr_db: snr, ..SceneSpec::default() };
    let scene = generate(&spec).unwrap();
    let wave = Waveform::new(scene.waveform.clone(), scene.sample_rate).unwrap();
    let (mut tot, mut oky, mut okz, mut okx) = (0, 0, 0, 0);
    for (idx, seg) in chunk(&wave, CHUNK_MS).iter().enumerate() {
        let sp = stft(seg, idx).unwrap();
        let (l, c2) = (sp.bins, 2 * sp.channels);
        for k in 0..sp.frames {
            let t = sp.chunk_start_time + k as f64 * 0.02 + 0.02;
            let active: Vec<_> = scene.events.iter()
                .filter(|e| t >= e.onset_s && t < e.offset_s).collect();
            if active.len() != 1 { continue; }
            let ev = active[0];
            // weighted mean of cos(phase_ch - phase_W), weight mag_W^2
            let mut s = [0.0f64; 3];
            let mut wsum = 0.0;
            for ll in 0..l {
                let base = (k * l + ll) * c2;
                let mw = sp.data[base];
                let pw = sp.data[base + 4];
                let wgt = mw * mw;
                wsum += wgt;
                for (j, ch) in [1usize, 2, 3].iter().enumerate() {
                    let p = sp.data[base + 4 + ch];
                    s[j] += wgt * (p - pw).cos();
                }
            }
            if wsum == 0.0 { continue; }
            let gy = ev.azimuth_rad.sin() * ev.elevation_rad.cos();
            let gz = ev.elevation_rad.sin();
            let gx = ev.azimuth_rad.cos() * ev.elevation_rad.cos();
            tot += 1;
            if (s[0] > 0.0) == (gy > 0.0) { oky += 1; }
            if (s[1] > 0.0) == (gz > 0.0) { okz += 1; }
            if (s[2] > 0.0) == (gx > 0.0) { okx += 1; }
        }
    }
    println!("snr {} dB: {} single-source frames; sign accuracy Y {:.3} Z {:.3} X {:.3}",
        snr, tot, oky as f64 / tot as f64, okz as f64 / tot as f64, okx as f64 / tot as f64);
}
