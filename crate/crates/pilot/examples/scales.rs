use pilot::frontend::{chunk, stft, Waveform, CHUNK_MS};
use pilot::simulator::{generate, SceneSpec};
fn main() {
    let spec = SceneSpec { duration_s: 30.0, max_overlap: 2, seed: 20240915, ..SceneSpec::default() };
    let scene = generate(&spec).unwrap();
    let wave = Waveform::new(scene.waveform.clone(), scene.sample_rate).unwrap();
    let segs = chunk(&wave, CHUNK_MS);
    let sp = stft(&segs[10], 10).unwrap();
    let c2 = 2 * sp.channels;
    for ch in 0..c2 {
        let vals: Vec<f64> = (0..sp.frames * sp.bins)
            .map(|i| sp.data[i * c2 + ch]).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        println!("ch {}: mean {:.4} std {:.4} max {:.4}", ch, mean, var.sqrt(), max);
    }
}
