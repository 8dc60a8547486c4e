use pilot::encoder::EncoderConfig;
use pilot::extractor::ExtractorConfig;
use pilot::frontend::{chunk, stft, Waveform, CHUNK_MS};
use pilot::model::{ModelConfig, PilotModel};
use pilot::simulator::{generate, SceneSpec};
use pilot::autodiff::Tensor;

fn flat_features(model: &PilotModel, sp: &pilot::frontend::SpectralChunk) -> Vec<Vec<f64>> {
    let params = model.parameters();
    let find = |n: &str| params.iter().find(|(q, _)| q == n).unwrap().1.clone();
    let mut x = model.extractor.input_tensor(sp).unwrap();
    let nlayers: usize = std::env::var("LAYERS").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let pools = [8usize, 8, 2];
    for i in 0..nlayers {
        let w = find(&format!("extractor.conv{}.weight", i));
        let b = find(&format!("extractor.conv{}.bias", i));
        x = x.conv2d(&w, &b).unwrap().relu().max_pool2d(1, pools[i]).unwrap();
    }
    let shape = x.shape().to_vec(); // [F, K, W]
    let (f, k, wd) = (shape[0], shape[1], shape[2]);
    let v = x.to_vec();
    (0..k).map(|kk| {
        let mut row = Vec::with_capacity(f * wd);
        for ff in 0..f { for ww in 0..wd { row.push(v[(ff * k + kk) * wd + ww]); } }
        row
    }).collect()
}

fn collect(model: &PilotModel, seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<[f64; 3]>) {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for s in 0..n {
        let spec = SceneSpec { duration_s: 30.0, max_overlap: 2, seed: seed + s as u64, ..SceneSpec::default() };
        let scene = generate(&spec).unwrap();
        let wave = Waveform::new(scene.waveform.clone(), scene.sample_rate).unwrap();
        for (i, seg) in chunk(&wave, CHUNK_MS).iter().enumerate() {
            let t0 = i as f64 * 0.5;
            let act: Vec<_> = scene.events.iter().filter(|e| e.onset_s < t0 + 0.5 && e.offset_s > t0).collect();
            if act.len() != 1 { continue; }
            let ev = act[0];
            let g = [ev.azimuth_rad.sin() * ev.elevation_rad.cos(), ev.elevation_rad.sin(), ev.azimuth_rad.cos() * ev.elevation_rad.cos()];
            let sp = stft(seg, i).unwrap();
            for row in flat_features(model, &sp) { xs.push(row); ys.push(g); }
        }
    }
    (xs, ys)
}

fn main() {
    let cfg = ModelConfig {
        extractor: ExtractorConfig { conv_filters: 8, pool_widths: [8, 8, 2], fc_hidden: 64, num_sources: 2, feature_dim: 31, in_channels: 8, frames: 25, freq_bins: 1024 },
        encoder: EncoderConfig { layers: 2, heads: 4, model_dim: 32, ff_dim: 64 },
    };
    let model = PilotModel::new(cfg).unwrap();
    model.init_spatial(20240915);
    let _ = Tensor::new(vec![1], vec![0.0]); // keep import used
    let (xtr, ytr) = collect(&model, 20240915, 3);
    let (xte, yte) = collect(&model, 20241100, 2);
    let d = xtr[0].len();
    println!("train {} test {} dim {}", xtr.len(), xte.len(), d);
    // standardize features by train stats
    let n = xtr.len() as f64;
    let mut mu = vec![0.0; d]; let mut sd = vec![0.0; d];
    for r in &xtr { for j in 0..d { mu[j] += r[j] / n; } }
    for r in &xtr { for j in 0..d { sd[j] += (r[j] - mu[j]).powi(2) / n; } }
    for j in 0..d { sd[j] = sd[j].sqrt() + 1e-9; }
    let norm = |r: &Vec<f64>| -> Vec<f64> { (0..d).map(|j| (r[j] - mu[j]) / sd[j]).collect() };
    for (axis, name) in [(0usize, "Y"), (1, "Z"), (2, "X")] {
        // logistic regression, plain gradient descent
        let mut w = vec![0.0; d + 1];
        for _ in 0..300 {
            let mut grad = vec![0.0; d + 1];
            for (r, y) in xtr.iter().zip(&ytr) {
                let x = norm(r);
                let t = if y[axis] > 0.0 { 1.0 } else { 0.0 };
                let s = w[d] + x.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>();
                let p = 1.0 / (1.0 + (-s).exp());
                let e = p - t;
                for j in 0..d { grad[j] += e * x[j] / n; }
                grad[d] += e / n;
            }
            for j in 0..=d { w[j] -= 0.5 * grad[j]; }
        }
        let acc = |xs: &Vec<Vec<f64>>, ys: &Vec<[f64; 3]>| -> f64 {
            let mut c = 0usize;
            for (r, y) in xs.iter().zip(ys) {
                let x = norm(r);
                let s = w[d] + x.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>();
                if (s > 0.0) == (y[axis] > 0.0) { c += 1; }
            }
            c as f64 / xs.len() as f64
        };
        println!("sign {} train acc {:.3} test acc {:.3}", name, acc(&xtr, &ytr), acc(&xte, &yte));
    }
}
