use pilot::autodiff::Tensor;
use pilot::model::{ModelConfig, PilotModel};
use pilot::encoder::EncoderConfig;
use pilot::extractor::ExtractorConfig;
use pilot::frontend::SpectralChunk;
use pilot::objective::{pit_loss, FrameTarget, LossConfig, SlotTarget};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig {
        extractor: ExtractorConfig {
            conv_filters: 8, pool_widths: [8, 8, 2], fc_hidden: 64, num_sources: 2,
            feature_dim: 31, in_channels: 8, frames: 25, freq_bins: 1024,
        },
        encoder: EncoderConfig { layers: 2, heads: 4, model_dim: 32, ff_dim: 64 },
    };
    let model = PilotModel::new(cfg.clone()).unwrap();
    model.init_kaiming(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spectral = SpectralChunk {
        data: (0..25 * 1024 * 8).map(|_| rng.gen_range(0.0..1.0)).collect(),
        frames: 25, bins: 1024, channels: 4, chunk_index: 0, chunk_start_time: 0.0,
    };
    let targets: Vec<FrameTarget> = (0..25).map(|_| FrameTarget {
        slots: vec![SlotTarget::active_at(0.9, -0.3), SlotTarget::inactive()],
    }).collect();

    // extractor-only forward
    let t0 = Instant::now();
    for _ in 0..20 { let _ = model.extractor.extract(&spectral, true).unwrap(); }
    println!("extractor fwd: {:.1} ms", t0.elapsed().as_secs_f64() * 50.0);

    // full forward
    let t0 = Instant::now();
    for _ in 0..20 { let _ = model.forward(&spectral, true).unwrap(); }
    println!("full fwd: {:.1} ms", t0.elapsed().as_secs_f64() * 50.0);

    // full forward + loss + backward
    let t0 = Instant::now();
    for _ in 0..20 {
        let (posts, _) = model.forward(&spectral, true).unwrap();
        let (l, _) = pit_loss(&posts, &targets, &LossConfig::default()).unwrap();
        l.backward().unwrap();
        for (_, p) in model.parameters() { p.zero_grad(); }
    }
    println!("full fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() * 50.0);

    // isolated conv1
    let img = Tensor::leaf(vec![8, 25, 1024], (0..8*25*1024).map(|i| (i % 97) as f64 * 0.01).collect()).unwrap();
    let w = Tensor::leaf(vec![8, 8, 3, 3], vec![0.01; 8*8*9]).unwrap();
    let b = Tensor::leaf(vec![8], vec![0.0; 8]).unwrap();
    let t0 = Instant::now();
    for _ in 0..20 { let _ = img.conv2d(&w, &b).unwrap(); }
    println!("conv1 fwd alone: {:.1} ms", t0.elapsed().as_secs_f64() * 50.0);
    let t0 = Instant::now();
    for _ in 0..20 {
        let y = img.conv2d(&w, &b).unwrap().sum();
        y.backward().unwrap();
        img.zero_grad(); w.zero_grad(); b.zero_grad();
    }
    println!("conv1 fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() * 50.0);
}
