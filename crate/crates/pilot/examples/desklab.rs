use pilot::frontend::{chunk, stft, Waveform, CHUNK_MS};
use pilot::objective::doa_error;
use pilot::model::PilotModel;
use pilot::objective::{pit_loss, FrameTarget, LossConfig, SlotTarget};
use pilot::simulator::{generate, SceneSpec};
use pilot::trainer::{fit, TrainChunk, TrainConfig};
use pilot::encoder::EncoderConfig;
use pilot::extractor::ExtractorConfig;
use pilot::model::ModelConfig;

fn desk_model_config() -> ModelConfig {
    ModelConfig {
        extractor: ExtractorConfig {
            conv_filters: 8, pool_widths: [8, 8, 2], fc_hidden: 64, num_sources: 2,
            feature_dim: 31, in_channels: 8, frames: 25, freq_bins: 1024,
        },
        encoder: EncoderConfig { layers: 2, heads: 4, model_dim: 32, ff_dim: 64 },
    }
}

fn slot_target(ev: &pilot::simulator::Event, t: f64) -> Option<SlotTarget> {
    if t >= ev.onset_s && t < ev.offset_s {
        Some(SlotTarget::active_at(ev.azimuth_rad, ev.elevation_rad))
    } else {
        None
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let base_lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(40);
    let nscenes: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(8);
    let warmup: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(100);
    let stride: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(4);
    let filters: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(8);
    let fc: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(64);
    let snr: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(30.0);

    let mut cfg = desk_model_config();
    cfg.extractor.conv_filters = filters;
    cfg.extractor.fc_hidden = fc;
    let scene_chunks = |seed_off: u64| -> Vec<TrainChunk> {
        let spec = SceneSpec { duration_s: 30.0, max_overlap: 2, seed: 20240915u64.wrapping_add(seed_off), snr_db: snr, ..SceneSpec::default() };
        let scene = generate(&spec).unwrap();
        let wave = Waveform::new(scene.waveform.clone(), scene.sample_rate).unwrap();
        chunk(&wave, CHUNK_MS)
            .iter().enumerate()
            .map(|(idx, seg)| {
                let spectral = stft(seg, idx).unwrap();
                let targets: Vec<FrameTarget> = (0..spectral.frames).map(|k| {
                    let t = spectral.chunk_start_time + k as f64 * 0.02 + 0.02;
                    let mut slots: Vec<SlotTarget> = scene.events.iter()
                        .filter_map(|ev| slot_target(ev, t)).take(2).collect();
                    while slots.len() < 2 { slots.push(SlotTarget::inactive()); }
                    FrameTarget { slots }
                }).collect();
                TrainChunk { chunk: spectral, targets }
            })
            .collect()
    };
    let chunks: Vec<TrainChunk> = (0..nscenes as u64)
        .flat_map(|i| scene_chunks(i).into_iter().step_by(stride))
        .collect();
    let heldout: Vec<TrainChunk> = scene_chunks(100).into_iter().step_by(stride).collect();
    println!("lab: {} train chunks ({} scenes), {} held-out chunks, base_lr {}, epochs {}, batch {}, warmup {}",
        chunks.len(), nscenes, heldout.len(), base_lr, epochs, batch, warmup);

    let model = PilotModel::new(cfg.clone()).unwrap();
    model.init_spatial(20240915);
    let tc = TrainConfig {
        batch_size: batch, base_lr, epochs, warmup_steps: warmup,
        weight_decay: 1e-4, grad_clip: 5.0, seed: 20240915,
    };

    let eval = |label: &str, set: &[TrainChunk]| {
        let mut errs = Vec::new();
        let mut merrs = Vec::new();
        let mut azs = Vec::new();
        let mut els = Vec::new();
        let mut gsum = 0.0;
        let mut gn = 0;
        let mut loss_sum = 0.0;
        for tch in set {
            let (posts, _) = model.forward(&tch.chunk, false).unwrap();
            let (l, _) = pit_loss(&posts, &tch.targets, &LossConfig::default()).unwrap();
            loss_sum += l.item();
            for (k, frame) in posts.iter().enumerate() {
                for p in frame {
                    let g = p.gamma.item();
                    gsum += g; gn += 1;
                    if g >= 0.5 {
                        let m = p.mean.to_vec();
                        // nearest active truth
                        let best = tch.targets[k].slots.iter().filter(|s| s.active)
                            .map(|s| doa_error((m[0], m[1]), (s.azimuth, s.elevation), false))
                            .fold(f64::INFINITY, f64::min);
                        if best.is_finite() { errs.push(best); }
                        let mbest = tch.targets[k].slots.iter().filter(|s| s.active)
                            .flat_map(|s| {
                                let (a, e) = (s.azimuth, s.elevation);
                                [(a, e), (-a, e), (std::f64::consts::PI - a, e), (a - std::f64::consts::PI, e),
                                 (a, -e), (-a, -e), (std::f64::consts::PI - a, -e), (a - std::f64::consts::PI, -e)]
                            })
                            .map(|t| doa_error((m[0], m[1]), t, false))
                            .fold(f64::INFINITY, f64::min);
                        if mbest.is_finite() { merrs.push(mbest); }
                    }
                }
            }
        }
        let mean_err = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
        let mean_merr = merrs.iter().sum::<f64>() / merrs.len().max(1) as f64;
        println!("{}: loss/chunk {:.3} mean gamma {:.3} active-pred DoA err {:.1} deg (mirror-min {:.1} deg, {} preds)",
            label, loss_sum / set.len() as f64, gsum / gn as f64,
            mean_err.to_degrees(), mean_merr.to_degrees(), errs.len());
        if !azs.is_empty() {
            let n = azs.len() as f64;
            let am = azs.iter().sum::<f64>() / n;
            let asd = (azs.iter().map(|a| (a - am).powi(2)).sum::<f64>() / n).sqrt();
            let em = els.iter().sum::<f64>() / n;
            let esd = (els.iter().map(|e| (e - em).powi(2)).sum::<f64>() / n).sqrt();
            let near_prior = azs.iter().filter(|a| {
                let d0 = a.abs();
                let dpi = (a.abs() - std::f64::consts::PI).abs();
                d0 < 0.5 || dpi < 0.5
            }).count() as f64 / n;
            println!("  pred az mean {:.2} std {:.2} | el mean {:.2} std {:.2} | frac within 0.5 rad of prior az {{0,pi}}: {:.2}",
                am, asd, em, esd, near_prior);
        }
    };

    eval("before train-set", &chunks);
    eval("before held-out", &heldout);
    let res = fit(&model, &chunks, &chunks, &tc, &LossConfig::default()).unwrap();
    if let Some(a) = &res.aborted { println!("ABORTED: {}", a); }
    for r in res.curves.iter().step_by((epochs / 10).max(1)) {
        println!("epoch {:3}: train {:.3} val {:.3} lr {:.5}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    res.best.apply_to_model(&model).unwrap();
    eval("after train-set", &chunks);
    eval("after held-out", &heldout);

    // seed health: handcrafted sign readout from the (possibly retrained) conv0
    let params = model.parameters();
    let find = |n: &str| params.iter().find(|(q, _)| q == n).unwrap().1.clone();
    let (w0, b0) = (find("extractor.conv0.weight"), find("extractor.conv0.bias"));
    let mut correct = [0usize; 3];
    let mut total = 0usize;
    for s in 0..2u64 {
        let spec = SceneSpec { duration_s: 30.0, max_overlap: 2, seed: 20240915 + 100 + s, snr_db: snr, ..SceneSpec::default() };
        let scene = generate(&spec).unwrap();
        let wave = Waveform::new(scene.waveform.clone(), scene.sample_rate).unwrap();
        for (i, seg) in chunk(&wave, CHUNK_MS).iter().enumerate() {
            let t0 = i as f64 * 0.5;
            let act: Vec<_> = scene.events.iter().filter(|e| e.onset_s < t0 + 0.5 && e.offset_s > t0).collect();
            if act.len() != 1 { continue; }
            let ev = act[0];
            let sp = stft(seg, i).unwrap();
            let x = model.extractor.input_tensor(&sp).unwrap();
            let h = x.conv2d(&w0, &b0).unwrap().relu();
            let hv = h.to_vec();
            let shape = h.shape().to_vec();
            let plane = shape[1] * shape[2];
            let maxch = |c: usize| hv[c * plane..(c + 1) * plane].iter().cloned().fold(0.0f64, f64::max);
            let gains = [ev.azimuth_rad.sin() * ev.elevation_rad.cos(), ev.elevation_rad.sin(), ev.azimuth_rad.cos() * ev.elevation_rad.cos()];
            for (p, g) in gains.iter().enumerate() {
                let pred_neg = maxch(1 + 2 * p).max(maxch(2 + 2 * p)) - maxch(0) > 1.0;
                if pred_neg == (*g < 0.0) { correct[p] += 1; }
            }
            total += 1;
        }
    }
    println!("seed health ({} frames): sign acc Y {:.3} Z {:.3} X {:.3}", total,
        correct[0] as f64 / total as f64, correct[1] as f64 / total as f64, correct[2] as f64 / total as f64);
}
