//! Full model: spectral chunk -> CNN extractor -> positional concat ->
//! per-source transformer encoder -> linear Gaussian localization head.

use crate::autodiff::Tensor;
use crate::encoder::{positional_concat, Encoder, EncoderConfig};
use crate::error::{PilotError, Result};
use crate::extractor::{BnBatchStats, Extractor, ExtractorConfig};
use crate::frontend::SpectralChunk;
use crate::lgs::{LgsParams, Posterior};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.encoder.validate()?;
        if self.encoder.model_dim != self.extractor.variance_dim() {
            return Err(PilotError::invalid(format!(
                "encoder model_dim {} must equal extractor feature_dim + 1 = {}",
                self.encoder.model_dim,
                self.extractor.variance_dim()
            )));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor: ExtractorConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

pub struct PilotModel {
    pub cfg: ModelConfig,
    pub extractor: Extractor,
    pub encoder: Encoder,
    pub lgs: LgsParams,
}

impl PilotModel {
    pub fn new(cfg: ModelConfig) -> Result<PilotModel> {
        cfg.validate()?;
        let extractor = Extractor::new(cfg.extractor.clone())?;
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let lgs = LgsParams::new(cfg.extractor.num_sources, cfg.encoder.model_dim)?;
        Ok(PilotModel {
            cfg,
            extractor,
            encoder,
            lgs,
        })
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = self.extractor.parameters();
        out.extend(self.encoder.parameters());
        out.extend(self.lgs.parameters());
        out
    }

    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        self.extractor.buffers()
    }

    pub fn load_buffer(&self, name: &str, values: &[f64]) -> Result<()> {
        self.extractor.load_buffer(name, values)
    }

    /// Kaiming initialization: weight matrices and conv kernels get variance
    /// 2/fan_in; biases, layer-norm and batch-norm affine parameters, and the
    /// structured LGS parameters (mu, L) keep their constructor values.
    pub fn init_kaiming(&self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in self.parameters() {
            let shape = t.shape().to_vec();
            let fan_in = match shape.len() {
                2 => shape[0],
                4 => shape[1] * shape[2] * shape[3],
                _ => continue, // vectors: biases / norm parameters
            };
            if name.ends_with(".mu") || name.ends_with(".l") {
                continue; // structured priors stay at their documented init
            }
            let std = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..t.len())
                .map(|_| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    z * std
                })
                .collect();
            t.set_data(&data);
        }
    }

    /// Kaiming initialization plus a structured spatial prior on the conv
    /// stack. For first-order-Ambisonics input (C magnitude slices followed by
    /// C phase slices) the side of the sphere a source sits on is encoded in
    /// the phase contrast d_j = phase(channel j) - phase(omni) of the
    /// strongest bins, which is ~0 or ~pi depending on the sign of the
    /// directional gain, while off-source bins carry random phase. A raw
    /// contrast detector therefore drowns in noise after the frequency
    /// max-pool, so the first layer is seeded with magnitude-gated contrast
    /// detectors: per directional channel j a pair
    ///   relu(+a*d_j + g*mag_omni - theta),  relu(-a*d_j + g*mag_omni - theta)
    /// plus one plain gate relu(g*mag_omni - theta). The gate opens only on
    /// bins whose (standardized) omni magnitude clears the threshold, so
    /// noise bins contribute exactly zero and the max-pool propagates the
    /// contrast of the loudest bins. Later conv layers get an identity
    /// center-tap prior so the gated features reach the fully connected head
    /// unmangled at the start of training. Kaiming noise is kept on all taps
    /// (damped on the seeded filters) so everything stays trainable.
    pub fn init_spatial(&self, seed: u64) {
        self.init_kaiming(seed);
        let params = self.extractor.parameters();
        let find = |n: &str| params.iter().find(|(q, _)| q == n).map(|(_, t)| t.clone());
        let (Some(w0), Some(b0)) = (
            find("extractor.conv0.weight"),
            find("extractor.conv0.bias"),
        ) else {
            return;
        };
        let shape = w0.shape().to_vec(); // [F, 2C, kh, kw]
        let (f, c2, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
        if c2 < 4 || c2 % 2 != 0 || f < 3 {
            return;
        }
        let c = c2 / 2;
        let dirs = (c - 1).min((f - 1) / 2);
        let (ci, cj) = (kh / 2, kw / 2);
        let mut data = w0.to_vec();
        let mut bias = b0.to_vec();
        const GATE: f64 = 3.0; // weight on the omni magnitude
        const THETA: f64 = 4.0; // gate threshold
        const CONTRAST: f64 = 2.0; // weight on the phase contrast
        const DAMP: f64 = 0.05; // residual random taps on seeded filters
        let seeded = 1 + 2 * dirs;
        let plane = c2 * kh * kw;
        for v in data[..seeded * plane].iter_mut() {
            *v *= DAMP;
        }
        let at = |kf: usize, ch: usize| ((kf * c2 + ch) * kh + ci) * kw + cj;
        data[at(0, 0)] += GATE;
        bias[0] = -THETA;
        for p in 0..dirs {
            for (kf, sgn) in [(1 + 2 * p, CONTRAST), (2 + 2 * p, -CONTRAST)] {
                data[at(kf, 0)] += GATE;
                data[at(kf, c + 1 + p)] += sgn; // phase of directional channel
                data[at(kf, c)] -= sgn; // phase of omni reference
                bias[kf] = -THETA;
            }
        }
        w0.set_data(&data);
        b0.set_data(&bias);
        for layer in ["conv1", "conv2"] {
            let Some(w) = find(&format!("extractor.{layer}.weight")) else {
                continue;
            };
            let s = w.shape().to_vec();
            let (fo, fi, kh, kw) = (s[0], s[1], s[2], s[3]);
            let mut d: Vec<f64> = w.to_vec().iter().map(|v| v * DAMP).collect();
            for k in 0..fo.min(fi) {
                d[((k * fi + k) * kh + kh / 2) * kw + kw / 2] += 1.0;
            }
            w.set_data(&d);
        }

        // Seed a readout path through the fully connected stack so the gated
        // contrast features are useful to the loss from the first step;
        // otherwise early gradients erase the seeded filters before the head
        // learns to consume them. For each direction j the per-frequency-cell
        // sum h+_j + h-_j - 2*h0 is ~0 where the gated contrast is ~0
        // (positive gain) and strongly positive where it is ~pi (negative
        // gain), so fc0 gets one such pooled-evidence column per direction
        // plus one loudness column, the middle layer passes them through, and
        // the output layer copies them into the leading feature dimensions of
        // every source slot.
        let cfg = &self.extractor.cfg;
        let readouts = dirs + 1;
        if cfg.fc_hidden < readouts || cfg.feature_dim < readouts {
            return;
        }
        let cells = cfg.flat_dim() / cfg.conv_filters;
        let (Some(w_in), Some(w_mid), Some(w_out)) = (
            find("extractor.fc0.weight"),
            find("extractor.fc1.weight"),
            find("extractor.fc2.weight"),
        ) else {
            return;
        };
        let damp_col = |d: &mut [f64], cols: usize, col: usize| {
            for r in 0..d.len() / cols {
                d[r * cols + col] *= DAMP;
            }
        };
        let mut d_in = w_in.to_vec();
        let hid = cfg.fc_hidden;
        for j in 0..readouts {
            damp_col(&mut d_in, hid, j);
        }
        for w in 0..cells {
            for j in 0..dirs {
                d_in[((1 + 2 * j) * cells + w) * hid + j] += 1.0;
                d_in[((2 + 2 * j) * cells + w) * hid + j] += 1.0;
                d_in[w * hid + j] -= 2.0;
            }
            d_in[w * hid + dirs] += 1.0; // loudness readout
        }
        w_in.set_data(&d_in);
        let mut d_mid = w_mid.to_vec();
        for j in 0..readouts {
            damp_col(&mut d_mid, hid, j);
            d_mid[j * hid + j] += 1.0;
        }
        w_mid.set_data(&d_mid);
        let mut d_out = w_out.to_vec();
        let out_dim = cfg.num_sources * (cfg.feature_dim + cfg.variance_dim());
        for n in 0..cfg.num_sources {
            let base = n * (cfg.feature_dim + cfg.variance_dim());
            for j in 0..readouts {
                damp_col(&mut d_out, out_dim, base + j);
                d_out[j * out_dim + base + j] += 1.0;
            }
        }
        w_out.set_data(&d_out);
    }

    /// Full forward pass for one chunk. In training mode also returns the
    /// chunk's batch-norm statistics for the running-average update.
    pub fn forward(
        &self,
        chunk: &SpectralChunk,
        train: bool,
    ) -> Result<(Vec<Vec<Posterior>>, Option<BnBatchStats>)> {
        let (features, stats) = self.extractor.extract(chunk, train)?;
        let mut z_prime = Vec::with_capacity(features.z.len());
        for z in &features.z {
            let with_pos = positional_concat(z)?;
            z_prime.push(self.encoder.encode(&with_pos)?);
        }
        let posteriors = self.lgs.sequence(&z_prime, &features.sigma)?;
        Ok((posteriors, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend;

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                conv_filters: 2,
                pool_widths: [2, 2, 1],
                fc_hidden: 5,
                num_sources: 2,
                feature_dim: 3,
                in_channels: 2,
                frames: 4,
                freq_bins: 8,
            },
            encoder: EncoderConfig {
                layers: 1,
                heads: 2,
                model_dim: 4,
                ff_dim: 6,
            },
        }
    }

    fn tiny_chunk(cfg: &ModelConfig, seed: u64) -> SpectralChunk {
        use rand::prelude::*;
        let e = &cfg.extractor;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpectralChunk {
            data: (0..e.frames * e.freq_bins * e.in_channels)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
            frames: e.frames,
            bins: e.freq_bins,
            channels: e.in_channels / 2,
            chunk_index: 0,
            chunk_start_time: 0.0,
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut cfg = tiny_config();
        cfg.encoder.model_dim = 6;
        cfg.encoder.heads = 2;
        assert!(PilotModel::new(cfg).is_err());
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny_config();
        let model = PilotModel::new(cfg.clone()).unwrap();
        model.init_kaiming(1);
        let chunk = tiny_chunk(&cfg, 2);
        let (posts, stats) = model.forward(&chunk, true).unwrap();
        assert_eq!(posts.len(), 4);
        assert_eq!(posts[0].len(), 2);
        assert!(stats.is_some());
        for frame in &posts {
            for p in frame {
                assert_eq!(p.mean.shape(), &[2, 1]);
                assert_eq!(p.cov.shape(), &[2, 2]);
                let g = p.gamma.item();
                assert!(g > 0.0 && g < 1.0);
            }
        }
    }

    #[test]
    fn eval_mode_returns_no_stats() {
        let cfg = tiny_config();
        let model = PilotModel::new(cfg.clone()).unwrap();
        model.init_kaiming(3);
        let (_, stats) = model.forward(&tiny_chunk(&cfg, 4), false).unwrap();
        assert!(stats.is_none());
    }

    #[test]
    fn kaiming_variance_matches_fan_in() {
        // paper-scale FC layer: plenty of samples for a tight variance check
        let model = PilotModel::new(ModelConfig::default()).unwrap();
        model.init_kaiming(5);
        for (name, t) in model.parameters() {
            if !name.contains("fc") && !name.contains("conv") {
                continue;
            }
            let shape = t.shape().to_vec();
            let fan_in = match shape.len() {
                2 => shape[0],
                4 => shape[1] * shape[2] * shape[3],
                _ => continue,
            };
            if t.len() < 10_000 {
                continue;
            }
            let d = t.to_vec();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
            let expect = 2.0 / fan_in as f64;
            assert!(
                (var - expect).abs() / expect < 0.2,
                "{}: var {} expect {}",
                name,
                var,
                expect
            );
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = PilotModel::new(tiny_config()).unwrap();
        let b = PilotModel::new(tiny_config()).unwrap();
        a.init_kaiming(7);
        b.init_kaiming(7);
        for ((_, ta), (_, tb)) in a.parameters().iter().zip(b.parameters().iter()) {
            let da = ta.to_vec();
            let db = tb.to_vec();
            assert!(da.iter().zip(db.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn prior_means_equally_spaced() {
        let model = PilotModel::new(tiny_config()).unwrap();
        model.init_kaiming(9);
        let m0 = model.lgs.mu[0].to_vec();
        let m1 = model.lgs.mu[1].to_vec();
        assert!((m0[0] + std::f64::consts::PI).abs() < 1e-12);
        assert!((m1[0] - 0.0).abs() < 1e-12);
        assert_eq!(m0[1], 0.0);
        assert_eq!(m1[1], 0.0);
    }

    #[test]
    fn pipeline_matches_frontend_dims_at_paper_scale() {
        let cfg = ModelConfig::default();
        let model = PilotModel::new(cfg).unwrap();
        let w = frontend::Waveform::new(vec![vec![0.0; 22050]; 4], 44100).unwrap();
        let chunk = frontend::stft(&w, 0).unwrap();
        let (posts, _) = model.forward(&chunk, false).unwrap();
        assert_eq!(posts.len(), 25);
        assert_eq!(posts[0].len(), 3);
    }
}
