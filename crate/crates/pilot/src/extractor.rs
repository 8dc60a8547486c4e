//! CNN front-end: three conv/batch-norm/ReLU/max-pool layers over the
//! spectral tensor, then a time-distributed three-layer FC head emitting
//! per-source feature vectors and observation-noise variances.

use crate::autodiff::Tensor;
use crate::error::{PilotError, Result};
use crate::frontend::SpectralChunk;
use std::cell::RefCell;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ExtractorConfig {
    pub conv_filters: usize,
    pub pool_widths: [usize; 3],
    pub fc_hidden: usize,
    pub num_sources: usize,
    pub feature_dim: usize,
    pub in_channels: usize,
    pub frames: usize,
    pub freq_bins: usize,
}

impl ExtractorConfig {
    pub fn variance_dim(&self) -> usize {
        self.feature_dim + 1
    }

    pub fn pooled_bins(&self) -> usize {
        self.freq_bins / self.pool_widths.iter().product::<usize>()
    }

    pub fn flat_dim(&self) -> usize {
        self.conv_filters * self.pooled_bins()
    }

    pub fn out_dim(&self) -> usize {
        self.num_sources * (self.feature_dim + self.variance_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sources < 1 || self.feature_dim < 1 {
            return Err(PilotError::invalid("num_sources and feature_dim must be >= 1"));
        }
        let pool: usize = self.pool_widths.iter().product();
        if pool == 0 || self.freq_bins % pool != 0 {
            return Err(PilotError::invalid(format!(
                "pool widths {:?} do not evenly divide {} frequency bins",
                self.pool_widths, self.freq_bins
            )));
        }
        Ok(())
    }
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            conv_filters: 64,
            pool_widths: [8, 8, 2],
            fc_hidden: 128,
            num_sources: 3,
            feature_dim: 63,
            in_channels: 8,
            frames: 25,
            freq_bins: 1024,
        }
    }
}

/// Per-frame, per-source features `z` and strictly positive observation-noise
/// variances `sigma`.
pub struct FeatureBundle {
    /// per source: `[K, D_F]`
    pub z: Vec<Tensor>,
    /// per source: `[K, D_E]`
    pub sigma: Vec<Tensor>,
}

struct BnLayer {
    gamma: Tensor,
    beta: Tensor,
    running_mean: RefCell<Vec<f64>>,
    running_var: RefCell<Vec<f64>>,
}

impl BnLayer {
    fn new(channels: usize) -> BnLayer {
        BnLayer {
            gamma: Tensor::leaf(vec![channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::leaf(vec![channels], vec![0.0; channels]).unwrap(),
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
        }
    }
}

pub struct Extractor {
    pub cfg: ExtractorConfig,
    conv_w: [Tensor; 3],
    conv_b: [Tensor; 3],
    bn: [BnLayer; 3],
    fc_w: [Tensor; 3],
    fc_b: [Tensor; 3],
}

/// Per-chunk batch-norm statistics observed during a training forward pass,
/// one `(mean, var)` pair per BN layer.
pub type BnBatchStats = Vec<(Vec<f64>, Vec<f64>)>;

impl Extractor {
    /// Zero-initialized parameters (weights are filled in by the trainer's
    /// initializer; batch-norm starts at identity).
    pub fn new(cfg: ExtractorConfig) -> Result<Extractor> {
        cfg.validate()?;
        let f = cfg.conv_filters;
        let mk_conv = |cin: usize| {
            (
                Tensor::leaf(vec![f, cin, 3, 3], vec![0.0; f * cin * 9]).unwrap(),
                Tensor::leaf(vec![f], vec![0.0; f]).unwrap(),
            )
        };
        let (w1, b1) = mk_conv(cfg.in_channels);
        let (w2, b2) = mk_conv(f);
        let (w3, b3) = mk_conv(f);
        let dims = [
            (cfg.flat_dim(), cfg.fc_hidden),
            (cfg.fc_hidden, cfg.fc_hidden),
            (cfg.fc_hidden, cfg.out_dim()),
        ];
        let fc: Vec<(Tensor, Tensor)> = dims
            .iter()
            .map(|&(i, o)| {
                (
                    Tensor::leaf(vec![i, o], vec![0.0; i * o]).unwrap(),
                    Tensor::leaf(vec![o], vec![0.0; o]).unwrap(),
                )
            })
            .collect();
        Ok(Extractor {
            bn: [BnLayer::new(f), BnLayer::new(f), BnLayer::new(f)],
            conv_w: [w1, w2, w3],
            conv_b: [b1, b2, b3],
            fc_w: [fc[0].0.clone(), fc[1].0.clone(), fc[2].0.clone()],
            fc_b: [fc[0].1.clone(), fc[1].1.clone(), fc[2].1.clone()],
            cfg,
        })
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for i in 0..3 {
            out.push((format!("extractor.conv{}.weight", i), self.conv_w[i].clone()));
            out.push((format!("extractor.conv{}.bias", i), self.conv_b[i].clone()));
            out.push((format!("extractor.bn{}.gamma", i), self.bn[i].gamma.clone()));
            out.push((format!("extractor.bn{}.beta", i), self.bn[i].beta.clone()));
        }
        for i in 0..3 {
            out.push((format!("extractor.fc{}.weight", i), self.fc_w[i].clone()));
            out.push((format!("extractor.fc{}.bias", i), self.fc_b[i].clone()));
        }
        out
    }

    /// Non-learnable state (batch-norm running statistics), name -> values.
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for i in 0..3 {
            out.push((format!("extractor.bn{}.running_mean", i), self.bn[i].running_mean.borrow().clone()));
            out.push((format!("extractor.bn{}.running_var", i), self.bn[i].running_var.borrow().clone()));
        }
        out
    }

    pub fn load_buffer(&self, name: &str, values: &[f64]) -> Result<()> {
        for i in 0..3 {
            if name == format!("extractor.bn{}.running_mean", i) {
                self.bn[i].running_mean.borrow_mut().copy_from_slice(values);
                return Ok(());
            }
            if name == format!("extractor.bn{}.running_var", i) {
                self.bn[i].running_var.borrow_mut().copy_from_slice(values);
                return Ok(());
            }
        }
        Err(PilotError::Format(format!("unknown buffer '{}'", name)))
    }

    /// Fold a batch of per-chunk BN statistics into the running estimates.
    pub fn update_running_stats(&self, batch: &[BnBatchStats]) {
        if batch.is_empty() {
            return;
        }
        let inv = 1.0 / batch.len() as f64;
        for layer in 0..3 {
            let c = self.cfg.conv_filters;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for stats in batch {
                for i in 0..c {
                    mean[i] += stats[layer].0[i] * inv;
                    var[i] += stats[layer].1[i] * inv;
                }
            }
            let mut rm = self.bn[layer].running_mean.borrow_mut();
            let mut rv = self.bn[layer].running_var.borrow_mut();
            for i in 0..c {
                rm[i] = BN_MOMENTUM * rm[i] + (1.0 - BN_MOMENTUM) * mean[i];
                rv[i] = BN_MOMENTUM * rv[i] + (1.0 - BN_MOMENTUM) * var[i];
            }
        }
    }

    /// Build the constant `[2C, K, L]` input tensor from a spectral chunk.
    pub fn input_tensor(&self, chunk: &SpectralChunk) -> Result<Tensor> {
        let (k, l, c2) = (chunk.frames, chunk.bins, 2 * chunk.channels);
        if k != self.cfg.frames || l != self.cfg.freq_bins || c2 != self.cfg.in_channels {
            return Err(PilotError::invalid(format!(
                "chunk shape {}x{}x{} does not match extractor config {}x{}x{}",
                k, l, c2, self.cfg.frames, self.cfg.freq_bins, self.cfg.in_channels
            )));
        }
        let mut data = vec![0.0; c2 * k * l];
        for kk in 0..k {
            for ll in 0..l {
                let base = (kk * l + ll) * c2;
                for cc in 0..c2 {
                    data[(cc * k + kk) * l + ll] = chunk.data[base + cc];
                }
            }
        }
        // Standardize each input channel over the chunk. Raw magnitudes and
        // raw phases live on very different scales (phases span +-pi while
        // magnitudes are typically well below one), so without this the
        // first convolution is dominated by per-bin phase noise and the
        // magnitude information is suppressed by the batch norm that follows.
        let plane = k * l;
        for cc in 0..c2 {
            let ch = &mut data[cc * plane..(cc + 1) * plane];
            let mean = ch.iter().sum::<f64>() / plane as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var.sqrt() + 1e-6);
            for v in ch.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        Tensor::new(vec![c2, k, l], data)
    }

    /// Forward pass. In training mode also returns the per-layer batch-norm
    /// statistics of this chunk.
    pub fn extract(&self, chunk: &SpectralChunk, train: bool) -> Result<(FeatureBundle, Option<BnBatchStats>)> {
        let x = self.input_tensor(chunk)?;
        self.extract_from_tensor(&x, train)
    }

    pub fn extract_from_tensor(
        &self,
        input: &Tensor,
        train: bool,
    ) -> Result<(FeatureBundle, Option<BnBatchStats>)> {
        let mut x = input.clone();
        let mut batch_stats: BnBatchStats = Vec::new();
        for i in 0..3 {
            x = x.conv2d(&self.conv_w[i], &self.conv_b[i])?;
            let (y, stats) = x.batch_norm2d(
                &self.bn[i].gamma,
                &self.bn[i].beta,
                &self.bn[i].running_mean.borrow(),
                &self.bn[i].running_var.borrow(),
                BN_EPS,
                train,
            )?;
            if let Some(s) = stats {
                batch_stats.push(s);
            }
            x = y.relu().max_pool2d(1, self.cfg.pool_widths[i])?;
        }
        // [F, K, W'] -> [K, F*W'] time-distributed flatten
        let k = self.cfg.frames;
        let flat = x.permute(&[1, 0, 2])?.reshape(vec![k, self.cfg.flat_dim()])?;
        let h1 = flat.matmul(&self.fc_w[0])?.add(&self.fc_b[0])?.relu();
        let h2 = h1.matmul(&self.fc_w[1])?.add(&self.fc_b[1])?.relu();
        let out = h2.matmul(&self.fc_w[2])?.add(&self.fc_b[2])?;

        let (df, de) = (self.cfg.feature_dim, self.cfg.variance_dim());
        let mut z = Vec::with_capacity(self.cfg.num_sources);
        let mut sigma = Vec::with_capacity(self.cfg.num_sources);
        for n in 0..self.cfg.num_sources {
            let base = n * (df + de);
            z.push(out.slice(1, base, df)?);
            // clamp the log-variance pre-activation so exp can neither
            // overflow nor drive the observation noise to exactly zero;
            // the upper bound also stops the network from hedging hard
            // frames with unbounded observation noise
            sigma.push(out.slice(1, base + df, de)?.clamp_values(-10.0, 2.0).exp());
        }
        Ok((
            FeatureBundle { z, sigma },
            if train { Some(batch_stats) } else { None },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend;
    use crate::gradcheck;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ExtractorConfig {
        ExtractorConfig {
            conv_filters: 3,
            pool_widths: [2, 2, 2],
            fc_hidden: 6,
            num_sources: 2,
            feature_dim: 4,
            in_channels: 2,
            frames: 5,
            freq_bins: 16,
        }
    }

    fn randomize(ex: &Extractor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in ex.parameters() {
            let d: Vec<f64> = (0..p.len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            p.set_data(&d);
        }
    }

    fn rand_chunk(cfg: &ExtractorConfig, seed: u64) -> SpectralChunk {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.frames * cfg.freq_bins * cfg.in_channels;
        SpectralChunk {
            data: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            frames: cfg.frames,
            bins: cfg.freq_bins,
            channels: cfg.in_channels / 2,
            chunk_index: 0,
            chunk_start_time: 0.0,
        }
    }

    #[test]
    fn output_shapes_match_paper_dims() {
        let cfg = ExtractorConfig {
            num_sources: 3,
            feature_dim: 63,
            ..ExtractorConfig::default()
        };
        let ex = Extractor::new(cfg).unwrap();
        let chunk = {
            let w = frontend::Waveform::new(vec![vec![0.0; 22050]; 4], 44100).unwrap();
            frontend::stft(&w, 0).unwrap()
        };
        let (fb, _) = ex.extract(&chunk, false).unwrap();
        assert_eq!(fb.z.len(), 3);
        assert_eq!(fb.z[0].shape(), &[25, 63]);
        assert_eq!(fb.sigma[0].shape(), &[25, 64]);
    }

    #[test]
    fn zero_input_zero_params_gives_unit_sigma() {
        // zero weights and biases, identity batch-norm in eval mode:
        // pre-activations are zero, so sigma = exp(0) = 1
        let cfg = small_cfg();
        let ex = Extractor::new(cfg.clone()).unwrap();
        let chunk = SpectralChunk {
            data: vec![0.0; cfg.frames * cfg.freq_bins * cfg.in_channels],
            frames: cfg.frames,
            bins: cfg.freq_bins,
            channels: cfg.in_channels / 2,
            chunk_index: 0,
            chunk_start_time: 0.0,
        };
        let (fb, _) = ex.extract(&chunk, false).unwrap();
        assert!(fb.sigma[0].to_vec().iter().all(|&v| v == 1.0));
        assert!(fb.z[0].to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigma_strictly_positive() {
        let cfg = small_cfg();
        let ex = Extractor::new(cfg.clone()).unwrap();
        randomize(&ex, 3);
        let chunk = rand_chunk(&cfg, 4);
        let (fb, _) = ex.extract(&chunk, true).unwrap();
        for s in &fb.sigma {
            assert!(s.to_vec().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn matches_straight_line_oracle() {
        // independent scalar re-implementation of the same layer sequence
        let cfg = small_cfg();
        let ex = Extractor::new(cfg.clone()).unwrap();
        randomize(&ex, 11);
        let chunk = rand_chunk(&cfg, 12);
        let (fb, _) = ex.extract(&chunk, false).unwrap();

        let oracle = oracle_forward(&ex, &cfg, &chunk);
        for n in 0..cfg.num_sources {
            let z = fb.z[n].to_vec();
            for (a, b) in z.iter().zip(oracle.z[n].iter()) {
                assert!((a - b).abs() < 1e-5, "z mismatch {} vs {}", a, b);
            }
            let s = fb.sigma[n].to_vec();
            for (a, b) in s.iter().zip(oracle.sigma[n].iter()) {
                assert!((a - b).abs() < 1e-5, "sigma mismatch {} vs {}", a, b);
            }
        }
    }

    struct OracleOut {
        z: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
    }

    /// Plain-loop forward pass sharing nothing with the autodiff path.
    fn oracle_forward(ex: &Extractor, cfg: &ExtractorConfig, chunk: &SpectralChunk) -> OracleOut {
        let params: std::collections::BTreeMap<String, Vec<f64>> = ex
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, t.to_vec()))
            .collect();
        let (k, l) = (cfg.frames, cfg.freq_bins);
        // input [C][K][L]
        let mut x: Vec<Vec<Vec<f64>>> =
            vec![vec![vec![0.0; l]; k]; cfg.in_channels];
        for kk in 0..k {
            for ll in 0..l {
                for cc in 0..cfg.in_channels {
                    x[cc][kk][ll] = chunk.data[(kk * l + ll) * cfg.in_channels + cc];
                }
            }
        }
        let mut width = l;
        for layer in 0..3 {
            let w = &params[&format!("extractor.conv{}.weight", layer)];
            let b = &params[&format!("extractor.conv{}.bias", layer)];
            let gamma = &params[&format!("extractor.bn{}.gamma", layer)];
            let beta = &params[&format!("extractor.bn{}.beta", layer)];
            let rm = ex.bn[layer].running_mean.borrow().clone();
            let rv = ex.bn[layer].running_var.borrow().clone();
            let cin = x.len();
            let cout = cfg.conv_filters;
            let mut y = vec![vec![vec![0.0; width]; k]; cout];
            for co in 0..cout {
                for oh in 0..k {
                    for ow in 0..width {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for di in 0..3 {
                                for dj in 0..3 {
                                    let ih = oh as i64 + di - 1;
                                    let iw = ow as i64 + dj - 1;
                                    if ih >= 0 && (ih as usize) < k && iw >= 0 && (iw as usize) < width {
                                        acc += w[((co * cin + ci) * 3 + di as usize) * 3 + dj as usize]
                                            * x[ci][ih as usize][iw as usize];
                                    }
                                }
                            }
                        }
                        y[co][oh][ow] = acc;
                    }
                }
            }
            // eval-mode BN + relu + pool
            let pw = cfg.pool_widths[layer];
            let new_w = width / pw;
            let mut pooled = vec![vec![vec![0.0; new_w]; k]; cout];
            for co in 0..cout {
                let scale = gamma[co] / (rv[co] + BN_EPS).sqrt();
                for oh in 0..k {
                    for ow in 0..width {
                        let v = (y[co][oh][ow] - rm[co]) * scale + beta[co];
                        y[co][oh][ow] = v.max(0.0);
                    }
                    for j in 0..new_w {
                        pooled[co][oh][j] = (0..pw)
                            .map(|d| y[co][oh][j * pw + d])
                            .fold(f64::NEG_INFINITY, f64::max);
                    }
                }
            }
            x = pooled;
            width = new_w;
        }
        // flatten per frame, three FC layers
        let flat_dim = cfg.flat_dim();
        let mut z = vec![Vec::new(); cfg.num_sources];
        let mut sigma = vec![Vec::new(); cfg.num_sources];
        for kk in 0..k {
            let mut h: Vec<f64> = (0..flat_dim)
                .map(|i| x[i / width][kk][i % width])
                .collect();
            for layer in 0..3 {
                let w = &params[&format!("extractor.fc{}.weight", layer)];
                let b = &params[&format!("extractor.fc{}.bias", layer)];
                let out_dim = b.len();
                let mut next = vec![0.0; out_dim];
                for o in 0..out_dim {
                    let mut acc = b[o];
                    for (i, &hv) in h.iter().enumerate() {
                        acc += hv * w[i * out_dim + o];
                    }
                    next[o] = if layer < 2 { acc.max(0.0) } else { acc };
                }
                h = next;
            }
            let (df, de) = (cfg.feature_dim, cfg.variance_dim());
            for n in 0..cfg.num_sources {
                let base = n * (df + de);
                z[n].extend_from_slice(&h[base..base + df]);
                sigma[n].extend(h[base + df..base + df + de].iter().map(|v| v.exp()));
            }
        }
        OracleOut { z, sigma }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ExtractorConfig {
            conv_filters: 2,
            pool_widths: [2, 2, 1],
            fc_hidden: 4,
            num_sources: 1,
            feature_dim: 2,
            in_channels: 2,
            frames: 3,
            freq_bins: 8,
        };
        let ex = Extractor::new(cfg.clone()).unwrap();
        randomize(&ex, 21);
        let chunk = rand_chunk(&cfg, 22);
        let params = ex.parameters();
        let refs: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
        let report = gradcheck::check(
            &refs,
            || {
                let (fb, _) = ex.extract(&chunk, true)?;
                // scalar function of (z, sigma)
                let mut loss = fb.z[0].mul(&fb.z[0])?.sum();
                loss = loss.add(&fb.sigma[0].log().sum())?;
                Ok(loss)
            },
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passes(1e-4, 1e-6), "{:?}", report);
    }

    #[test]
    fn time_axis_locality() {
        // with batch-norm frozen (eval mode), perturbing frame k only moves
        // z at frames within the stacked conv receptive field |dk| <= 3
        let cfg = small_cfg();
        let ex = Extractor::new(cfg.clone()).unwrap();
        randomize(&ex, 31);
        let mut chunk = rand_chunk(&cfg, 32);
        let (fb0, _) = ex.extract(&chunk, false).unwrap();
        let z0 = fb0.z[0].to_vec();

        let poke = 2usize; // middle frame
        for ll in 0..cfg.freq_bins {
            for cc in 0..cfg.in_channels {
                chunk.data[(poke * cfg.freq_bins + ll) * cfg.in_channels + cc] += 0.7;
            }
        }
        let (fb1, _) = ex.extract(&chunk, false).unwrap();
        let z1 = fb1.z[0].to_vec();
        let df = cfg.feature_dim;
        for kk in 0..cfg.frames {
            let changed = (0..df).any(|j| (z0[kk * df + j] - z1[kk * df + j]).abs() > 1e-12);
            let within = (kk as i64 - poke as i64).abs() <= 3;
            if !within {
                assert!(!changed, "frame {} outside receptive field changed", kk);
            }
        }
    }
}
