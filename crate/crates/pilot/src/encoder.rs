//! Transformer encoder over each source's feature sequence.
//!
//! Post-norm blocks: multi-head self-attention, add & layer-norm, position-
//! wise feed-forward (ReLU), add & layer-norm. A linear positional scalar is
//! concatenated to the features beforehand, taking D_F to D_E = D_F + 1.

use crate::autodiff::{concat, Tensor};
use crate::error::{PilotError, Result};

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 3,
            heads: 4,
            model_dim: 64,
            ff_dim: 1024,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(PilotError::invalid(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Concatenate the linear positional scalar p_k = (k-1)/(K-1) (zero-based:
/// k/(K-1)) as an extra feature column.
pub fn positional_concat(z: &Tensor) -> Result<Tensor> {
    let shape = z.shape();
    if shape.len() != 2 {
        return Err(PilotError::invalid("positional_concat expects [K, D_F]"));
    }
    let k = shape[0];
    if k < 2 {
        return Err(PilotError::invalid(
            "positional encoding needs at least 2 frames (division by K-1)",
        ));
    }
    let col: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
    let p = Tensor::new(vec![k, 1], col)?;
    concat(&[z.clone(), p], 1)
}

struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bq: Tensor,
    bk: Tensor,
    bv: Tensor,
    bo: Tensor,
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    ff_w1: Tensor,
    ff_b1: Tensor,
    ff_w2: Tensor,
    ff_b2: Tensor,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
}

impl Block {
    fn new(d: usize, ff: usize) -> Block {
        let mat = |i: usize, o: usize| Tensor::leaf(vec![i, o], vec![0.0; i * o]).unwrap();
        let vecb = |n: usize| Tensor::leaf(vec![n], vec![0.0; n]).unwrap();
        let ones = |n: usize| Tensor::leaf(vec![n], vec![1.0; n]).unwrap();
        Block {
            wq: mat(d, d),
            wk: mat(d, d),
            wv: mat(d, d),
            wo: mat(d, d),
            bq: vecb(d),
            bk: vecb(d),
            bv: vecb(d),
            bo: vecb(d),
            ln1_gamma: ones(d),
            ln1_beta: vecb(d),
            ff_w1: mat(d, ff),
            ff_b1: vecb(ff),
            ff_w2: mat(ff, d),
            ff_b2: vecb(d),
            ln2_gamma: ones(d),
            ln2_beta: vecb(d),
        }
    }
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Encoder> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|_| Block::new(cfg.model_dim, cfg.ff_dim))
            .collect();
        Ok(Encoder { cfg, blocks })
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |name: &str, t: &Tensor| (format!("encoder.block{}.{}", i, name), t.clone());
            out.push(p("wq", &b.wq));
            out.push(p("bq", &b.bq));
            out.push(p("wk", &b.wk));
            out.push(p("bk", &b.bk));
            out.push(p("wv", &b.wv));
            out.push(p("bv", &b.bv));
            out.push(p("wo", &b.wo));
            out.push(p("bo", &b.bo));
            out.push(p("ln1.gamma", &b.ln1_gamma));
            out.push(p("ln1.beta", &b.ln1_beta));
            out.push(p("ff.w1", &b.ff_w1));
            out.push(p("ff.b1", &b.ff_b1));
            out.push(p("ff.w2", &b.ff_w2));
            out.push(p("ff.b2", &b.ff_b2));
            out.push(p("ln2.gamma", &b.ln2_gamma));
            out.push(p("ln2.beta", &b.ln2_beta));
        }
        out
    }

    /// Encode one source's `[K, D_E]` sequence. Also returns per-layer
    /// attention weights (`[K, K]` per head) for inspection.
    pub fn encode_with_attention(&self, x: &Tensor) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
        let d = self.cfg.model_dim;
        if x.shape().len() != 2 || x.shape()[1] != d {
            return Err(PilotError::invalid(format!(
                "encoder expects [K, {}], got {:?}",
                d,
                x.shape()
            )));
        }
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = x.clone();
        let mut attn_all = Vec::new();
        for b in &self.blocks {
            let q = h.matmul(&b.wq)?.add(&b.bq)?;
            let k = h.matmul(&b.wk)?.add(&b.bk)?;
            let v = h.matmul(&b.wv)?.add(&b.bv)?;
            let mut head_outs = Vec::with_capacity(heads);
            let mut attn_weights = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = q.slice(1, hd * dh, dh)?;
                let kh = k.slice(1, hd * dh, dh)?;
                let vh = v.slice(1, hd * dh, dh)?;
                let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
                let weights = scores.softmax();
                head_outs.push(weights.matmul(&vh)?);
                attn_weights.push(weights);
            }
            let ctx = concat(&head_outs, 1)?.matmul(&b.wo)?.add(&b.bo)?;
            h = h.add(&ctx)?.layer_norm(&b.ln1_gamma, &b.ln1_beta, 1e-5)?;
            let ff = h
                .matmul(&b.ff_w1)?
                .add(&b.ff_b1)?
                .relu()
                .matmul(&b.ff_w2)?
                .add(&b.ff_b2)?;
            h = h.add(&ff)?.layer_norm(&b.ln2_gamma, &b.ln2_beta, 1e-5)?;
            attn_all.push(attn_weights);
        }
        Ok((h, attn_all))
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_with_attention(x)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_encoder(seed: u64, layers: usize, d: usize, ff: usize, heads: usize) -> Encoder {
        let enc = Encoder::new(EncoderConfig {
            layers,
            heads,
            model_dim: d,
            ff_dim: ff,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, p) in enc.parameters() {
            if name.contains("gamma") {
                continue; // keep layer-norm gains near identity
            }
            let d: Vec<f64> = (0..p.len()).map(|_| rng.gen_range(-0.4..0.4)).collect();
            p.set_data(&d);
        }
        enc
    }

    fn rand_input(seed: u64, k: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![k, d], (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn positional_values_are_linear() {
        let z = Tensor::zeros(vec![25, 3]);
        let out = positional_concat(&z).unwrap();
        assert_eq!(out.shape(), &[25, 4]);
        let d = out.to_vec();
        for k in 0..25 {
            let p = d[k * 4 + 3];
            assert!((p - k as f64 / 24.0).abs() < 1e-15);
        }
        assert_eq!(d[3], 0.0);
        assert_eq!(d[24 * 4 + 3], 1.0);
    }

    #[test]
    fn positional_midpoint_for_k3() {
        let z = Tensor::zeros(vec![3, 2]);
        let out = positional_concat(&z).unwrap();
        let d = out.to_vec();
        assert_eq!([d[2], d[5], d[8]], [0.0, 0.5, 1.0]);
    }

    #[test]
    fn positional_rejects_single_frame() {
        let z = Tensor::zeros(vec![1, 4]);
        assert!(positional_concat(&z).is_err());
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let enc = small_encoder(1, 2, 8, 16, 4);
        let x = rand_input(2, 25, 8);
        let y = enc.encode(&x).unwrap();
        assert_eq!(y.shape(), &[25, 8]);
    }

    #[test]
    fn singleton_attention_is_value_projection() {
        // with K=1 the softmax is over one key, so attention output is the
        // value projection itself
        let enc = small_encoder(3, 1, 4, 8, 2);
        let x = rand_input(4, 1, 4);
        let (_, attn) = enc.encode_with_attention(&x).unwrap();
        for head in &attn[0] {
            assert_eq!(head.to_vec(), vec![1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let enc = small_encoder(5, 2, 8, 16, 4);
        let x = rand_input(6, 7, 8);
        let (_, attn) = enc.encode_with_attention(&x).unwrap();
        for layer in &attn {
            for head in layer {
                let w = head.to_vec();
                let k = head.shape()[0];
                for row in 0..k {
                    let s: f64 = w[row * k..(row + 1) * k].iter().sum();
                    assert!((s - 1.0).abs() < 1e-10);
                    assert!(w[row * k..(row + 1) * k].iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn permutation_equivariant_over_time() {
        let enc = small_encoder(7, 2, 6, 12, 3);
        let k = 5;
        let x = rand_input(8, k, 6);
        let y = enc.encode(&x).unwrap().to_vec();

        let perm = [3usize, 0, 4, 1, 2];
        let xd = x.to_vec();
        let mut pxd = vec![0.0; xd.len()];
        for (to, &from) in perm.iter().enumerate() {
            pxd[to * 6..(to + 1) * 6].copy_from_slice(&xd[from * 6..(from + 1) * 6]);
        }
        let px = Tensor::new(vec![k, 6], pxd).unwrap();
        let py = enc.encode(&px).unwrap().to_vec();
        for (to, &from) in perm.iter().enumerate() {
            for j in 0..6 {
                assert!(
                    (py[to * 6 + j] - y[from * 6 + j]).abs() < 1e-10,
                    "row {} not equivariant",
                    to
                );
            }
        }
    }

    #[test]
    fn matches_independent_block_oracle() {
        let d = 4;
        let heads = 2;
        let ff = 6;
        let enc = small_encoder(9, 2, d, ff, heads);
        let k = 3;
        let x = rand_input(10, k, d);
        let y = enc.encode(&x).unwrap().to_vec();
        let oracle = oracle_encode(&enc, &x.to_vec(), k, d, heads, ff);
        for (a, b) in y.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }

    /// Straight-line re-implementation of the post-norm block equations.
    fn oracle_encode(enc: &Encoder, x: &[f64], k: usize, d: usize, heads: usize, ff: usize) -> Vec<f64> {
        let params: std::collections::BTreeMap<String, Vec<f64>> = enc
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, t.to_vec()))
            .collect();
        let dh = d / heads;
        let matvec = |w: &[f64], x: &[f64], i_dim: usize, o_dim: usize, b: &[f64]| -> Vec<f64> {
            (0..o_dim)
                .map(|o| b[o] + (0..i_dim).map(|i| x[i] * w[i * o_dim + o]).sum::<f64>())
                .collect()
        };
        let layer_norm = |row: &[f64], g: &[f64], bt: &[f64]| -> Vec<f64> {
            let mu = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / row.len() as f64;
            row.iter()
                .enumerate()
                .map(|(i, v)| g[i] * (v - mu) / (var + 1e-5).sqrt() + bt[i])
                .collect()
        };
        let mut h: Vec<Vec<f64>> = (0..k).map(|i| x[i * d..(i + 1) * d].to_vec()).collect();
        for layer in 0..enc.cfg.layers {
            let g = |n: &str| params[&format!("encoder.block{}.{}", layer, n)].clone();
            let (wq, bq, wk, bk) = (g("wq"), g("bq"), g("wk"), g("bk"));
            let (wv, bv, wo, bo) = (g("wv"), g("bv"), g("wo"), g("bo"));
            let q: Vec<Vec<f64>> = h.iter().map(|r| matvec(&wq, r, d, d, &bq)).collect();
            let ky: Vec<Vec<f64>> = h.iter().map(|r| matvec(&wk, r, d, d, &bk)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|r| matvec(&wv, r, d, d, &bv)).collect();
            let mut ctx = vec![vec![0.0; d]; k];
            for hd in 0..heads {
                for i in 0..k {
                    let mut scores: Vec<f64> = (0..k)
                        .map(|j| {
                            (0..dh)
                                .map(|t| q[i][hd * dh + t] * ky[j][hd * dh + t])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp() / z;
                    }
                    for t in 0..dh {
                        ctx[i][hd * dh + t] =
                            (0..k).map(|j| scores[j] * v[j][hd * dh + t]).sum();
                    }
                }
            }
            for i in 0..k {
                let o = matvec(&wo, &ctx[i], d, d, &bo);
                let summed: Vec<f64> = h[i].iter().zip(o.iter()).map(|(a, b)| a + b).collect();
                h[i] = layer_norm(&summed, &g("ln1.gamma"), &g("ln1.beta"));
                let mut f1 = matvec(&g("ff.w1"), &h[i], d, ff, &g("ff.b1"));
                for vv in f1.iter_mut() {
                    *vv = vv.max(0.0);
                }
                let f2 = matvec(&g("ff.w2"), &f1, ff, d, &g("ff.b2"));
                let summed2: Vec<f64> = h[i].iter().zip(f2.iter()).map(|(a, b)| a + b).collect();
                h[i] = layer_norm(&summed2, &g("ln2.gamma"), &g("ln2.beta"));
            }
        }
        h.into_iter().flatten().collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let enc = small_encoder(13, 1, 4, 6, 2);
        let x = rand_input(14, 3, 4);
        let params = enc.parameters();
        let refs: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
        let report = gradcheck::check(
            &refs,
            || {
                let y = enc.encode(&x)?;
                Ok(y.mul(&y)?.mean())
            },
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passes(1e-4, 1e-6), "{:?}", report);
    }
}
