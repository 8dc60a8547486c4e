//! Training loop: AdamW with decoupled weight decay, the warmup/decay
//! learning-rate schedule, global-norm gradient clipping, per-epoch
//! validation with best-checkpoint retention, and a versioned binary
//! checkpoint container.

use crate::autodiff::Tensor;
use crate::error::{PilotError, Result};
use crate::frontend::SpectralChunk;
use crate::model::PilotModel;
use crate::objective::{pit_loss, FrameTarget, LossConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            base_lr: 0.05,
            epochs: 200,
            warmup_steps: 1000,
            weight_decay: 1e-2,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

/// Warmup/decay schedule: lr = base * d_model^-0.5 * min(s^-0.5, s * w^-1.5).
pub fn lr_schedule(step: usize, base_lr: f64, model_dim: usize, warmup_steps: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps.max(1) as f64;
    base_lr * (model_dim as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[(String, Tensor)], weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    /// One optimizer step. `grads[i]` is the (already averaged/clipped)
    /// gradient for `params[i]`.
    pub fn step(&mut self, params: &[(String, Tensor)], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(PilotError::invalid("optimizer/parameter count mismatch"));
        }
        for ((name, _), g) in params.iter().zip(grads.iter()) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(PilotError::Numerical(format!(
                    "non-finite gradient in '{}'",
                    name
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, (_, p)) in params.iter().enumerate() {
            let mut data = p.to_vec();
            for (j, (d, &g)) in data.iter_mut().zip(grads[i].iter()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *d = *d - lr * (m_hat / (v_hat.sqrt() + self.eps)) - lr * self.weight_decay * *d;
            }
            p.set_data(&data);
        }
        Ok(())
    }

    pub fn state(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn load_state(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: usize) {
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

/// Scale gradients by `scale` and clip to a global l2 norm.
pub fn scale_and_clip(grads: &mut [Vec<f64>], scale: f64, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= scale;
            sq += *v * *v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= f;
            }
        }
    }
    norm
}

/// One training example: a spectral chunk and its per-frame slot targets.
pub struct TrainChunk {
    pub chunk: SpectralChunk,
    pub targets: Vec<FrameTarget>,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub struct FitResult {
    pub best: Checkpoint,
    pub best_val_loss: f64,
    pub curves: Vec<EpochRecord>,
    /// Set when training aborted on a non-finite loss; the checkpoint is the
    /// last good one.
    pub aborted: Option<String>,
}

fn mean_val_loss(model: &PilotModel, data: &[TrainChunk], loss_cfg: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for sample in data {
        let (posts, _) = model.forward(&sample.chunk, false)?;
        let (loss, _) = pit_loss(&posts, &sample.targets, loss_cfg)?;
        total += loss.item();
    }
    Ok(total / data.len().max(1) as f64)
}

pub fn fit(
    model: &PilotModel,
    train: &[TrainChunk],
    val: &[TrainChunk],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<FitResult> {
    if train.is_empty() || val.is_empty() {
        return Err(PilotError::invalid("fit needs non-empty train and val sets"));
    }
    let params = model.parameters();
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model_dim = model.cfg.encoder.model_dim;
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best: Option<Checkpoint> = None;
    let mut aborted = None;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_chunks = 0usize;
        let mut last_lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for (_, p) in &params {
                p.zero_grad();
            }
            let mut batch_loss = 0.0;
            let mut bn_batch = Vec::with_capacity(batch.len());
            for &idx in batch {
                let sample = &train[idx];
                let forward = model
                    .forward(&sample.chunk, true)
                    .and_then(|(posts, stats)| {
                        pit_loss(&posts, &sample.targets, loss_cfg).map(|(l, _)| (l, stats))
                    });
                let (loss, stats) = match forward {
                    Ok(v) => v,
                    Err(PilotError::SingularMatrix(m)) | Err(PilotError::Numerical(m)) => {
                        // numerical blow-up mid-training: keep the last good
                        // checkpoint, same as a non-finite loss
                        aborted = Some(format!("numerical failure at epoch {}: {}", epoch, m));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                let value = loss.item();
                if !value.is_finite() {
                    aborted = Some(format!(
                        "non-finite loss {} at epoch {} (chunk {})",
                        value, epoch, idx
                    ));
                    break 'epochs;
                }
                batch_loss += value;
                loss.backward()?;
                if let Some(s) = stats {
                    bn_batch.push(s);
                }
            }
            let mut grads: Vec<Vec<f64>> = params
                .iter()
                .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
                .collect();
            scale_and_clip(&mut grads, 1.0 / batch.len() as f64, cfg.grad_clip);
            let lr = lr_schedule(opt.step + 1, cfg.base_lr, model_dim, cfg.warmup_steps);
            last_lr = lr;
            if let Err(e) = opt.step(&params, &grads, lr) {
                aborted = Some(e.to_string());
                break 'epochs;
            }
            model.extractor.update_running_stats(&bn_batch);
            epoch_loss += batch_loss;
            epoch_chunks += batch.len();
        }
        let train_loss = epoch_loss / epoch_chunks.max(1) as f64;
        let val_loss = mean_val_loss(model, val, loss_cfg)?;
        curves.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: last_lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = Some(Checkpoint::from_model(model, Some(&opt), best_val));
        }
    }
    let best = match best {
        Some(c) => c,
        // aborted before any epoch finished: keep the initial state
        None => Checkpoint::from_model(model, Some(&opt), f64::INFINITY),
    };
    Ok(FitResult {
        best,
        best_val_loss: best_val,
        curves,
        aborted,
    })
}

pub fn write_curves(path: &Path, curves: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in curves {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr
        ));
    }
    std::fs::write(path, out).map_err(|e| PilotError::io(path.display().to_string(), e))
}

const CKPT_MAGIC: &[u8; 8] = b"PILOTCK\x01";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
    OptM,
    OptV,
}

impl EntryKind {
    fn code(self) -> u8 {
        match self {
            EntryKind::Param => 0,
            EntryKind::Buffer => 1,
            EntryKind::OptM => 2,
            EntryKind::OptV => 3,
        }
    }

    fn from_code(c: u8) -> Result<EntryKind> {
        Ok(match c {
            0 => EntryKind::Param,
            1 => EntryKind::Buffer,
            2 => EntryKind::OptM,
            3 => EntryKind::OptV,
            other => return Err(PilotError::Format(format!("bad entry kind {}", other))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct CkptEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Complete training state: parameters, batch-norm buffers, optimizer
/// moments, step counter, best validation loss.
pub struct Checkpoint {
    pub entries: Vec<CkptEntry>,
    pub step: u64,
    pub best_val_loss: f64,
    pub fingerprint: String,
}

impl Checkpoint {
    pub fn from_model(model: &PilotModel, opt: Option<&AdamW>, best_val_loss: f64) -> Checkpoint {
        let params = model.parameters();
        let mut entries: Vec<CkptEntry> = params
            .iter()
            .map(|(n, t)| CkptEntry {
                name: n.clone(),
                kind: EntryKind::Param,
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect();
        for (n, d) in model.buffers() {
            entries.push(CkptEntry {
                name: n,
                kind: EntryKind::Buffer,
                shape: vec![d.len()],
                data: d,
            });
        }
        let mut step = 0;
        if let Some(opt) = opt {
            step = opt.step as u64;
            let (m, v) = opt.state();
            for (i, (n, _)) in params.iter().enumerate() {
                entries.push(CkptEntry {
                    name: n.clone(),
                    kind: EntryKind::OptM,
                    shape: vec![m[i].len()],
                    data: m[i].clone(),
                });
                entries.push(CkptEntry {
                    name: n.clone(),
                    kind: EntryKind::OptV,
                    shape: vec![v[i].len()],
                    data: v[i].clone(),
                });
            }
        }
        Checkpoint {
            entries,
            step,
            best_val_loss,
            fingerprint: fingerprint(model),
        }
    }

    /// Load parameters and buffers into a model of the same architecture.
    pub fn apply_to_model(&self, model: &PilotModel) -> Result<()> {
        let expect = fingerprint(model);
        if expect != self.fingerprint {
            return Err(PilotError::Format(format!(
                "checkpoint fingerprint '{}' does not match model '{}'",
                self.fingerprint, expect
            )));
        }
        let params = model.parameters();
        for e in &self.entries {
            match e.kind {
                EntryKind::Param => {
                    let (_, t) = params
                        .iter()
                        .find(|(n, _)| *n == e.name)
                        .ok_or_else(|| PilotError::Format(format!("unknown parameter '{}'", e.name)))?;
                    if t.shape() != e.shape.as_slice() {
                        return Err(PilotError::Format(format!(
                            "shape mismatch for '{}': {:?} vs {:?}",
                            e.name,
                            t.shape(),
                            e.shape
                        )));
                    }
                    t.set_data(&e.data);
                }
                EntryKind::Buffer => model.load_buffer(&e.name, &e.data)?,
                EntryKind::OptM | EntryKind::OptV => {}
            }
        }
        Ok(())
    }

    /// Restore optimizer moments (names must match the model's parameters).
    pub fn apply_to_optimizer(&self, model: &PilotModel, opt: &mut AdamW) -> Result<()> {
        let params = model.parameters();
        let find = |kind: EntryKind, name: &str| -> Option<Vec<f64>> {
            self.entries
                .iter()
                .find(|e| e.kind == kind && e.name == name)
                .map(|e| e.data.clone())
        };
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (n, t) in &params {
            m.push(find(EntryKind::OptM, n).unwrap_or_else(|| vec![0.0; t.len()]));
            v.push(find(EntryKind::OptV, n).unwrap_or_else(|| vec![0.0; t.len()]));
        }
        opt.load_state(m, v, self.step as usize);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ioerr = |e: std::io::Error| PilotError::io(path.display().to_string(), e);
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let fp = self.fingerprint.as_bytes();
        buf.extend_from_slice(&(fp.len() as u32).to_le_bytes());
        buf.extend_from_slice(fp);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.best_val_loss.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        // manifest: name, kind, dtype (0 = f64), shape, byte offset, count
        let mut offset = 0u64;
        for e in &self.entries {
            let name = e.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(e.kind.code());
            buf.push(0u8); // dtype f64
            buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&offset.to_le_bytes());
            buf.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
            offset += (e.data.len() * 8) as u64;
        }
        for e in &self.entries {
            for &v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(ioerr)?;
        f.write_all(&buf).map_err(ioerr)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ioerr = |e: std::io::Error| PilotError::io(path.display().to_string(), e);
        let badfmt = |msg: &str| PilotError::Format(format!("{}: {}", path.display(), msg));
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(ioerr)?
            .read_to_end(&mut buf)
            .map_err(ioerr)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(PilotError::Format(format!(
                    "{}: truncated checkpoint",
                    path.display()
                )));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != CKPT_MAGIC {
            return Err(badfmt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(badfmt(&format!("unsupported checkpoint version {}", version)));
        }
        let fp_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let fingerprint = String::from_utf8(take(&mut pos, fp_len)?.to_vec())
            .map_err(|_| badfmt("bad fingerprint encoding"))?;
        let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let best_val_loss = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        struct Meta {
            name: String,
            kind: EntryKind,
            shape: Vec<usize>,
            offset: u64,
            count: u64,
        }
        let mut metas = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| badfmt("bad entry name"))?;
            let kind = EntryKind::from_code(take(&mut pos, 1)?[0])?;
            let dtype = take(&mut pos, 1)?[0];
            if dtype != 0 {
                return Err(badfmt("unsupported dtype"));
            }
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            metas.push(Meta {
                name,
                kind,
                shape,
                offset,
                count,
            });
        }
        let payload_start = pos;
        let mut entries = Vec::with_capacity(n);
        for m in metas {
            let start = payload_start + m.offset as usize;
            let bytes = m.count as usize * 8;
            if start + bytes > buf.len() {
                return Err(badfmt("payload out of bounds"));
            }
            let data: Vec<f64> = buf[start..start + bytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(CkptEntry {
                name: m.name,
                kind: m.kind,
                shape: m.shape,
                data,
            });
        }
        Ok(Checkpoint {
            entries,
            step,
            best_val_loss,
            fingerprint,
        })
    }
}

/// Architecture fingerprint used to reject incompatible checkpoints.
pub fn fingerprint(model: &PilotModel) -> String {
    let e = &model.cfg.extractor;
    let n = &model.cfg.encoder;
    format!(
        "pilot-v1:conv{}x{:?}fc{}src{}feat{}in{}k{}l{}:enc{}x{}d{}ff{}",
        e.conv_filters,
        e.pool_widths,
        e.fc_hidden,
        e.num_sources,
        e.feature_dim,
        e.in_channels,
        e.frames,
        e.freq_bins,
        n.layers,
        n.heads,
        n.model_dim,
        n.ff_dim
    )
}
