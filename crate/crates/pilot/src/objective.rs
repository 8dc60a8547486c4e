//! Probabilistic sound-event-localization loss with permutation-invariant
//! training.
//!
//! Per frame and slot: L = BCE(gamma_hat, gamma) + alpha * xi * gamma
//! + beta * KL(Sigma_hat || I), where xi is the angular DoA error. The chunk
//! loss takes the minimum over source-slot permutations, with one permutation
//! shared by all frames of the chunk.

use crate::autodiff::Tensor;
use crate::error::{PilotError, Result};
use crate::lgs::Posterior;

const PROB_CLAMP: f64 = 1e-7;
const MAX_PIT_SLOTS: usize = 6;

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Swap the roles of azimuth and elevation in the angular-error formula
    /// so it becomes the standard spherical law of cosines. The default form
    /// applies sin/cos to azimuth and the angle difference to elevation.
    pub conventional_great_circle: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            conventional_great_circle: false,
        }
    }
}

/// Ground truth for one source slot in one frame.
#[derive(Debug, Clone, Copy)]
pub struct SlotTarget {
    pub active: bool,
    /// Azimuth in (-pi, pi]; meaningful only when active.
    pub azimuth: f64,
    /// Elevation in [-pi/2, pi/2]; meaningful only when active.
    pub elevation: f64,
}

impl SlotTarget {
    pub fn inactive() -> SlotTarget {
        SlotTarget {
            active: false,
            azimuth: 0.0,
            elevation: 0.0,
        }
    }

    pub fn active_at(azimuth: f64, elevation: f64) -> SlotTarget {
        SlotTarget {
            active: true,
            azimuth,
            elevation,
        }
    }
}

/// Ground truth for one frame: one entry per source slot.
#[derive(Debug, Clone)]
pub struct FrameTarget {
    pub slots: Vec<SlotTarget>,
}

/// Plain-number angular error between two (azimuth, elevation) pairs.
pub fn doa_error(pred: (f64, f64), truth: (f64, f64), conventional: bool) -> f64 {
    let (a_hat, e_hat) = pred;
    let (a, e) = truth;
    let arg = if conventional {
        e_hat.sin() * e.sin() + e_hat.cos() * e.cos() * (a - a_hat).cos()
    } else {
        a_hat.sin() * a.sin() + a_hat.cos() * a.cos() * (e - e_hat).cos()
    };
    arg.clamp(-1.0, 1.0).acos()
}

/// Differentiable angular error between the `[2, 1]` posterior mean
/// (azimuth, elevation) and a fixed ground-truth direction.
pub fn doa_error_t(mean: &Tensor, truth: (f64, f64), conventional: bool) -> Result<Tensor> {
    if mean.len() != 2 {
        return Err(PilotError::invalid("doa_error_t expects a length-2 mean"));
    }
    let azim = mean.reshape(vec![2])?.slice(0, 0, 1)?;
    let elev = mean.reshape(vec![2])?.slice(0, 1, 1)?;
    let (lat_hat, lon_hat, lat, lon) = if conventional {
        (elev, azim, truth.1, truth.0)
    } else {
        (azim, elev, truth.0, truth.1)
    };
    let sin_t = Tensor::new(vec![1], vec![lat.sin()])?;
    let cos_t = Tensor::new(vec![1], vec![lat.cos()])?;
    let lon_t = Tensor::new(vec![1], vec![lon])?;
    let arg = lat_hat
        .sin()
        .mul(&sin_t)?
        .add(&lat_hat.cos().mul(&cos_t)?.mul(&lon_t.sub(&lon_hat)?.cos())?)?;
    Ok(arg.acos())
}

/// KL divergence from N(m, Sigma) to N(m, I) in two dimensions:
/// 0.5 (tr Sigma - 2 - ln det Sigma).
pub fn kl_to_unit(cov: &Tensor) -> Result<Tensor> {
    let tr = cov.trace2x2()?;
    let logdet = cov.det2x2()?.log();
    let two = Tensor::new(vec![1], vec![2.0])?;
    tr.sub(&two)?.sub(&logdet).map(|t| t.scale(0.5))
}

/// Binary cross-entropy against a hard 0/1 label, with the probability
/// clamped away from the log singularities.
pub fn bce(gamma_hat: &Tensor, active: bool) -> Tensor {
    let p = gamma_hat.clamp_values(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if active {
        p.log().scale(-1.0)
    } else {
        let one = Tensor::new(vec![1], vec![1.0]).unwrap();
        one.sub(&p).unwrap().log().scale(-1.0)
    }
}

/// Loss for one slot in one frame under a fixed assignment.
pub fn frame_loss(post: &Posterior, target: &SlotTarget, cfg: &LossConfig) -> Result<Tensor> {
    let mut loss = bce(&post.gamma, target.active);
    if target.active && cfg.alpha != 0.0 {
        let xi = doa_error_t(
            &post.mean,
            (target.azimuth, target.elevation),
            cfg.conventional_great_circle,
        )?;
        loss = loss.add(&xi.scale(cfg.alpha))?;
    }
    if cfg.beta != 0.0 {
        loss = loss.add(&kl_to_unit(&post.cov)?.scale(cfg.beta))?;
    }
    Ok(loss)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    fn heap(k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(cur.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, cur, out);
            if k % 2 == 0 {
                cur.swap(i, k - 1);
            } else {
                cur.swap(0, k - 1);
            }
        }
    }
    heap(n, &mut cur, &mut out);
    out
}

/// Chunk loss: minimum over slot permutations of the summed frame losses.
/// `posteriors[k][n]` holds slot n of frame k; `targets[k].slots[m]` the
/// ground truth. The permutation maps model slots to target slots and is
/// shared across all frames of the chunk. Returns the minimizing loss tensor
/// (gradient flows only through it) and the winning permutation.
pub fn pit_loss(
    posteriors: &[Vec<Posterior>],
    targets: &[FrameTarget],
    cfg: &LossConfig,
) -> Result<(Tensor, Vec<usize>)> {
    if posteriors.is_empty() || posteriors.len() != targets.len() {
        return Err(PilotError::invalid("posterior/target frame count mismatch"));
    }
    let n = posteriors[0].len();
    if n == 0 || n > MAX_PIT_SLOTS {
        return Err(PilotError::invalid(format!(
            "pit_loss supports 1..={} slots, got {}",
            MAX_PIT_SLOTS, n
        )));
    }
    for (k, (p, t)) in posteriors.iter().zip(targets.iter()).enumerate() {
        if p.len() != n || t.slots.len() != n {
            return Err(PilotError::invalid(format!(
                "frame {} has inconsistent slot count",
                k
            )));
        }
    }
    // pair[n][m]: loss of model slot n against target slot m, summed over
    // frames; shared by every permutation containing that pairing
    let mut pair: Vec<Vec<Tensor>> = Vec::with_capacity(n);
    for slot in 0..n {
        let mut row = Vec::with_capacity(n);
        for tgt in 0..n {
            let mut acc: Option<Tensor> = None;
            for k in 0..posteriors.len() {
                let l = frame_loss(&posteriors[k][slot], &targets[k].slots[tgt], cfg)?;
                acc = Some(match acc {
                    Some(a) => a.add(&l)?,
                    None => l,
                });
            }
            row.push(acc.unwrap());
        }
        pair.push(row);
    }
    let mut best: Option<(f64, Tensor, Vec<usize>)> = None;
    for perm in permutations(n) {
        let mut total = pair[0][perm[0]].clone();
        for slot in 1..n {
            total = total.add(&pair[slot][perm[slot]])?;
        }
        let v = total.item();
        if best.as_ref().map_or(true, |(bv, _, _)| v < *bv) {
            best = Some((v, total, perm));
        }
    }
    let (_, tensor, perm) = best.unwrap();
    Ok((tensor, perm))
}
