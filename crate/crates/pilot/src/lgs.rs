//! Linear Gaussian output stage.
//!
//! Each source slot holds a two-dimensional DoA state (azimuth, elevation)
//! with a learned Gaussian prior N(mu_n, Sigma_n). An encoded feature frame
//! z' is mapped to an observation y = W_n^y z' with noise covariance
//! R = diag(sigma) (the variances predicted by the feature extractor), and
//! the shared observation model y = C x + b yields the closed-form posterior
//!
//!   Sigma_hat = (Sigma_n^-1 + C^T R^-1 C)^-1
//!   x_hat     = Sigma_hat (Sigma_n^-1 mu_n + C^T R^-1 (y - b)).
//!
//! Sigma_n is parameterized as L L^T + 1e-6 I with L lower-triangular so it
//! stays positive definite under gradient steps. The only dense inverses are
//! 2x2 (R is diagonal).

use crate::autodiff::{concat, Tensor};
use crate::error::{PilotError, Result};

const JITTER: f64 = 1e-6;

/// Learned parameters of the localization head.
pub struct LgsParams {
    /// Prior means, one `[2, 1]` tensor per slot.
    pub mu: Vec<Tensor>,
    /// Unconstrained lower-triangular prior factors, `[2, 2]` per slot.
    pub l_factor: Vec<Tensor>,
    /// Shared observation matrix, `[d_e, 2]`.
    pub c: Tensor,
    /// Shared observation bias, `[d_e, 1]`.
    pub b: Tensor,
    /// Per-slot observation weights, `[d_e, d_e]`.
    pub w_y: Vec<Tensor>,
    /// Activity weights, `[num_slots, d_e]`; row n serves slot n.
    pub w_gamma: Tensor,
    pub num_slots: usize,
    pub d_e: usize,
}

/// Posterior for one slot in one frame.
pub struct Posterior {
    /// `[2, 1]` posterior mean (azimuth, elevation).
    pub mean: Tensor,
    /// `[2, 2]` posterior covariance.
    pub cov: Tensor,
    /// Scalar activity probability in (0, 1).
    pub gamma: Tensor,
}

impl LgsParams {
    pub fn new(num_slots: usize, d_e: usize) -> Result<LgsParams> {
        if num_slots == 0 || d_e == 0 {
            return Err(PilotError::invalid("lgs dimensions must be positive"));
        }
        let mut mu = Vec::new();
        let mut l_factor = Vec::new();
        let mut w_y = Vec::new();
        for n in 0..num_slots {
            // equally spaced azimuth priors around the circle, elevation 0
            let az = 2.0 * std::f64::consts::PI * n as f64 / num_slots as f64
                - std::f64::consts::PI;
            mu.push(Tensor::leaf(vec![2, 1], vec![az, 0.0])?);
            // L = I gives the unit prior covariance (plus jitter)
            l_factor.push(Tensor::leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?);
            w_y.push(Tensor::leaf(vec![d_e, d_e], vec![0.0; d_e * d_e])?);
        }
        Ok(LgsParams {
            mu,
            l_factor,
            c: Tensor::leaf(vec![d_e, 2], vec![0.0; d_e * 2])?,
            b: Tensor::leaf(vec![d_e, 1], vec![0.0; d_e])?,
            w_y,
            w_gamma: Tensor::leaf(vec![num_slots, d_e], vec![0.0; num_slots * d_e])?,
            num_slots,
            d_e,
        })
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for n in 0..self.num_slots {
            out.push((format!("lgs.slot{}.mu", n), self.mu[n].clone()));
            out.push((format!("lgs.slot{}.l", n), self.l_factor[n].clone()));
            out.push((format!("lgs.slot{}.w_y", n), self.w_y[n].clone()));
        }
        out.push(("lgs.c".to_string(), self.c.clone()));
        out.push(("lgs.b".to_string(), self.b.clone()));
        out.push(("lgs.w_gamma".to_string(), self.w_gamma.clone()));
        out
    }

    /// Prior covariance Sigma_n = L_masked L_masked^T + jitter I.
    pub fn prior_cov(&self, slot: usize) -> Result<Tensor> {
        let mask = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0])?;
        let l = self.l_factor[slot].mul(&mask)?;
        let eye = Tensor::new(vec![2, 2], vec![JITTER, 0.0, 0.0, JITTER])?;
        l.matmul(&l.transpose()?)?.add(&eye)
    }

    /// Observation `y = W_n^y z'` as `[d_e, 1]` from a `[1, d_e]` frame.
    pub fn observe(&self, slot: usize, z_prime: &Tensor) -> Result<Tensor> {
        self.check_frame(z_prime)?;
        self.w_y[slot].matmul(&z_prime.reshape(vec![self.d_e, 1])?)
    }

    /// Activity probability `sigmoid(row_n(W_gamma) . z')` as `[1]`.
    pub fn activity(&self, slot: usize, z_prime: &Tensor) -> Result<Tensor> {
        self.check_frame(z_prime)?;
        let row = self.w_gamma.slice(0, slot, 1)?; // [1, d_e]
        Ok(row
            .matmul(&z_prime.reshape(vec![self.d_e, 1])?)?
            .reshape(vec![1])?
            .sigmoid())
    }

    fn check_frame(&self, t: &Tensor) -> Result<()> {
        if t.len() != self.d_e {
            return Err(PilotError::invalid(format!(
                "expected a length-{} frame, got shape {:?}",
                self.d_e,
                t.shape()
            )));
        }
        Ok(())
    }

    /// Posterior mean and covariance from an observation `y` (`[d_e, 1]`) and
    /// per-dimension noise variances `sigma` (`d_e` values, all positive).
    pub fn posterior_from_obs(
        &self,
        slot: usize,
        y: &Tensor,
        sigma: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        if y.len() != self.d_e || sigma.len() != self.d_e {
            return Err(PilotError::invalid("observation/sigma dimension mismatch"));
        }
        if sigma.to_vec().iter().any(|&v| v <= 0.0) {
            return Err(PilotError::invalid("observation variances must be positive"));
        }
        let prior_prec = self.prior_cov(slot)?.inverse2x2()?;
        // C^T R^-1 with R = diag(sigma): scale the columns of C^T
        let inv_sigma = Tensor::new(vec![self.d_e], vec![1.0; self.d_e])?
            .div(&sigma.reshape(vec![self.d_e])?)?;
        let ct_rinv = self.c.transpose()?.mul(&inv_sigma)?; // [2, d_e]
        let post_prec = prior_prec.add(&ct_rinv.matmul(&self.c)?)?;
        let cov = post_prec.inverse2x2()?;
        let innov = y.sub(&self.b)?;
        let rhs = prior_prec
            .matmul(&self.mu[slot])?
            .add(&ct_rinv.matmul(&innov)?)?;
        let mean = cov.matmul(&rhs)?;
        Ok((mean, cov))
    }

    /// Full head for one slot and frame: `z_prime` and `sigma` are `[1, d_e]`.
    pub fn forward(&self, slot: usize, z_prime: &Tensor, sigma: &Tensor) -> Result<Posterior> {
        let y = self.observe(slot, z_prime)?;
        let (mean, cov) = self.posterior_from_obs(slot, &y, sigma)?;
        let gamma = self.activity(slot, z_prime)?;
        Ok(Posterior { mean, cov, gamma })
    }

    /// Posteriors for all slots across per-slot `[K, d_e]` encoded sequences
    /// and matching `[K, d_e]` variance sequences. Returned as `out[k][slot]`.
    pub fn sequence(&self, z_prime: &[Tensor], sigma: &[Tensor]) -> Result<Vec<Vec<Posterior>>> {
        if z_prime.len() != self.num_slots || sigma.len() != self.num_slots {
            return Err(PilotError::invalid(format!(
                "expected {} per-slot sequences",
                self.num_slots
            )));
        }
        let k = z_prime[0].shape()[0];
        for t in z_prime.iter().chain(sigma.iter()) {
            if t.shape() != [k, self.d_e] {
                return Err(PilotError::invalid(format!(
                    "expected [{}, {}] sequences, got {:?}",
                    k,
                    self.d_e,
                    t.shape()
                )));
            }
        }
        let mut out = Vec::with_capacity(k);
        for frame in 0..k {
            let mut row = Vec::with_capacity(self.num_slots);
            for n in 0..self.num_slots {
                let z = z_prime[n].slice(0, frame, 1)?;
                let s = sigma[n].slice(0, frame, 1)?;
                row.push(self.forward(n, &z, &s)?);
            }
            out.push(row);
        }
        Ok(out)
    }
}

/// The (aa, ae, ee) entries of a 2x2 covariance, for emission.
pub fn cov_entries(cov: &Tensor) -> Result<(f64, f64, f64)> {
    let d = cov.to_vec();
    if d.len() != 4 {
        return Err(PilotError::invalid("covariance must be 2x2"));
    }
    Ok((d[0], d[1], d[3]))
}

/// Concatenate posterior means of all slots in a frame into `[N, 2]`.
pub fn stack_means(frame: &[Posterior]) -> Result<Tensor> {
    let rows: Vec<Tensor> = frame
        .iter()
        .map(|p| p.mean.reshape(vec![1, 2]))
        .collect::<Result<_>>()?;
    concat(&rows, 0)
}
