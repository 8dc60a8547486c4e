//! Central finite-difference gradient verification.
//!
//! Used by the test suites to validate every analytic adjoint against an
//! independent numeric estimate. Lives in the library so integration tests
//! can share it; it never participates in training.

use crate::autodiff::Tensor;
use crate::error::Result;

/// Worst-case deviation between analytic and numeric gradients.
///
/// `max_rel` covers elements whose gradient magnitude exceeds the `small`
/// threshold; `max_abs_small` covers the remaining (near-zero) elements.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub max_abs_small: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel < rel_tol && self.max_abs_small < abs_tol
    }
}

/// Compare analytic gradients of `build_loss` w.r.t. `leaves` against central
/// finite differences with step `h`.
///
/// `build_loss` must rebuild the full graph from the leaves' current data on
/// every call. Gradient magnitudes below `small` are compared absolutely.
pub fn check<F>(leaves: &[&Tensor], build_loss: F, h: f64, small: f64) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor>,
{
    for l in leaves {
        l.zero_grad();
    }
    let loss = build_loss()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut report = GradReport::default();
    for (li, leaf) in leaves.iter().enumerate() {
        let base = leaf.to_vec();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            leaf.set_data(&probe);
            let up = build_loss()?.item();
            probe[i] = base[i] - h;
            leaf.set_data(&probe);
            let down = build_loss()?.item();
            leaf.set_data(&base);

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[li][i];
            let abs = (a - numeric).abs();
            let denom = numeric.abs().max(a.abs());
            report.checked += 1;
            if denom > small {
                let rel = abs / denom;
                if rel > report.max_rel {
                    report.max_rel = rel;
                }
            } else if abs > report.max_abs_small {
                report.max_abs_small = abs;
            }
        }
    }
    Ok(report)
}
