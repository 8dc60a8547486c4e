//! Evaluation metrics and the one-sided Mann-Whitney-U test.
//!
//! Frame recall counts frames where the number of active sources is estimated
//! correctly; DoA errors are collected after Hungarian matching between
//! thresholded predictions and true active sources. Count-mismatched frames
//! still contribute their min(pred, true) matched pairs so the error
//! distribution is not biased by dropping hard frames.

use crate::error::{PilotError, Result};
use crate::objective::doa_error;

pub const ACTIVITY_THRESHOLD: f64 = 0.5;
const PAD_COST: f64 = 1e9;

/// One source slot of a frame prediction.
#[derive(Debug, Clone, Copy)]
pub struct SlotPrediction {
    pub gamma: f64,
    pub azimuth: f64,
    pub elevation: f64,
    /// Posterior covariance entries (aa, ae, ee), carried for reporting.
    pub cov: (f64, f64, f64),
}

#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub slots: Vec<SlotPrediction>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub mean_doa_error_rad: f64,
    pub mean_doa_error_deg: f64,
    pub doa_errors_rad: Vec<f64>,
    pub frame_recall: f64,
    pub total_frames: usize,
    pub correct_count_frames: usize,
    /// Histogram of (predicted count, true count) pairs.
    pub count_pairs: Vec<((usize, usize), usize)>,
}

/// Kuhn-Munkres minimum-cost assignment on a square cost matrix, O(M^3).
/// Returns `assign[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    for row in cost {
        if row.len() != n {
            return Err(PilotError::invalid("hungarian needs a square matrix"));
        }
        if row.iter().any(|v| v.is_nan()) {
            return Err(PilotError::invalid("hungarian cost contains NaN"));
        }
    }
    // JV-style shortest augmenting path with potentials, 1-indexed helpers
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut p = vec![0usize; n + 1]; // p[col] = row assigned to col
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

/// Per-frame recall hit and Hungarian-matched DoA errors.
pub fn frame_metrics(
    pred: &FramePrediction,
    truth: &[(f64, f64)],
    threshold: f64,
    conventional: bool,
) -> Result<(bool, Vec<f64>)> {
    let active: Vec<(f64, f64)> = pred
        .slots
        .iter()
        .filter(|s| s.gamma > threshold)
        .map(|s| (s.azimuth, s.elevation))
        .collect();
    let recall_hit = active.len() == truth.len();
    let m = active.len().max(truth.len());
    if active.is_empty() || truth.is_empty() {
        return Ok((recall_hit, Vec::new()));
    }
    // square-pad with a sentinel so min(pred, true) real pairs get matched
    let mut cost = vec![vec![PAD_COST; m]; m];
    for (i, &p) in active.iter().enumerate() {
        for (j, &t) in truth.iter().enumerate() {
            cost[i][j] = doa_error(p, t, conventional);
        }
    }
    let assign = hungarian(&cost)?;
    let mut errors = Vec::new();
    for (i, &j) in assign.iter().enumerate() {
        if i < active.len() && j < truth.len() {
            errors.push(doa_error(active[i], truth[j], conventional));
        }
    }
    Ok((recall_hit, errors))
}

/// Aggregate frame-level metrics into a report.
pub fn evaluate_frames(
    preds: &[FramePrediction],
    truths: &[Vec<(f64, f64)>],
    threshold: f64,
    conventional: bool,
) -> Result<EvalReport> {
    if preds.len() != truths.len() {
        return Err(PilotError::invalid("prediction/truth frame count mismatch"));
    }
    let mut report = EvalReport {
        total_frames: preds.len(),
        ..Default::default()
    };
    let mut pair_counts: std::collections::BTreeMap<(usize, usize), usize> =
        std::collections::BTreeMap::new();
    for (p, t) in preds.iter().zip(truths.iter()) {
        let (hit, errs) = frame_metrics(p, t, threshold, conventional)?;
        if hit {
            report.correct_count_frames += 1;
        }
        let n_pred = p.slots.iter().filter(|s| s.gamma > threshold).count();
        *pair_counts.entry((n_pred, t.len())).or_insert(0) += 1;
        report.doa_errors_rad.extend(errs);
    }
    report.frame_recall = if report.total_frames == 0 {
        0.0
    } else {
        report.correct_count_frames as f64 / report.total_frames as f64
    };
    report.mean_doa_error_rad = if report.doa_errors_rad.is_empty() {
        0.0
    } else {
        report.doa_errors_rad.iter().sum::<f64>() / report.doa_errors_rad.len() as f64
    };
    report.mean_doa_error_deg = report.mean_doa_error_rad.to_degrees();
    report.count_pairs = pair_counts.into_iter().collect();
    Ok(report)
}

/// One-sided Mann-Whitney-U test: alternative hypothesis is that `a` is
/// stochastically smaller than `b`. Returns (U_a, p).
pub fn mann_whitney_u_one_sided(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(PilotError::invalid("mann-whitney needs non-empty samples"));
    }
    if a.iter().chain(b.iter()).any(|v| v.is_nan()) {
        return Err(PilotError::invalid("mann-whitney input contains NaN"));
    }
    let first = a[0];
    if a.iter().chain(b.iter()).all(|&v| v == first) {
        return Err(PilotError::DegenerateVariance(
            "all pooled values identical".into(),
        ));
    }
    let na = a.len();
    let nb = b.len();
    // midranks over the pooled sample
    let mut pooled: Vec<(f64, usize)> = a
        .iter()
        .map(|&v| (v, 0usize))
        .chain(b.iter().map(|&v| (v, 1usize)))
        .collect();
    pooled.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let n = pooled.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = midrank;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let rank_sum_a: f64 = pooled
        .iter()
        .zip(ranks.iter())
        .filter(|((_, g), _)| *g == 0)
        .map(|(_, &r)| r)
        .sum();
    let u_a = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let mean = (na * nb) as f64 / 2.0;
    let nf = n as f64;
    let var = (na * nb) as f64 / 12.0 * (nf + 1.0 - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return Err(PilotError::DegenerateVariance("tie-corrected variance is zero".into()));
    }
    // continuity correction toward the null; small U supports the alternative
    let z = (u_a - mean + 0.5) / var.sqrt();
    let p = standard_normal_cdf(z);
    Ok((u_a, p))
}

fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Complementary error function, Numerical Recipes rational approximation
/// (relative error below 1.2e-7 everywhere).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Spearman rank correlation with midrank ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(PilotError::invalid("spearman needs two equal-length samples"));
    }
    let ra = midranks(a);
    let rb = midranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(PilotError::DegenerateVariance("constant ranks".into()));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap());
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = midrank;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn hungarian_dominant_diagonal() {
        let cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert_eq!(hungarian(&cost).unwrap(), vec![0, 1]);
    }

    #[test]
    fn hungarian_dominant_antidiagonal() {
        let cost = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        assert_eq!(hungarian(&cost).unwrap(), vec![1, 0]);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..30 {
            let m = 5;
            let cost: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..m).map(|_| rng.gen_range(0.0..10.0)).collect())
                .collect();
            let assign = hungarian(&cost).unwrap();
            let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            // brute force over all 120 permutations
            let mut best = f64::INFINITY;
            let mut perm: Vec<usize> = (0..m).collect();
            loop {
                let t: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                best = best.min(t);
                if !next_permutation(&mut perm) {
                    break;
                }
            }
            assert!((total - best).abs() < 1e-10, "trial {}", trial);
        }
    }

    fn next_permutation(p: &mut [usize]) -> bool {
        let n = p.len();
        if n < 2 {
            return false;
        }
        let mut i = n - 1;
        while i > 0 && p[i - 1] >= p[i] {
            i -= 1;
        }
        if i == 0 {
            return false;
        }
        let mut j = n - 1;
        while p[j] <= p[i - 1] {
            j -= 1;
        }
        p.swap(i - 1, j);
        p[i..].reverse();
        true
    }

    #[test]
    fn hungarian_rejects_nan() {
        let cost = vec![vec![f64::NAN, 1.0], vec![1.0, 2.0]];
        assert!(hungarian(&cost).is_err());
    }

    fn slot(g: f64, az: f64, el: f64) -> SlotPrediction {
        SlotPrediction {
            gamma: g,
            azimuth: az,
            elevation: el,
            cov: (1.0, 0.0, 1.0),
        }
    }

    #[test]
    fn exact_match_is_recall_hit_with_zero_error() {
        let pred = FramePrediction {
            slots: vec![slot(0.9, 0.5, 0.1), slot(0.1, 0.0, 0.0)],
        };
        let (hit, errs) = frame_metrics(&pred, &[(0.5, 0.1)], 0.5, false).unwrap();
        assert!(hit);
        assert_eq!(errs.len(), 1);
        assert!(errs[0] < 1e-12);
    }

    #[test]
    fn count_mismatch_still_contributes_pairs() {
        let pred = FramePrediction {
            slots: vec![slot(0.9, 0.5, 0.1)],
        };
        let truth = [(0.5, 0.1), (-1.0, 0.2)];
        let (hit, errs) = frame_metrics(&pred, &truth, 0.5, false).unwrap();
        assert!(!hit);
        assert_eq!(errs.len(), 1);
        assert!(errs[0] < 1e-12, "should match the nearest truth");
    }

    #[test]
    fn no_predictions_no_errors() {
        let pred = FramePrediction {
            slots: vec![slot(0.2, 0.5, 0.1)],
        };
        let (hit, errs) = frame_metrics(&pred, &[(0.5, 0.1)], 0.5, false).unwrap();
        assert!(!hit);
        assert!(errs.is_empty());
    }

    #[test]
    fn crossed_pair_matching_is_optimal() {
        // slot order is crossed relative to the nearest truths
        let pred = FramePrediction {
            slots: vec![slot(0.9, 1.0, 0.0), slot(0.9, -1.0, 0.0)],
        };
        let truth = [(-1.0, 0.05), (1.0, -0.05)];
        let (hit, errs) = frame_metrics(&pred, &truth, 0.5, false).unwrap();
        assert!(hit);
        let total: f64 = errs.iter().sum();
        // exhaustive 2-permutation oracle
        let identity = doa_error((1.0, 0.0), truth[0], false) + doa_error((-1.0, 0.0), truth[1], false);
        let swapped = doa_error((1.0, 0.0), truth[1], false) + doa_error((-1.0, 0.0), truth[0], false);
        assert!((total - identity.min(swapped)).abs() < 1e-12);
        assert!(swapped < identity, "test should exercise the swap");
    }

    #[test]
    fn recall_one_on_replayed_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truths: Vec<Vec<(f64, f64)>> = (0..40)
            .map(|_| {
                (0..rng.gen_range(0..3usize))
                    .map(|_| (rng.gen_range(-PI..PI), rng.gen_range(-1.0..1.0)))
                    .collect()
            })
            .collect();
        let preds: Vec<FramePrediction> = truths
            .iter()
            .map(|t| FramePrediction {
                slots: t.iter().map(|&(a, e)| slot(1.0, a, e)).collect(),
            })
            .collect();
        let report = evaluate_frames(&preds, &truths, 0.5, false).unwrap();
        assert_eq!(report.frame_recall, 1.0);
        // acos(1 - eps) for float eps is ~1e-8, so exact matches are not 0
        assert!(report.mean_doa_error_rad < 1e-6);
    }

    #[test]
    fn mwu_complete_separation() {
        let (u, p) = mann_whitney_u_one_sided(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(u, 0.0);
        assert!(p < 0.05);
    }

    #[test]
    fn mwu_identical_samples_give_half() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let (_, p) = mann_whitney_u_one_sided(&a, &a).unwrap();
        assert!((p - 0.5).abs() < 0.1, "p = {}", p);
    }

    #[test]
    fn mwu_u_statistics_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..3.0)).collect();
            let b: Vec<f64> = (0..9).map(|_| rng.gen_range(1.0..4.0)).collect();
            let (ua, _) = mann_whitney_u_one_sided(&a, &b).unwrap();
            let (ub, _) = mann_whitney_u_one_sided(&b, &a).unwrap();
            assert!((ua + ub - (a.len() * b.len()) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn mwu_degenerate_variance_is_error() {
        let r = mann_whitney_u_one_sided(&[2.0, 2.0], &[2.0, 2.0, 2.0]);
        assert!(matches!(
            r,
            Err(crate::error::PilotError::DegenerateVariance(_))
        ));
    }

    #[test]
    fn mwu_close_to_exact_enumeration() {
        // a = [1,3], b = [2,4]: enumerate all C(4,2) = 6 ways of assigning the
        // ranks {1,2,3,4} to group a; exact one-sided p = P(U <= observed)
        let a = [1.0, 3.0];
        let b = [2.0, 4.0];
        let (u_obs, p_norm) = mann_whitney_u_one_sided(&a, &b).unwrap();
        assert_eq!(u_obs, 1.0);
        let ranks = [1.0, 2.0, 3.0, 4.0];
        let mut count_le = 0;
        let mut total = 0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let rank_sum = ranks[i] + ranks[j];
                let u = rank_sum - 3.0; // na(na+1)/2 = 3
                total += 1;
                if u <= u_obs {
                    count_le += 1;
                }
            }
        }
        let p_exact = count_le as f64 / total as f64;
        assert!((p_norm - p_exact).abs() < 0.05, "{} vs {}", p_norm, p_exact);
    }

    #[test]
    fn mwu_handles_ties_with_midranks() {
        let a = [1.0, 2.0, 2.0, 3.0];
        let b = [2.0, 3.0, 3.0, 4.0];
        let (u, p) = mann_whitney_u_one_sided(&a, &b).unwrap();
        // midranks: 1 -> 1; 2,2,2 -> 3; 3,3,3 -> 6; 4 -> 8
        // rank sum a = 1 + 3 + 3 + 6 = 13, U = 13 - 10 = 3
        assert!((u - 3.0).abs() < 1e-12);
        assert!(p < 0.5);
    }

    #[test]
    fn spearman_perfect_monotone() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 30.0, 40.0];
        let down = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &down).unwrap() + 1.0).abs() < 1e-12);
    }
}
