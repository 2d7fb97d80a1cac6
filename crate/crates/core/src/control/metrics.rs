//! Error statistics and the coefficient of determination.

use crate::pose::angle_diff;

/// `1 - SS_res / SS_tot`. A constant target has no variance to explain:
/// returns 1 for an exact prediction and `-inf` otherwise. NaN for empty input.
pub fn r2(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "r2 needs paired samples");
    if truth.is_empty() {
        return f64::NAN;
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    finish(ss_res, ss_tot)
}

/// [`r2`] for angles: residuals and spread are taken as wrapped differences,
/// with spread measured about the circular mean.
pub fn r2_angular(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "r2 needs paired samples");
    if truth.is_empty() {
        return f64::NAN;
    }
    let (s, c) = truth.iter().fold((0.0, 0.0), |(s, c), t| (s + t.sin(), c + t.cos()));
    let mean = s.atan2(c);
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| angle_diff(*t, *p).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| angle_diff(*t, mean).powi(2)).sum();
    finish(ss_res, ss_tot)
}

fn finish(ss_res: f64, ss_tot: f64) -> f64 {
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// Linear-interpolated percentile, `q` in `[0, 100]`. NaN for empty input.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}
