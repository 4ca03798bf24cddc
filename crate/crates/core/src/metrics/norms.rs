use serde::Serialize;

use crate::lazystrike::FeatureMap;

/// Per-patch L2 norms and summary statistics, for spotting high-norm tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormStats {
    pub norms: Vec<f64>,
    pub max: f64,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    /// `max / mean`, or 0 for an all-zero map.
    pub max_over_mean: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between closest ranks.
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn norm_stats(x: &FeatureMap) -> NormStats {
    let norms: Vec<f64> = (0..x.n_patches())
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let max = *sorted.last().expect("feature maps are non-empty");
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    NormStats {
        max,
        mean,
        p50: percentile(&sorted, 0.5),
        p90: percentile(&sorted, 0.9),
        p99: percentile(&sorted, 0.99),
        max_over_mean: if mean > 0.0 { max / mean } else { 0.0 },
        norms,
    }
}
