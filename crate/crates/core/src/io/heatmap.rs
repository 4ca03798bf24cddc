use std::path::Path;

use super::write_atomic;
use crate::error::Result;
use crate::metrics::ScoreMap;

/// Pixels per patch side in rendered heatmaps.
pub const HEATMAP_SCALE: usize = 16;

/// Blue at `t = 0` to red at `t = 1`, linear in each channel.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Binary PPM of a score map: one `16×16` block per patch, min-max normalised;
/// a constant map is uniform mid-gray.
pub fn encode_ppm(score: &ScoreMap) -> Vec<u8> {
    let (gh, gw) = (score.grid_h(), score.grid_w());
    let (w, h) = (gw * HEATMAP_SCALE, gh * HEATMAP_SCALE);
    let v = score.values();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let colors: Vec<[u8; 3]> = v
        .iter()
        .map(|&x| if hi > lo { colormap((x - lo) / (hi - lo)) } else { [128, 128, 128] })
        .collect();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        let row = y / HEATMAP_SCALE;
        for x in 0..w {
            out.extend_from_slice(&colors[row * gw + x / HEATMAP_SCALE]);
        }
    }
    out
}

pub fn render_heatmap(score: &ScoreMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(score))
}
