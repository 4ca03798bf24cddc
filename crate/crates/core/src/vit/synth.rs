use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::{AnnotatedSample, PatchBox};
use crate::tensor::Tensor;

/// Geometry and noise of a synthetic foreground/background dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Patches per side.
    pub grid: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub classes: usize,
    /// Inclusive range of the foreground box side, in patches.
    pub fg_min: usize,
    pub fg_max: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { grid: 8, patch_size: 4, channels: 3, classes: 4, fg_min: 2, fg_max: 4, noise_level: 1.0, seed: 0 }
    }
}

impl SynthConfig {
    pub fn image_size(&self) -> usize {
        self.grid * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.patch_size == 0 || self.channels == 0 || self.classes == 0 {
            return Err(invalid("grid, patch size, channels and classes must be positive"));
        }
        if self.fg_min == 0 || self.fg_min > self.fg_max || self.fg_max > self.grid {
            return Err(invalid(format!(
                "foreground side range {}..={} does not fit a {}-patch grid",
                self.fg_min, self.fg_max, self.grid
            )));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(invalid("noise level must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One labelled image whose class evidence lives only inside `fg_box`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    /// `[H, W, C]`.
    pub image: Tensor,
    pub label: usize,
    pub fg_box: PatchBox,
}

impl SyntheticSample {
    pub fn annotated(&self) -> AnnotatedSample<Tensor> {
        AnnotatedSample {
            id: self.id.clone(),
            input: self.image.clone(),
            fg_box: self.fg_box,
            label: Some(self.label),
        }
    }
}

/// `P × P × C` pattern per class, unit-variance entries.
pub fn class_templates(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e3a_91c5_5d2b_0f47);
    let len = cfg.patch_size * cfg.patch_size * cfg.channels;
    (0..cfg.classes).map(|_| (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

/// Generate `n` samples.
///
/// Labels cycle through the classes. Each foreground box is tiled with its
/// class template; every pixel then receives i.i.d. `N(0, noise_level²)` noise,
/// so the background carries no class information.
pub fn gen_synthetic(n: usize, cfg: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let templates = class_templates(cfg);
    let (g, p, c) = (cfg.grid, cfg.patch_size, cfg.channels);
    let side = g * p;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let label = idx % cfg.classes;
        let bw = rng.random_range(cfg.fg_min..=cfg.fg_max);
        let bh = rng.random_range(cfg.fg_min..=cfg.fg_max);
        let x0 = rng.random_range(0..=g - bw);
        let y0 = rng.random_range(0..=g - bh);
        let fg_box = PatchBox::new(x0, y0, x0 + bw - 1, y0 + bh - 1)?;
        let mut data = vec![0.0; side * side * c];
        for (gy, gx) in (y0..y0 + bh).flat_map(|y| (x0..x0 + bw).map(move |x| (y, x))) {
            for dy in 0..p {
                let start = ((gy * p + dy) * side + gx * p) * c;
                let src = &templates[label][dy * p * c..(dy + 1) * p * c];
                data[start..start + p * c].copy_from_slice(src);
            }
        }
        if cfg.noise_level > 0.0 {
            for v in &mut data {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.noise_level * z;
            }
        }
        out.push(SyntheticSample {
            id: format!("s{idx:05}"),
            image: Tensor::new(vec![side, side, c], data)?,
            label,
            fg_box,
        });
    }
    Ok(out)
}
