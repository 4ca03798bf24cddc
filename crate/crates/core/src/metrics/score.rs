use serde::{Deserialize, Serialize};

use super::PatchBox;
use crate::error::{invalid, shape_err, Result};
use crate::exec::Execution;
use crate::lazystrike::FeatureMap;
use crate::tensor::Tensor;

/// What a [`ScoreMap`] measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    PatchScore,
    VoteCount,
    Norm,
    Component,
}

/// One scalar per patch on the patch grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    grid_h: usize,
    grid_w: usize,
    values: Vec<f64>,
    kind: ScoreKind,
}

impl ScoreMap {
    pub fn new(grid_h: usize, grid_w: usize, values: Vec<f64>, kind: ScoreKind) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || values.len() != grid_h * grid_w {
            return Err(shape_err(format!("{} scores for a {grid_h}x{grid_w} grid", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("score map contains NaN or Inf"));
        }
        Ok(Self { grid_h, grid_w, values, kind })
    }

    /// Vote counts of a pooled token as a score map.
    pub fn from_votes(grid_h: usize, grid_w: usize, votes: &[u32]) -> Result<Self> {
        Self::new(grid_h, grid_w, votes.iter().map(|&v| v as f64).collect(), ScoreKind::VoteCount)
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.grid_h, self.grid_w], self.values.clone())
    }
}

/// Cosine similarity between every patch feature and the global token.
/// All-zero patch rows score 0.
pub fn patch_score(x_patch: &FeatureMap, cls: &[f64]) -> Result<ScoreMap> {
    if cls.len() != x_patch.dim() {
        return Err(shape_err(format!("global token has {} channels, patches have {}", cls.len(), x_patch.dim())));
    }
    let cls_norm = cls.iter().map(|v| v * v).sum::<f64>().sqrt();
    if cls_norm == 0.0 {
        return Err(invalid("global token has zero norm"));
    }
    let values = (0..x_patch.n_patches())
        .map(|i| {
            let row = x_patch.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                0.0
            } else {
                let dot: f64 = row.iter().zip(cls).map(|(a, b)| a * b).sum();
                (dot / (norm * cls_norm)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    ScoreMap::new(x_patch.grid_h(), x_patch.grid_w(), values, ScoreKind::PatchScore)
}

/// Row-major index of the largest score; ties go to the lowest index.
pub fn argmax(score: &ScoreMap) -> usize {
    argmax_slice(&score.values)
}

/// Index of the largest value; ties go to the lowest index. `0` when empty.
pub fn argmax_slice(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Whether the highest-scoring patch lies inside `fg_box`.
pub fn point_in_box(score: &ScoreMap, fg_box: &PatchBox) -> Result<bool> {
    fg_box.validate(score.grid_h, score.grid_w)?;
    let i = argmax(score);
    Ok(fg_box.contains(i % score.grid_w, i / score.grid_w))
}

/// A unit of evaluation: some input (features or an image) plus its single
/// foreground box.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample<T> {
    pub id: String,
    pub input: T,
    pub fg_box: PatchBox,
    pub label: Option<usize>,
}

/// Fraction of samples whose maximum-score patch lies in the box.
pub fn pib_benchmark<T, F>(samples: &[AnnotatedSample<T>], exec: Execution, scorer: F) -> Result<f64>
where
    T: Sync,
    F: Fn(&T) -> Result<ScoreMap> + Send + Sync,
{
    if samples.is_empty() {
        return Err(invalid("Point-in-Box needs at least one sample"));
    }
    let hits = exec
        .map(samples, |s| scorer(&s.input).and_then(|m| point_in_box(&m, &s.fg_box)))
        .into_iter()
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

/// Which end of the score ranking to mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Top,
    Bottom,
}

impl std::str::FromStr for MaskMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Self::Top),
            "bottom" => Ok(Self::Bottom),
            other => Err(invalid(format!("mask mode must be top or bottom, got {other:?}"))),
        }
    }
}

/// Patch indices ordered from first-to-mask to last: by score (descending for
/// `Top`, ascending for `Bottom`), then by index.
pub fn rank_patches(score: &ScoreMap, mode: MaskMode) -> Vec<usize> {
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (score.values[a], score.values[b]);
        let by_score = match mode {
            MaskMode::Top => vb.total_cmp(&va),
            MaskMode::Bottom => va.total_cmp(&vb),
        };
        by_score.then(a.cmp(&b))
    });
    order
}

/// Zero the pixels of the `⌊fraction·N⌋` patches first in the ranking.
///
/// `image` is `[H, W, C]` with `H = grid_h·P` and `W = grid_w·P`.
pub fn mask_image_patches(
    image: &Tensor,
    patch_size: usize,
    score: &ScoreMap,
    mode: MaskMode,
    fraction: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!("mask fraction must be in [0,1], got {fraction}")));
    }
    let [h, w, c] = image.shape() else {
        return Err(shape_err(format!("image must be [H, W, C], got {:?}", image.shape())));
    };
    let (h, w, c) = (*h, *w, *c);
    if h != score.grid_h * patch_size || w != score.grid_w * patch_size {
        return Err(shape_err("image size does not match score grid and patch size"));
    }
    let count = (fraction * score.len() as f64).floor() as usize;
    let mut out = image.clone();
    let data = out.data_mut();
    for &p in rank_patches(score, mode).iter().take(count) {
        let (gy, gx) = (p / score.grid_w, p % score.grid_w);
        for y in gy * patch_size..(gy + 1) * patch_size {
            let start = (y * w + gx * patch_size) * c;
            data[start..start + patch_size * c].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Re-run `forward` on the image with the top or bottom fraction of patches zeroed.
pub fn masking_probe<F>(
    forward: F,
    image: &Tensor,
    patch_size: usize,
    score: &ScoreMap,
    mode: MaskMode,
    fraction: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<Vec<f64>>,
{
    forward(&mask_image_patches(image, patch_size, score, mode, fraction)?)
}
