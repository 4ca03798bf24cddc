//! Patch-level diagnostics: Patch Score, Point-in-Box, masking probes,
//! mean+std object discovery with CorLoc, feature-norm statistics, and PCA.

mod discovery;
mod norms;
mod pca;
mod score;

pub use discovery::{corloc, foreground_mask, iou, mask_to_box};
pub use norms::{norm_stats, NormStats};
pub use pca::{jacobi_eigen, pca_project, PcaResult};
pub use score::{
    argmax, argmax_slice, mask_image_patches, masking_probe, patch_score, pib_benchmark, point_in_box, rank_patches,
    AnnotatedSample, MaskMode, ScoreKind, ScoreMap,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Inclusive rectangle of patch-grid cells: columns `x0..=x1`, rows `y0..=y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PatchBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 > x1 || y0 > y1 {
            return Err(invalid(format!("box [{x0},{y0},{x1},{y1}] has inverted corners")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// The whole `grid_h × grid_w` grid.
    pub fn full(grid_h: usize, grid_w: usize) -> Self {
        Self { x0: 0, y0: 0, x1: grid_w - 1, y1: grid_h - 1 }
    }

    pub fn cell(col: usize, row: usize) -> Self {
        Self { x0: col, y0: row, x1: col, y1: row }
    }

    pub fn validate(&self, grid_h: usize, grid_w: usize) -> Result<()> {
        if self.x0 > self.x1 || self.y0 > self.y1 || self.x1 >= grid_w || self.y1 >= grid_h {
            return Err(invalid(format!("box {:?} outside a {grid_h}x{grid_w} grid", self.to_array())));
        }
        Ok(())
    }

    pub fn contains(&self, col: usize, row: usize) -> bool {
        (self.x0..=self.x1).contains(&col) && (self.y0..=self.y1).contains(&row)
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}
