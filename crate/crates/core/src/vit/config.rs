use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lazystrike::LazyStrikeParams;

/// How the encoder output is aggregated into the global token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadType {
    /// Mean over patch tokens.
    Gap,
    /// A learnable query prepended to the patch tokens; its output is the global token.
    Cls,
    /// Frequency-guided channel-wise Top-K pooling over patch tokens.
    LazyStrike,
}

impl FromStr for HeadType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(Self::Gap),
            "cls" | "cls_token" => Ok(Self::Cls),
            "lazystrike" => Ok(Self::LazyStrike),
            other => Err(invalid(format!("unknown head {other:?} (gap, cls, lazystrike)"))),
        }
    }
}

impl fmt::Display for HeadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gap => "gap",
            Self::Cls => "cls",
            Self::LazyStrike => "lazystrike",
        })
    }
}

/// Parse a per-layer window schedule.
///
/// Entries are comma-separated; each is `global` (or `g`) or a window side in
/// patches. A single entry applies to every layer.
pub fn parse_window_schedule(spec: &str, depth: usize) -> Result<Vec<Option<usize>>> {
    let entries = spec
        .split(',')
        .map(|e| match e.trim() {
            "global" | "g" => Ok(None),
            n => n
                .parse::<usize>()
                .map(Some)
                .map_err(|_| invalid(format!("window entry {n:?} is neither 'global' nor a size"))),
        })
        .collect::<Result<Vec<_>>>()?;
    match entries.len() {
        1 => Ok(vec![entries[0]; depth]),
        n if n == depth => Ok(entries),
        n => Err(invalid(format!("window schedule has {n} entries for {depth} layers"))),
    }
}

/// Architecture and aggregation settings of the toy ViT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub head: HeadType,
    /// One entry per block: `None` for global attention, `Some(w)` for `w×w` windows.
    pub window_schedule: Vec<Option<usize>>,
    pub lazystrike: LazyStrikeParams,
    pub seed: u64,
}

impl Default for ToyViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
            head: HeadType::Gap,
            window_schedule: vec![None; 2],
            lazystrike: LazyStrikeParams::default(),
            seed: 0,
        }
    }
}

impl ToyViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(invalid(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(invalid(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.window_schedule.len() != self.depth {
            return Err(invalid(format!(
                "window schedule has {} entries for depth {}",
                self.window_schedule.len(),
                self.depth
            )));
        }
        let side = self.grid_side();
        for w in self.window_schedule.iter().flatten() {
            if *w == 0 || !side.is_multiple_of(*w) {
                return Err(invalid(format!("window {w} does not tile a {side}x{side} patch grid")));
            }
        }
        if self.head == HeadType::Cls && self.window_schedule.iter().any(Option::is_some) {
            return Err(invalid("windowed attention cannot carry a CLS token; use the gap or lazystrike head"));
        }
        if let Some(k) = self.lazystrike.k {
            if k == 0 || k > self.n_patches() {
                return Err(invalid(format!("K = {k} outside 1..={}", self.n_patches())));
            }
        }
        if !(self.lazystrike.epsilon > 0.0) {
            return Err(invalid("epsilon must be positive"));
        }
        if let Some(s) = self.lazystrike.sigma {
            if !(s > 0.0) {
                return Err(invalid("sigma must be positive"));
            }
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Flattened pixel count of one patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Set the same window schedule entry on every layer.
    pub fn with_all_windows(mut self, window: Option<usize>) -> Self {
        self.window_schedule = vec![window; self.depth];
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ToyViTConfig::default();
        c.validate().unwrap();
        assert_eq!((c.grid_side(), c.n_patches(), c.patch_dim()), (8, 64, 48));
    }

    #[test]
    fn invalid_geometry() {
        let bad = ToyViTConfig { patch_size: 5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ToyViTConfig { heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ToyViTConfig::default().with_all_windows(Some(3));
        assert!(bad.validate().is_err());
        let bad = ToyViTConfig { head: HeadType::Cls, ..Default::default() }.with_all_windows(Some(4));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn window_schedule_parsing() {
        assert_eq!(parse_window_schedule("global", 3).unwrap(), vec![None; 3]);
        assert_eq!(parse_window_schedule("4", 2).unwrap(), vec![Some(4); 2]);
        assert_eq!(parse_window_schedule("g,2", 2).unwrap(), vec![None, Some(2)]);
        assert!(parse_window_schedule("g,2,2", 2).is_err());
        assert!(parse_window_schedule("wide", 2).is_err());
    }

    #[test]
    fn head_names_roundtrip() {
        for h in [HeadType::Gap, HeadType::Cls, HeadType::LazyStrike] {
            assert_eq!(h.to_string().parse::<HeadType>().unwrap(), h);
        }
        assert!("max".parse::<HeadType>().is_err());
    }
}
