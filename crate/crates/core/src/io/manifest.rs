use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::read_tensor_map;
use super::write_atomic;
use crate::error::{shape_err, Error, Result};
use crate::lazystrike::FeatureMap;
use crate::metrics::{AnnotatedSample, PatchBox};
use crate::tensor::Tensor;

/// One annotated sample.
///
/// `features` names a container file relative to the manifest, optionally
/// followed by `#tensor`. Without a tensor name the file must hold a tensor
/// called `id` or exactly one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub features: String,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `[x0, y0, x1, y1]` in patch cells, inclusive.
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl ManifestEntry {
    pub fn fg_box(&self) -> Result<PatchBox> {
        let [x0, y0, x1, y1] = self.bbox;
        PatchBox::new(x0, y0, x1, y1)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(format!("grid {}x{} is empty", self.grid_h, self.grid_w));
        }
        let b = self.fg_box().map_err(|e| e.to_string())?;
        b.validate(self.grid_h, self.grid_w).map_err(|e| e.to_string())
    }
}

/// Parse JSON-lines manifest text; blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut ids = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| Error::Manifest { line: line_no, msg: e.to_string() })?;
        entry.validate().map_err(|msg| Error::Manifest { line: line_no, msg })?;
        if !ids.insert(entry.id.clone()) {
            return Err(Error::Manifest { line: line_no, msg: format!("duplicate id {:?}", entry.id) });
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn encode_manifest(entries: &[ManifestEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    // Reject what a reader would reject.
    let text = encode_manifest(entries)?;
    parse_manifest(&text)?;
    write_atomic(path.as_ref(), text.as_bytes())
}

/// A parsed manifest with lazy, cached access to the tensors it references.
#[derive(Debug)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    base: PathBuf,
    cache: HashMap<PathBuf, BTreeMap<String, Tensor>>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let entries = parse_manifest(&std::fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries, base, cache: HashMap::new() })
    }

    /// Every container file the manifest references, in first-use order.
    pub fn referenced_files(&self) -> Vec<PathBuf> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .map(|e| self.base.join(split_ref(&e.features).0))
            .filter(|p| seen.insert(p.clone()))
            .collect()
    }

    /// The raw tensor referenced by entry `i`.
    pub fn tensor(&mut self, i: usize) -> Result<Tensor> {
        let entry = &self.entries[i];
        let (file, name) = split_ref(&entry.features);
        let path = self.base.join(file);
        if !self.cache.contains_key(&path) {
            let map = read_tensor_map(&path)?;
            self.cache.insert(path.clone(), map);
        }
        let map = &self.cache[&path];
        let found = match name {
            Some(n) => map.get(n),
            None => map.get(&entry.id).or_else(|| (map.len() == 1).then(|| map.values().next()).flatten()),
        };
        found.cloned().ok_or_else(|| Error::MissingTensor(entry.features.clone()))
    }

    /// Entry `i` as a feature map on its declared grid.
    pub fn feature_map(&mut self, i: usize) -> Result<FeatureMap> {
        let t = self.tensor(i)?;
        let e = &self.entries[i];
        feature_map_from_tensor(&t, Some((e.grid_h, e.grid_w)))
    }

    /// Every entry's feature map with its box and label.
    pub fn annotated_features(&mut self) -> Result<Vec<AnnotatedSample<FeatureMap>>> {
        (0..self.entries.len())
            .map(|i| {
                let input = self.feature_map(i)?;
                let e = &self.entries[i];
                Ok(AnnotatedSample { id: e.id.clone(), input, fg_box: e.fg_box()?, label: e.label })
            })
            .collect()
    }
}

/// `"file#name"` into `("file", Some("name"))`.
pub fn split_ref(reference: &str) -> (&str, Option<&str>) {
    match reference.rsplit_once('#') {
        Some((file, name)) if !name.is_empty() => (file, Some(name)),
        _ => (reference, None),
    }
}

/// Interpret `[gh, gw, D]` or `[N, D]` as a feature map.
///
/// A 2-D tensor takes its grid from `grid`, or must have a square patch count.
pub fn feature_map_from_tensor(t: &Tensor, grid: Option<(usize, usize)>) -> Result<FeatureMap> {
    match (t.shape(), grid) {
        (&[gh, gw, d], g) => {
            if let Some(g) = g {
                if g != (gh, gw) {
                    return Err(shape_err(format!("tensor grid {gh}x{gw} differs from declared {}x{}", g.0, g.1)));
                }
            }
            FeatureMap::new(gh, gw, d, t.data().to_vec())
        }
        (&[n, _], Some((gh, gw))) => {
            if n != gh * gw {
                return Err(shape_err(format!("{n} patch rows cannot fill a {gh}x{gw} grid")));
            }
            FeatureMap::from_tensor(t, gh, gw)
        }
        (&[n, _], None) => {
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n {
                return Err(shape_err(format!("{n} patch rows are not a square grid; give the grid explicitly")));
            }
            FeatureMap::from_tensor(t, side, side)
        }
        (s, _) => Err(shape_err(format!("features must be [N, D] or [H, W, D], got {s:?}"))),
    }
}
