//! Frequency-guided channel-wise Top-K pooling.
//!
//! Each patch feature is low-pass filtered along its channel axis. A channel of a
//! patch is *stable* when filtering barely changes it; per channel, the `K` most
//! stable patches are averaged into the global token, and every patch collects
//! one vote per channel that selected it.

use std::cmp::Ordering;

use crate::error::{invalid, shape_err, Result};
use crate::exec::Execution;
use crate::spectral::{default_sigma, low_pass_filter_with, GaussianWeights};
use crate::tensor::Tensor;

/// Default denominator guard for the stability ratio.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// `N` patch features of width `D`, laid out row-major on a `grid_h × grid_w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(shape_err(format!("feature map {grid_h}x{grid_w}x{dim} has an empty axis")));
        }
        if values.len() != grid_h * grid_w * dim {
            return Err(shape_err(format!(
                "{grid_h}x{grid_w} grid of width {dim} needs {} values, got {}",
                grid_h * grid_w * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature map contains NaN or Inf"));
        }
        Ok(Self { grid_h, grid_w, dim, values })
    }

    /// Interpret an `N×D` tensor as a feature map on the given grid.
    pub fn from_tensor(t: &Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        let (n, d) = t.dims2()?;
        if n != grid_h * grid_w {
            return Err(shape_err(format!("{n} patches do not fill a {grid_h}x{grid_w} grid")));
        }
        Self::new(grid_h, grid_w, d, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.n_patches(), self.dim], self.values.clone())
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    /// Channel means over all patches (global average pooling).
    pub fn mean_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for row in self.values.chunks(self.dim) {
            out.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        let n = self.n_patches() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n_patches()];
        if perm.len() != seen.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("not a permutation of the patch indices"));
        }
        let values = perm.iter().flat_map(|&p| self.row(p).iter().copied()).collect();
        Self::new(self.grid_h, self.grid_w, self.dim, values)
    }
}

/// Per-entry stability ratios, `N×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityMatrix {
    n: usize,
    dim: usize,
    values: Vec<f64>,
}

impl StabilityMatrix {
    pub fn n_patches(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    /// Build directly from values, e.g. to test selection on a known matrix.
    pub fn from_values(n: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || dim == 0 || values.len() != n * dim {
            return Err(shape_err(format!("stability matrix {n}x{dim} with {} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("stability matrix contains NaN or Inf"));
        }
        Ok(Self { n, dim, values })
    }
}

/// Global token produced by Top-K pooling, with its selections and votes.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledToken {
    pub cls: Vec<f64>,
    /// `selected[j]`: the `K` patch indices chosen by channel `j`, most stable first.
    pub selected: Vec<Vec<usize>>,
    pub votes: Vec<u32>,
}

impl PooledToken {
    pub fn k(&self) -> usize {
        self.selected.first().map_or(0, Vec::len)
    }
}

/// Pooling hyper-parameters. `None` fields take size-dependent defaults.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LazyStrikeParams {
    /// Patches kept per channel; default `max(1, N/2)`.
    pub k: Option<usize>,
    /// Gaussian bandwidth in frequency bins; default `D/8`. `f64::INFINITY` disables filtering.
    #[serde(with = "sigma_serde")]
    pub sigma: Option<f64>,
    pub epsilon: f64,
}

/// JSON has no infinity: an infinite sigma is written as the string `"inf"`.
mod sigma_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_none(),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) if matches!(t.as_str(), "inf" | "infinity" | "flat") => Ok(Some(f64::INFINITY)),
            Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("sigma must be a number or \"inf\", got {t:?}"))),
        }
    }
}

impl Default for LazyStrikeParams {
    fn default() -> Self {
        Self { k: None, sigma: None, epsilon: DEFAULT_EPSILON }
    }
}

impl LazyStrikeParams {
    pub fn new(k: usize, sigma: f64, epsilon: f64) -> Self {
        Self { k: Some(k), sigma: Some(sigma), epsilon }
    }

    pub fn resolve_k(&self, n: usize) -> usize {
        self.k.unwrap_or((n / 2).max(1))
    }

    pub fn resolve_sigma(&self, dim: usize) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(dim))
    }
}

/// `S[i,j] = x̂[i,j] / (|x̂[i,j] − x[i,j]| + ε)`, with the signed filtered value on top.
pub fn stability_score(x_patch: &FeatureMap, x_hat: &FeatureMap, epsilon: f64) -> Result<StabilityMatrix> {
    if x_patch.n_patches() != x_hat.n_patches() || x_patch.dim != x_hat.dim {
        return Err(shape_err("original and filtered feature maps differ in shape"));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(invalid(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    let values = x_hat
        .values
        .iter()
        .zip(&x_patch.values)
        .map(|(&h, &x)| h / ((h - x).abs() + epsilon))
        .collect();
    Ok(StabilityMatrix { n: x_patch.n_patches(), dim: x_patch.dim, values })
}

/// For each channel, the `K` patches with the largest stability, ties going to
/// the lower patch index.
pub fn topk_indices(s: &StabilityMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    topk_indices_with(s, k, Execution::Sequential)
}

pub fn topk_indices_with(s: &StabilityMatrix, k: usize, exec: Execution) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > s.n {
        return Err(invalid(format!("K = {k} outside 1..={}", s.n)));
    }
    Ok(exec.map_indexed(s.dim, |j| {
        let mut order: Vec<usize> = (0..s.n).collect();
        let by_rank = |a: &usize, b: &usize| -> Ordering {
            s.get(*b, j).total_cmp(&s.get(*a, j)).then(a.cmp(b))
        };
        if k < s.n {
            order.select_nth_unstable_by(k - 1, by_rank);
            order.truncate(k);
        }
        order.sort_unstable_by(by_rank);
        order
    }))
}

fn validate_sets(sets: &[Vec<usize>], n: usize, dim: usize, k: usize) -> Result<()> {
    if sets.len() != dim {
        return Err(shape_err(format!("{} index sets for {dim} channels", sets.len())));
    }
    for (j, set) in sets.iter().enumerate() {
        if set.len() != k {
            return Err(invalid(format!("channel {j} selected {} patches, expected {k}", set.len())));
        }
        let mut seen = vec![false; n];
        for &i in set {
            if i >= n {
                return Err(invalid(format!("channel {j} selected patch {i}, only {n} exist")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(invalid(format!("channel {j} selected patch {i} twice")));
            }
        }
    }
    Ok(())
}

/// `cls[j] = (1/K) Σ_{i ∈ sets[j]} x[i,j]`, over the unfiltered features.
pub fn pooled_cls(x_patch: &FeatureMap, sets: &[Vec<usize>], k: usize) -> Result<Vec<f64>> {
    validate_sets(sets, x_patch.n_patches(), x_patch.dim, k)?;
    Ok(sets
        .iter()
        .enumerate()
        .map(|(j, set)| {
            // Ascending patch order, so K = N reproduces mean pooling bit for bit.
            let mut rows = set.clone();
            rows.sort_unstable();
            rows.iter().fold(0.0, |acc, &i| acc + x_patch.get(i, j)) / k as f64
        })
        .collect())
}

/// `v[i]` = number of channels whose set contains patch `i`.
pub fn vote_counts(sets: &[Vec<usize>], n: usize) -> Result<Vec<u32>> {
    let mut votes = vec![0u32; n];
    for set in sets {
        for &i in set {
            *votes
                .get_mut(i)
                .ok_or_else(|| invalid(format!("patch index {i} out of bounds for {n} patches")))? += 1;
        }
    }
    Ok(votes)
}

/// Gradient of the loss w.r.t. the feature map given its gradient w.r.t. the
/// pooled token; selections are held fixed.
pub fn pool_backward(grad_cls: &[f64], sets: &[Vec<usize>], k: usize, n: usize) -> Result<FeatureMap> {
    let dim = grad_cls.len();
    if dim == 0 || n == 0 {
        return Err(shape_err("empty gradient shape"));
    }
    validate_sets(sets, n, dim, k)?;
    let mut grad = vec![0.0; n * dim];
    for (j, set) in sets.iter().enumerate() {
        for &i in set {
            grad[i * dim + j] = grad_cls[j] / k as f64;
        }
    }
    FeatureMap::new(n, 1, dim, grad)
}

/// Stability-ranked selections for `x_patch` (filter → score → Top-K).
pub fn select_patches(x_patch: &FeatureMap, params: &LazyStrikeParams) -> Result<Vec<Vec<usize>>> {
    select_patches_with(x_patch, params, Execution::Sequential)
}

pub fn select_patches_with(
    x_patch: &FeatureMap,
    params: &LazyStrikeParams,
    exec: Execution,
) -> Result<Vec<Vec<usize>>> {
    let g = GaussianWeights::new(x_patch.dim, params.resolve_sigma(x_patch.dim))?;
    let x_hat = low_pass_filter_with(x_patch, &g, exec)?;
    let s = stability_score(x_patch, &x_hat, params.epsilon)?;
    topk_indices_with(&s, params.resolve_k(x_patch.n_patches()), exec)
}

/// The full pooling head: selections, pooled token, and vote counts.
pub fn lazystrike_pool(x_patch: &FeatureMap, params: &LazyStrikeParams) -> Result<PooledToken> {
    lazystrike_pool_with(x_patch, params, Execution::Sequential)
}

pub fn lazystrike_pool_with(x_patch: &FeatureMap, params: &LazyStrikeParams, exec: Execution) -> Result<PooledToken> {
    let k = params.resolve_k(x_patch.n_patches());
    let selected = select_patches_with(x_patch, params, exec)?;
    let cls = pooled_cls(x_patch, &selected, k)?;
    let votes = vote_counts(&selected, x_patch.n_patches())?;
    Ok(PooledToken { cls, selected, votes })
}

/// Pool many feature maps independently; results keep input order.
pub fn lazystrike_pool_batch(
    maps: &[FeatureMap],
    params: &LazyStrikeParams,
    exec: Execution,
) -> Result<Vec<PooledToken>> {
    exec.map(maps, |m| lazystrike_pool(m, params)).into_iter().collect()
}
