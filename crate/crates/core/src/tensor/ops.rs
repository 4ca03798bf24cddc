//! Pure forward kernels. Every function validates shapes before touching data
//! and returns a fresh tensor; the tape reuses these for its forward pass.

use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Split a shape around `axis` into `(outer, len, inner)` strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err(format!("matmul inner dimensions {k} and {k2} differ")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn zip_same(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "add", |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|v| v * s).collect())
}

/// Adds a length-`n` vector to every row of an `m×n` matrix.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = a.dims2()?;
    if bias.numel() != n {
        return Err(shape_err(format!("bias has {} entries, rows have {n}", bias.numel())));
    }
    let b = bias.data();
    let data = a
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (d[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Per-row normalisation statistics shared by the forward and backward passes.
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_with_cache(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = *x.shape().last().expect("tensors have at least one dim");
    if gamma.numel() != d || beta.numel() != d {
        return Err(shape_err(format!(
            "layer_norm affine params have {} / {} entries, rows have {d}",
            gamma.numel(),
            beta.numel()
        )));
    }
    if eps <= 0.0 {
        return Err(invalid("layer_norm eps must be positive"));
    }
    let rows = x.numel() / d;
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), LayerNormCache { xhat, inv_std }))
}

/// Normalise each row over the last axis to zero mean and unit (population)
/// variance, then apply `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_cache(x, gamma, beta, eps).map(|(t, _)| t)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Tanh-approximation GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| gelu_scalar(v)).collect())
}

/// Mean along `axis`; the axis is removed (a fully reduced tensor has shape `[1]`).
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    let n = len as f64;
    out.iter_mut().for_each(|v| *v /= n);
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn sum(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

/// Softmax probabilities and the mean negative log-likelihood of `target`.
pub(crate) fn cross_entropy_with_probs(logits: &Tensor, target: usize) -> Result<(Tensor, Vec<f64>)> {
    let c = logits.numel();
    if logits.shape().iter().filter(|&&d| d > 1).count() > 1 {
        return Err(shape_err(format!("cross_entropy expects a single row of logits, got {:?}", logits.shape())));
    }
    if target >= c {
        return Err(invalid(format!("target {target} out of range for {c} classes")));
    }
    let d = logits.data();
    let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = d.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    let probs: Vec<f64> = d.iter().map(|v| (v - log_z).exp()).collect();
    Ok((Tensor::scalar(log_z - d[target]), probs))
}

pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<Tensor> {
    cross_entropy_with_probs(logits, target).map(|(t, _)| t)
}

/// Columns `start..end` of a 2-D tensor.
pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if start >= end || end > n {
        return Err(shape_err(format!("column range {start}..{end} invalid for {n} columns")));
    }
    let w = end - start;
    let mut out = Vec::with_capacity(m * w);
    for r in 0..m {
        out.extend_from_slice(&x.data()[r * n + start..r * n + end]);
    }
    Ok(Tensor::from_parts(vec![m, w], out))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err("concat_cols of nothing"))?;
    let (m, _) = first.dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = p.dims2()?;
        if pm != m {
            return Err(shape_err(format!("concat_cols row counts {m} and {pm} differ")));
        }
        widths.push(pn);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(m * total);
    for r in 0..m {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Ok(Tensor::from_parts(vec![m, total], out))
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err("concat_rows of nothing"))?;
    let (_, n) = first.dims2()?;
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let (pm, pn) = p.dims2()?;
        if pn != n {
            return Err(shape_err(format!("concat_rows column counts {n} and {pn} differ")));
        }
        rows += pm;
        out.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(vec![rows, n], out))
}

/// Rows of `x` picked by `index` (repeats allowed).
pub fn gather_rows(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if index.is_empty() {
        return Err(shape_err("gather_rows with an empty index"));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= m) {
        return Err(shape_err(format!("row index {bad} out of range for {m} rows")));
    }
    let mut out = Vec::with_capacity(index.len() * n);
    for &i in index {
        out.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
    }
    Ok(Tensor::from_parts(vec![index.len(), n], out))
}

/// Per-column mean over a column-specific set of rows:
/// `out[j] = mean_{i in sets[j]} x[i, j]`. Output shape `[1, n]`.
pub fn select_mean_cols(x: &Tensor, sets: &[Vec<usize>]) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if sets.len() != n {
        return Err(shape_err(format!("{} index sets for {n} columns", sets.len())));
    }
    let mut out = vec![0.0; n];
    for (j, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(invalid(format!("index set for column {j} is empty")));
        }
        if let Some(&bad) = set.iter().find(|&&i| i >= m) {
            return Err(shape_err(format!("row index {bad} out of range for {m} rows")));
        }
        out[j] = set.iter().map(|&i| x.data()[i * n + j]).sum::<f64>() / set.len() as f64;
    }
    Ok(Tensor::from_parts(vec![1, n], out))
}
