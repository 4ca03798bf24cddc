use std::sync::Arc;

use super::ops::{self, LayerNormCache};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: LayerNormCache },
    Gelu(Var),
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Arc<[usize]> },
    SelectMeanCols { x: Var, sets: Arc<[Vec<usize>]> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::Softmax { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SelectMeanCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward pass so that a single backward pass can differentiate it.
///
/// Nodes are appended in evaluation order, so every input precedes its output
/// and reverse iteration is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Record an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad())
    }

    /// Record a non-differentiated input.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = ops::transpose(self.value(x))?;
        self.push(v, Op::Transpose(x), "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = ops::add_row(self.value(a), self.value(bias))?;
        self.push(v, Op::AddRow(a, bias), "add_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = ops::scale(self.value(x), s);
        self.push(v, Op::Scale(x, s), "scale")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(x), axis)?;
        self.push(v, Op::Softmax { x, axis }, "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (v, cache) =
            ops::layer_norm_with_cache(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(v, Op::LayerNorm { x, gamma, beta, cache }, "layer_norm")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = ops::gelu(self.value(x));
        self.push(v, Op::Gelu(x), "gelu")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::mean_axis(self.value(x), axis)?;
        self.push(v, Op::MeanAxis { x, axis }, "mean_axis")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = ops::sum(self.value(x));
        self.push(v, Op::Sum(x), "sum")
    }

    /// Negative log-likelihood of `target` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (v, probs) = ops::cross_entropy_with_probs(self.value(logits), target)?;
        self.push(v, Op::CrossEntropy { logits, target, probs }, "cross_entropy")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = ops::slice_cols(self.value(x), start, end)?;
        self.push(v, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_cols(&ts)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_rows(&ts)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn gather_rows(&mut self, x: Var, index: impl Into<Arc<[usize]>>) -> Result<Var> {
        let index = index.into();
        let v = ops::gather_rows(self.value(x), &index)?;
        self.push(v, Op::GatherRows { x, index }, "gather_rows")
    }

    /// Per-column mean over column-specific row sets; the sets are treated as
    /// constants, so gradient reaches only the selected entries.
    pub fn select_mean_cols(&mut self, x: Var, sets: impl Into<Arc<[Vec<usize>]>>) -> Result<Var> {
        let sets = sets.into();
        let v = ops::select_mean_cols(self.value(x), &sets)?;
        self.push(v, Op::SelectMeanCols { x, sets }, "select_mean_cols")
    }

    /// Differentiate the scalar `loss` with respect to every `requires_grad` leaf.
    ///
    /// Leaves that do not influence the loss receive zero gradients. A tape
    /// supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::StaleTape);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.spent = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contribution) in self.input_grads(id, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.data.iter_mut().zip(&contribution.data).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            } else if !matches!(node.op, Op::Leaf) || !node.value.requires_grad() {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = ops::matmul(g, &ops::transpose(val(*b))?)?;
                let gb = ops::matmul(&ops::transpose(val(*a))?, g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => vec![(*x, ops::transpose(g)?)],
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, ops::mul(g, val(*b))?), (*b, ops::mul(g, val(*a))?)],
            Op::AddRow(a, bias) => {
                let (_, n) = g.dims2()?;
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                vec![(*a, g.clone()), (*bias, Tensor::from_parts(val(*bias).shape().to_vec(), gb))]
            }
            Op::Scale(x, s) => vec![(*x, ops::scale(g, *s))],
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = ops::axis_split(y.shape(), *axis)?;
                let mut gx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), gx))]
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let gam = val(*gamma).data();
                let d = gam.len();
                let rows = g.numel() / d;
                let mut gx = vec![0.0; g.numel()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xh = &cache.xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        ggamma[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        gx[r * d + j] = cache.inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                vec![
                    (*x, Tensor::from_parts(g.shape().to_vec(), gx)),
                    (*gamma, Tensor::from_parts(val(*gamma).shape().to_vec(), ggamma)),
                    (*beta, Tensor::from_parts(val(*beta).shape().to_vec(), gbeta)),
                ]
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                let gx = xd.iter().zip(g.data()).map(|(&v, &gv)| gv * ops::gelu_grad_scalar(v)).collect();
                vec![(*x, Tensor::from_parts(g.shape().to_vec(), gx))]
            }
            Op::MeanAxis { x, axis } => {
                let xs = val(*x).shape();
                let (outer, len, inner) = ops::axis_split(xs, *axis)?;
                let mut gx = vec![0.0; xs.iter().product()];
                let inv = 1.0 / len as f64;
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), gx))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::CrossEntropy { logits, target, probs } => {
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g.data()[0]).collect();
                gl[*target] -= g.data()[0];
                vec![(*logits, Tensor::from_parts(val(*logits).shape().to_vec(), gl))]
            }
            Op::SliceCols { x, start } => {
                let (m, n) = val(*x).dims2()?;
                let (_, w) = g.dims2()?;
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![(*x, Tensor::from_parts(vec![m, n], gx))]
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2()?;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let (_, w) = val(*p).dims2()?;
                    let mut gp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    out.push((*p, Tensor::from_parts(vec![m, w], gp)));
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let n = val(*p).numel();
                    let gp = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    out.push((*p, Tensor::from_parts(val(*p).shape().to_vec(), gp)));
                }
                out
            }
            Op::GatherRows { x, index } => {
                let (m, n) = val(*x).dims2()?;
                let mut gx = vec![0.0; m * n];
                for (k, &i) in index.iter().enumerate() {
                    gx[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g.data()[k * n..(k + 1) * n])
                        .for_each(|(a, v)| *a += v);
                }
                vec![(*x, Tensor::from_parts(vec![m, n], gx))]
            }
            Op::SelectMeanCols { x, sets } => {
                let (m, n) = val(*x).dims2()?;
                if g.numel() != n {
                    return Err(shape_err("select_mean_cols gradient width mismatch"));
                }
                let mut gx = vec![0.0; m * n];
                for (j, set) in sets.iter().enumerate() {
                    let share = g.data()[j] / set.len() as f64;
                    for &i in set {
                        gx[i * n + j] += share;
                    }
                }
                vec![(*x, Tensor::from_parts(vec![m, n], gx))]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[n], 1.0, &mut rng)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(rand_vec(5, 1));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let xv = rand_vec(4, 2);
        let x = tape.param(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        for (a, b) in g.get(x).unwrap().data().iter().zip(xv.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(rand_vec(3, 3));
        let unused = tape.param(rand_vec(2, 4));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(rand_vec(3, 5));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::StaleTape)));
    }

    #[test]
    fn each_kernel_backward_matches_finite_differences() {
        let x = rand_vec(10, 11);
        let h = 1e-5;

        // matmul against a fixed matrix, input stacked as 2x5.
        let err = finite_diff_check(
            |tape, x| {
                let w = tape.constant(Tensor::randn(&[5, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(7)));
                let r = reshape_row(tape, x)?;
                let row = tape.gather_rows(r, vec![0])?;
                let a = tape.slice_cols(row, 0, 5)?;
                let b = tape.slice_cols(row, 5, 10)?;
                let stacked = tape.concat_rows(&[a, b])?;
                let y = tape.matmul(stacked, w)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul {err}");

        let err = finite_diff_check(
            |tape, x| {
                let s = tape.softmax(x, 0)?;
                let w = tape.constant(rand_vec(10, 8));
                let p = tape.mul(s, w)?;
                tape.sum(p)
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax {err}");

        let err = finite_diff_check(
            |tape, x| {
                let row = reshape_row(tape, x)?;
                let gamma = tape.constant(rand_vec(10, 12));
                let beta = tape.constant(rand_vec(10, 13));
                let y = tape.layer_norm(row, gamma, beta, 1e-5)?;
                let w = tape.constant(rand_vec(10, 14).reshape(&[1, 10])?);
                let p = tape.mul(y, w)?;
                tape.sum(p)
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err < 1e-6, "layer_norm {err}");

        let err = finite_diff_check(
            |tape, x| {
                let y = tape.gelu(x)?;
                let w = tape.constant(rand_vec(10, 15));
                let p = tape.mul(y, w)?;
                tape.sum(p)
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err < 1e-6, "gelu {err}");

        let err = finite_diff_check(
            |tape, x| {
                let row = reshape_row(tape, x)?;
                let a = tape.slice_cols(row, 0, 5)?;
                let b = tape.slice_cols(row, 5, 10)?;
                let m = tape.concat_rows(&[a, b])?;
                let mean = tape.mean_axis(m, 0)?;
                let sq = tape.mul(mean, mean)?;
                tape.sum(sq)
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err < 1e-6, "mean_axis {err}");

        let err = finite_diff_check(
            |tape, x| {
                let row = reshape_row(tape, x)?;
                let logits = tape.slice_cols(row, 2, 6)?;
                tape.cross_entropy(logits, 1)
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err < 1e-6, "cross_entropy {err}");
    }

    /// Views a length-n vector variable as a 1×n row through differentiable ops.
    fn reshape_row(tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.value(x).numel();
        let e = tape.constant(Tensor::full(&[1, 1], 1.0));
        let col = tape.constant(Tensor::zeros(&[1, n]));
        // (1x1)·(1xn) + x broadcast as a row bias.
        let base = tape.matmul(e, col)?;
        tape.add_row(base, x)
    }
}
