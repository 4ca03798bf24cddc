use std::sync::Arc;

use super::config::{HeadType, ToyViTConfig};
use super::params::{BlockParams, ModelParams, ToyViTParams};
use crate::error::{invalid, shape_err, Result};
use crate::lazystrike::{select_patches, vote_counts, FeatureMap, PooledToken};
use crate::tensor::ops::LAYER_NORM_EPS;
use crate::tensor::{Tape, Tensor, Var};

/// Rearrange an `[H, W, C]` image into `N × (P·P·C)` patch rows.
///
/// Patches are numbered row-major over the grid; pixels inside a patch are
/// ordered `(dy, dx, c)`.
pub fn patchify(image: &Tensor, cfg: &ToyViTConfig) -> Result<Tensor> {
    let expected = [cfg.image_size, cfg.image_size, cfg.channels];
    if image.shape() != expected {
        return Err(shape_err(format!("image must be {expected:?}, got {:?}", image.shape())));
    }
    let (p, c, side, w) = (cfg.patch_size, cfg.channels, cfg.grid_side(), cfg.image_size);
    let src = image.data();
    let mut out = Vec::with_capacity(image.numel());
    for py in 0..side {
        for px in 0..side {
            for dy in 0..p {
                let start = ((py * p + dy) * w + px * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![side * side, p * p * c], out))
}

/// Token indices of each non-overlapping `window × window` tile of a
/// `grid_h × grid_w` grid. Tiles and the tokens within them are row-major.
pub fn window_partition(grid_h: usize, grid_w: usize, window: usize) -> Result<Vec<Vec<usize>>> {
    if window == 0 || !grid_h.is_multiple_of(window) || !grid_w.is_multiple_of(window) {
        return Err(invalid(format!("window {window} does not tile a {grid_h}x{grid_w} grid")));
    }
    let mut out = Vec::new();
    for wy in (0..grid_h).step_by(window) {
        for wx in (0..grid_w).step_by(window) {
            out.push(
                (wy..wy + window)
                    .flat_map(|y| (wx..wx + window).map(move |x| y * grid_w + x))
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn multi_head(tape: &mut Tape, qkv: Var, dim: usize, heads: usize) -> Result<Var> {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * dh, (h + 1) * dh)?;
        let k = tape.slice_cols(qkv, dim + h * dh, dim + (h + 1) * dh)?;
        let v = tape.slice_cols(qkv, 2 * dim + h * dh, 2 * dim + (h + 1) * dh)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, scale)?;
        let a = tape.softmax(s, 1)?;
        outs.push(tape.matmul(a, v)?);
    }
    tape.concat_cols(&outs)
}

/// Multi-head scaled dot-product attention over `x` (no residual).
///
/// With `window = Some(w)` the tokens must be exactly the `grid_h × grid_w`
/// patches, and attention is confined to each `w × w` tile.
pub fn attention(
    tape: &mut Tape,
    x: Var,
    block: &BlockParams<Var>,
    heads: usize,
    grid: (usize, usize),
    window: Option<usize>,
) -> Result<Var> {
    let (rows, dim) = tape.value(x).dims2()?;
    if heads == 0 || dim % heads != 0 {
        return Err(invalid(format!("dim {dim} is not divisible by {heads} heads")));
    }
    let qkv = tape.matmul(x, block.w_qkv)?;
    let qkv = tape.add_row(qkv, block.b_qkv)?;
    let mixed = match window {
        None => multi_head(tape, qkv, dim, heads)?,
        Some(w) => {
            if rows != grid.0 * grid.1 {
                return Err(invalid(format!(
                    "windowed attention needs exactly the {} patch tokens, got {rows} (a CLS token cannot be windowed)",
                    grid.0 * grid.1
                )));
            }
            let groups = window_partition(grid.0, grid.1, w)?;
            let mut outs = Vec::with_capacity(groups.len());
            for g in &groups {
                let part = tape.gather_rows(qkv, g.as_slice())?;
                outs.push(multi_head(tape, part, dim, heads)?);
            }
            let stacked = tape.concat_rows(&outs)?;
            let mut inverse = vec![0; rows];
            for (pos, &tok) in groups.iter().flatten().enumerate() {
                inverse[tok] = pos;
            }
            tape.gather_rows(stacked, inverse)?
        }
    };
    let out = tape.matmul(mixed, block.w_out)?;
    tape.add_row(out, block.b_out)
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    block: &BlockParams<Var>,
    cfg: &ToyViTConfig,
    window: Option<usize>,
) -> Result<Var> {
    let side = cfg.grid_side();
    let h = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta, LAYER_NORM_EPS)?;
    let a = attention(tape, h, block, cfg.heads, (side, side), window)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, block.ln2_gamma, block.ln2_beta, LAYER_NORM_EPS)?;
    let h = tape.matmul(h, block.w_fc1)?;
    let h = tape.add_row(h, block.b_fc1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, block.w_fc2)?;
    let h = tape.add_row(h, block.b_fc2)?;
    tape.add(x, h)
}

/// Handles to the interesting nodes of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// `[1, classes]`.
    pub logits: Var,
    /// `[N, D]` final-layer patch tokens.
    pub features: Var,
    /// `[1, D]` aggregated token fed to the classifier.
    pub global: Var,
    /// Per-channel selections of the lazystrike head.
    pub selected: Option<Arc<[Vec<usize>]>>,
}

/// Record the embedding of `image` on `tape`: `patches · W + b + pos`.
pub fn patch_embed_on_tape(tape: &mut Tape, image: &Tensor, pv: &ModelParams<Var>, cfg: &ToyViTConfig) -> Result<Var> {
    let patches = tape.constant(patchify(image, cfg)?);
    let e = tape.matmul(patches, pv.w_embed)?;
    let e = tape.add_row(e, pv.b_embed)?;
    tape.add(e, pv.pos_embed)
}

/// Patch embeddings (with positional embedding) as a feature map.
pub fn patch_embed(image: &Tensor, params: &ToyViTParams, cfg: &ToyViTConfig) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let pv = params.map(|t| tape.constant(t.clone()));
    let e = patch_embed_on_tape(&mut tape, image, &pv, cfg)?;
    FeatureMap::from_tensor(tape.value(e), cfg.grid_side(), cfg.grid_side())
}

/// Record a full forward pass of `image` on `tape`.
pub fn forward_on_tape(tape: &mut Tape, image: &Tensor, pv: &ModelParams<Var>, cfg: &ToyViTConfig) -> Result<TapeForward> {
    cfg.validate()?;
    if pv.blocks.len() != cfg.depth || pv.cls_token.is_some() != (cfg.head == HeadType::Cls) {
        return Err(shape_err("parameters do not match the configuration"));
    }
    let n = cfg.n_patches();
    let side = cfg.grid_side();
    let emb = patch_embed_on_tape(tape, image, pv, cfg)?;
    let mut tokens = match pv.cls_token {
        Some(c) => tape.concat_rows(&[c, emb])?,
        None => emb,
    };
    for (b, w) in pv.blocks.iter().zip(&cfg.window_schedule) {
        tokens = block_forward(tape, tokens, b, cfg, *w)?;
    }
    let (features, mut selected) = (tokens, None);
    let (features, global) = match cfg.head {
        HeadType::Gap => {
            let m = tape.mean_axis(features, 0)?;
            (features, tape.reshape(m, &[1, cfg.dim])?)
        }
        HeadType::Cls => {
            let patches = tape.gather_rows(features, (1..=n).collect::<Vec<_>>())?;
            (patches, tape.gather_rows(features, vec![0])?)
        }
        HeadType::LazyStrike => {
            let fm = FeatureMap::from_tensor(tape.value(features), side, side)?;
            let sets: Arc<[Vec<usize>]> = select_patches(&fm, &cfg.lazystrike)?.into();
            selected = Some(sets.clone());
            (features, tape.select_mean_cols(features, sets)?)
        }
    };
    let logits = tape.matmul(global, pv.w_head)?;
    let logits = tape.add_row(logits, pv.b_head)?;
    Ok(TapeForward { logits, features, global, selected })
}

/// Concrete results of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Final-layer patch tokens.
    pub features: FeatureMap,
    /// The token fed to the classifier.
    pub global: Vec<f64>,
    /// Selections and votes, for the lazystrike head only.
    pub pooled: Option<PooledToken>,
}

impl ForwardOutput {
    /// Index of the largest logit (lowest index on ties).
    pub fn predicted(&self) -> usize {
        crate::metrics::argmax_slice(&self.logits)
    }
}

pub fn forward(image: &Tensor, params: &ToyViTParams, cfg: &ToyViTConfig) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let pv = params.map(|t| tape.constant(t.clone()));
    let f = forward_on_tape(&mut tape, image, &pv, cfg)?;
    let features = FeatureMap::from_tensor(tape.value(f.features), cfg.grid_side(), cfg.grid_side())?;
    let global = tape.value(f.global).data().to_vec();
    let pooled = match f.selected {
        Some(sets) => Some(PooledToken {
            cls: global.clone(),
            votes: vote_counts(&sets, cfg.n_patches())?,
            selected: sets.to_vec(),
        }),
        None => None,
    };
    Ok(ForwardOutput { logits: tape.value(f.logits).data().to_vec(), features, global, pooled })
}

/// Cross-entropy of one labelled image and its gradient for every parameter.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: f64,
    pub correct: bool,
    pub grads: ToyViTParams,
}

pub fn loss_and_grads(image: &Tensor, label: usize, params: &ToyViTParams, cfg: &ToyViTConfig) -> Result<SampleGradient> {
    let mut tape = Tape::new();
    let pv = params.map(|t| tape.param(t.clone()));
    let f = forward_on_tape(&mut tape, image, &pv, cfg)?;
    let correct = crate::metrics::argmax_slice(tape.value(f.logits).data()) == label;
    let loss_var = tape.cross_entropy(f.logits, label)?;
    let loss = tape.value(loss_var).data()[0];
    let mut grads = tape.backward(loss_var)?;
    let grads = pv.map(|v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape())));
    Ok(SampleGradient { loss, correct, grads })
}

/// Loss of one labelled image, with the lazystrike selections it used.
pub fn loss_with_selection(
    image: &Tensor,
    label: usize,
    params: &ToyViTParams,
    cfg: &ToyViTConfig,
) -> Result<(f64, Option<Vec<Vec<usize>>>)> {
    let mut tape = Tape::new();
    let pv = params.map(|t| tape.constant(t.clone()));
    let f = forward_on_tape(&mut tape, image, &pv, cfg)?;
    let loss = tape.cross_entropy(f.logits, label)?;
    Ok((tape.value(loss).data()[0], f.selected.map(|s| s.to_vec())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(head: HeadType) -> ToyViTConfig {
        ToyViTConfig {
            image_size: 8,
            channels: 2,
            patch_size: 2,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            head,
            window_schedule: vec![None],
            ..Default::default()
        }
    }

    fn random_image(cfg: &ToyViTConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[cfg.image_size, cfg.image_size, cfg.channels], 1.0, &mut rng)
    }

    #[test]
    fn patchify_layout() {
        let cfg = ToyViTConfig { image_size: 4, channels: 1, patch_size: 2, ..small_cfg(HeadType::Gap) };
        let img = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(patchify(&Tensor::zeros(&[4, 4, 2]), &cfg).is_err());
    }

    #[test]
    fn zero_image_embeds_to_zero() {
        let cfg = small_cfg(HeadType::Gap);
        let mut params = ToyViTParams::init(&cfg).unwrap();
        params.pos_embed = Tensor::zeros(params.pos_embed.shape());
        let fm = patch_embed(&Tensor::zeros(&[8, 8, 2]), &params, &cfg).unwrap();
        assert!(fm.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_image() {
        let cfg = ToyViTConfig { patch_size: 8, ..small_cfg(HeadType::Gap) };
        let params = ToyViTParams::init(&cfg).unwrap();
        let fm = patch_embed(&random_image(&cfg, 1), &params, &cfg).unwrap();
        assert_eq!(fm.n_patches(), 1);
    }

    #[test]
    fn hand_computed_embedding() {
        // 4×4 single-channel image, P = 2, D = 2, W picks pixel sums.
        let cfg = ToyViTConfig {
            image_size: 4,
            channels: 1,
            patch_size: 2,
            dim: 2,
            heads: 1,
            ..small_cfg(HeadType::Gap)
        };
        let mut params = ToyViTParams::init(&cfg).unwrap();
        params.w_embed = Tensor::new(vec![4, 2], vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, -1.0]).unwrap();
        params.b_embed = Tensor::new(vec![2], vec![0.5, 0.0]).unwrap();
        params.pos_embed = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 10.0, 0.0]).unwrap();
        let img = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let fm = patch_embed(&img, &params, &cfg).unwrap();
        // Patch 0 pixels (0,1,4,5): sum 10, first - last = -5.
        // Patch 1 pixels (2,3,6,7): sum 18, 2 - 7 = -5, plus pos (0, 1).
        // Patch 2 pixels (8,9,12,13): sum 42, -5.
        // Patch 3 pixels (10,11,14,15): sum 50, -5, plus pos (10, 0).
        assert_eq!(fm.values(), &[10.5, -5.0, 18.5, -4.0, 42.5, -5.0, 60.5, -5.0]);
    }

    fn attention_only(cfg: &ToyViTConfig, params: &ToyViTParams, x: &Tensor, window: Option<usize>) -> Tensor {
        let mut tape = Tape::new();
        let pv = params.map(|t| tape.constant(t.clone()));
        let xv = tape.constant(x.clone());
        let side = cfg.grid_side();
        let out = attention(&mut tape, xv, &pv.blocks[0], cfg.heads, (side, side), window).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn full_window_equals_global() {
        let cfg = small_cfg(HeadType::Gap);
        let params = ToyViTParams::init(&cfg).unwrap();
        let x = Tensor::randn(&[16, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let g = attention_only(&cfg, &params, &x, None);
        let w = attention_only(&cfg, &params, &x, Some(4));
        assert!(g.max_abs_diff(&w) <= 1e-12);
        let w2 = attention_only(&cfg, &params, &x, Some(2));
        assert!(g.max_abs_diff(&w2) > 1e-6);
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let cfg = small_cfg(HeadType::Gap);
        let mut params = ToyViTParams::init(&cfg).unwrap();
        let d = cfg.dim;
        let b = &mut params.blocks[0];
        for r in 0..d {
            b.w_qkv.data_mut()[r * 3 * d + 2 * d..(r + 1) * 3 * d].iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::randn(&[16, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let out = attention_only(&cfg, &params, &x, None);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_window_is_value_projection() {
        let cfg = ToyViTConfig { image_size: 4, ..small_cfg(HeadType::Gap) };
        let params = ToyViTParams::init(&cfg).unwrap();
        let d = cfg.dim;
        let x = Tensor::randn(&[4, d], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let out = attention_only(&cfg, &params, &x, Some(1));
        let b = &params.blocks[0];
        // Oracle: (x · W_v) · W_o + b_o, with W_v the last D columns of W_qkv.
        let wv: Vec<f64> = (0..d).flat_map(|r| b.w_qkv.row(r)[2 * d..].to_vec()).collect();
        for i in 0..4 {
            for j in 0..d {
                let mut acc = 0.0;
                for m in 0..d {
                    let v: f64 = (0..d).map(|r| x.row(i)[r] * wv[r * d + m]).sum();
                    acc += v * b.w_out.row(m)[j];
                }
                assert!((out.row(i)[j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn windowed_attention_rejects_cls() {
        let cfg = small_cfg(HeadType::Gap);
        let params = ToyViTParams::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let pv = params.map(|t| tape.constant(t.clone()));
        let x = tape.constant(Tensor::zeros(&[17, 8]));
        assert!(attention(&mut tape, x, &pv.blocks[0], 2, (4, 4), Some(2)).is_err());
        assert!(attention(&mut tape, x, &pv.blocks[0], 2, (4, 4), Some(3)).is_err());
    }

    #[test]
    fn depth_zero_gap_is_linear_on_mean_embedding() {
        let cfg = ToyViTConfig { depth: 0, window_schedule: vec![], ..small_cfg(HeadType::Gap) };
        let params = ToyViTParams::init(&cfg).unwrap();
        let img = random_image(&cfg, 7);
        let out = forward(&img, &params, &cfg).unwrap();
        let mean = patch_embed(&img, &params, &cfg).unwrap().mean_pool();
        for c in 0..cfg.num_classes {
            let want: f64 =
                params.b_head.data()[c] + (0..cfg.dim).map(|j| mean[j] * params.w_head.row(j)[c]).sum::<f64>();
            assert!((out.logits[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lazystrike_full_k_flat_filter_matches_gap() {
        let gap = small_cfg(HeadType::Gap);
        let mut ls = small_cfg(HeadType::LazyStrike);
        ls.lazystrike.k = Some(ls.n_patches());
        ls.lazystrike.sigma = Some(f64::INFINITY);
        let params = ToyViTParams::init(&gap).unwrap();
        let img = random_image(&gap, 8);
        let a = forward(&img, &params, &gap).unwrap();
        let b = forward(&img, &params, &ls).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() < 1e-9);
        }
        let pooled = b.pooled.unwrap();
        assert!(pooled.votes.iter().all(|&v| v as usize == gap.dim));
    }

    #[test]
    fn cls_head_forward_shapes() {
        let cfg = small_cfg(HeadType::Cls);
        let params = ToyViTParams::init(&cfg).unwrap();
        let out = forward(&random_image(&cfg, 9), &params, &cfg).unwrap();
        assert_eq!(out.logits.len(), 3);
        assert_eq!(out.features.n_patches(), 16);
        assert_eq!(out.global.len(), 8);
        assert!(out.pooled.is_none());
    }

    #[test]
    fn gradients_match_forward_loss() {
        for head in [HeadType::Gap, HeadType::Cls, HeadType::LazyStrike] {
            let cfg = small_cfg(head);
            let params = ToyViTParams::init(&cfg).unwrap();
            let img = random_image(&cfg, 10);
            let g = loss_and_grads(&img, 1, &params, &cfg).unwrap();
            let (loss, _) = loss_with_selection(&img, 1, &params, &cfg).unwrap();
            assert_eq!(g.loss, loss);
            assert!(g.grads.is_finite());
            // A spot check on the classifier bias: d loss / d b = softmax - onehot.
            let logits = forward(&img, &params, &cfg).unwrap().logits;
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                let want = logits[c].exp() / z - if c == 1 { 1.0 } else { 0.0 };
                assert!((g.grads.b_head.data()[c] - want).abs() < 1e-12);
            }
        }
    }
}
