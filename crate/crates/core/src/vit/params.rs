use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{HeadType, ToyViTConfig};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    /// `D × 3D`, columns ordered `[q | k | v]`.
    pub w_qkv: T,
    pub b_qkv: T,
    pub w_out: T,
    pub b_out: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w_fc1: T,
    pub b_fc1: T,
    pub w_fc2: T,
    pub b_fc2: T,
}

/// All learnable tensors of the toy ViT.
///
/// Generic over the slot type so the same layout holds concrete tensors,
/// tape handles during a forward pass, or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `(P·P·C) × D` patch projection.
    pub w_embed: T,
    pub b_embed: T,
    /// `N × D` learned positional embedding.
    pub pos_embed: T,
    /// `1 × D` learnable query, present only for the CLS head.
    pub cls_token: Option<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// `D × classes` classifier.
    pub w_head: T,
    pub b_head: T,
}

pub type ToyViTParams = ModelParams<Tensor>;

const BLOCK_FIELDS: [&str; 12] = [
    "ln1.gamma", "ln1.beta", "attn.qkv.weight", "attn.qkv.bias", "attn.out.weight", "attn.out.bias",
    "ln2.gamma", "ln2.beta", "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias",
];

impl<T> BlockParams<T> {
    fn slots(&self) -> [&T; 12] {
        [
            &self.ln1_gamma, &self.ln1_beta, &self.w_qkv, &self.b_qkv, &self.w_out, &self.b_out,
            &self.ln2_gamma, &self.ln2_beta, &self.w_fc1, &self.b_fc1, &self.w_fc2, &self.b_fc2,
        ]
    }

    fn slots_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.w_qkv, &mut self.b_qkv, &mut self.w_out,
            &mut self.b_out, &mut self.ln2_gamma, &mut self.ln2_beta, &mut self.w_fc1, &mut self.b_fc1,
            &mut self.w_fc2, &mut self.b_fc2,
        ]
    }

    fn from_slots(mut it: impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            ln1_gamma: it.next()?,
            ln1_beta: it.next()?,
            w_qkv: it.next()?,
            b_qkv: it.next()?,
            w_out: it.next()?,
            b_out: it.next()?,
            ln2_gamma: it.next()?,
            ln2_beta: it.next()?,
            w_fc1: it.next()?,
            b_fc1: it.next()?,
            w_fc2: it.next()?,
            b_fc2: it.next()?,
        })
    }
}

impl<T> ModelParams<T> {
    /// `(name, slot)` pairs in a fixed canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("embed.weight".to_string(), &self.w_embed),
            ("embed.bias".to_string(), &self.b_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        if let Some(c) = &self.cls_token {
            out.push(("cls_token".to_string(), c));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, slot) in BLOCK_FIELDS.iter().zip(b.slots()) {
                out.push((format!("blocks.{i}.{field}"), slot));
            }
        }
        out.push(("head.weight".to_string(), &self.w_head));
        out.push(("head.bias".to_string(), &self.b_head));
        out
    }

    /// Slots in canonical order.
    pub fn slots(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, s)| s).collect()
    }

    /// Mutable slots in canonical order.
    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.w_embed, &mut self.b_embed, &mut self.pos_embed];
        if let Some(c) = &mut self.cls_token {
            out.push(c);
        }
        for b in &mut self.blocks {
            out.extend(b.slots_mut());
        }
        out.push(&mut self.w_head);
        out.push(&mut self.b_head);
        out
    }

    /// Rebuild from slots in canonical order.
    fn from_ordered(has_cls: bool, depth: usize, items: Vec<T>) -> Option<Self> {
        let mut it = items.into_iter();
        let w_embed = it.next()?;
        let b_embed = it.next()?;
        let pos_embed = it.next()?;
        let cls_token = if has_cls { Some(it.next()?) } else { None };
        let mut blocks = Vec::with_capacity(depth);
        for _ in 0..depth {
            blocks.push(BlockParams::from_slots(&mut it)?);
        }
        let w_head = it.next()?;
        let b_head = it.next()?;
        it.next().is_none().then_some(Self { w_embed, b_embed, pos_embed, cls_token, blocks, w_head, b_head })
    }

    /// Apply `f` to every slot, preserving the layout.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        let mapped: Vec<U> = self.slots().into_iter().map(&mut f).collect();
        ModelParams::from_ordered(self.cls_token.is_some(), self.blocks.len(), mapped)
            .expect("layout preserved by construction")
    }

    /// Combine two identically laid-out parameter sets slot by slot.
    pub fn zip_map<U, V>(&self, other: &ModelParams<U>, mut f: impl FnMut(&T, &U) -> V) -> ModelParams<V> {
        let mapped: Vec<V> = self.slots().into_iter().zip(other.slots()).map(|(a, b)| f(a, b)).collect();
        ModelParams::from_ordered(self.cls_token.is_some(), self.blocks.len(), mapped)
            .expect("layouts of zipped parameter sets must match")
    }
}

fn linear(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let w = Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng);
    (w, Tensor::zeros(&[fan_out]))
}

impl ToyViTParams {
    /// Seeded initialisation: linear weights `N(0, 1/fan_in)`, zero biases, unit
    /// layer-norm gains, and `N(0, 0.02²)` positional embeddings and CLS query.
    pub fn init(cfg: &ToyViTConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, hidden) = (cfg.dim, cfg.hidden_dim());
        let (w_embed, b_embed) = linear(cfg.patch_dim(), d, &mut rng);
        let pos_embed = Tensor::randn(&[cfg.n_patches(), d], 0.02, &mut rng);
        let cls_token = (cfg.head == HeadType::Cls).then(|| Tensor::randn(&[1, d], 0.02, &mut rng));
        let blocks = (0..cfg.depth)
            .map(|_| {
                let (w_qkv, b_qkv) = linear(d, 3 * d, &mut rng);
                let (w_out, b_out) = linear(d, d, &mut rng);
                let (w_fc1, b_fc1) = linear(d, hidden, &mut rng);
                let (w_fc2, b_fc2) = linear(hidden, d, &mut rng);
                BlockParams {
                    ln1_gamma: Tensor::full(&[d], 1.0),
                    ln1_beta: Tensor::zeros(&[d]),
                    w_qkv,
                    b_qkv,
                    w_out,
                    b_out,
                    ln2_gamma: Tensor::full(&[d], 1.0),
                    ln2_beta: Tensor::zeros(&[d]),
                    w_fc1,
                    b_fc1,
                    w_fc2,
                    b_fc2,
                }
            })
            .collect();
        let (w_head, b_head) = linear(d, cfg.num_classes, &mut rng);
        Ok(Self { w_embed, b_embed, pos_embed, cls_token, blocks, w_head, b_head })
    }

    /// Rebuild from named tensors (e.g. a checkpoint), checking every shape
    /// against the configuration.
    pub fn from_named(cfg: &ToyViTConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let template = Self::init(cfg)?;
        let mut ordered = Vec::new();
        for (name, expected) in template.named() {
            let t = tensors.remove(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != expected.shape() {
                return Err(shape_err(format!("{name}: expected {:?}, found {:?}", expected.shape(), t.shape())));
            }
            ordered.push(t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(shape_err(format!("unexpected tensor {extra:?} for this configuration")));
        }
        Ok(Self::from_ordered(cfg.head == HeadType::Cls, cfg.depth, ordered).expect("ordered from template"))
    }

    pub fn num_parameters(&self) -> usize {
        self.slots().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slots().iter().all(|t| t.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ToyViTConfig::default();
        assert_eq!(ToyViTParams::init(&cfg).unwrap(), ToyViTParams::init(&cfg).unwrap());
        let other = ToyViTConfig { seed: 1, ..cfg.clone() };
        assert_ne!(ToyViTParams::init(&cfg).unwrap(), ToyViTParams::init(&other).unwrap());
    }

    #[test]
    fn named_roundtrip() {
        let cfg = ToyViTConfig { head: HeadType::Cls, ..Default::default() };
        let p = ToyViTParams::init(&cfg).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 3 + 1 + 12 * cfg.depth + 2);
        let map: BTreeMap<String, Tensor> = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(ToyViTParams::from_named(&cfg, map.clone()).unwrap(), p);
        let mut missing = map.clone();
        missing.remove("head.bias");
        assert!(matches!(ToyViTParams::from_named(&cfg, missing), Err(Error::MissingTensor(_))));
        let mut wrong = map;
        wrong.insert("head.bias".into(), Tensor::zeros(&[7]));
        assert!(ToyViTParams::from_named(&cfg, wrong).is_err());
    }

    #[test]
    fn map_preserves_layout() {
        let p = ToyViTParams::init(&ToyViTConfig::default()).unwrap();
        let shapes = p.map(|t| t.shape().to_vec());
        assert_eq!(shapes.w_head, vec![32, 4]);
        assert!(shapes.cls_token.is_none());
        let sum = p.zip_map(&p, |a, b| crate::tensor::ops::add(a, b).unwrap());
        assert_eq!(sum.b_embed.data(), &[0.0; 32]);
    }
}
