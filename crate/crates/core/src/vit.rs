//! Pre-norm Vision Transformer forward pass (inference only).
//!
//! Weights are stored in the tensor container under timm-style names with PyTorch
//! `(out, in)` layouts, e.g. `blocks.3.attn.qkv.weight` of shape `[3E, E]`, so
//! converted checkpoints load without renaming. Internally every linear layer is
//! kept transposed as `(in, out)` for row-vector products.

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::sampler::PatchGrid;

pub const LAYER_NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub input_size: usize,
}

impl Default for VitConfig {
    /// ViT-small/16 at 224px.
    fn default() -> Self {
        Self { patch_size: 16, embed_dim: 384, depth: 12, heads: 6, mlp_ratio: 4, input_size: 224 }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.patch_size, self.embed_dim, self.depth, self.heads, self.mlp_ratio, self.input_size];
        if positive.contains(&0) {
            return Err(Error::InvalidParameter(format!("zero-sized ViT config {self:?}")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidParameter(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !self.input_size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidParameter(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        Ok(())
    }

    /// Patch tokens per window (`L`).
    pub fn num_patches(&self) -> usize {
        (self.input_size / self.patch_size).pow(2)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Reads `vit.*` attributes written by [`VitWeights::to_container`].
    pub fn from_attrs(c: &TensorContainer) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            c.attr(k)
                .ok_or_else(|| Error::InvalidParameter(format!("missing attribute `{k}`")))?
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("attribute `{k}` is not an integer")))
        };
        let cfg = Self {
            patch_size: get("vit.patch_size")?,
            embed_dim: get("vit.embed_dim")?,
            depth: get("vit.depth")?,
            heads: get("vit.heads")?,
            mlp_ratio: get("vit.mlp_ratio")?,
            input_size: get("vit.input_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linear layer stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    fn forward(&self, x: &ArrayView2<f32>) -> Array2<f32> {
        x.dot(&self.weight) + &self.bias
    }

    fn zeros(inp: usize, out: usize) -> Self {
        Self { weight: Array2::zeros((inp, out)), bias: Array1::zeros(out) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub scale: Array1<f32>,
    pub shift: Array1<f32>,
}

impl Norm {
    fn identity(dim: usize) -> Self {
        Self { scale: Array1::ones(dim), shift: Array1::zeros(dim) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights {
    /// `P^2 -> E` patch projection.
    pub patch_embed: Linear,
    pub cls_token: Array1<f32>,
    /// `(L + 1) x E`, class position first.
    pub pos_embed: Array2<f32>,
    pub blocks: Vec<BlockWeights>,
    pub norm: Norm,
}

impl VitWeights {
    /// All-zero linear layers with identity norms.
    pub fn zeros(cfg: &VitConfig) -> Self {
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim());
        let blocks = (0..cfg.depth)
            .map(|_| BlockWeights {
                norm1: Norm::identity(e),
                qkv: Linear::zeros(e, 3 * e),
                proj: Linear::zeros(e, e),
                norm2: Norm::identity(e),
                fc1: Linear::zeros(e, h),
                fc2: Linear::zeros(h, e),
            })
            .collect();
        Self {
            patch_embed: Linear::zeros(cfg.patch_size.pow(2), e),
            cls_token: Array1::zeros(e),
            pos_embed: Array2::zeros((cfg.num_patches() + 1, e)),
            blocks,
            norm: Norm::identity(e),
        }
    }

    /// Seeded Gaussian initialization: linear weights, class token and positional
    /// embeddings drawn from `N(0, std^2)`, biases zero, norms identity.
    pub fn random(cfg: &VitConfig, seed: u64, std: f32) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, std)
            .map_err(|e| Error::InvalidParameter(format!("init std {std}: {e}")))?;
        let mut w = Self::zeros(cfg);
        let mut fill = |a: &mut Array2<f32>| a.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        fill(&mut w.patch_embed.weight);
        fill(&mut w.pos_embed);
        let mut cls = w.cls_token.clone().insert_axis(Axis(0));
        fill(&mut cls);
        w.cls_token = cls.remove_axis(Axis(0));
        for b in &mut w.blocks {
            for lin in [&mut b.qkv, &mut b.proj, &mut b.fc1, &mut b.fc2] {
                fill(&mut lin.weight);
            }
        }
        Ok(w)
    }

    /// Checks every shape against `cfg` and that all values are finite.
    pub fn validate(&self, cfg: &VitConfig) -> Result<()> {
        cfg.validate()?;
        let (e, h, p2, t) = (cfg.embed_dim, cfg.hidden_dim(), cfg.patch_size.pow(2), cfg.num_patches() + 1);
        let shape = |name: &str, got: &[usize], want: &[usize]| -> Result<()> {
            if got != want {
                return Err(Error::DimensionMismatch(format!("{name}: expected {want:?}, got {got:?}")));
            }
            Ok(())
        };
        let finite = |name: &str, it: &mut dyn Iterator<Item = &f32>| -> Result<()> {
            for v in it {
                if !v.is_finite() {
                    return Err(Error::NonFinite(name.to_string()));
                }
            }
            Ok(())
        };
        let linear = |name: &str, l: &Linear, i: usize, o: usize| -> Result<()> {
            shape(name, l.weight.shape(), &[i, o])?;
            shape(name, l.bias.shape(), &[o])?;
            finite(name, &mut l.weight.iter().chain(l.bias.iter()))
        };
        let norm = |name: &str, n: &Norm| -> Result<()> {
            shape(name, n.scale.shape(), &[e])?;
            shape(name, n.shift.shape(), &[e])?;
            finite(name, &mut n.scale.iter().chain(n.shift.iter()))
        };
        linear("patch_embed", &self.patch_embed, p2, e)?;
        shape("cls_token", self.cls_token.shape(), &[e])?;
        finite("cls_token", &mut self.cls_token.iter())?;
        shape("pos_embed", self.pos_embed.shape(), &[t, e])?;
        finite("pos_embed", &mut self.pos_embed.iter())?;
        if self.blocks.len() != cfg.depth {
            return Err(Error::DimensionMismatch(format!(
                "expected {} blocks, got {}",
                cfg.depth,
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            norm(&format!("blocks.{i}.norm1"), &b.norm1)?;
            linear(&format!("blocks.{i}.attn.qkv"), &b.qkv, e, 3 * e)?;
            linear(&format!("blocks.{i}.attn.proj"), &b.proj, e, e)?;
            norm(&format!("blocks.{i}.norm2"), &b.norm2)?;
            linear(&format!("blocks.{i}.mlp.fc1"), &b.fc1, e, h)?;
            linear(&format!("blocks.{i}.mlp.fc2"), &b.fc2, h, e)?;
        }
        norm("norm", &self.norm)
    }

    pub fn to_container(&self, cfg: &VitConfig) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        for (k, v) in [
            ("vit.patch_size", cfg.patch_size),
            ("vit.embed_dim", cfg.embed_dim),
            ("vit.depth", cfg.depth),
            ("vit.heads", cfg.heads),
            ("vit.mlp_ratio", cfg.mlp_ratio),
            ("vit.input_size", cfg.input_size),
        ] {
            c.set_attr(k, v.to_string());
        }
        let (e, p) = (cfg.embed_dim, cfg.patch_size);
        let put_linear = |c: &mut TensorContainer, name: &str, l: &Linear, dims: &[usize]| -> Result<()> {
            c.insert_f32(format!("{name}.weight"), dims, l.weight.t().iter().copied().collect())?;
            c.insert_f32(format!("{name}.bias"), &[l.bias.len()], l.bias.to_vec())
        };
        let put_norm = |c: &mut TensorContainer, name: &str, n: &Norm| -> Result<()> {
            c.insert_f32(format!("{name}.weight"), &[e], n.scale.to_vec())?;
            c.insert_f32(format!("{name}.bias"), &[e], n.shift.to_vec())
        };
        put_linear(&mut c, "patch_embed.proj", &self.patch_embed, &[e, 1, p, p])?;
        c.insert_f32("cls_token", &[1, 1, e], self.cls_token.to_vec())?;
        c.insert_f32("pos_embed", &[1, self.pos_embed.nrows(), e], self.pos_embed.iter().copied().collect())?;
        for (i, b) in self.blocks.iter().enumerate() {
            let pre = format!("blocks.{i}");
            put_norm(&mut c, &format!("{pre}.norm1"), &b.norm1)?;
            put_linear(&mut c, &format!("{pre}.attn.qkv"), &b.qkv, &[3 * e, e])?;
            put_linear(&mut c, &format!("{pre}.attn.proj"), &b.proj, &[e, e])?;
            put_norm(&mut c, &format!("{pre}.norm2"), &b.norm2)?;
            put_linear(&mut c, &format!("{pre}.mlp.fc1"), &b.fc1, &[b.fc1.weight.ncols(), e])?;
            put_linear(&mut c, &format!("{pre}.mlp.fc2"), &b.fc2, &[e, b.fc2.weight.nrows()])?;
        }
        put_norm(&mut c, "norm", &self.norm)?;
        Ok(c)
    }

    /// Loads weights for `cfg`; tensors are matched by element count so leading
    /// singleton axes (`[1, 1, E]`, `[E, 1, P, P]`) are accepted.
    pub fn from_container(c: &TensorContainer, cfg: &VitConfig) -> Result<Self> {
        cfg.validate()?;
        let (e, h, p2, t) = (cfg.embed_dim, cfg.hidden_dim(), cfg.patch_size.pow(2), cfg.num_patches() + 1);
        let vec = |name: &str, n: usize| -> Result<Array1<f32>> {
            let (_, data) = c.f32(name)?;
            if data.len() != n {
                return Err(Error::DimensionMismatch(format!("{name}: expected {n} values, got {}", data.len())));
            }
            Ok(Array1::from(data.to_vec()))
        };
        // stored (out, in); kept (in, out)
        let linear = |name: &str, inp: usize, out: usize| -> Result<Linear> {
            let w = vec(&format!("{name}.weight"), inp * out)?;
            let weight = w.into_shape_with_order((out, inp)).expect("size checked").reversed_axes();
            Ok(Linear { weight: weight.as_standard_layout().into_owned(), bias: vec(&format!("{name}.bias"), out)? })
        };
        let norm = |name: &str| -> Result<Norm> {
            Ok(Norm { scale: vec(&format!("{name}.weight"), e)?, shift: vec(&format!("{name}.bias"), e)? })
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                let pre = format!("blocks.{i}");
                Ok(BlockWeights {
                    norm1: norm(&format!("{pre}.norm1"))?,
                    qkv: linear(&format!("{pre}.attn.qkv"), e, 3 * e)?,
                    proj: linear(&format!("{pre}.attn.proj"), e, e)?,
                    norm2: norm(&format!("{pre}.norm2"))?,
                    fc1: linear(&format!("{pre}.mlp.fc1"), e, h)?,
                    fc2: linear(&format!("{pre}.mlp.fc2"), h, e)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = Self {
            patch_embed: linear("patch_embed.proj", p2, e)?,
            cls_token: vec("cls_token", e)?,
            pos_embed: vec("pos_embed", t * e)?.into_shape_with_order((t, e)).expect("size checked"),
            blocks,
            norm: norm("norm")?,
        };
        weights.validate(cfg)?;
        Ok(weights)
    }
}

/// ViT output for one window: class token plus `L` patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub cls: Array1<f32>,
    /// `L x E`
    pub patch_tokens: Array2<f32>,
}

/// Final-layer attention of the class-token query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `heads x (L + 1)`: softmax rows over all keys, class key first.
    pub per_head: Array2<f32>,
    /// Head-averaged attention restricted to the `L` patch keys.
    pub mean_patch: Vec<f32>,
}

impl AttentionMap {
    pub fn from_per_head(per_head: Array2<f32>) -> Self {
        let heads = per_head.nrows() as f64;
        let mean_patch = (1..per_head.ncols())
            .map(|j| (per_head.column(j).iter().map(|&v| f64::from(v)).sum::<f64>() / heads) as f32)
            .collect();
        Self { per_head, mean_patch }
    }
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm(x: &ArrayView2<f32>, norm: &Norm, eps: f32) -> Array2<f32> {
    let mut out = x.to_owned();
    let n = x.ncols() as f32;
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.iter_mut()
            .zip(norm.scale.iter().zip(&norm.shift))
            .for_each(|(v, (g, b))| *v = (*v - mean) * inv * g + b);
    }
    out
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

fn softmax_rows(a: &mut Array2<f32>) {
    for mut row in a.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// A validated model; weights are immutable and forward passes are read-only.
#[derive(Debug, Clone)]
pub struct Vit {
    cfg: VitConfig,
    weights: VitWeights,
}

impl Vit {
    pub fn new(cfg: VitConfig, weights: VitWeights) -> Result<Self> {
        weights.validate(&cfg)?;
        Ok(Self { cfg, weights })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &VitWeights {
        &self.weights
    }

    pub fn forward(&self, grid: &PatchGrid) -> Result<TokenSequence> {
        self.run(grid, false).map(|(t, _)| t)
    }

    pub fn attention_map(&self, grid: &PatchGrid) -> Result<AttentionMap> {
        let (_, attn) = self.run(grid, true)?;
        Ok(attn.expect("captured"))
    }

    fn embed(&self, grid: &PatchGrid) -> Result<Array2<f32>> {
        let cfg = &self.cfg;
        let p2 = cfg.patch_size.pow(2);
        if grid.patch_size != cfg.patch_size || grid.len() != cfg.num_patches() {
            return Err(Error::DimensionMismatch(format!(
                "grid has {} patches of {}px, model expects {} of {}px",
                grid.len(),
                grid.patch_size,
                cfg.num_patches(),
                cfg.patch_size
            )));
        }
        let mut pixels = Array2::<f32>::zeros((grid.len(), p2));
        for (mut row, patch) in pixels.rows_mut().into_iter().zip(&grid.patches) {
            row.iter_mut().zip(patch).for_each(|(d, &s)| *d = f32::from(s));
        }
        let patches = self.weights.patch_embed.forward(&pixels.view());
        let cls = self.weights.cls_token.view().insert_axis(Axis(0));
        let x = concatenate(Axis(0), &[cls, patches.view()]).expect("matching widths");
        Ok(x + &self.weights.pos_embed)
    }

    fn run(&self, grid: &PatchGrid, capture: bool) -> Result<(TokenSequence, Option<AttentionMap>)> {
        let (e, hd, heads) = (self.cfg.embed_dim, self.cfg.head_dim(), self.cfg.heads);
        let scale = (hd as f32).powf(-0.5);
        let mut x = self.embed(grid)?;
        let tokens = x.nrows();
        let mut captured = None;
        for (layer, b) in self.weights.blocks.iter().enumerate() {
            let h = layer_norm(&x.view(), &b.norm1, LAYER_NORM_EPS);
            let qkv = b.qkv.forward(&h.view());
            let mut mixed = Array2::<f32>::zeros((tokens, e));
            let last = capture && layer + 1 == self.weights.blocks.len();
            let mut cls_rows = last.then(|| Array2::<f32>::zeros((heads, tokens)));
            for head in 0..heads {
                let q = qkv.slice(s![.., head * hd..(head + 1) * hd]);
                let k = qkv.slice(s![.., e + head * hd..e + (head + 1) * hd]);
                let v = qkv.slice(s![.., 2 * e + head * hd..2 * e + (head + 1) * hd]);
                let mut attn = q.dot(&k.t()) * scale;
                softmax_rows(&mut attn);
                if let Some(rows) = cls_rows.as_mut() {
                    rows.row_mut(head).assign(&attn.row(0));
                }
                mixed.slice_mut(s![.., head * hd..(head + 1) * hd]).assign(&attn.dot(&v));
            }
            x += &b.proj.forward(&mixed.view());
            let h = layer_norm(&x.view(), &b.norm2, LAYER_NORM_EPS);
            let mut hidden = b.fc1.forward(&h.view());
            hidden.mapv_inplace(gelu);
            x += &b.fc2.forward(&hidden.view());
            if let Some(rows) = cls_rows {
                captured = Some(AttentionMap::from_per_head(rows));
            }
        }
        let x = layer_norm(&x.view(), &self.weights.norm, LAYER_NORM_EPS);
        let seq = TokenSequence { cls: x.row(0).to_owned(), patch_tokens: x.slice(s![1.., ..]).to_owned() };
        Ok((seq, captured))
    }
}

/// One forward pass; validates `weights` against `cfg` first.
pub fn vit_forward(cfg: &VitConfig, weights: &VitWeights, grid: &PatchGrid) -> Result<TokenSequence> {
    weights.validate(cfg)?;
    Vit { cfg: *cfg, weights: weights.clone() }.forward(grid)
}

pub fn attention_map(cfg: &VitConfig, weights: &VitWeights, grid: &PatchGrid) -> Result<AttentionMap> {
    weights.validate(cfg)?;
    Vit { cfg: *cfg, weights: weights.clone() }.attention_map(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Mask the most attended patches.
    High,
    /// Mask the most attended patches but reveal a random subset of them.
    Hint,
}

fn ceil_count(fraction: f64, n: usize) -> usize {
    // 1e-9 absorbs products such as 0.3 * 10 = 3.0000000000000004
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Patch indices selected for masking from the head-averaged attention.
pub fn attmask_select(
    attn: &AttentionMap,
    mask_ratio: f64,
    strategy: MaskStrategy,
    hint_reveal: f64,
    seed: u64,
) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&mask_ratio) || !(0.0..=1.0).contains(&hint_reveal) {
        return Err(Error::InvalidParameter("mask_ratio and hint_reveal must lie in [0, 1]".into()));
    }
    let scores = &attn.mean_patch;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(ceil_count(mask_ratio, scores.len()));
    if strategy == MaskStrategy::Hint {
        order.sort_unstable();
        let reveal = ceil_count(hint_reveal, order.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut drop: Vec<usize> = index::sample(&mut rng, order.len(), reveal).into_vec();
        drop.sort_unstable_by(|a, b| b.cmp(a));
        for i in drop {
            order.remove(i);
        }
    }
    Ok(order.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preproc::BinaryImage;
    use crate::sampler::{patchify, Window};
    use proptest::prelude::*;

    fn small_cfg() -> VitConfig {
        VitConfig { patch_size: 4, embed_dim: 8, depth: 2, heads: 2, mlp_ratio: 2, input_size: 8 }
    }

    fn grid_from(cfg: &VitConfig, f: impl Fn(usize, usize) -> bool) -> PatchGrid {
        let px = BinaryImage::from_fn(cfg.input_size, cfg.input_size, f).unwrap();
        patchify(&Window { origin: (0, 0), pixels: px }, cfg.patch_size).unwrap()
    }

    #[test]
    fn container_round_trip() {
        let cfg = small_cfg();
        let w = VitWeights::random(&cfg, 3, 0.5).unwrap();
        let c = w.to_container(&cfg).unwrap();
        assert_eq!(VitConfig::from_attrs(&c).unwrap(), cfg);
        assert_eq!(VitWeights::from_container(&c, &cfg).unwrap(), w);
    }

    #[test]
    fn rejects_bad_weights() {
        let cfg = small_cfg();
        let mut w = VitWeights::random(&cfg, 1, 0.5).unwrap();
        w.blocks[1].fc1.bias[0] = f32::NAN;
        let grid = grid_from(&cfg, |_, _| true);
        assert!(matches!(vit_forward(&cfg, &w, &grid), Err(Error::NonFinite(_))));
        let other = VitConfig { embed_dim: 12, ..cfg };
        let w = VitWeights::random(&cfg, 1, 0.5).unwrap();
        assert!(matches!(vit_forward(&other, &w, &grid), Err(Error::DimensionMismatch(_))));
        let bad = VitConfig { heads: 3, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rejects_mismatched_grid() {
        let cfg = small_cfg();
        let vit = Vit::new(cfg, VitWeights::random(&cfg, 1, 0.5).unwrap()).unwrap();
        let px = BinaryImage::zeros(16, 16).unwrap();
        let grid = patchify(&Window { origin: (0, 0), pixels: px }, 4).unwrap();
        assert!(vit.forward(&grid).is_err());
    }

    #[test]
    fn zero_attention_weights_give_uniform_attention() {
        let cfg = small_cfg();
        let mut w = VitWeights::random(&cfg, 9, 0.5).unwrap();
        for b in &mut w.blocks {
            b.qkv.weight.fill(0.0);
            b.qkv.bias.fill(0.0);
        }
        let grid = grid_from(&cfg, |x, y| (x + y) % 3 == 0);
        let attn = attention_map(&cfg, &w, &grid).unwrap();
        let uniform = 1.0 / (cfg.num_patches() + 1) as f32;
        assert!(attn.per_head.iter().all(|&a| (a - uniform).abs() < 1e-7));
    }

    #[test]
    fn attention_rows_and_head_mean() {
        let cfg = small_cfg();
        let w = VitWeights::random(&cfg, 5, 1.0).unwrap();
        let attn = attention_map(&cfg, &w, &grid_from(&cfg, |x, _| x < 3)).unwrap();
        for row in attn.per_head.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
        for j in 0..cfg.num_patches() {
            let mean: f32 = attn.per_head.column(j + 1).sum() / cfg.heads as f32;
            assert!((attn.mean_patch[j] - mean).abs() < 1e-6);
        }
        let patch_total: f32 = attn.per_head.slice(s![.., 1..]).sum() / cfg.heads as f32;
        assert!((attn.mean_patch.iter().sum::<f32>() - patch_total).abs() < 1e-5);
    }

    #[test]
    fn perturbing_one_patch_changes_cls() {
        let cfg = small_cfg();
        let w = VitWeights::random(&cfg, 11, 0.5).unwrap();
        let blank = vit_forward(&cfg, &w, &grid_from(&cfg, |_, _| false)).unwrap();
        let poked = vit_forward(&cfg, &w, &grid_from(&cfg, |x, y| x == 5 && y == 6)).unwrap();
        assert_ne!(blank.cls, poked.cls);
    }

    #[test]
    fn swapping_distinct_patches_changes_their_tokens() {
        let cfg = small_cfg();
        let w = VitWeights::random(&cfg, 2, 0.5).unwrap();
        let vit = Vit::new(cfg, w).unwrap();
        let grid = grid_from(&cfg, |x, y| x < 4 && y < 4 && (x + y) % 2 == 0);
        let mut swapped = grid.clone();
        swapped.patches.swap(0, 3);
        swapped.fg_counts.swap(0, 3);
        let a = vit.forward(&grid).unwrap();
        let b = vit.forward(&swapped).unwrap();
        // without positional information the swapped tokens would simply trade places
        assert_ne!(a.patch_tokens.row(0), b.patch_tokens.row(3));
        assert_ne!(a.patch_tokens.row(3), b.patch_tokens.row(0));
    }

    #[test]
    fn attmask_examples() {
        let attn = AttentionMap { per_head: Array2::zeros((1, 5)), mean_patch: vec![0.4, 0.3, 0.2, 0.1] };
        let sel = |r, s, h| attmask_select(&attn, r, s, h, 0).unwrap();
        assert_eq!(sel(0.5, MaskStrategy::High, 0.0), BTreeSet::from([0, 1]));
        assert!(sel(0.0, MaskStrategy::High, 0.0).is_empty());
        assert_eq!(sel(1.0, MaskStrategy::High, 0.0), BTreeSet::from([0, 1, 2, 3]));
        assert_eq!(sel(1.0, MaskStrategy::Hint, 0.5).len(), 2);

        let tied = AttentionMap { per_head: Array2::zeros((1, 4)), mean_patch: vec![0.2, 0.5, 0.2] };
        assert_eq!(attmask_select(&tied, 0.6, MaskStrategy::High, 0.0, 0).unwrap(), BTreeSet::from([0, 1]));
        assert!(attmask_select(&tied, 1.5, MaskStrategy::High, 0.0, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn shape_contract(seed in any::<u64>(), depth in 1usize..3, heads in prop::sample::select(vec![1usize, 2, 4]), side in 1usize..4) {
            let cfg = VitConfig { patch_size: 2, embed_dim: 8, depth, heads, mlp_ratio: 2, input_size: 2 * side };
            let w = VitWeights::random(&cfg, seed, 0.3).unwrap();
            let grid = grid_from(&cfg, |x, y| (x * 7 + y * 3 + seed as usize).is_multiple_of(4));
            let out = vit_forward(&cfg, &w, &grid).unwrap();
            prop_assert_eq!(out.cls.len(), 8);
            prop_assert_eq!(out.patch_tokens.shape(), &[side * side, 8]);
            prop_assert!(out.patch_tokens.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn layer_norm_standardizes(rows in proptest::collection::vec(proptest::collection::vec(-50.0f32..50.0, 16), 1..6)) {
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            let x = Array2::from_shape_vec((rows.len(), 16), flat).unwrap();
            let out = layer_norm(&x.view(), &Norm::identity(16), LAYER_NORM_EPS);
            for (src, row) in x.rows().into_iter().zip(out.rows()) {
                let spread = src.iter().copied().fold(f32::MIN, f32::max) - src.iter().copied().fold(f32::MAX, f32::min);
                prop_assume!(spread > 0.1);
                let mean = row.sum() / 16.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 16.0;
                prop_assert!(mean.abs() < 1e-4);
                prop_assert!((var - 1.0).abs() < 1e-4);
            }
        }

        #[test]
        fn hint_is_subset_of_high(scores in proptest::collection::vec(0.0f32..1.0, 1..40), ratio in 0.0f64..=1.0, reveal in 0.0f64..=1.0, seed in any::<u64>()) {
            let attn = AttentionMap { per_head: Array2::zeros((1, scores.len() + 1)), mean_patch: scores };
            let high = attmask_select(&attn, ratio, MaskStrategy::High, reveal, seed).unwrap();
            let hint = attmask_select(&attn, ratio, MaskStrategy::Hint, reveal, seed).unwrap();
            prop_assert!(hint.is_subset(&high));
        }
    }
}
