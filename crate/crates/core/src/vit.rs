//! A small pre-norm Vision Transformer with low-rank adapter hooks on the
//! query/value projections, per-layer CLS attention records, and
//! attention-guided token pruning.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraVars;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl ViTConfig {
    /// Desk-scale backbone: 24×24 RGB, 4×4 patches (36 image tokens), 2 layers, D=64.
    pub fn desk() -> Self {
        ViTConfig { image_size: 24, patch_size: 4, channels: 3, depth: 2, embed_dim: 64, num_heads: 4, mlp_ratio: 4 }
    }

    /// ViT-B/16 shape (197 tokens, D=768, 12 layers); used for FLOPs accounting.
    pub fn vit_b16() -> Self {
        ViTConfig { image_size: 224, patch_size: 16, channels: 3, depth: 12, embed_dim: 768, num_heads: 12, mlp_ratio: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.num_heads)));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth, channels and mlp ratio must be positive".into()));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of image tokens `n`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `n + 1` including CLS.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// Number of image tokens kept out of `m` at keep fraction `keep`: `ceil(keep·m)`.
pub fn keep_count(m: usize, keep: f64) -> usize {
    // tolerance absorbs representation error such as 1 - 0.7 = 0.30000000000000004
    let k = (keep * m as f64 - 1e-9).ceil() as usize;
    k.clamp(1.min(m), m)
}

/// Layer index → fraction of image tokens kept after that layer's attention.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    keep: BTreeMap<usize, f64>,
}

impl PrunePlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, layer: usize, keep_fraction: f64) -> Result<Self> {
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(Error::Config(format!("keep fraction {} outside (0, 1]", keep_fraction)));
        }
        self.keep.insert(layer, keep_fraction);
        Ok(self)
    }

    /// Same keep fraction at every listed layer.
    pub fn uniform(layers: impl IntoIterator<Item = usize>, keep_fraction: f64) -> Result<Self> {
        layers.into_iter().try_fold(Self::new(), |p, l| p.with(l, keep_fraction))
    }

    /// Parses the table notation `"x:y, x2:y2"` where `y` is the fraction of
    /// tokens *pruned* at layer `x`. `"0:0.0"` means nothing is pruned.
    pub fn parse_pruned(spec: &str) -> Result<Self> {
        let mut plan = Self::new();
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (l, y) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("plan entry '{}' is not layer:ratio", part)))?;
            let layer: usize = l.trim().parse().map_err(|_| Error::Config(format!("bad layer '{}'", l)))?;
            let pruned: f64 = y.trim().parse().map_err(|_| Error::Config(format!("bad ratio '{}'", y)))?;
            if !(0.0..1.0).contains(&pruned) {
                return Err(Error::Config(format!("pruned fraction {} outside [0, 1)", pruned)));
            }
            if pruned > 0.0 {
                plan = plan.with(layer, 1.0 - pruned)?;
            }
        }
        Ok(plan)
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep_at(&self, layer: usize) -> Option<f64> {
        self.keep.get(&layer).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.keep.iter().map(|(l, k)| (*l, *k))
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if let Some((&l, _)) = self.keep.iter().find(|(l, _)| **l >= depth) {
            return Err(Error::Config(format!("plan prunes at layer {} but model has {} layers", l, depth)));
        }
        Ok(())
    }

    /// Per layer `(tokens entering attention, tokens entering the FFN)`,
    /// starting from `image_tokens` image tokens plus CLS.
    pub fn token_counts(&self, depth: usize, image_tokens: usize) -> Vec<(usize, usize)> {
        let mut m = image_tokens;
        (0..depth)
            .map(|l| {
                let attn = m + 1;
                if let Some(k) = self.keep_at(l) {
                    m = keep_count(m, k);
                }
                (attn, m + 1)
            })
            .collect()
    }

    /// Image tokens surviving every layer.
    pub fn final_image_tokens(&self, depth: usize, image_tokens: usize) -> usize {
        self.token_counts(depth, image_tokens).last().map_or(image_tokens, |c| c.1 - 1)
    }
}

/// `3·Na·D² + 2·Na²·D + 8·Nf·D²` for one layer whose attention sees `Na`
/// tokens and whose FFN sees `Nf` tokens.
pub fn layer_flops(attn_tokens: usize, ffn_tokens: usize, dim: usize) -> u64 {
    let (na, nf, d) = (attn_tokens as u64, ffn_tokens as u64, dim as u64);
    3 * na * d * d + 2 * na * na * d + 8 * nf * d * d
}

/// Σ over layers of `3N_l·D² + 2N_l²·D + 8N_l·D²`.
pub fn flops_estimate(cfg: &ViTConfig, seq_lengths: &[usize]) -> Result<u64> {
    if seq_lengths.len() != cfg.depth {
        return Err(Error::Dimension(format!("{} sequence lengths for {} layers", seq_lengths.len(), cfg.depth)));
    }
    Ok(seq_lengths.iter().map(|&n| layer_flops(n, n, cfg.embed_dim)).sum())
}

/// FLOPs of one forward under a pruning plan; pruning at layer `l` shrinks
/// that layer's FFN and every later layer.
pub fn plan_flops(cfg: &ViTConfig, plan: &PrunePlan) -> u64 {
    plan.token_counts(cfg.depth, cfg.num_patches())
        .into_iter()
        .map(|(a, f)| layer_flops(a, f, cfg.embed_dim))
        .sum()
}

/// FLOPs of one forward when only `image_tokens` image tokens (plus CLS) are
/// fed from the input onward.
pub fn sparse_input_flops(cfg: &ViTConfig, image_tokens: usize) -> u64 {
    flops_estimate(cfg, &vec![image_tokens + 1; cfg.depth]).expect("depth entries")
}

/// `softmax(q_cls·Kᵀ/√d)` for one head.
pub fn cls_attention<F: Scalar>(q_cls: &[F], keys: &Tensor<F>, d: usize) -> Result<Vec<F>> {
    if d == 0 || keys.ndim() != 2 || keys.shape()[1] != q_cls.len() {
        return Err(Error::Dimension(format!("cls_attention q {} keys {:?} d {}", q_cls.len(), keys.shape(), d)));
    }
    let scale = F::one() / F::c(d as f64).sqrt();
    let logits: Vec<F> = (0..keys.shape()[0])
        .map(|j| keys.row(j).iter().zip(q_cls).map(|(k, q)| *k * *q).sum::<F>() * scale)
        .collect();
    let mx = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = logits.iter().map(|l| (*l - mx).exp()).collect();
    let s: F = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<F: Scalar = f32> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

const BLOCK_PARAMS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

impl<F: Scalar> Block<F> {
    fn fields(&self) -> [&Tensor<F>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo,
            &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<F>; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }
}

/// Graph handles for one bound block.
#[derive(Clone, Debug)]
pub struct BlockVars {
    vars: [Var; 16],
}

impl BlockVars {
    fn get(&self, name: &str) -> Var {
        self.vars[BLOCK_PARAMS.iter().position(|n| *n == name).expect("block param")]
    }
}

/// Graph handles for a bound model.
#[derive(Clone, Debug)]
pub struct ViTVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub norm_g: Var,
    pub norm_b: Var,
}

impl ViTVars {
    /// Inverse of [`ViTVars::all`].
    pub fn from_vars(vars: &[Var], depth: usize) -> Result<Self> {
        if vars.len() != 6 + 16 * depth {
            return Err(Error::Count(format!("{} handles for a {}-layer model", vars.len(), depth)));
        }
        let blocks = (0..depth)
            .map(|l| BlockVars { vars: vars[4 + 16 * l..4 + 16 * (l + 1)].try_into().expect("16 handles") })
            .collect();
        let n = vars.len();
        Ok(ViTVars {
            patch_w: vars[0],
            patch_b: vars[1],
            cls: vars[2],
            pos: vars[3],
            blocks,
            norm_g: vars[n - 2],
            norm_b: vars[n - 1],
        })
    }

    /// Every bound handle in [`ViT::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            v.extend_from_slice(&b.vars);
        }
        v.push(self.norm_g);
        v.push(self.norm_b);
        v
    }
}

/// Which image tokens enter the network.
#[derive(Clone, Copy, Debug)]
pub enum TokenSelection<'a> {
    All,
    /// Per image, ascending patch indices to feed (equal count per image).
    Subset(&'a [Vec<usize>]),
}

#[derive(Clone, Debug)]
pub struct AttentionRecord<F> {
    pub layer: usize,
    /// Per image, head-averaged CLS attention over the current sequence.
    pub a_cls: Vec<Vec<F>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    /// Final-norm CLS embeddings, `[B, D]`.
    pub cls: Var,
    pub records: Vec<AttentionRecord<F>>,
    /// Per image, original patch indices surviving all pruning, ascending.
    pub kept_positions: Vec<Vec<usize>>,
    /// `(attention tokens, ffn tokens)` per layer, CLS included.
    pub token_counts: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViT<F: Scalar = f32> {
    pub cfg: ViTConfig,
    pub patch_w: Tensor<F>,
    pub patch_b: Tensor<F>,
    pub cls: Tensor<F>,
    pub pos: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub norm_g: Tensor<F>,
    pub norm_b: Tensor<F>,
}

impl<F: Scalar> ViT<F> {
    pub fn new(cfg: ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let hid = cfg.hidden_dim();
        let mut w = |shape: &[usize], std: f64| Tensor::randn(shape, 0.0, std, &mut rng);
        let patch_w = w(&[cfg.patch_dim(), d], (1.0 / cfg.patch_dim() as f64).sqrt());
        let cls = w(&[1, d], 0.02);
        let pos = w(&[cfg.seq_len(), d], 0.02);
        let proj = (1.0 / d as f64).sqrt();
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                ln1_g: Tensor::full(&[d], F::one()),
                ln1_b: Tensor::zeros(&[d]),
                wq: w(&[d, d], proj),
                bq: Tensor::zeros(&[d]),
                wk: w(&[d, d], proj),
                bk: Tensor::zeros(&[d]),
                wv: w(&[d, d], proj),
                bv: Tensor::zeros(&[d]),
                wo: w(&[d, d], proj / (2.0 * cfg.depth as f64).sqrt()),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], F::one()),
                ln2_b: Tensor::zeros(&[d]),
                w1: w(&[d, hid], proj),
                b1: Tensor::zeros(&[hid]),
                w2: w(&[hid, d], (1.0 / hid as f64).sqrt() / (2.0 * cfg.depth as f64).sqrt()),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(ViT {
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            cls,
            pos,
            blocks,
            norm_g: Tensor::full(&[d], F::one()),
            norm_b: Tensor::zeros(&[d]),
            cfg,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("cls".to_string(), &self.cls),
            ("pos".to_string(), &self.pos),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_PARAMS.iter().zip(b.fields()) {
                out.push((format!("blocks.{}.{}", l, name), t));
            }
        }
        out.push(("norm_g".to_string(), &self.norm_g));
        out.push(("norm_b".to_string(), &self.norm_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.norm_g);
        out.push(&mut self.norm_b);
        out
    }

    /// Rebuilds a model from named tensors as produced by [`ViT::named_params`].
    pub fn from_named(cfg: ViTConfig, mut named: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        let mut model = ViT::new(cfg, 0)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = named.remove(name).ok_or_else(|| Error::Validation(format!("missing model tensor {}", name)))?;
            if t.shape() != slot.shape() {
                return Err(Error::Dimension(format!("{}: {:?} vs {:?}", name, t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers all weights on `g`, tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> ViTVars {
        let mut leaf = |t: &Tensor<F>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let patch_w = leaf(&self.patch_w);
        let patch_b = leaf(&self.patch_b);
        let cls = leaf(&self.cls);
        let pos = leaf(&self.pos);
        let blocks = self.blocks.iter().map(|b| BlockVars { vars: b.fields().map(&mut leaf) }).collect();
        let norm_g = leaf(&self.norm_g);
        let norm_b = leaf(&self.norm_b);
        ViTVars { patch_w, patch_b, cls, pos, blocks, norm_g, norm_b }
    }

    /// Flat gather indices extracting the selected patches of every image in a
    /// `[B, C, H, W]` batch as rows of length `C·p·p` (channel, row, column order).
    fn patch_index(&self, batch: usize, selection: &[Vec<usize>]) -> Vec<Option<usize>> {
        let c = &self.cfg;
        let (p, hw, grid) = (c.patch_size, c.image_size, c.grid());
        let img = c.image_numel();
        let mut idx = Vec::new();
        for (b, sel) in selection.iter().enumerate().take(batch) {
            for &t in sel {
                let (pr, pc) = (t / grid, t % grid);
                for ch in 0..c.channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            idx.push(Some(b * img + ch * hw * hw + (pr * p + dy) * hw + pc * p + dx));
                        }
                    }
                }
            }
        }
        idx
    }

    /// Embeds a `[B, C, H, W]` image batch into `[B·(m+1), D]` tokens: the
    /// selected patches are linearly projected, CLS is prepended, and position
    /// encodings of the original patch locations are added.
    pub fn embed_tokens(
        &self,
        g: &mut Graph<F>,
        vars: &ViTVars,
        images: Var,
        selection: TokenSelection<'_>,
    ) -> Result<(Var, Vec<Vec<usize>>)> {
        let c = &self.cfg;
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != c.image_shape() {
            return Err(Error::Dimension(format!("images {:?} vs expected [B, {:?}]", shape, c.image_shape())));
        }
        let batch = shape[0];
        let n = c.num_patches();
        let positions: Vec<Vec<usize>> = match selection {
            TokenSelection::All => vec![(0..n).collect(); batch],
            TokenSelection::Subset(sel) => {
                if sel.len() != batch {
                    return Err(Error::Dimension(format!("{} selections for {} images", sel.len(), batch)));
                }
                let m = sel[0].len();
                for s in sel {
                    if s.len() != m || m == 0 {
                        return Err(Error::Dimension("token selections must be nonempty and equal-sized".into()));
                    }
                    if s.windows(2).any(|w| w[0] >= w[1]) || s.iter().any(|&t| t >= n) {
                        return Err(Error::Index("token selection must be strictly increasing patch indices".into()));
                    }
                }
                sel.to_vec()
            }
        };
        let m = positions[0].len();
        let idx = self.patch_index(batch, &positions);
        let patches = g.gather(images, &idx, &[batch * m, c.patch_dim()])?;
        let emb = g.linear(patches, vars.patch_w, vars.patch_b)?;
        let stacked = g.concat(&[vars.cls, emb])?;
        let mut rows = Vec::with_capacity(batch * (m + 1));
        let mut pos_rows = Vec::with_capacity(batch * (m + 1));
        for (b, sel) in positions.iter().enumerate() {
            rows.push(0);
            pos_rows.push(0);
            for (j, &t) in sel.iter().enumerate() {
                rows.push(1 + b * m + j);
                pos_rows.push(1 + t);
            }
        }
        let tokens = g.gather_rows(stacked, &rows)?;
        let pos = g.gather_rows(vars.pos, &pos_rows)?;
        Ok((g.add(tokens, pos)?, positions))
    }

    fn norm_affine(g: &mut Graph<F>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let h = g.layer_norm(x, LN_EPS)?;
        let h = g.mul_row(h, gamma)?;
        g.add_row(h, beta)
    }

    fn project(g: &mut Graph<F>, h: Var, w: Var, b: Var, lora: Option<(Var, Var)>) -> Result<Var> {
        let base = g.linear(h, w, b)?;
        match lora {
            None => Ok(base),
            Some((a, bm)) => {
                let low = g.matmul(h, a)?;
                let delta = g.matmul(low, bm)?;
                g.add(base, delta)
            }
        }
    }

    /// Full forward pass over a batch.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        vars: &ViTVars,
        images: Var,
        lora: Option<&LoraVars>,
        plan: Option<&PrunePlan>,
        selection: TokenSelection<'_>,
    ) -> Result<ForwardOutput<F>> {
        let c = &self.cfg;
        if let Some(p) = plan {
            p.validate(c.depth)?;
        }
        if let Some(l) = lora {
            if l.query.len() != c.depth || l.value.len() != c.depth {
                return Err(Error::Config("adapter depth does not match the model".into()));
            }
        }
        let batch = g.shape(images)[0];
        let (mut x, mut positions) = self.embed_tokens(g, vars, images, selection)?;
        let mut records = Vec::with_capacity(c.depth);
        let mut counts = Vec::with_capacity(c.depth);
        for (l, bv) in vars.blocks.iter().enumerate() {
            let seq_in = positions[0].len() + 1;
            let h = Self::norm_affine(g, x, bv.get("ln1_g"), bv.get("ln1_b"))?;
            let q = Self::project(g, h, bv.get("wq"), bv.get("bq"), lora.and_then(|a| a.query[l]))?;
            let k = Self::project(g, h, bv.get("wk"), bv.get("bk"), None)?;
            let v = Self::project(g, h, bv.get("wv"), bv.get("bv"), lora.and_then(|a| a.value[l]))?;
            let (ctx, a_cls) = g.attention(q, k, v, batch, c.num_heads)?;
            let o = g.linear(ctx, bv.get("wo"), bv.get("bo"))?;
            x = g.add(x, o)?;
            if let Some(keep) = plan.and_then(|p| p.keep_at(l)) {
                let m = positions[0].len();
                let k = keep_count(m, keep);
                let mut rows = Vec::with_capacity(batch * (k + 1));
                for (b, pos) in positions.iter_mut().enumerate() {
                    let kept = top_tokens(&a_cls[b][1..], k);
                    rows.push(b * (m + 1));
                    rows.extend(kept.iter().map(|&j| b * (m + 1) + 1 + j));
                    *pos = kept.iter().map(|&j| pos[j]).collect();
                }
                x = g.gather_rows(x, &rows)?;
            }
            records.push(AttentionRecord { layer: l, a_cls });
            counts.push((seq_in, positions[0].len() + 1));
            let h = Self::norm_affine(g, x, bv.get("ln2_g"), bv.get("ln2_b"))?;
            let f = g.linear(h, bv.get("w1"), bv.get("b1"))?;
            let f = g.gelu(f);
            let f = g.linear(f, bv.get("w2"), bv.get("b2"))?;
            x = g.add(x, f)?;
        }
        let seq = positions[0].len() + 1;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let cls = g.gather_rows(x, &cls_rows)?;
        let cls = Self::norm_affine(g, cls, vars.norm_g, vars.norm_b)?;
        Ok(ForwardOutput { cls, records, kept_positions: positions, token_counts: counts })
    }

    /// Gradient-free forward of a `[B, C, H, W]` batch; returns the `[B, D]`
    /// embeddings together with the forward bookkeeping.
    pub fn infer(
        &self,
        images: &Tensor<F>,
        adapter: Option<&crate::lora::LoRAAdapter<F>>,
        plan: Option<&PrunePlan>,
        selection: TokenSelection<'_>,
    ) -> Result<(Tensor<F>, ForwardOutput<F>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let lora = match adapter {
            Some(a) => {
                a.check_compatible(&self.cfg)?;
                Some(a.bind(&mut g, false))
            }
            None => None,
        };
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &vars, x, lora.as_ref(), plan, selection)?;
        Ok((g.value(out.cls).clone(), out))
    }

    /// Token embedding of a single `[C, H, W]` image: `[(n+1), D]`.
    pub fn patchify(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        if image.shape() != self.cfg.image_shape() {
            return Err(Error::Dimension(format!("image {:?} vs {:?}", image.shape(), self.cfg.image_shape())));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let img = g.constant(image.clone().reshape(&shape)?);
        let (tokens, _) = self.embed_tokens(&mut g, &vars, img, TokenSelection::All)?;
        Ok(g.value(tokens).clone())
    }
}

/// Indices of the `k` largest scores, ties to the lower index, returned ascending.
pub fn top_tokens<F: Scalar>(scores: &[F], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}
