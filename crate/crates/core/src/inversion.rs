//! Synthesizing surrogate images from a frozen adapter + head by gradient
//! descent in input space, with a feature-statistics prior and token masks.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{write_atomic, ClassificationHead, LoRAAdapter};
use crate::tensor::{Graph, Optimizer, Scalar, Targets, Tensor, Var};
use crate::vit::{plan_flops, PrunePlan, TokenSelection, ViT, ViTConfig};

pub const MIN_PROBE_IMAGES: usize = 64;
pub const STD_FLOOR: f64 = 1e-3;
const VAR_EPS: f64 = 1e-8;

/// Where a feature map lives in a flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layout {
    /// `[B, C, H, W]`, the raw image batch.
    Nchw,
    /// `[B·H·W, C]`, rows are spatial positions (conv output).
    Rows,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<F: Scalar = f32> {
    /// `[C_in·k·k, C_out]`.
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> ConvLayer<F> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, batch: usize, size: usize, layout: Layout) -> Vec<Option<usize>> {
        let (c, k, s, p) = (self.in_channels, self.kernel, self.stride, self.pad as isize);
        let out = self.out_size(size);
        let mut idx = Vec::with_capacity(batch * out * out * c * k * k);
        for b in 0..batch {
            for oy in 0..out {
                for ox in 0..out {
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * s + ky) as isize - p;
                                let x = (ox * s + kx) as isize - p;
                                if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                                    idx.push(None);
                                    continue;
                                }
                                let (y, x) = (y as usize, x as usize);
                                idx.push(Some(match layout {
                                    Layout::Nchw => ((b * c + ch) * size + y) * size + x,
                                    Layout::Rows => ((b * size + y) * size + x) * c + ch,
                                }));
                            }
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Fixed convolutional network whose activation statistics act as an image prior.
#[derive(Clone, Debug, PartialEq)]
pub struct StatExtractor<F: Scalar = f32> {
    pub layers: Vec<ConvLayer<F>>,
    pub in_channels: usize,
    pub image_size: usize,
}

impl<F: Scalar> StatExtractor<F> {
    /// Seeded 3-layer stride-2 network, channels `in → 8 → 16 → 16`, 3×3 kernels.
    pub fn seeded(in_channels: usize, image_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = in_channels;
        let layers = [8usize, 16, 16]
            .iter()
            .map(|&cout| {
                let fan_in = cin * 9;
                let layer = ConvLayer {
                    weight: Tensor::randn(&[fan_in, cout], 0.0, (2.0 / fan_in as f64).sqrt(), &mut rng),
                    bias: Tensor::zeros(&[cout]),
                    in_channels: cin,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                };
                cin = cout;
                layer
            })
            .collect();
        StatExtractor { layers, in_channels, image_size }
    }

    /// One 1×1 layer passing channel `channel` through unchanged.
    pub fn identity(in_channels: usize, image_size: usize, channel: usize) -> Self {
        let mut w = Tensor::zeros(&[in_channels, 1]);
        w.data_mut()[channel] = F::one();
        let layer = ConvLayer { weight: w, bias: Tensor::zeros(&[1]), in_channels, kernel: 1, stride: 1, pad: 0 };
        StatExtractor { layers: vec![layer], in_channels, image_size }
    }

    /// Per-layer conv outputs as `[B·H·W, C]` rows; ReLU sits between layers.
    pub fn features(&self, g: &mut Graph<F>, images: Var) -> Result<Vec<Var>> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels || shape[2] != self.image_size || shape[3] != self.image_size {
            return Err(Error::Dimension(format!(
                "extractor expects [B, {}, {}, {}], got {:?}",
                self.in_channels, self.image_size, self.image_size, shape
            )));
        }
        let batch = shape[0];
        let (mut x, mut size, mut layout) = (images, self.image_size, Layout::Nchw);
        let mut outs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.out_size(size);
            let idx = layer.im2col(batch, size, layout);
            let cols = g.gather(x, &idx, &[batch * out * out, layer.in_channels * layer.kernel * layer.kernel])?;
            let w = g.constant(layer.weight.clone());
            let b = g.constant(layer.bias.clone());
            let y = g.linear(cols, w, b)?;
            outs.push(y);
            x = if i + 1 < self.layers.len() { g.relu(y) } else { y };
            size = out;
            layout = Layout::Rows;
        }
        Ok(outs)
    }

    pub fn cast<G: Scalar>(&self) -> StatExtractor<G> {
        StatExtractor {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    in_channels: l.in_channels,
                    kernel: l.kernel,
                    stride: l.stride,
                    pad: l.pad,
                })
                .collect(),
            in_channels: self.in_channels,
            image_size: self.image_size,
        }
    }
}

/// Channel mean and `sqrt(var + eps)` of `[rows, C]` features.
fn channel_stats<F: Scalar>(g: &mut Graph<F>, feats: Var) -> Result<(Var, Var)> {
    let mean = g.mean_rows(feats)?;
    let neg = g.neg(mean);
    let centered = g.add_row(feats, neg)?;
    let sq = g.square(centered);
    let var = g.mean_rows(sq)?;
    let var = g.add_scalar(var, F::c(VAR_EPS));
    Ok((mean, g.sqrt(var)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatRegularizer<F: Scalar = f32> {
    pub extractor: StatExtractor<F>,
    pub target_mean: Vec<Tensor<F>>,
    pub target_std: Vec<Tensor<F>>,
}

/// Fits per-layer channel mean/std targets on a `[B, C, H, W]` probe batch.
pub fn fit_stat_regularizer<F: Scalar>(probe: &Tensor<F>, extractor: StatExtractor<F>) -> Result<StatRegularizer<F>> {
    let b = probe.shape().first().copied().unwrap_or(0);
    if b < MIN_PROBE_IMAGES {
        return Err(Error::Count(format!("{} probe images, need at least {}", b, MIN_PROBE_IMAGES)));
    }
    let mut g = Graph::new();
    let x = g.constant(probe.clone());
    let feats = extractor.features(&mut g, x)?;
    let mut target_mean = Vec::new();
    let mut target_std = Vec::new();
    for (l, f) in feats.into_iter().enumerate() {
        let (m, s) = channel_stats(&mut g, f)?;
        target_mean.push(g.value(m).clone());
        let mut std = g.value(s).clone();
        for (c, v) in std.data_mut().iter_mut().enumerate() {
            if *v < F::c(STD_FLOOR) {
                log::warn!("layer {} channel {} has near-zero variance; std clamped to {}", l, c, STD_FLOOR);
                *v = F::c(STD_FLOOR);
            }
        }
        target_std.push(std);
    }
    Ok(StatRegularizer { extractor, target_mean, target_std })
}

/// `Σ_l ‖μ_l(X) − μ̂_l‖₂ + ‖σ_l(X) − σ̂_l‖₂` on the graph.
pub fn stat_penalty<F: Scalar>(g: &mut Graph<F>, images: Var, reg: &StatRegularizer<F>) -> Result<Var> {
    let feats = reg.extractor.features(g, images)?;
    let mut total: Option<Var> = None;
    for (l, f) in feats.into_iter().enumerate() {
        let (m, s) = channel_stats(g, f)?;
        let tm = g.constant(reg.target_mean[l].clone());
        let ts = g.constant(reg.target_std[l].clone());
        let dm = g.sub(m, tm)?;
        let ds = g.sub(s, ts)?;
        let nm = g.norm(dm);
        let ns = g.norm(ds);
        let term = g.add(nm, ns)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("extractor has no layers".into()))
}

impl<F: Scalar> StatRegularizer<F> {
    pub fn cast<G: Scalar>(&self) -> StatRegularizer<G> {
        StatRegularizer {
            extractor: self.extractor.cast(),
            target_mean: self.target_mean.iter().map(|t| t.cast()).collect(),
            target_std: self.target_std.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Penalty value of a batch, without gradients.
    pub fn evaluate(&self, images: &Tensor<F>) -> Result<F> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let p = stat_penalty(&mut g, x, self)?;
        Ok(g.value(p).item())
    }
}

/// Binary patch-grid mask: 1 where the token survived pruning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    pub grid: usize,
    pub bits: Vec<u8>,
}

impl TokenMask {
    pub fn ones(grid: usize) -> Self {
        TokenMask { grid, bits: vec![1; grid * grid] }
    }

    pub fn from_positions(grid: usize, kept: &[usize]) -> Result<Self> {
        let mut bits = vec![0u8; grid * grid];
        for &p in kept {
            *bits.get_mut(p).ok_or_else(|| Error::Index(format!("position {} outside {}×{} grid", p, grid, grid)))? = 1;
        }
        Ok(TokenMask { grid, bits })
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    pub fn sparse_ratio(&self) -> f64 {
        1.0 - self.count_ones() as f64 / self.bits.len() as f64
    }

    /// Kept patch indices, ascending.
    pub fn positions(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, b)| **b == 1).map(|(i, _)| i).collect()
    }

    /// Mirror left-right, matching a horizontally flipped image.
    pub fn flip_horizontal(&self) -> Self {
        let g = self.grid;
        TokenMask { grid: g, bits: (0..g * g).map(|i| self.bits[(i / g) * g + (g - 1 - i % g)]).collect() }
    }
}

/// Zeros the pixels of every patch whose mask bit is 0.
pub fn apply_mask<F: Scalar>(image: &Tensor<F>, mask: &TokenMask, patch_size: usize) -> Result<Tensor<F>> {
    let s = image.shape();
    if s.len() != 3 || s[1] != s[2] || patch_size == 0 || s[1] != mask.grid * patch_size || mask.bits.len() != mask.grid * mask.grid {
        return Err(Error::Dimension(format!("mask grid {} × patch {} vs image {:?}", mask.grid, patch_size, s)));
    }
    let size = s[1];
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (y, x) = ((i / size) % size, i % size);
        if mask.bits[(y / patch_size) * mask.grid + x / patch_size] == 0 {
            *v = F::zero();
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha_r: f64,
    #[serde(default)]
    pub plan: Option<PrunePlan>,
    pub seed: u64,
    /// Record foreground/background CE every this many iterations (needs a plan).
    #[serde(default)]
    pub track_every: Option<usize>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig { iterations: 2000, lr: 0.25, batch_size: 16, alpha_r: 0.01, plan: None, seed: 0, track_every: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub ce: f64,
    pub stat: f64,
    pub total: f64,
}

/// CE of the teacher on the kept patches only and on the pruned patches only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionLoss {
    pub iteration: usize,
    pub foreground_ce: f64,
    pub background_ce: f64,
}

#[derive(Clone, Debug)]
pub struct InversionResult {
    /// `[B, C, H, W]`.
    pub images: Tensor<f32>,
    pub masks: Vec<TokenMask>,
    pub labels: Vec<usize>,
    pub trace: Vec<LossRecord>,
    pub regions: Vec<RegionLoss>,
    /// Model forward FLOPs per image per iteration.
    pub flops_per_image: u64,
}

/// Teacher mean CE of `images` against `labels`, gradient-free.
pub fn teacher_ce(
    vit: &ViT,
    adapter: &LoRAAdapter,
    head: &ClassificationHead,
    images: &Tensor<f32>,
    labels: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = vit.bind(&mut g, false);
    let lora = adapter.bind(&mut g, false);
    let (w, b) = head.bind(&mut g, false);
    let x = g.constant(images.clone());
    let out = vit.forward(&mut g, &vars, x, Some(&lora), None, TokenSelection::All)?;
    let logits = g.linear(out.cls, w, b)?;
    let ce = g.cross_entropy(logits, Targets::Indices(labels))?;
    Ok(g.value(ce).item() as f64)
}

fn region_loss(
    vit: &ViT,
    adapter: &LoRAAdapter,
    head: &ClassificationHead,
    images: &Tensor<f32>,
    masks: &[TokenMask],
    labels: &[usize],
    iteration: usize,
) -> Result<RegionLoss> {
    let p = vit.cfg.patch_size;
    let mut fg = Vec::with_capacity(masks.len());
    let mut bg = Vec::with_capacity(masks.len());
    for (i, m) in masks.iter().enumerate() {
        let img = images.index_axis0(i);
        let inverse = TokenMask { grid: m.grid, bits: m.bits.iter().map(|b| 1 - b).collect() };
        fg.push(apply_mask(&img, m, p)?);
        bg.push(apply_mask(&img, &inverse, p)?);
    }
    Ok(RegionLoss {
        iteration,
        foreground_ce: teacher_ce(vit, adapter, head, &Tensor::stack(&fg)?, labels)?,
        background_ce: teacher_ce(vit, adapter, head, &Tensor::stack(&bg)?, labels)?,
    })
}

/// Optimizes a Gaussian-initialized batch so the frozen teacher assigns each
/// image its round-robin label, under the statistics prior.
pub fn invert(
    vit: &ViT,
    adapter: &LoRAAdapter,
    head: &ClassificationHead,
    cfg: &InversionConfig,
    reg: Option<&StatRegularizer>,
) -> Result<InversionResult> {
    adapter.check_compatible(&vit.cfg)?;
    head.validate()?;
    if head.weight.shape()[0] != vit.cfg.embed_dim {
        return Err(Error::Incompatible(format!("head input {} vs embed dim {}", head.weight.shape()[0], vit.cfg.embed_dim)));
    }
    if cfg.iterations == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("inversion needs at least one iteration and one image".into()));
    }
    if let Some(p) = &cfg.plan {
        p.validate(vit.cfg.depth)?;
    }
    let vc = &vit.cfg;
    let n_classes = head.num_classes();
    let labels: Vec<usize> = (0..cfg.batch_size).map(|i| i % n_classes).collect();
    let mut shape = vec![cfg.batch_size];
    shape.extend_from_slice(&vc.image_shape());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::randn(&shape, 0.0, 1.0, &mut rng);
    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut regions = Vec::new();
    let mut masks = Vec::new();

    for it in 0..cfg.iterations {
        let mut g = Graph::new();
        let vars = vit.bind(&mut g, false);
        let lora = adapter.bind(&mut g, false);
        let (w, b) = head.bind(&mut g, false);
        let xv = g.param(x.clone());
        let out = vit.forward(&mut g, &vars, xv, Some(&lora), cfg.plan.as_ref(), TokenSelection::All)?;
        let logits = g.linear(out.cls, w, b)?;
        let ce = g.cross_entropy(logits, Targets::Indices(&labels))?;
        let (loss, stat) = match reg.filter(|_| cfg.alpha_r != 0.0) {
            Some(r) => {
                let s = stat_penalty(&mut g, xv, r)?;
                let scaled = g.scale(s, cfg.alpha_r as f32);
                (g.add(ce, scaled)?, g.value(s).item() as f64)
            }
            None => (ce, 0.0),
        };
        let record = LossRecord { iteration: it, ce: g.value(ce).item() as f64, stat, total: g.value(loss).item() as f64 };
        if !record.total.is_finite() {
            return Err(Error::Divergence { iteration: it, detail: format!("loss {} (ce {}, stat {})", record.total, record.ce, record.stat) });
        }
        masks = out
            .kept_positions
            .iter()
            .map(|k| TokenMask::from_positions(vc.grid(), k))
            .collect::<Result<Vec<_>>>()?;
        if let (Some(every), Some(_)) = (cfg.track_every, &cfg.plan) {
            if it % every.max(1) == 0 || it + 1 == cfg.iterations {
                regions.push(region_loss(vit, adapter, head, &x, &masks, &labels, it)?);
            }
        }
        trace.push(record);
        g.backward(loss)?;
        let grad = g.take_grad(xv);
        opt.step(&mut [&mut x], &[grad.as_ref()])?;
        if !x.is_finite() {
            return Err(Error::Divergence { iteration: it, detail: "non-finite image after update".into() });
        }
    }

    let flops_per_image = cfg.plan.as_ref().map_or_else(|| plan_flops(vc, &PrunePlan::new()), |p| plan_flops(vc, p));
    Ok(InversionResult { images: x, masks, labels, trace, regions, flops_per_image })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    /// `[M, C, H, W]`.
    pub images: Tensor<f32>,
    pub masks: Vec<TokenMask>,
    pub labels: Vec<usize>,
}

impl TaskSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTask {
    pub support: TaskSplit,
    pub query: TaskSplit,
    pub class_names: Vec<String>,
    pub source_ids: Vec<String>,
    /// Per support/query image, the generating source index into `source_ids`.
    pub support_source: Vec<usize>,
    pub query_source: Vec<usize>,
}

impl GeneratedTask {
    /// Splits one teacher's generated batch into a task.
    pub fn from_inversion(result: &InversionResult, class_names: Vec<String>, source_id: String, k: usize, q: usize) -> Result<Self> {
        let (support, query) = build_task(&result.images, &result.masks, &result.labels, class_names.len(), k, q)?;
        Ok(GeneratedTask {
            support_source: vec![0; support.len()],
            query_source: vec![0; query.len()],
            support,
            query,
            class_names,
            source_ids: vec![source_id],
        })
    }

    pub fn n_way(&self) -> usize {
        self.class_names.len()
    }
}

/// First `k` images of each class (by generation index) go to the support
/// set, the next `q` to the query set.
pub fn build_task(
    images: &Tensor<f32>,
    masks: &[TokenMask],
    labels: &[usize],
    n_way: usize,
    k: usize,
    q: usize,
) -> Result<(TaskSplit, TaskSplit)> {
    let b = labels.len();
    if images.shape().first() != Some(&b) || masks.len() != b {
        return Err(Error::Dimension(format!("{} labels, {} masks, images {:?}", b, masks.len(), images.shape())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_way) {
        return Err(Error::Label(format!("label {} outside {} classes", bad, n_way)));
    }
    let mut seen = vec![0usize; n_way];
    let (mut sup, mut qry) = (Vec::new(), Vec::new());
    for (i, &l) in labels.iter().enumerate() {
        if seen[l] < k {
            sup.push(i);
        } else if seen[l] < k + q {
            qry.push(i);
        }
        seen[l] += 1;
    }
    if let Some((c, have)) = seen.iter().enumerate().find(|(_, n)| **n < k + q) {
        return Err(Error::Count(format!("class {} has {} images, need {}", c, have, k + q)));
    }
    let split = |idx: &[usize]| -> Result<TaskSplit> {
        Ok(TaskSplit {
            images: Tensor::stack(&idx.iter().map(|&i| images.index_axis0(i)).collect::<Vec<_>>())?,
            masks: idx.iter().map(|&i| masks[i].clone()).collect(),
            labels: idx.iter().map(|&i| labels[i]).collect(),
        })
    };
    Ok((split(&sup)?, split(&qry)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ItemEntry {
    index: usize,
    label: usize,
    source: usize,
    sparse_ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TaskManifest {
    format: u32,
    n_way: usize,
    image_shape: Vec<usize>,
    grid: usize,
    class_names: Vec<String>,
    source_ids: Vec<String>,
    support: Vec<ItemEntry>,
    query: Vec<ItemEntry>,
}

fn f32_bytes(data: impl IntoIterator<Item = f32>) -> Vec<u8> {
    data.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != 4 * expect {
        return Err(Error::Validation(format!("{}: {} bytes, expected {}", path.display(), bytes.len(), 4 * expect)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

/// Writes `manifest.json` plus `{split}_{index}.img` / `.mask` raw f32 payloads.
pub fn write_task(dir: &Path, task: &GeneratedTask) -> Result<()> {
    fs::create_dir_all(dir)?;
    let image_shape = task.support.images.shape()[1..].to_vec();
    let grid = task.support.masks.first().map_or(0, |m| m.grid);
    let entries = |name: &str, split: &TaskSplit, sources: &[usize]| -> Result<Vec<ItemEntry>> {
        let mut out = Vec::with_capacity(split.len());
        for i in 0..split.len() {
            write_atomic(&dir.join(format!("{}_{:04}.img", name, i)), &f32_bytes(split.images.index_axis0(i).into_data()))?;
            write_atomic(
                &dir.join(format!("{}_{:04}.mask", name, i)),
                &f32_bytes(split.masks[i].bits.iter().map(|b| *b as f32)),
            )?;
            out.push(ItemEntry { index: i, label: split.labels[i], source: sources[i], sparse_ratio: split.masks[i].sparse_ratio() });
        }
        Ok(out)
    };
    let support = entries("support", &task.support, &task.support_source)?;
    let query = entries("query", &task.query, &task.query_source)?;
    let manifest = TaskManifest {
        format: 1,
        n_way: task.n_way(),
        image_shape,
        grid,
        class_names: task.class_names.clone(),
        source_ids: task.source_ids.clone(),
        support,
        query,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

pub fn read_task(dir: &Path) -> Result<GeneratedTask> {
    let manifest: TaskManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let numel: usize = manifest.image_shape.iter().product();
    let cells = manifest.grid * manifest.grid;
    let split = |name: &str, items: &[ItemEntry]| -> Result<(TaskSplit, Vec<usize>)> {
        let mut images = Vec::with_capacity(items.len());
        let mut masks = Vec::with_capacity(items.len());
        for e in items {
            let data = read_f32(&dir.join(format!("{}_{:04}.img", name, e.index)), numel)?;
            images.push(Tensor::new(manifest.image_shape.clone(), data)?);
            let bits = read_f32(&dir.join(format!("{}_{:04}.mask", name, e.index)), cells)?;
            masks.push(TokenMask { grid: manifest.grid, bits: bits.iter().map(|b| (*b != 0.0) as u8).collect() });
        }
        let labels = items.iter().map(|e| e.label).collect();
        Ok((TaskSplit { images: Tensor::stack(&images)?, masks, labels }, items.iter().map(|e| e.source).collect()))
    };
    let (support, support_source) = split("support", &manifest.support)?;
    let (query, query_source) = split("query", &manifest.query)?;
    Ok(GeneratedTask { support, query, class_names: manifest.class_names, source_ids: manifest.source_ids, support_source, query_source })
}

/// Masks for a batch produced without pruning.
pub fn full_masks(cfg: &ViTConfig, count: usize) -> Vec<TokenMask> {
    vec![TokenMask::ones(cfg.grid()); count]
}
