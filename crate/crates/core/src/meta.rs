//! Meta-LoRA distillation: prototype classification, KL distillation against
//! teacher adapters, cross-task interpolation, and the outer training loop.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{GeneratedTask, TaskSplit, TokenMask};
use crate::lora::{ClassificationHead, LoRAAdapter, LoraVars};
use crate::tensor::{Graph, LrSchedule, Optimizer, Targets, Tensor, Var};
use crate::vit::{sparse_input_flops, TokenSelection, ViT, ViTConfig, ViTVars};

/// The distilled adapter, attached at a subset of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaLoRA {
    pub adapter: LoRAAdapter,
    /// Per layer, whether the adapter is attached and trained there.
    pub layers: Vec<bool>,
}

impl MetaLoRA {
    pub fn new(cfg: &ViTConfig, rank: usize, seed: u64) -> Result<Self> {
        Ok(MetaLoRA { adapter: LoRAAdapter::new(cfg, rank, seed)?, layers: vec![true; cfg.depth] })
    }

    /// Attached only at the listed layers.
    pub fn with_layers(cfg: &ViTConfig, rank: usize, seed: u64, layers: &[usize]) -> Result<Self> {
        let mut m = Self::new(cfg, rank, seed)?;
        if let Some(l) = layers.iter().find(|l| **l >= cfg.depth) {
            return Err(Error::Config(format!("meta adapter layer {} outside depth {}", l, cfg.depth)));
        }
        m.layers = (0..cfg.depth).map(|l| layers.contains(&l)).collect();
        Ok(m)
    }

    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> LoraVars {
        let mut leaf = |t: &Tensor<f32>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let mut site = |pairs: &[(Tensor<f32>, Tensor<f32>)]| -> Vec<Option<(Var, Var)>> {
            pairs.iter().zip(&self.layers).map(|((a, b), on)| on.then(|| (leaf(a), leaf(b)))).collect()
        };
        let query = site(&self.adapter.query);
        let value = site(&self.adapter.value);
        LoraVars { query, value }
    }

    /// Attached parameters in [`LoraVars::all`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let layers = &self.layers;
        let a = &mut self.adapter;
        a.query
            .iter_mut()
            .chain(a.value.iter_mut())
            .enumerate()
            .filter(|(i, _)| layers[i % layers.len()])
            .flat_map(|(_, (x, y))| [x, y])
            .collect()
    }

    /// Adapter with the detached layers' `B` zeroed, for plain inference.
    pub fn effective_adapter(&self) -> LoRAAdapter {
        let mut a = self.adapter.clone();
        for (l, on) in self.layers.iter().enumerate() {
            if !on {
                for pair in [&mut a.query[l], &mut a.value[l]] {
                    pair.1 = Tensor::zeros(pair.1.shape());
                }
            }
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// `[N, D]`.
    pub centers: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// `softmax(−‖e − c_i‖)` (or squared distance) for each query row.
pub fn proto_probs<F: crate::tensor::Scalar>(queries: &Tensor<F>, centers: &Tensor<F>, squared: bool) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let c = g.constant(centers.clone());
    let logits = proto_logits(&mut g, q, c, squared)?;
    let p = g.softmax(logits, 1)?;
    Ok(g.value(p).clone())
}

pub fn proto_logits<F: crate::tensor::Scalar>(g: &mut Graph<F>, queries: Var, centers: Var, squared: bool) -> Result<Var> {
    let d = g.pairwise_distance(queries, centers, squared)?;
    Ok(g.neg(d))
}

fn selections(masks: Option<&[TokenMask]>) -> Result<Option<Vec<Vec<usize>>>> {
    let Some(masks) = masks else { return Ok(None) };
    let sel: Vec<Vec<usize>> = masks.iter().map(|m| m.positions()).collect();
    if sel.iter().any(|s| s.len() != sel[0].len()) {
        return Err(Error::Dimension("sparse batches need equal kept-token counts per image".into()));
    }
    Ok(Some(sel))
}

/// Student forward FLOPs for a batch under the given masks.
pub fn embed_flops(cfg: &ViTConfig, count: usize, masks: Option<&[TokenMask]>) -> u64 {
    match masks {
        Some(ms) => ms.iter().map(|m| sparse_input_flops(cfg, m.count_ones())).sum(),
        None => count as u64 * sparse_input_flops(cfg, cfg.num_patches()),
    }
}

/// CLS embeddings of a batch on `g`, sparse when masks are given.
fn embed_on(
    g: &mut Graph<f32>,
    vit: &ViT,
    vars: &ViTVars,
    lora: &LoraVars,
    images: &Tensor<f32>,
    masks: Option<&[TokenMask]>,
) -> Result<Var> {
    let sel = selections(masks)?;
    let x = g.constant(images.clone());
    let selection = match &sel {
        Some(s) => TokenSelection::Subset(s),
        None => TokenSelection::All,
    };
    Ok(vit.forward(g, vars, x, Some(lora), None, selection)?.cls)
}

/// Gradient-free embeddings of a batch.
pub fn embed(vit: &ViT, meta: &MetaLoRA, images: &Tensor<f32>, masks: Option<&[TokenMask]>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let vars = vit.bind(&mut g, false);
    let lora = meta.bind(&mut g, false);
    let e = embed_on(&mut g, vit, &vars, &lora, images, masks)?;
    Ok(g.value(e).clone())
}

/// Class centers of the support set.
pub fn embed_support(vit: &ViT, meta: &MetaLoRA, support: &TaskSplit, n_way: usize, sparse: bool) -> Result<PrototypeSet> {
    let e = embed(vit, meta, &support.images, sparse.then_some(&support.masks[..]))?;
    let mut g = Graph::new();
    let ev = g.constant(e);
    let c = g.segment_mean(ev, &support.labels, n_way)?;
    Ok(PrototypeSet { centers: g.value(c).clone(), labels: (0..n_way).collect() })
}

/// Class probabilities of query images against prototypes.
pub fn proto_predict(
    vit: &ViT,
    meta: &MetaLoRA,
    protos: &PrototypeSet,
    queries: &Tensor<f32>,
    masks: Option<&[TokenMask]>,
    squared: bool,
) -> Result<Tensor<f32>> {
    if protos.labels.is_empty() {
        return Err(Error::Count("no prototypes".into()));
    }
    proto_probs(&embed(vit, meta, queries, masks)?, &protos.centers, squared)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub sparse: bool,
    pub squared_distance: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Student forward FLOPs of this step.
    pub flops: u64,
}

/// Optional trainable backbone carried through a step.
pub struct Backbone<'a> {
    pub vit: &'a mut ViT,
    pub opt: &'a mut Optimizer,
}

/// Student logits on the query set, prototypes from the support set, all on one graph.
fn episode_logits(
    g: &mut Graph<f32>,
    vit: &ViT,
    vars: &ViTVars,
    lora: &LoraVars,
    task: &GeneratedTask,
    opts: StepOptions,
) -> Result<(Var, u64)> {
    let n = task.n_way();
    let (s, q) = (&task.support, &task.query);
    let images = cat_batches(&s.images, &q.images)?;
    let masks: Vec<TokenMask> = s.masks.iter().chain(&q.masks).cloned().collect();
    let masks = opts.sparse.then_some(&masks[..]);
    let flops = embed_flops(&vit.cfg, s.len() + q.len(), masks);
    let e = embed_on(g, vit, vars, lora, &images, masks)?;
    let se = g.gather_rows(e, &(0..s.len()).collect::<Vec<_>>())?;
    let qe = g.gather_rows(e, &(s.len()..s.len() + q.len()).collect::<Vec<_>>())?;
    let centers = g.segment_mean(se, &s.labels, n)?;
    Ok((proto_logits(g, qe, centers, opts.squared_distance)?, flops))
}

/// Joins two `[M, ...]` batches along the first axis.
fn cat_batches(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Dimension(format!("cannot join batches {:?} and {:?}", a.shape(), b.shape())));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    Tensor::new(shape, a.data().iter().chain(b.data()).copied().collect())
}

fn apply_step(
    g: &mut Graph<f32>,
    loss: Var,
    meta: &mut MetaLoRA,
    lora: &LoraVars,
    opt: &mut Optimizer,
    backbone: Option<(&mut Backbone<'_>, &ViTVars)>,
) -> Result<()> {
    g.backward(loss)?;
    let grads: Vec<Option<Tensor<f32>>> = lora.all().into_iter().map(|v| g.take_grad(v)).collect();
    let mut params = meta.params_mut();
    opt.step(&mut params, &grads.iter().map(|x| x.as_ref()).collect::<Vec<_>>())?;
    if let Some((bb, vars)) = backbone {
        let grads: Vec<Option<Tensor<f32>>> = vars.all().into_iter().map(|v| g.take_grad(v)).collect();
        let mut params = bb.vit.params_mut();
        bb.opt.step(&mut params, &grads.iter().map(|x| x.as_ref()).collect::<Vec<_>>())?;
    }
    Ok(())
}

fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("{} loss is {}", what, loss)))
    }
}

/// Teacher class probabilities on the unmasked query images.
pub fn teacher_probs(vit: &ViT, adapter: &LoRAAdapter, head: &ClassificationHead, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let vars = vit.bind(&mut g, false);
    let lora = adapter.bind(&mut g, false);
    let (w, b) = head.bind(&mut g, false);
    let x = g.constant(images.clone());
    let out = vit.forward(&mut g, &vars, x, Some(&lora), None, TokenSelection::All)?;
    let logits = g.linear(out.cls, w, b)?;
    let p = g.softmax(logits, 1)?;
    Ok(g.value(p).clone())
}

/// One KL step pulling the student's prototype predictions toward the teacher's.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    vit: &ViT,
    meta: &mut MetaLoRA,
    teacher: (&LoRAAdapter, &ClassificationHead),
    teacher_vit: &ViT,
    task: &GeneratedTask,
    opt: &mut Optimizer,
    opts: StepOptions,
    backbone: Option<&mut Backbone<'_>>,
) -> Result<StepStats> {
    let (adapter, head) = teacher;
    if head.class_names != task.class_names {
        return Err(Error::Label(format!("task classes {:?} vs head classes {:?}", task.class_names, head.class_names)));
    }
    let target = teacher_probs(teacher_vit, adapter, head, &task.query.images)?;
    let mut g = Graph::new();
    let vars = vit.bind(&mut g, backbone.is_some());
    let lora = meta.bind(&mut g, true);
    let (logits, flops) = episode_logits(&mut g, vit, &vars, &lora, task, opts)?;
    let p = g.softmax(logits, 1)?;
    let loss = g.kl_divergence(p, &target)?;
    let value = g.value(loss).item() as f64;
    check_finite(value, "distillation")?;
    apply_step(&mut g, loss, meta, &lora, opt, backbone.map(|b| (b, &vars)))?;
    Ok(StepStats { loss: value, flops })
}

/// One CE step on an interpolated task's relabeled queries.
pub fn interpolation_step(
    vit: &ViT,
    meta: &mut MetaLoRA,
    task: &GeneratedTask,
    opt: &mut Optimizer,
    opts: StepOptions,
    backbone: Option<&mut Backbone<'_>>,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let vars = vit.bind(&mut g, backbone.is_some());
    let lora = meta.bind(&mut g, true);
    let (logits, flops) = episode_logits(&mut g, vit, &vars, &lora, task, opts)?;
    let loss = g.cross_entropy(logits, Targets::Indices(&task.query.labels))?;
    let value = g.value(loss).item() as f64;
    check_finite(value, "interpolation")?;
    apply_step(&mut g, loss, meta, &lora, opt, backbone.map(|b| (b, &vars)))?;
    Ok(StepStats { loss: value, flops })
}

/// Loss of a task without updating anything.
pub fn episode_loss(vit: &ViT, meta: &MetaLoRA, task: &GeneratedTask, opts: StepOptions) -> Result<f64> {
    let mut g = Graph::new();
    let vars = vit.bind(&mut g, false);
    let lora = meta.bind(&mut g, false);
    let (logits, _) = episode_logits(&mut g, vit, &vars, &lora, task, opts)?;
    let loss = g.cross_entropy(logits, Targets::Indices(&task.query.labels))?;
    Ok(g.value(loss).item() as f64)
}

fn pick(split: &TaskSplit, label: usize, count: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = split.labels.iter().enumerate().filter(|(_, l)| **l == label).map(|(i, _)| i).take(count).collect();
    if idx.len() < count {
        return Err(Error::Count(format!("class {} has {} generated images, need {}", label, idx.len(), count)));
    }
    Ok(idx)
}

/// Builds an `n_way` task from classes of at least two different sources.
pub fn interpolate_task(
    tasks: &[&GeneratedTask],
    n_way: usize,
    k: usize,
    q: usize,
    seed: u64,
    allow_same_source: bool,
) -> Result<GeneratedTask> {
    let min_sources = if allow_same_source { 1 } else { 2 };
    if tasks.len() < min_sources || n_way == 0 {
        return Err(Error::Count(format!("{} source tasks, need at least {}", tasks.len(), min_sources)));
    }
    let names: BTreeSet<&str> = tasks.iter().flat_map(|t| t.class_names.iter().map(String::as_str)).collect();
    if names.len() < n_way {
        return Err(Error::Count(format!("{} distinct classes across sources, need {}", names.len(), n_way)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<(usize, usize)> =
        tasks.iter().enumerate().flat_map(|(t, task)| (0..task.n_way()).map(move |c| (t, c))).collect();
    pool.shuffle(&mut rng);
    let name = |p: (usize, usize)| tasks[p.0].class_names[p.1].as_str();
    let first = pool[0];
    let mut chosen = vec![first];
    if !allow_same_source {
        let second = pool
            .iter()
            .copied()
            .find(|p| p.0 != first.0 && name(*p) != name(first))
            .ok_or_else(|| Error::Count("no second source with a different class".into()))?;
        chosen.push(second);
    }
    for p in pool.iter().copied() {
        if chosen.len() == n_way {
            break;
        }
        if !chosen.iter().any(|c| name(*c) == name(p)) {
            chosen.push(p);
        }
    }
    if chosen.len() < n_way {
        return Err(Error::Count(format!("only {} distinct classes could be drawn", chosen.len())));
    }
    chosen.truncate(n_way);
    chosen.shuffle(&mut rng);

    let mut source_ids: Vec<String> = Vec::new();
    let mut gather = |split_of: fn(&GeneratedTask) -> &TaskSplit, count: usize| -> Result<(TaskSplit, Vec<usize>)> {
        let (mut imgs, mut masks, mut labels, mut srcs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (new_label, &(t, c)) in chosen.iter().enumerate() {
            let split = split_of(tasks[t]);
            let id = tasks[t].source_ids.first().cloned().unwrap_or_else(|| format!("task{}", t));
            let src = match source_ids.iter().position(|s| *s == id) {
                Some(i) => i,
                None => {
                    source_ids.push(id);
                    source_ids.len() - 1
                }
            };
            for i in pick(split, c, count)? {
                imgs.push(split.images.index_axis0(i));
                masks.push(split.masks[i].clone());
                labels.push(new_label);
                srcs.push(src);
            }
        }
        Ok((TaskSplit { images: Tensor::stack(&imgs)?, masks, labels }, srcs))
    };
    let (support, support_source) = gather(|t| &t.support, k)?;
    let (query, query_source) = gather(|t| &t.query, q)?;
    let class_names = chosen.iter().map(|p| name(*p).to_string()).collect();
    Ok(GeneratedTask { support, query, class_names, source_ids, support_source, query_source })
}

/// Random horizontal flip of each image together with its mask.
pub fn flip_augment(task: &GeneratedTask, rng: &mut impl Rng) -> Result<GeneratedTask> {
    let mut flip = |split: &TaskSplit| -> Result<TaskSplit> {
        let mut imgs = Vec::with_capacity(split.len());
        let mut masks = Vec::with_capacity(split.len());
        for i in 0..split.len() {
            let img = split.images.index_axis0(i);
            if rng.random_bool(0.5) {
                let s = img.shape().to_vec();
                let w = s[2];
                imgs.push(Tensor::from_fn(&s, |j| img.data()[j - j % w + (w - 1 - j % w)]));
                masks.push(split.masks[i].flip_horizontal());
            } else {
                imgs.push(img);
                masks.push(split.masks[i].clone());
            }
        }
        Ok(TaskSplit { images: Tensor::stack(&imgs)?, masks, labels: split.labels.clone() })
    };
    let support = flip(&task.support)?;
    let query = flip(&task.query)?;
    Ok(GeneratedTask { support, query, ..task.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaTrainConfig {
    pub iterations: usize,
    pub p_interp: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub sparse: bool,
    pub rank: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub squared_distance: bool,
    #[serde(default = "yes")]
    pub flip: bool,
    /// Layers carrying the meta adapter; all when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    /// Also update the backbone weights.
    #[serde(default)]
    pub train_backbone: bool,
}

fn yes() -> bool {
    true
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            iterations: 300,
            p_interp: 0.3,
            n_way: 2,
            k_shot: 1,
            q_query: 3,
            sparse: false,
            rank: 4,
            schedule: LrSchedule::default(),
            seed: 0,
            squared_distance: false,
            flip: true,
            layers: None,
            train_backbone: false,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_interp) {
            return Err(Error::Config(format!("p_interp {} outside [0, 1]", self.p_interp)));
        }
        if self.n_way < 2 || self.k_shot == 0 || self.q_query == 0 || self.rank == 0 {
            return Err(Error::Config("n_way ≥ 2, k_shot, q_query and rank ≥ 1 required".into()));
        }
        Ok(())
    }
}

/// A pre-tuned teacher with its generated task.
pub struct Teacher<'a> {
    pub id: String,
    pub adapter: &'a LoRAAdapter,
    pub head: &'a ClassificationHead,
    pub task: &'a GeneratedTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub branch: String,
    pub teacher: Option<String>,
    pub loss: f64,
    pub lr: f64,
    pub step_flops: u64,
    pub wall_ms: f64,
}

pub struct MetaOutcome {
    pub meta: MetaLoRA,
    pub log: Vec<LogRecord>,
    /// Updated backbone when the backbone was trained too.
    pub backbone: Option<ViT>,
}

/// Outer loop: per iteration, an interpolation step with probability
/// `p_interp`, else a distillation step against a uniformly drawn teacher.
pub fn meta_train(vit: &ViT, teachers: &[Teacher<'_>], cfg: &MetaTrainConfig, mut log_sink: Option<&mut dyn Write>) -> Result<MetaOutcome> {
    cfg.validate()?;
    if teachers.is_empty() {
        return Err(Error::State("no teachers or generated tasks to meta-train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut meta = match &cfg.layers {
        Some(l) => MetaLoRA::with_layers(&vit.cfg, cfg.rank, cfg.seed, l)?,
        None => MetaLoRA::new(&vit.cfg, cfg.rank, cfg.seed)?,
    };
    let mut opt = Optimizer::adam(cfg.schedule.lr_at(0))?;
    let mut student_vit = cfg.train_backbone.then(|| vit.clone());
    let mut bb_opt = Optimizer::adam(cfg.schedule.lr_at(0))?;
    let opts = StepOptions { sparse: cfg.sparse, squared_distance: cfg.squared_distance };
    let tasks: Vec<&GeneratedTask> = teachers.iter().map(|t| t.task).collect();
    let mut log = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let start = Instant::now();
        let lr = cfg.schedule.lr_at(it);
        opt.set_lr(lr);
        bb_opt.set_lr(lr);
        let interp = tasks.len() >= 2 && rng.random_bool(cfg.p_interp);
        let (branch, teacher_id, task) = if interp {
            let t = interpolate_task(&tasks, cfg.n_way, cfg.k_shot, cfg.q_query, rng.random(), false)?;
            ("interpolation", None, t)
        } else {
            let ti = rng.random_range(0..teachers.len());
            ("distill", Some(ti), teachers[ti].task.clone())
        };
        let task = if cfg.flip { flip_augment(&task, &mut rng)? } else { task };
        let snapshot = student_vit.clone();
        let model = snapshot.as_ref().unwrap_or(vit);
        let mut bb = student_vit.as_mut().map(|v| Backbone { vit: v, opt: &mut bb_opt });
        let stats = match teacher_id {
            None => interpolation_step(model, &mut meta, &task, &mut opt, opts, bb.as_mut())?,
            Some(ti) => {
                let t = &teachers[ti];
                distill_step(model, &mut meta, (t.adapter, t.head), vit, &task, &mut opt, opts, bb.as_mut())?
            }
        };
        let rec = LogRecord {
            iteration: it,
            branch: branch.into(),
            teacher: teacher_id.map(|i| teachers[i].id.clone()),
            loss: stats.loss,
            lr,
            step_flops: stats.flops,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = log_sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        log.push(rec);
    }
    Ok(MetaOutcome { meta, log, backbone: student_vit })
}
