use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Split, ToyDataset};
use crate::error::{Error, Result};
use crate::lora::{ClassificationHead, LoRAAdapter};
use crate::tensor::{argmax, Graph, Optimizer, Targets, Tensor};
use crate::vit::{TokenSelection, ViT, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { steps: 60, batch_size: 32, lr: 1e-3 }
    }
}

/// Supervised pretraining of the whole ViT plus a throwaway linear head on
/// a meta-train split. Returns the backbone and its final train accuracy.
pub fn pretrain_backbone(cfg: &ViTConfig, ds: &ToyDataset, bc: &BackboneConfig, seed: u64) -> Result<(ViT, f64)> {
    if ds.split != Split::MetaTrain {
        return Err(Error::Validation("backbone pretraining uses the meta-train split only".into()));
    }
    if bc.batch_size == 0 || ds.is_empty() {
        return Err(Error::Count("pretraining needs a non-empty batch and dataset".into()));
    }
    let mut vit = ViT::new(cfg.clone(), seed)?;
    let mut head = ClassificationHead::new(cfg.embed_dim, ds.class_names.clone(), seed.wrapping_add(1))?;
    let mut opt = Optimizer::adam(bc.lr)?;
    let mut head_opt = Optimizer::adam(bc.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut cursor = order.len();
    for step in 0..bc.steps {
        let mut batch = Vec::with_capacity(bc.batch_size);
        while batch.len() < bc.batch_size.min(ds.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let labels: Vec<usize> = batch.iter().map(|i| ds.labels[*i]).collect();
        let mut g = Graph::new();
        let vars = vit.bind(&mut g, true);
        let (w, b) = head.bind(&mut g, true);
        let x = g.constant(ds.gather(&batch)?);
        let out = vit.forward(&mut g, &vars, x, None, None, TokenSelection::All)?;
        let logits = g.linear(out.cls, w, b)?;
        let loss = g.cross_entropy(logits, Targets::Indices(&labels))?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { iteration: step, detail: format!("backbone loss {}", value) });
        }
        g.backward(loss)?;
        let grads: Vec<Option<Tensor<f32>>> = vars.all().into_iter().map(|v| g.take_grad(v)).collect();
        opt.step(&mut vit.params_mut(), &grads.iter().map(|x| x.as_ref()).collect::<Vec<_>>())?;
        let (gw, gb) = (g.take_grad(w), g.take_grad(b));
        head_opt.step(&mut [&mut head.weight, &mut head.bias], &[gw.as_ref(), gb.as_ref()])?;
        if step % 50 == 0 {
            info!("backbone step {} loss {:.4}", step, value);
        }
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let acc = head_accuracy(&vit, None, &head, ds, &all)?;
    info!("backbone train accuracy {:.3}", acc);
    Ok((vit, acc))
}

/// Fraction of `idx` images whose predicted class name matches the truth.
fn head_accuracy(vit: &ViT, adapter: Option<&LoRAAdapter>, head: &ClassificationHead, ds: &ToyDataset, idx: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in idx.chunks(64) {
        let (cls, _) = vit.infer(&ds.gather(chunk)?, adapter, None, TokenSelection::All)?;
        let mut g = Graph::new();
        let (w, b) = head.bind(&mut g, false);
        let e = g.constant(cls);
        let logits = g.linear(e, w, b)?;
        let c = head.num_classes();
        for (row, i) in g.value(logits).data().chunks(c).zip(chunk) {
            let truth = &ds.class_names[ds.labels[*i]];
            correct += (head.class_names[argmax(row)] == *truth) as usize;
        }
    }
    Ok(correct as f64 / idx.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub rank: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Keep training this long even after the target is reached.
    pub min_steps: usize,
    pub target_accuracy: f64,
    pub eval_every: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { rank: 4, lr: 1e-3, batch_size: 16, max_steps: 300, min_steps: 60, target_accuracy: 0.95, eval_every: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TunedTeacher {
    pub adapter: LoRAAdapter,
    pub head: ClassificationHead,
    pub train_accuracy: f64,
    pub steps: usize,
}

/// Accuracy of a teacher on every image of its class subset.
pub fn teacher_accuracy(vit: &ViT, adapter: &LoRAAdapter, head: &ClassificationHead, ds: &ToyDataset, classes: &[usize]) -> Result<f64> {
    let idx: Vec<usize> = classes.iter().flat_map(|c| ds.class_indices(*c)).collect();
    head_accuracy(vit, Some(adapter), head, ds, &idx)
}

/// Tunes a LoRA adapter and head on `classes` with the backbone frozen, until
/// the subset's training accuracy reaches the target or the step cap.
pub fn pretune_teacher(vit: &ViT, ds: &ToyDataset, classes: &[usize], tc: &TeacherConfig, task_id: &str, seed: u64) -> Result<TunedTeacher> {
    if ds.split != Split::MetaTrain {
        return Err(Error::Validation("teachers are tuned on meta-train classes only".into()));
    }
    if classes.len() < 2 || classes.iter().any(|c| *c >= ds.num_classes()) {
        return Err(Error::Validation(format!("class subset {:?} of {} classes", classes, ds.num_classes())));
    }
    let names: Vec<String> = classes.iter().map(|c| ds.class_names[*c].clone()).collect();
    let mut adapter = LoRAAdapter::new(&vit.cfg, tc.rank, seed)?;
    adapter.meta.task_id = task_id.into();
    adapter.meta.class_names = names.clone();
    let mut head = ClassificationHead::new(vit.cfg.embed_dim, names, seed.wrapping_add(1))?;
    let mut opt = Optimizer::adam(tc.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut pool: Vec<(usize, usize)> =
        classes.iter().enumerate().flat_map(|(local, c)| ds.class_indices(*c).into_iter().map(move |i| (i, local))).collect();
    let mut cursor = pool.len();
    let mut acc = teacher_accuracy(vit, &adapter, &head, ds, classes)?;
    let mut steps = 0;
    while steps < tc.max_steps && (acc < tc.target_accuracy || steps < tc.min_steps) {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size.min(pool.len()) {
            if cursor == pool.len() {
                pool.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(pool[cursor]);
            cursor += 1;
        }
        let idx: Vec<usize> = batch.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = batch.iter().map(|p| p.1).collect();
        let mut g = Graph::new();
        let vars = vit.bind(&mut g, false);
        let lora = adapter.bind(&mut g, true);
        let (w, b) = head.bind(&mut g, true);
        let x = g.constant(ds.gather(&idx)?);
        let out = vit.forward(&mut g, &vars, x, Some(&lora), None, TokenSelection::All)?;
        let logits = g.linear(out.cls, w, b)?;
        let loss = g.cross_entropy(logits, Targets::Indices(&labels))?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::Divergence { iteration: steps, detail: format!("teacher {} loss", task_id) });
        }
        g.backward(loss)?;
        let mut grads: Vec<Option<Tensor<f32>>> = lora.all().into_iter().map(|v| g.take_grad(v)).collect();
        grads.push(g.take_grad(w));
        grads.push(g.take_grad(b));
        let mut params = adapter.params_mut();
        params.push(&mut head.weight);
        params.push(&mut head.bias);
        opt.step(&mut params, &grads.iter().map(|x| x.as_ref()).collect::<Vec<_>>())?;
        steps += 1;
        if steps % tc.eval_every.max(1) == 0 || steps == tc.max_steps {
            acc = teacher_accuracy(vit, &adapter, &head, ds, classes)?;
        }
    }
    let chance = 1.0 / classes.len() as f64;
    if acc <= chance + 0.05 {
        return Err(Error::Training(format!(
            "teacher {} stuck at {:.3} accuracy (chance {:.3}) after {} steps; check the dataset generator",
            task_id, acc, chance, steps
        )));
    }
    if acc < tc.target_accuracy {
        warn!("teacher {} reached {:.3} < {:.2} at the step cap", task_id, acc, tc.target_accuracy);
    }
    Ok(TunedTeacher { adapter, head, train_accuracy: acc, steps })
}
