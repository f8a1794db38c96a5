use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Episode;
use crate::error::{Error, Result};
use crate::lora::LoRAAdapter;
use crate::meta::proto_logits;
use crate::tensor::{argmax, Graph, Tensor};
use crate::vit::{keep_count, plan_flops, sparse_input_flops, PrunePlan, TokenSelection, ViT, ViTConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MetaLora,
    NnBaseline,
    LorasAvgNn,
    RandomLora,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::MetaLora, Method::NnBaseline, Method::LorasAvgNn, Method::RandomLora];

    pub fn name(self) -> &'static str {
        match self {
            Method::MetaLora => "meta_lora",
            Method::NnBaseline => "nn_baseline",
            Method::LorasAvgNn => "loras_avg_nn",
            Method::RandomLora => "random_lora",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {:?}", s)))
    }
}

/// Adapters the methods may attach. Missing entries fail the methods that need them.
#[derive(Clone, Debug, Default)]
pub struct MethodArtifacts<'a> {
    pub meta: Option<&'a LoRAAdapter>,
    pub averaged: Option<&'a LoRAAdapter>,
    /// Seed and rank of the random-initialized adapter.
    pub random: Option<(u64, usize)>,
}

impl<'a> MethodArtifacts<'a> {
    fn adapter(&self, method: Method, cfg: &ViTConfig) -> Result<Option<LoRAAdapter>> {
        let missing = |what: &str| Error::State(format!("{} needs {}", method.name(), what));
        Ok(match method {
            Method::NnBaseline => None,
            Method::MetaLora => Some(self.meta.ok_or_else(|| missing("a meta-LoRA"))?.clone()),
            Method::LorasAvgNn => Some(self.averaged.ok_or_else(|| missing("an averaged adapter"))?.clone()),
            Method::RandomLora => {
                let (seed, rank) = self.random.ok_or_else(|| missing("a seed and rank"))?;
                Some(LoRAAdapter::random(cfg, rank, seed)?)
            }
        })
    }
}

/// Maps a batch of images (and their dataset labels, for test hooks) to embeddings.
pub type Embedder<'a> = dyn FnMut(&Tensor<f32>, &[usize]) -> Result<Tensor<f32>> + 'a;

/// Argmax of `−dist(query, center)`, the prototype classifier.
pub fn proto_classify(queries: &Tensor<f32>, centers: &Tensor<f32>, squared: bool) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let c = g.constant(centers.clone());
    let logits = proto_logits(&mut g, q, c, squared)?;
    let n = centers.shape()[0];
    Ok(g.value(logits).data().chunks(n).map(argmax).collect())
}

/// Accuracy in percent of one episode under `embed`.
pub fn episode_accuracy(ep: &Episode, embed: &mut Embedder<'_>, squared: bool) -> Result<f64> {
    let truth = |labels: &[usize]| labels.iter().map(|l| ep.classes[*l]).collect::<Vec<_>>();
    let se = embed(&ep.support.images, &truth(&ep.support.labels))?;
    let qe = embed(&ep.query.images, &truth(&ep.query.labels))?;
    let mut g = Graph::new();
    let sv = g.constant(se);
    let centers = g.segment_mean(sv, &ep.support.labels, ep.n_way())?;
    let pred = proto_classify(&qe, g.value(centers), squared)?;
    let correct = pred.iter().zip(&ep.query.labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / ep.query.labels.len().max(1) as f64)
}

/// Mean and 95% normal-approximation half-width.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    /// Percent, in `[0, 100]`.
    pub accuracy: f64,
    pub ci95: f64,
    pub total_flops: u64,
    /// Wall-clock, so left out of the persisted report.
    #[serde(skip)]
    pub tasks_per_sec: f64,
    #[serde(skip)]
    pub per_episode: Vec<f64>,
}

/// Runs `embed` over all episodes with the prototype classifier.
pub fn evaluate_with(method: Method, episodes: &[Episode], embed: &mut Embedder<'_>, squared: bool, flops_per_image: u64) -> Result<MethodResult> {
    if episodes.is_empty() {
        return Err(Error::Count("no episodes to evaluate".into()));
    }
    let start = Instant::now();
    let per_episode = episodes.iter().map(|ep| episode_accuracy(ep, embed, squared)).collect::<Result<Vec<_>>>()?;
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    let (accuracy, ci95) = mean_ci95(&per_episode);
    let images: usize = episodes.iter().map(|e| e.support.len() + e.query.len()).sum();
    Ok(MethodResult {
        method,
        accuracy,
        ci95,
        total_flops: images as u64 * flops_per_image,
        tasks_per_sec: episodes.len() as f64 / secs,
        per_episode,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Fraction of image tokens dropped after the first block; 0 is dense.
    pub sparse_ratio: f64,
    pub squared_distance: bool,
}

impl EvalOptions {
    pub fn plan(&self) -> Result<Option<PrunePlan>> {
        if !(0.0..1.0).contains(&self.sparse_ratio) {
            return Err(Error::Config(format!("sparse ratio {} outside [0, 1)", self.sparse_ratio)));
        }
        if self.sparse_ratio == 0.0 {
            return Ok(None);
        }
        Ok(Some(PrunePlan::new().with(0, 1.0 - self.sparse_ratio)?))
    }
}

/// Evaluates one method. The backbone and adapters are only read.
pub fn evaluate(vit: &ViT, method: Method, artifacts: &MethodArtifacts<'_>, episodes: &[Episode], opts: &EvalOptions) -> Result<MethodResult> {
    let adapter = artifacts.adapter(method, &vit.cfg)?;
    if let Some(a) = &adapter {
        a.check_compatible(&vit.cfg)?;
    }
    let plan = opts.plan()?;
    let flops = plan_flops(&vit.cfg, plan.as_ref().unwrap_or(&PrunePlan::new()));
    let mut embed = |images: &Tensor<f32>, _: &[usize]| -> Result<Tensor<f32>> {
        Ok(vit.infer(images, adapter.as_ref(), plan.as_ref(), TokenSelection::All)?.0)
    };
    evaluate_with(method, episodes, &mut embed, opts.squared_distance, flops)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub sparse_ratio: f64,
    pub methods: Vec<MethodResult>,
}

impl EvalReport {
    pub fn get(&self, method: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == method)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}-way {}-shot, {} queries/class, {} episodes, sparse ratio {:.2}",
            self.n_way, self.k_shot, self.q_query, self.episodes, self.sparse_ratio
        )?;
        writeln!(f, "{:<14} {:>9} {:>8} {:>10} {:>12}", "method", "acc (%)", "±95%", "tasks/s", "GFLOPs")?;
        for m in &self.methods {
            writeln!(
                f,
                "{:<14} {:>9.2} {:>8.2} {:>10.1} {:>12.4}",
                m.method.name(),
                m.accuracy,
                m.ci95,
                m.tasks_per_sec,
                m.total_flops as f64 / 1e9
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub label: String,
    pub flops: u64,
    /// Percent change against the first (unpruned) row.
    pub delta_pct: f64,
    /// Measured images per second, when timing was requested.
    pub images_per_sec: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsTable {
    pub rows: Vec<FlopsRow>,
}

impl fmt::Display for FlopsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>16} {:>9} {:>12}", "setting", "GFLOPs", "delta", "images/s")?;
        for r in &self.rows {
            let speed = r.images_per_sec.map_or_else(|| "-".to_string(), |v| format!("{:.1}", v));
            writeln!(f, "{:<24} {:>16.6} {:>8.0}% {:>12}", r.label, r.flops as f64 / 1e9, r.delta_pct, speed)?;
        }
        Ok(())
    }
}

/// Label like `{11: 0.75}` naming the pruned fraction per layer.
pub fn plan_label(plan: &PrunePlan) -> String {
    if plan.is_empty() {
        return "unpruned".into();
    }
    let parts: Vec<String> = plan.entries().map(|(l, keep)| format!("{}: {}", l, ((1.0 - keep) * 1e6).round() / 1e6)).collect();
    format!("{{{}}}", parts.join(", "))
}

fn time_images(runs: usize, mut f: impl FnMut() -> Result<usize>) -> Result<f64> {
    let start = Instant::now();
    let mut images = 0;
    for _ in 0..runs.max(1) {
        images += f()?;
    }
    Ok(images as f64 / start.elapsed().as_secs_f64().max(1e-9))
}

/// Analytical FLOPs per image for each pruning plan, then for each input
/// sparse ratio, against an unpruned first row. With `timing = Some((batch,
/// runs))` each row is also run on a random batch of `vit`.
pub fn report_flops_table(
    cfg: &ViTConfig,
    plans: &[PrunePlan],
    sparse_ratios: &[f64],
    vit: Option<&ViT>,
    timing: Option<(usize, usize)>,
) -> Result<FlopsTable> {
    for p in plans {
        p.validate(cfg.depth)?;
    }
    if let Some(s) = sparse_ratios.iter().find(|s| !(0.0..1.0).contains(*s)) {
        return Err(Error::Config(format!("sparse ratio {} outside [0, 1)", s)));
    }
    let m = cfg.num_patches();
    let base = plan_flops(cfg, &PrunePlan::new());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = match (vit, timing) {
        (Some(v), Some((b, runs))) => {
            let mut shape = vec![b.max(1)];
            shape.extend(v.cfg.image_shape());
            Some((v, Tensor::randn(&shape, 0.0, 1.0, &mut rng), runs))
        }
        _ => None,
    };
    let delta = |f: u64| 100.0 * (f as f64 - base as f64) / base as f64;
    let mut rows = Vec::new();
    let mut push_plan = |label: String, plan: &PrunePlan| -> Result<()> {
        let f = plan_flops(cfg, plan);
        let speed = match &batch {
            Some((v, x, runs)) => Some(time_images(*runs, || Ok(v.infer(x, None, Some(plan), TokenSelection::All)?.0.shape()[0]))?),
            None => None,
        };
        rows.push(FlopsRow { label, flops: f, delta_pct: delta(f), images_per_sec: speed });
        Ok(())
    };
    push_plan("unpruned".into(), &PrunePlan::new())?;
    for p in plans.iter().filter(|p| !p.is_empty()) {
        push_plan(plan_label(p), p)?;
    }
    for &s in sparse_ratios.iter().filter(|s| **s > 0.0) {
        let kept = keep_count(m, 1.0 - s);
        let f = sparse_input_flops(cfg, kept);
        let speed = match &batch {
            Some((v, x, runs)) => {
                let mut positions: Vec<usize> = (0..m).collect();
                let sel: Vec<Vec<usize>> = (0..x.shape()[0])
                    .map(|_| {
                        positions.shuffle(&mut rng);
                        let mut k = positions[..kept].to_vec();
                        k.sort_unstable();
                        k
                    })
                    .collect();
                Some(time_images(*runs, || Ok(v.infer(x, None, None, TokenSelection::Subset(&sel))?.0.shape()[0]))?)
            }
            None => None,
        };
        rows.push(FlopsRow { label: format!("sparse ratio {:.2}", s), flops: f, delta_pct: delta(f), images_per_sec: speed });
    }
    Ok(FlopsTable { rows })
}
