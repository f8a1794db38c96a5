use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::PipelineConfig;
use super::data::{check_disjoint, sample_episode, Episode, ToyDataset};
use super::eval::{evaluate, EvalOptions, EvalReport, Method, MethodArtifacts};
use super::train::{pretrain_backbone, pretune_teacher, TunedTeacher};
use crate::error::{Error, Result};
use crate::inversion::{fit_stat_regularizer, invert, read_task, write_task, GeneratedTask, InversionConfig, StatExtractor};
use crate::lora::{average_adapters, load_artifact, load_model, save_artifact, save_model, write_atomic, LoRAAdapter};
use crate::meta::{meta_train, MetaOutcome, Teacher};
use crate::vit::{PrunePlan, ViT};

/// Per-stage seed mixed from the pipeline seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let tag = crc32fast::hash(stage.as_bytes()) as u64;
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

pub fn stage_data(cfg: &PipelineConfig) -> Result<(ToyDataset, ToyDataset)> {
    let (train, test) = cfg.data.generate(stage_seed(cfg.seed, "data"))?;
    check_disjoint(&train, &test)?;
    Ok((train, test))
}

/// Meta-train split of the pretraining domain.
pub fn stage_pretrain_data(cfg: &PipelineConfig) -> Result<ToyDataset> {
    let (pre, _) = cfg.pretrain.generate(stage_seed(cfg.seed, "pretrain-data"))?;
    Ok(pre)
}

pub fn stage_backbone(cfg: &PipelineConfig, pretrain: &ToyDataset) -> Result<(ViT, f64)> {
    pretrain_backbone(&cfg.vit, pretrain, &cfg.backbone, stage_seed(cfg.seed, "backbone"))
}

/// Distinct class subsets, one per teacher, cycling when there are more
/// teachers than subsets.
pub fn teacher_subsets(num_classes: usize, n_way: usize, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_way > num_classes {
        return Err(Error::Count(format!("{}-way teachers from {} classes", n_way, num_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<Vec<usize>> = Vec::new();
    let mut pick = vec![0usize; n_way];
    // enumerate combinations in lexicographic order
    fn rec(start: usize, depth: usize, n: usize, pick: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if depth == pick.len() {
            out.push(pick.clone());
            return;
        }
        for c in start..n {
            pick[depth] = c;
            rec(c + 1, depth + 1, n, pick, out);
        }
    }
    if n_way <= 4 {
        rec(0, 0, num_classes, &mut pick, &mut all);
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if all.is_empty() {
            let mut classes: Vec<usize> = (0..num_classes).collect();
            classes.shuffle(&mut rng);
            let mut s = classes[..n_way].to_vec();
            s.sort_unstable();
            out.push(s);
            continue;
        }
        let mut round = all.clone();
        round.shuffle(&mut rng);
        out.extend(round.into_iter().take(count - out.len()));
    }
    Ok(out)
}

pub fn stage_teachers(cfg: &PipelineConfig, vit: &ViT, train: &ToyDataset) -> Result<Vec<TunedTeacher>> {
    let t = &cfg.teachers;
    let subsets = teacher_subsets(train.num_classes(), t.n_way, t.count, stage_seed(cfg.seed, "subsets"))?;
    subsets
        .iter()
        .enumerate()
        .map(|(i, classes)| {
            let id = teacher_id(i);
            let tuned = pretune_teacher(vit, train, classes, &t.tuning, &id, stage_seed(cfg.seed, &id))?;
            info!("{} on {:?}: accuracy {:.3} after {} steps", id, tuned.head.class_names, tuned.train_accuracy, tuned.steps);
            Ok(tuned)
        })
        .collect()
}

pub fn teacher_id(i: usize) -> String {
    format!("teacher-{:03}", i)
}

/// Inversion settings shared by every teacher; masks come from pruning
/// after the last block, which leaves the CLS output unchanged.
pub fn inversion_config(cfg: &PipelineConfig, teacher: usize) -> Result<InversionConfig> {
    let inv = &cfg.inversion;
    let plan = if inv.mask_keep < 1.0 { Some(PrunePlan::new().with(cfg.vit.depth - 1, inv.mask_keep)?) } else { None };
    Ok(InversionConfig {
        iterations: inv.iterations,
        lr: inv.lr,
        batch_size: cfg.teachers.n_way * (inv.k_shot + inv.q_query),
        alpha_r: inv.alpha_r,
        plan,
        seed: stage_seed(cfg.seed, &format!("invert-{}", teacher)),
        track_every: None,
    })
}

/// Inverts every teacher. The statistics prior is fitted on the backbone's
/// pretraining images, never on the teachers' task data.
pub fn stage_invert(cfg: &PipelineConfig, vit: &ViT, teachers: &[TunedTeacher], pretrain: &ToyDataset) -> Result<Vec<GeneratedTask>> {
    let reg = if cfg.inversion.stat_prior {
        let extractor = StatExtractor::seeded(cfg.vit.channels, cfg.vit.image_size, stage_seed(cfg.seed, "extractor"));
        Some(fit_stat_regularizer(&pretrain.images, extractor)?)
    } else {
        None
    };
    teachers
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let result = invert(vit, &t.adapter, &t.head, &inversion_config(cfg, i)?, reg.as_ref())?;
            let (first, last) = (&result.trace[0], result.trace.last().expect("at least one iteration"));
            info!("{}: inversion ce {:.4} -> {:.4}", teacher_id(i), first.ce, last.ce);
            GeneratedTask::from_inversion(&result, t.head.class_names.clone(), teacher_id(i), cfg.inversion.k_shot, cfg.inversion.q_query)
        })
        .collect()
}

pub fn stage_meta(
    cfg: &PipelineConfig,
    vit: &ViT,
    teachers: &[TunedTeacher],
    tasks: &[GeneratedTask],
    log: Option<&mut dyn std::io::Write>,
) -> Result<MetaOutcome> {
    if teachers.len() != tasks.len() {
        return Err(Error::Count(format!("{} teachers but {} generated tasks", teachers.len(), tasks.len())));
    }
    let refs: Vec<Teacher<'_>> = teachers
        .iter()
        .zip(tasks)
        .enumerate()
        .map(|(i, (t, task))| Teacher { id: teacher_id(i), adapter: &t.adapter, head: &t.head, task })
        .collect();
    let mut mc = cfg.meta.clone();
    mc.seed = stage_seed(cfg.seed, "meta");
    meta_train(vit, &refs, &mc, log)
}

pub fn stage_episodes(cfg: &PipelineConfig, test: &ToyDataset) -> Result<Vec<Episode>> {
    let e = &cfg.eval;
    let base = stage_seed(cfg.seed, "episodes");
    (0..e.episodes).map(|i| sample_episode(test, e.n_way, e.k_shot, e.q_query, base.wrapping_add(i as u64))).collect()
}

/// Evaluates every configured method on the same episodes.
pub fn stage_eval(
    cfg: &PipelineConfig,
    vit: &ViT,
    meta: Option<&LoRAAdapter>,
    teachers: &[&LoRAAdapter],
    test: &ToyDataset,
) -> Result<EvalReport> {
    let episodes = stage_episodes(cfg, test)?;
    let averaged = if teachers.is_empty() { None } else { Some(average_adapters(teachers)?) };
    let artifacts = MethodArtifacts {
        meta,
        averaged: averaged.as_ref(),
        random: Some((stage_seed(cfg.seed, "random-lora"), cfg.meta.rank)),
    };
    let opts = EvalOptions { sparse_ratio: cfg.eval.sparse_ratio, squared_distance: cfg.eval.squared_distance };
    let methods = cfg.eval.methods.iter().map(|m| evaluate(vit, *m, &artifacts, &episodes, &opts)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        episodes: episodes.len(),
        n_way: cfg.eval.n_way,
        k_shot: cfg.eval.k_shot,
        q_query: cfg.eval.q_query,
        sparse_ratio: cfg.eval.sparse_ratio,
        methods,
    })
}

/// Output directory layout shared by the CLI subcommands.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("data").join("meta_train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.root.join("data").join("meta_test")
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("data").join("pretrain")
    }

    pub fn backbone(&self) -> PathBuf {
        self.root.join("backbone.lrcy")
    }

    pub fn teacher(&self, i: usize) -> PathBuf {
        self.root.join("teachers").join(format!("{}.lrcy", teacher_id(i)))
    }

    pub fn task_dir(&self, i: usize) -> PathBuf {
        self.root.join("tasks").join(teacher_id(i))
    }

    pub fn meta_lora(&self) -> PathBuf {
        self.root.join("meta_lora.lrcy")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("meta_train.jsonl")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    fn read_datasets(&self) -> Result<(ToyDataset, ToyDataset)> {
        let train = ToyDataset::read(&self.train_dir()).map_err(|e| missing("dataset", "gen-data", e))?;
        let test = ToyDataset::read(&self.test_dir()).map_err(|e| missing("dataset", "gen-data", e))?;
        Ok((train, test))
    }

    fn read_backbone(&self) -> Result<ViT> {
        load_model(&self.backbone()).map_err(|e| missing("backbone", "pretune", e))
    }

    fn read_teachers(&self, cfg: &PipelineConfig) -> Result<Vec<TunedTeacher>> {
        (0..cfg.teachers.count)
            .map(|i| {
                let (adapter, head, extra) = load_artifact(&self.teacher(i)).map_err(|e| missing("teacher", "pretune", e))?;
                let head = head.ok_or_else(|| Error::State(format!("{} has no head", teacher_id(i))))?;
                Ok(TunedTeacher {
                    adapter,
                    head,
                    train_accuracy: extra["train_accuracy"].as_f64().unwrap_or(0.0),
                    steps: extra["steps"].as_u64().unwrap_or(0) as usize,
                })
            })
            .collect()
    }

    fn read_tasks(&self, cfg: &PipelineConfig) -> Result<Vec<GeneratedTask>> {
        (0..cfg.teachers.count).map(|i| read_task(&self.task_dir(i)).map_err(|e| missing("task", "invert", e))).collect()
    }

    fn read_pretrain(&self) -> Result<ToyDataset> {
        ToyDataset::read(&self.pretrain_dir()).map_err(|e| missing("pretraining dataset", "gen-data", e))
    }

    pub fn gen_data(&self, cfg: &PipelineConfig) -> Result<(ToyDataset, ToyDataset)> {
        let (train, test) = stage_data(cfg)?;
        let pre = stage_pretrain_data(cfg)?;
        check_disjoint(&pre, &train)?;
        check_disjoint(&pre, &test)?;
        train.write(&self.train_dir())?;
        test.write(&self.test_dir())?;
        pre.write(&self.pretrain_dir())?;
        Ok((train, test))
    }

    pub fn pretune(&self, cfg: &PipelineConfig) -> Result<Vec<TunedTeacher>> {
        let (train, _) = self.read_datasets()?;
        let (vit, acc) = stage_backbone(cfg, &self.read_pretrain()?)?;
        info!("backbone train accuracy {:.3}", acc);
        save_model(&self.backbone(), &vit)?;
        let teachers = stage_teachers(cfg, &vit, &train)?;
        fs::create_dir_all(self.root.join("teachers"))?;
        for (i, t) in teachers.iter().enumerate() {
            let extra = json!({ "train_accuracy": t.train_accuracy, "steps": t.steps });
            save_artifact(&self.teacher(i), &t.adapter, Some(&t.head), extra)?;
        }
        Ok(teachers)
    }

    pub fn invert(&self, cfg: &PipelineConfig) -> Result<Vec<GeneratedTask>> {
        let pre = self.read_pretrain()?;
        let vit = self.read_backbone()?;
        let teachers = self.read_teachers(cfg)?;
        let tasks = stage_invert(cfg, &vit, &teachers, &pre)?;
        for (i, t) in tasks.iter().enumerate() {
            write_task(&self.task_dir(i), t)?;
        }
        Ok(tasks)
    }

    pub fn meta_train(&self, cfg: &PipelineConfig) -> Result<MetaOutcome> {
        let vit = self.read_backbone()?;
        let teachers = self.read_teachers(cfg)?;
        let tasks = self.read_tasks(cfg)?;
        let mut log = BufWriter::new(fs::File::create(self.train_log())?);
        let outcome = stage_meta(cfg, &vit, &teachers, &tasks, Some(&mut log))?;
        std::io::Write::flush(&mut log)?;
        let mut adapter = outcome.meta.effective_adapter();
        adapter.meta.task_id = "meta-lora".into();
        let extra = json!({ "iterations": cfg.meta.iterations, "sparse": cfg.meta.sparse, "layers": outcome.meta.layers });
        save_artifact(&self.meta_lora(), &adapter, None, extra)?;
        if let Some(bb) = &outcome.backbone {
            save_model(&self.root.join("backbone_meta.lrcy"), bb)?;
        }
        Ok(outcome)
    }

    pub fn eval(&self, cfg: &PipelineConfig) -> Result<EvalReport> {
        let (_, test) = self.read_datasets()?;
        let vit = self.read_backbone()?;
        let needs = |m: Method| cfg.eval.methods.contains(&m);
        let meta = if needs(Method::MetaLora) {
            Some(load_artifact(&self.meta_lora()).map_err(|e| missing("meta-LoRA", "meta-train", e))?.0)
        } else {
            None
        };
        let teachers = if needs(Method::LorasAvgNn) { self.read_teachers(cfg)? } else { Vec::new() };
        let adapters: Vec<&LoRAAdapter> = teachers.iter().map(|t| &t.adapter).collect();
        let report = stage_eval(cfg, &vit, meta.as_ref(), &adapters, &test)?;
        write_atomic(&self.report_json(), &serde_json::to_vec_pretty(&report)?)?;
        write_atomic(&self.report_txt(), report.to_string().as_bytes())?;
        Ok(report)
    }

    /// Every stage in order, each reading the previous stage's files.
    pub fn all(&self, cfg: &PipelineConfig) -> Result<EvalReport> {
        fs::create_dir_all(&self.root)?;
        write_atomic(&self.root.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
        self.gen_data(cfg)?;
        self.pretune(cfg)?;
        self.invert(cfg)?;
        self.meta_train(cfg)?;
        self.eval(cfg)
    }
}

fn missing(what: &str, stage: &str, e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::State(format!("{} not found; run `{}` first ({})", what, stage, io))
        }
        other => other,
    }
}

/// Whether two files hold the same bytes.
pub fn same_bytes(a: &Path, b: &Path) -> Result<bool> {
    Ok(fs::read(a)? == fs::read(b)?)
}
