use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::GeneratorSpec;
use super::eval::Method;
use super::train::{BackboneConfig, TeacherConfig};
use crate::error::{Error, Result};
use crate::meta::MetaTrainConfig;
use crate::tensor::LrSchedule;
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeachersSection {
    pub count: usize,
    pub n_way: usize,
    #[serde(flatten)]
    pub tuning: TeacherConfig,
}

impl Default for TeachersSection {
    fn default() -> Self {
        TeachersSection { count: 20, n_way: 2, tuning: TeacherConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionSection {
    pub iterations: usize,
    pub lr: f64,
    pub alpha_r: f64,
    /// Generated support and query images per class.
    pub k_shot: usize,
    pub q_query: usize,
    /// Fraction of image tokens the masks keep (pruned after the last block).
    pub mask_keep: f64,
    /// Fit the feature-statistics prior on the backbone's pretraining images.
    pub stat_prior: bool,
}

impl Default for InversionSection {
    fn default() -> Self {
        InversionSection { iterations: 200, lr: 0.25, alpha_r: 0.01, k_shot: 1, q_query: 6, mask_keep: 0.25, stat_prior: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub sparse_ratio: f64,
    pub squared_distance: bool,
    pub methods: Vec<Method>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 100,
            n_way: 2,
            k_shot: 1,
            q_query: 15,
            sparse_ratio: 0.0,
            squared_distance: false,
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlopsSection {
    /// Plans in `layer:pruned` notation.
    pub plans: Vec<String>,
    pub sparse_ratios: Vec<f64>,
    pub timing_batch: usize,
    pub timing_runs: usize,
}

impl Default for FlopsSection {
    fn default() -> Self {
        FlopsSection { plans: vec!["0:0.75".into(), "1:0.75".into()], sparse_ratios: vec![0.25, 0.5, 0.75], timing_batch: 32, timing_runs: 3 }
    }
}

/// The whole pipeline, read from one TOML file. Every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(rename = "model")]
    pub vit: ViTConfig,
    /// Task classes for teachers (meta-train split) and evaluation (meta-test split).
    pub data: GeneratorSpec,
    /// Domain the backbone is pretrained on; its class names are disjoint from `data`.
    pub pretrain: GeneratorSpec,
    pub backbone: BackboneConfig,
    pub teachers: TeachersSection,
    pub inversion: InversionSection,
    pub meta: MetaTrainConfig,
    pub eval: EvalSection,
    pub flops: FlopsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            vit: ViTConfig::desk(),
            data: GeneratorSpec::desk(),
            pretrain: GeneratorSpec::shapes_domain(),
            backbone: BackboneConfig::default(),
            teachers: TeachersSection::default(),
            inversion: InversionSection::default(),
            meta: MetaTrainConfig { q_query: 6, schedule: LrSchedule::cyclic(1e-5, 1e-2), ..MetaTrainConfig::default() },
            eval: EvalSection::default(),
            flops: FlopsSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Keys present in `text` override the defaults, at any nesting depth.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let given: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| Error::Serde(e.to_string()))?;
        merge(&mut merged, given);
        let cfg: PipelineConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.data.validate()?;
        self.pretrain.validate()?;
        self.meta.validate()?;
        for spec in [&self.data, &self.pretrain] {
            if spec.image_size != self.vit.image_size || self.vit.channels != 3 {
                return Err(Error::Config(format!(
                    "dataset images are 3×{0}×{0} but the model expects {1}×{2}×{2}",
                    spec.image_size, self.vit.channels, self.vit.image_size
                )));
            }
        }
        if self.teachers.count == 0 || self.teachers.n_way < 2 {
            return Err(Error::Config("need at least one teacher of at least 2 classes".into()));
        }
        if self.teachers.n_way != self.meta.n_way {
            return Err(Error::Config(format!(
                "teachers are {}-way but meta-training is {}-way",
                self.teachers.n_way, self.meta.n_way
            )));
        }
        if self.inversion.k_shot < self.meta.k_shot || self.inversion.q_query < self.meta.q_query {
            return Err(Error::Config("inversion must generate at least meta.k_shot + meta.q_query images per class".into()));
        }
        if !(self.inversion.mask_keep > 0.0 && self.inversion.mask_keep <= 1.0) {
            return Err(Error::Config(format!("mask_keep {} outside (0, 1]", self.inversion.mask_keep)));
        }
        if self.eval.methods.is_empty() || self.eval.episodes == 0 {
            return Err(Error::Config("evaluation needs methods and episodes".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}
