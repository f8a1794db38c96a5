//! Desk-scale experiments: toy datasets, teacher tuning, episodic
//! evaluation against baselines, FLOPs tables, and the staged pipeline.

pub mod config;
pub mod data;
pub mod eval;
pub mod pipeline;
pub mod train;

pub use config::PipelineConfig;
pub use data::{check_disjoint, sample_episode, Episode, GeneratorSpec, Split, ToyDataset};
pub use eval::{evaluate, evaluate_with, report_flops_table, EvalOptions, EvalReport, FlopsTable, Method, MethodArtifacts, MethodResult};
pub use pipeline::Workspace;
pub use train::{pretrain_backbone, pretune_teacher, BackboneConfig, TeacherConfig, TunedTeacher};
