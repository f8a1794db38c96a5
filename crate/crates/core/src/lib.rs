pub mod error;
pub mod harness;
pub mod inversion;
pub mod lora;
pub mod meta;
pub mod tensor;
pub mod vit;

pub use error::{ArtifactError, Error, Result};
pub use lora::{average_adapters, ClassificationHead, LoRAAdapter};
pub use vit::{PrunePlan, ViT, ViTConfig};
