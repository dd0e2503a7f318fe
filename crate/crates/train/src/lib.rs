//! Training, evaluation and ablation for the DEM-conditioned texture model.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod optim;
pub mod prepare;
pub mod train;

pub use ablation::{ablation_run, AblationRow, AblationSpec, AblationTable};
pub use config::{LrSchedule, TrainConfig};
pub use eval::{evaluate, validation_loss, CheatGenerator, ModelGenerator, NoiseGenerator, TextureGenerator};
pub use optim::AdamW;
pub use prepare::{Conditioners, Prepared};
pub use train::{load_model, Trainer};
