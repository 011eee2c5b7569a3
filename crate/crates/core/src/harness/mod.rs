//! Training, evaluation and the CCE/FCCE ablation.

pub mod ablation;
pub mod config;
pub mod train;

pub use ablation::{run_ablation, AblationConfig, AblationReport, ArmResult, SeedComparison};
pub use config::RunConfig;
pub use train::{evaluate, evaluate_checkpoint, load_images, prepare, train, train_split, Evaluation, TrainOutcome};
