//! Teacher-student distillation: teachers, augmentation, losses and the SGD loop.

pub mod augment;
pub mod corpus;
pub mod loss;
pub mod teacher;
pub mod train;

pub use augment::{make_batch, make_training_sample, AugmentationConfig, BatchProducer};
pub use corpus::{CorpusBuckets, SyntheticCorpusConfig};
pub use loss::{ccc_loss, quadrant_loss, total_loss, LossBreakdown, LossConfig, QuadrantMode};
pub use teacher::{synthetic_teacher, LabelTable, TeacherOracle};
pub use train::{distill_step, loss_and_gradients, run_distillation, Sgd, StepReport, TrainingConfig};
