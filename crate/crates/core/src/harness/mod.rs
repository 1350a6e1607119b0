//! Training, optimization, synthetic data, and run configuration.

mod checkpoint;
mod config;
mod data;
mod optim;
mod synth;
mod train;

pub use checkpoint::{load_model, meta_path, save_model};
pub use config::TrainConfig;
pub use data::{build_training_set, sample_triplet, Augment, TrainSample};
pub use optim::{adamw_step, AdamHyper, AdamW};
pub use synth::{
    frame_name, generate_sequence, load_sequence, render_frame, render_sequence, Mover, SceneKind, SceneRenderer, SyntheticScene,
    Texture,
};
pub use train::{
    batch_gradients, cache_teacher, clip_global_norm, check_teacher, fit, train_student, train_student_cached, train_teacher, LossHistory, StepRecord,
    TeacherCache,
};
