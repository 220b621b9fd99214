//! Desk-scale contrastive trainer: synthetic data, linear encoders, Adam.

pub mod checkpoint;
pub mod encoder;
pub mod synthetic;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
pub use encoder::{batch_similarity, embed, EncoderGrads, EncoderParams, Modality, DEFAULT_TEMPERATURE};
pub use synthetic::{
    generate_synthetic_dataset, EvalRecord, GroundTruth, Prompt, PromptBank, SyntheticConfig,
    SyntheticDataset, TrainRecord,
};
pub use train::{
    batch_loss_and_grads, initial_params, train, train_with_observer, whole_model_gradient_check,
    BatchEvent, EpochStats, LossMode, TrainConfig, TrainObserver, TrainingHistory,
};
