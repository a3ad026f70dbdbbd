//! Multi-stage contrastive binding of modality encoders.
//!
//! Each stage trains one modality encoder with InfoNCE against a frozen
//! anchor encoder. Stages chain: a stage's trained encoder becomes the frozen
//! anchor for later stages, so every modality ends up in one joint embedding
//! space, including pairs of modalities that never met during training.
//!
//! Module map:
//!
//! - [`matrix`], [`tape`]: dense arithmetic and reverse-mode gradients.
//! - [`gradcheck`]: finite-difference gradient estimates.
//! - [`encoder`]: trainable MLP encoders and frozen reference encoders.
//! - [`loss`]: directional and symmetric InfoNCE with learnable temperature.
//! - [`optim`]: AdamW and cosine annealing with warm restarts.
//! - [`world`]: seeded synthetic multimodal world and its paired datasets.
//! - [`pipeline`]: staged training with resumable checkpoints.
//! - [`retrieval`]: cosine ranking scored by Recall@k and median rank.
//! - [`config`], [`store`]: run configuration and embedding stores.

pub(crate) mod codec;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod optim;
pub mod pipeline;
pub mod retrieval;
pub mod seed;
pub mod store;
pub mod tape;
pub mod world;

pub use encoder::{Activation, MlpEncoder, ReferenceEncoder};
pub use error::{Error, Result};
pub use loss::{LossOutput, LossVariant, Temperature};
pub use matrix::Matrix;
pub use optim::{AdamWConfig, AdamWState, ScheduleConfig};
pub use pipeline::{PipelineState, StageSpec};
pub use retrieval::RetrievalReport;
pub use tape::{Gradients, NodeId, Tape};
pub use world::{EvalBundle, PairedDataset, World, WorldConfig};
