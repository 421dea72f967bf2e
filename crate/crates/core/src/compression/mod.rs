//! QuadConv autoencoder for field compression, its loss, metrics, training
//! loop and checkpoints, plus the POD baseline.

mod checkpoint;
mod config;
mod latent;
mod loss;
mod metrics;
mod model;
mod pod;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ArchStyle, AutoencoderConfig};
pub use latent::{LatentSeries, LATENT_MAGIC};
pub use loss::{fd_gradient_operator, sobolev_penalty, LossSpec};
pub use metrics::{max_error, per_sample_errors, relative_error, sample_relative_error, split_dataset};
pub use model::{Autoencoder, BoundModel, Dense};
pub use pod::{snapshot_matrix, PodBasis};
pub use train::{Evaluation, Split, SplitMetrics, StopReason, TrainOutcome, Trainer, METRICS_HEADER};
