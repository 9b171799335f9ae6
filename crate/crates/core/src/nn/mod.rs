//! Layers, parameter storage and optimisation built on [`crate::tensor`].

mod attention;
mod layers;
mod minibatch;
mod optim;
mod spectral;
mod var;

pub use attention::{attention_forward, AttentionOutput, AttentionParams, SelfAttention, QK_REDUCTION};
pub use layers::{
    avg_pool2x, dropout, global_avg_pool, upsample_bilinear2x, BatchNorm, ConditionalBatchNorm, Conv2d, Linear,
};
pub use minibatch::{minibatch_features, MinibatchDiscrimination};
pub use optim::{Adam, AdamConfig};
pub use spectral::{power_iteration, spectral_normalize, SpectralNorm, SpectralState, SIGMA_FLOOR};
pub use var::{Init, ParamStore, Path, Snapshot, StoredTensor, Var};
