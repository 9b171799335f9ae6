pub mod config;
pub mod datasets;
pub mod extractor;
pub mod fid;
mod error;
pub mod harness;
pub mod histogan;
pub mod nn;
pub mod selector;
pub mod tensor;

pub use config::ExperimentConfig;
pub use datasets::{DatasetProfile, LabeledPatch, PatchDataset, PatchImage, Split};
pub use error::{Error, Result};
pub use harness::Regime;
pub use tensor::{no_grad, Tensor};

/// Independent child seed for a named sub-stream of `seed` (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
