//! Joint encoder-decoder contrastive pre-training at desk scale.
//!
//! The crate implements a teacher-student pipeline where an encoder and a
//! decoder are pre-trained together with a weighted contrastive loss,
//! channel dropout on the skip connections, and deep supervision at the
//! decoder levels, plus the downstream segmentation evaluation and the
//! statistics used to compare pre-training variants.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod objective;
mod par;
pub mod report;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::DeconError;

// re-exported because tensors in the public API are ndarray types
pub use ndarray;

/// Caps intra-step parallelism from the `DECON_THREADS` environment
/// variable. Calling it more than once is harmless; only the first call
/// can take effect.
pub fn init_thread_pool() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("DECON_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}
