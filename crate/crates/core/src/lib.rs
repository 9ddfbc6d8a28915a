//! Video semantic segmentation by mining relations among cross-frame
//! affinities, at desk scale.
//!
//! The crate is organized around a small reverse-mode autodiff tensor engine
//! ([`tensor`]), a toy multi-scale convolutional encoder ([`encoder`]),
//! cross-frame affinity computation with selective token masking ([`stm`]),
//! an affinity decoder (single-scale refinement + multi-scale aggregation,
//! [`decoder`]), the end-to-end trainable pipeline ([`pipeline`]),
//! segmentation / temporal-consistency metrics ([`metrics`]), a synthetic
//! moving-shapes dataset ([`synth`]) and an analytic FLOP/activation cost
//! model ([`cost`]).
//!
//! Heavy inner loops (matmul, conv) run on rayon when the `parallel` feature
//! is enabled (the default) and fall back to sequential kernels otherwise.

pub mod cost;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod runconfig;
pub mod scalar;
pub mod stm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Initializes the global worker pool from the `MRCFA_THREADS` environment
/// variable. A no-op when the `parallel` feature is disabled or the pool is
/// already built.
pub fn init_thread_pool() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("MRCFA_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}
