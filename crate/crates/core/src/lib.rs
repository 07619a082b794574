//! Parallel-data-free training pipeline for language-queried target sound
//! extraction, at desk scale.
//!
//! The crate covers the full loop: synthetic dataset generation, mixture
//! construction, dual-encoder embeddings with a controllable modality gap,
//! a persisted text-embedding cache with exact cosine retrieval, condition
//! construction strategies (supervised, weak-label, vanilla audio,
//! retrieval, each with optional Gaussian noise injection), a small
//! FiLM-conditioned spectral-mask separator with hand-derived gradients,
//! the training loop, SDR/SI-SDR evaluation, and the experiment harnesses.

// Link the system BLAS backing ndarray's matrix products.
extern crate blas_src;

pub(crate) mod blas_init {
    use std::sync::Once;

    extern "C" {
        fn openblas_set_num_threads(num_threads: std::os::raw::c_int);
    }

    static INIT: Once = Once::new();

    /// The matrices here are small; threaded BLAS only adds contention and
    /// makes timings erratic. Called before the first product on every path.
    pub fn single_thread() {
        INIT.call_once(|| unsafe { openblas_set_num_threads(1) });
    }
}

pub mod cache;
pub mod condition;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod metrics;
pub mod rng;
pub mod separator;
pub mod signal;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
