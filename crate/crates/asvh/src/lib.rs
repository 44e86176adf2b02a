//! Self-supervised video hashing with adversarial hard-frame sampling.
//!
//! Pipeline: a lightweight scoring network grades frames, a Gumbel-Softmax
//! top-k sampler drops the highest-scoring frames (straight-through
//! estimator), a gradient reversal layer makes the sampler adversarial, and
//! a transformer encoder/decoder learns K-bit hash codes by reconstructing
//! the dropped frames under view-contrastive and point-to-set cluster
//! objectives. Retrieval runs brute-force in Hamming space over packed codes.

pub mod config;
pub mod error;
pub mod feature_store;
pub mod hashnet;
pub mod objectives;
pub mod params;
pub mod retrieval;
pub mod sampler;
pub mod semantic_centers;
pub mod tape;
pub mod trainer;
pub mod verify;

pub use error::{AsvhError, Result};
