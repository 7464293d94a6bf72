//! Side-feature-aware fake-profile generation and poisoning evaluation for
//! recommender systems.
//!
//! The pipeline covers the full attack loop: dataset ingestion and feature
//! encoding, a conditional rating generator (VAE backbone with FiLM
//! conditioning and a discretization layer), adversarial critics (BCE,
//! WGAN-GP with a projection head, WGAN-SN with a cosine-mix head), a
//! differentiable surrogate recommender with unrolled attack updates,
//! victim recommenders retrained on poisoned data, and stealth/effectiveness
//! metrics (HR@k, FAP, ECOD AUROC, TVD/JS).

pub mod autodiff;
pub mod config;
pub mod critics;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod surrogate;
pub mod synth;
pub mod victims;

pub use error::{Error, Result};

/// Derive a child seed from a base seed and a label, so that independent
/// components draw from decorrelated, reproducible streams.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the base via splitmix64 finalization.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
