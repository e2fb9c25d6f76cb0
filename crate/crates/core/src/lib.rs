//! Single-source domain expansion for cross-scene raster patch classification.
//!
//! A generator synthesizes an extended domain (ED) from labeled source-domain
//! (SD) patches through spatial/spectral style randomization and learnable
//! morphology; an intermediate domain (ID) interpolates the two. A
//! discriminator trained with classification, supervised-contrastive, and
//! adversarial objectives learns class-wise domain-invariant features that
//! transfer directly to an unseen target scene.
//!
//! Crate layout:
//! - [`autodiff`] — tape-based reverse-mode differentiation on `f64` arrays,
//!   including the custom dilation/erosion layers.
//! - [`data`] — raster cubes, patch extraction, split/augment, and seeded
//!   synthetic scene pairs with a controlled sensor shift.
//! - [`generator`] / [`discriminator`] — the two halves of the minimax model.
//! - [`losses`] — cross-entropy, supervised contrastive, and adversarial
//!   contrastive objectives.
//! - [`trainer`] — alternating optimization, checkpointing, deterministic
//!   seeding.
//! - [`evaluation`] — target-scene inference, OA/KC/CA metrics, MMD
//!   diagnostics, classification-map rendering.

pub mod autodiff;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

/// Side length of the square spatial patch every model component expects.
pub const PATCH_SIZE: usize = 13;

/// Configure the global worker pool. Call once at startup; `threads == 0`
/// leaves the rayon default (all cores). Safe to call when a pool already
/// exists (subsequent calls are ignored).
pub fn init_thread_pool(threads: usize) {
    if threads == 0 {
        return;
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}
