//! Desk-scale laboratory for hybrid consistency/adversarial distillation.
//!
//! A flow-matching teacher is trained on 2D toy data, converted to a
//! TrigFlow model without retraining, and distilled into a few-step
//! consistency student using continuous-time consistency training with
//! exact forward-mode tangents plus a hinge-loss adversarial term computed
//! on frozen-teacher features.

pub mod config;
pub mod distill;
pub mod error;
pub mod field;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod sampler;
pub mod schedule;
pub mod teacher;
pub mod toydata;
pub mod trigflow;

pub use error::{Error, Result};
pub use net::{NetConfig, VelocityNet};
pub use par::Exec;

/// Deterministic RNG used throughout.
pub type Rng64 = rand_chacha::ChaCha8Rng;

/// Seeded RNG constructor.
pub fn rng_from_seed(seed: u64) -> Rng64 {
    <Rng64 as rand::SeedableRng>::seed_from_u64(seed)
}

/// `rows x cols` matrix of independent `N(0, std^2)` draws, filled row-major.
pub fn normal_matrix<R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> ndarray::Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    ndarray::Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(rng);
        std * v
    })
}
