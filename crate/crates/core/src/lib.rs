//! Identity-replacing face image codec with adversarial training and privacy
//! evaluation.
//!
//! The pipeline learns a latent face representation that keeps expression
//! information while making the original identity unrecoverable: an encoder
//! maps a face to a Gaussian latent, a decoder reconstructs a face from that
//! latent plus an explicit one-hot identity code, and a three-headed
//! discriminator (real/fake, identity, expression) drives the adversarial
//! game. On top of the trained models sit privacy attacks (how well can an
//! adversary recover the original identity?), utility measurements (is the
//! expression still readable?), and synthesis tools (identity replacement,
//! prior sampling, morphing, face completion).
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! [`Real`] is the default precision used by the command-line tools, while
//! gradient checks run in `f64`.

pub mod attack;
pub mod data;
pub mod error;
pub mod loss;
pub mod nets;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Default scalar type for training and evaluation.
pub type Real = f32;
