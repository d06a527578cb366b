//! Targeted audio adversarial examples against a small CTC recognizer, with
//! random silence padding during optimization so the result survives
//! arbitrary sample offsets, plus offset sweeps and a simulated noisy channel
//! for measuring that resistance.

pub mod attack;
pub mod audio;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod matrix;
pub mod model;
pub mod seeds;

pub use audio::{AudioClip, DistortionBound};
pub use ctc::{Alphabet, LogitMatrix};
pub use error::{Error, Result};
pub use frontend::{FeatureMatrix, Frontend, FrontendConfig};
pub use matrix::Matrix;
pub use model::{AcousticModel, TrainConfig};
