//! Contrastive siamese networks for facial action unit intensity
//! estimation and detection, with a small reverse-mode autodiff engine,
//! a synthetic dataset generator and a participant-independent
//! cross-validation harness.

pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod siamese;
pub mod tape;
pub mod tensor;

pub use backbone::{BackboneSpec, ParamStore, Task};
pub use error::{Error, Result};
pub use siamese::{MergePoint, PredictionMode};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
