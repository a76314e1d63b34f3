//! Attention-gated U-shaped KAN segmentation, desk scale.
//!
//! The crate hosts a small f64 autodiff core (`tensor`, `tape`, `optim`,
//! `gradcheck`), the network building blocks (`spline`, `kan`, `attention`,
//! `model`), the training objective (`loss`), a vessel-oriented evaluation
//! suite (`metrics`, `morph`), synthetic data plus preprocessing (`synth`,
//! `preprocess`, `patches`, `pnm`), and the run machinery used by the CLI
//! (`config`, `checkpoint`, `trainer`, `infer`, `ablate`, `render`).

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod kan;
pub mod loss;
pub mod model;
pub mod optim;
pub mod spline;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
