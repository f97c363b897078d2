//! Hierarchical top-down VAE whose priors are conditioned on DCT
//! pseudoinputs, with a variational diffusion model as the prior over those
//! pseudoinputs.
//!
//! Module map:
//!
//! * [`tensor`]: dense tensors and reverse-mode differentiation.
//! * [`dct`]: orthonormal type-II DCT and the pseudoinput transform.
//! * [`distributions`]: diagonal Gaussians and the Bernoulli likelihood.
//! * [`diffusion`]: noise schedule, denoiser and the diffusion bound.
//! * [`nn`]: convolutions and residual blocks.
//! * [`model`]: the ladder VAE and its training objective.
//! * [`train`]: Adamax, learning-rate schedule, EMA and the fit loop.
//! * [`metrics`]: NLL bound and active units.
//! * [`data`]: IDX loading, dynamic binarization, synthetic shapes.
//! * [`config`] and [`checkpoint`]: on-disk formats.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dct;
pub mod distributions;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::Dataset;
pub use dct::NormMatrix;
pub use error::{DvpError, Result};
pub use metrics::{AuReport, NllReport};
pub use model::{LadderVae, ModelConfig};
pub use rng::{Rng, RngState};
pub use tensor::{DType, Graph, ParamGrads, ParamId, ParamStore, Parameter, Real, Tensor, Var};
pub use train::{TrainConfig, TrainState};
