//! Volumetric segmentation with channel squeeze-reinforce Mamba blocks and
//! frequency-domain gating, on a small reverse-mode autodiff engine.
//!
//! Volumes are channel-first `[C, Z, Y, X]`, row-major with `x` fastest.
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`).

pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod infer;
pub mod metrics;
pub mod network;
pub mod params;
pub mod phantom;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod volume;

pub use autodiff::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use network::{Network, NetworkConfig, Preset};
pub use params::{Init, ParamId, ParamStore};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
