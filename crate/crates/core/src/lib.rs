//! Spectrum-guided cross-modal prior transfer for SAR category discovery.

pub mod aft;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fer;
pub mod fft;
pub mod gradcheck;
pub mod imaging;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamStore, Tape};
pub use tensor::{DType, Scalar, Tensor};
pub use config::{Ablation, RunConfig};
pub use encoder::{EncoderConfig, Refinement};
pub use eval::{EvalReport, Protocol};
pub use imaging::{GcdSplit, Image, ImagePair};
pub use optim::cosine_lr;
pub use spectral::DiscrepancyCurve;
