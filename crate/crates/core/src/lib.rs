pub mod autodiff;
pub mod bench;
pub mod degrade;
pub mod error;
pub mod fanet;
pub mod fft;
pub mod imageio;
pub mod metrics;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result, WeightsError};
pub use fft::{irfft2, rfft2, SpectralPair};
pub use scalar::Scalar;
pub use tensor::{ConvKernel, Shape, Tensor};
