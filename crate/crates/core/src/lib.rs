pub mod ablation;
pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod labelprop;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synthclip;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
