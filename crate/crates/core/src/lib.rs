//! Feature-reconstruction anomaly detection with a low-rank noisy bottleneck
//! and global perturbation attention, plus the probes that check the
//! bottleneck's rank bound and the attention's spreading behaviour.

pub mod attention;
pub mod autodiff;
pub mod bottleneck;
pub mod container;
pub mod error;
pub mod evaluation;
pub mod metrics;
pub mod model;
pub mod params;
pub mod probes;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use rng::RandomState;
pub use tensor::Tensor;
