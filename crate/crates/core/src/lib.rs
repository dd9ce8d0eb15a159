pub mod camera;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod splat;
pub mod stage2;
pub mod tensor;
pub mod vsd;

pub use camera::{CameraPose, CameraRig};
pub use config::{resolve_config, ResolvedConfig, RunConfig};
pub use error::{Error, Result};
pub use eval::{MetricsReport, Protocol};
pub use models::{DenoiserModel, Generator, Reconstructor, Stage};
pub use pipeline::{Arm, Lab};
pub use scene::{Dataset, SceneSpec};
pub use splat::{Gaussian, GaussianSet};
pub use tensor::Tensor;
