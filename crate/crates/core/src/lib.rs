//! Face and ear multibiometric verification: Gabor features, per-subject
//! Gaussian mixture models, and Dempster-Shafer score fusion.

pub mod config;
pub mod ds;
pub mod eval;
pub mod gabor;
pub mod gmm;
pub mod image;
pub mod manifest;
pub mod observation;
pub mod pipeline;
pub mod prep;
pub mod toy;

pub use config::PipelineConfig;
pub use gmm::MODEL_FORMAT_VERSION;
pub use pipeline::PipelineError;
