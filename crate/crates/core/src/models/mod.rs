//! Network components. Every model is a [`Module`](autodiff::Module) whose
//! forward pass records onto a caller-supplied tape; convenience methods
//! ending in `_plain` evaluate on an inference tape and return plain values.

mod check;
mod cosine;
mod discriminator;
mod gat;
mod generator;
mod gmm;
mod gru;
mod policy;
mod raster;
mod stroke;

pub use check::{family_grad_check, FAMILIES};
pub use cosine::CosineClassifier;
pub use discriminator::Discriminator;
pub use gat::GatLayer;
pub use generator::{from_sequence, to_sequence, GeneratedSequence, GeneratorConfig, PhotoContext, SketchGenerator, StepRecord};
pub use gmm::{gmm_nll_var, GmmHead, GmmParams, GMM_RHO_MAX, GMM_SIGMA_FLOOR};
pub use gru::GruCell;
pub use policy::{gaussian_log_prob, policy_sample, GaussianPolicyHead};
pub use raster::{canvas_patches, RasterEncoder, RasterEncoderConfig};
pub use stroke::{StrokeEncoding, StrokeHierEncoder, ValueHead};
