//! Multi-resolution segmentation with a weight-shared meta-branch, memory
//! recall adapters and a fusion module whose convolution weights are generated
//! from output-head gradients.

pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod mainbody;
pub mod meta_fusion;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pyramid;
pub mod tensor;
pub mod training;

pub use backbone::{BackboneConfig, SegmentationMap};
pub use error::{MsnError, Result};
pub use evaluation::{EvalReport, MiouResult, ParamCounts};
pub use mainbody::{FeatureMemory, GapProfile, MultiBranch};
pub use meta_fusion::{FusionWeights, MetaLearnerConfig, SigmaVector};
pub use params::ParameterStore;
pub use pipeline::{RunConfig, RunDir, Variant};
pub use pyramid::{LabelMap, PatchTriple, PyramidImage, ResolutionSpec};
pub use tensor::{Real, Tensor};
pub use training::{TrainConfig, TrainLog};
