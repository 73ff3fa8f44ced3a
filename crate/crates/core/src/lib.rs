//! Labeling of resting-state ICA component maps with a compact MLP.
//!
//! NIfTI input, the 100-component label taxonomy, volume features and
//! projections, subject-level splits and stratified folds, the network and
//! its trainer, the layers x nodes grid search, and evaluation reports.

pub mod ablation;
pub mod dataset;
pub mod eval;
pub mod mlp;
pub mod nifti;
pub mod seed;
pub mod synth;
pub mod taxonomy;
pub mod volume;

pub use dataset::{Dataset, Sample};
pub use mlp::{MlpConfig, MlpModel};
pub use nifti::{ComponentStack, Volume3D};
pub use taxonomy::Taxonomy;
