//! Domain-adaptive absolute camera pose regression at desk scale.
//!
//! A shared-weight regressor is trained on aligned real/fog/night views of
//! each pose with redundancy-reduction, latent-consistency and learnable
//! pose losses, then evaluated single-branch on seen and unseen photometric
//! domains.

pub mod autodiff;
pub mod cli;
pub mod complexity_profiler;
pub mod dataset_io;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod pose;
pub mod scene_synth;
pub mod trainer;
