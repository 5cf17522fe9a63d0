//! Stochastic camera and render-type policies plus skeleton-conditioning
//! image synthesis.

mod conditioning;
mod policy;
mod skeleton;

use thiserror::Error;

pub use conditioning::{project_point, render_skeleton_conditioning, visible_projected_joints};
pub use policy::{
    sample_camera, sample_render_type, surround_view_cameras, CameraPolicy, FocusTag,
    RenderTypePolicy, SURROUND_AZIMUTHS, SURROUND_ELEVATIONS,
};
pub use skeleton::{PoseSkeleton, JOINT_COLORS, JOINT_NAMES, LIMB_PAIRS};

/// Errors from sampling policies and conditioning rendering.
#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sampler contract violation: {0}")]
    Contract(String),
    #[error("no visible joints: every keypoint lies behind the camera")]
    NoVisibleJoints,
}
