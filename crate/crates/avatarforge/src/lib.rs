//! AvatarForge: desk-scale 3D avatar generation from text prompts and/or
//! personal photo sets.
//!
//! The avatar lives in a neural signed-distance field (`field`) that is
//! volume-rendered (`renderer`) from stochastically sampled cameras
//! (`sampler`) and optimized by score distillation against a diffusion
//! guidance backend (`guidance`), stepping through a coarse-to-fine
//! resolution ladder (`schedule`). Photo-driven runs personalize the
//! backend first (`finetune`). Final geometry is extracted by marching
//! cubes (`mesh`). The `pipeline` module ties everything into resumable
//! end-to-end runs behind the `avatarforge` CLI.

pub mod field;
pub mod finetune;
pub mod guidance;
mod hash;
pub mod image;
pub mod mesh;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod renderer;
pub mod sampler;
pub mod schedule;

pub use crate::image::ImageBuf;
pub use field::{FieldParams, TemplateBody};
pub use renderer::{Camera, RenderBundle, RenderKind};
