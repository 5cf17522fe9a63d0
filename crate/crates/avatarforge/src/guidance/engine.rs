//! The score-distillation engine: routes face/body cameras to their
//! backends, forms the distillation gradient in latent space, pulls it
//! back through codec, supervision upsampler, and renderer, and applies
//! one adaptive-moment update per step.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::field::mlp::Tape;
use crate::field::FieldParams;
use crate::image::ImageBuf;
use crate::optim::Adam;
use crate::renderer::{
    render_backward, render_for_training, Camera, RenderKind, RenderOptions,
};
use crate::sampler::FocusTag;
use crate::schedule;

use super::{add_noise, GuidanceBackend, GuidanceError, Latent, LatentCodec, NoiseSchedule};

/// Dispatches each camera draw to the backend and prompt for its focus:
/// head shots get the face pair, everything else the body pair. Modes
/// that use a single backend alias the same object under both tags.
#[derive(Clone)]
pub struct GuidanceRouter {
    face_backend: Arc<dyn GuidanceBackend>,
    body_backend: Arc<dyn GuidanceBackend>,
    face_prompt: String,
    body_prompt: String,
}

impl GuidanceRouter {
    pub fn new(
        face_backend: Arc<dyn GuidanceBackend>,
        body_backend: Arc<dyn GuidanceBackend>,
        face_prompt: impl Into<String>,
        body_prompt: impl Into<String>,
    ) -> GuidanceRouter {
        GuidanceRouter {
            face_backend,
            body_backend,
            face_prompt: face_prompt.into(),
            body_prompt: body_prompt.into(),
        }
    }

    /// One backend serving both tags, with possibly different prompts.
    pub fn aliased(
        backend: Arc<dyn GuidanceBackend>,
        face_prompt: impl Into<String>,
        body_prompt: impl Into<String>,
    ) -> GuidanceRouter {
        GuidanceRouter {
            face_backend: Arc::clone(&backend),
            body_backend: backend,
            face_prompt: face_prompt.into(),
            body_prompt: body_prompt.into(),
        }
    }

    /// The (backend, prompt) pair for a focus tag.
    pub fn route(&self, tag: FocusTag) -> (&dyn GuidanceBackend, &str) {
        match tag {
            FocusTag::Face => (self.face_backend.as_ref(), self.face_prompt.as_str()),
            FocusTag::Body => (self.body_backend.as_ref(), self.body_prompt.as_str()),
        }
    }

    pub fn backend_arc(&self, tag: FocusTag) -> Arc<dyn GuidanceBackend> {
        match tag {
            FocusTag::Face => Arc::clone(&self.face_backend),
            FocusTag::Body => Arc::clone(&self.body_backend),
        }
    }

    pub fn prompt_for(&self, tag: FocusTag) -> &str {
        match tag {
            FocusTag::Face => &self.face_prompt,
            FocusTag::Body => &self.body_prompt,
        }
    }

    /// Whether both tags resolve to the same backend object.
    pub fn is_aliased(&self) -> bool {
        Arc::ptr_eq(&self.face_backend, &self.body_backend)
    }
}

/// Timestep weighting of the distillation gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdsWeight {
    /// `w(t) = 1 - alpha_bar[t]`: late (noisier) timesteps weigh more.
    OneMinusAlphaBar,
    /// `w(t) = 1`.
    Uniform,
}

/// Score-distillation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdsConfig {
    pub weight: SdsWeight,
    pub guidance_scale: f32,
    pub learning_rate: f32,
    /// Strength of the unit-gradient-norm regularizer on the distance
    /// field; zero disables it.
    pub eikonal_weight: f32,
    /// Random cube points per step the regularizer is averaged over.
    pub eikonal_points: usize,
}

impl Default for SdsConfig {
    fn default() -> Self {
        SdsConfig {
            weight: SdsWeight::OneMinusAlphaBar,
            guidance_scale: 100.0,
            learning_rate: 0.005,
            eikonal_weight: 0.1,
            eikonal_points: 128,
        }
    }
}

impl SdsConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !(self.guidance_scale >= 1.0 && self.guidance_scale.is_finite()) {
            return Err(GuidanceError::Contract(format!(
                "guidance scale {} must be >= 1 and finite",
                self.guidance_scale
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GuidanceError::Contract(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if !(self.eikonal_weight >= 0.0 && self.eikonal_weight.is_finite()) {
            return Err(GuidanceError::Contract(format!(
                "regularizer weight {} must be nonnegative and finite",
                self.eikonal_weight
            )));
        }
        Ok(())
    }
}

/// The score-distillation gradient at the latent `z0`: noise the latent
/// to timestep `t`, ask the backend what noise it sees, and return
/// `w(t) * (predicted - injected)`. The backend's own sensitivity to the
/// latent is deliberately not differentiated — the prediction enters as
/// a constant.
pub fn sds_grad(
    z0: &Latent,
    backend: &dyn GuidanceBackend,
    prompt: &str,
    condition: Option<&ImageBuf>,
    t: u32,
    eps: &Latent,
    config: &SdsConfig,
    schedule: &NoiseSchedule,
) -> Result<Latent, GuidanceError> {
    config.validate()?;
    let z_t = add_noise(z0, t, eps, schedule)?;
    let predicted = backend.predict_noise(&z_t, t, prompt, condition, config.guidance_scale)?;
    if predicted.shape() != z0.shape() {
        return Err(GuidanceError::Contract(format!(
            "backend returned shape {:?} for latent {:?}",
            predicted.shape(),
            z0.shape()
        )));
    }
    let w = match config.weight {
        SdsWeight::OneMinusAlphaBar => 1.0 - schedule.alpha_bar_at(t)?,
        SdsWeight::Uniform => 1.0,
    };
    let data = predicted
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&p, &e)| w * (p - e))
        .collect();
    Latent::new(z0.height, z0.width, z0.channels, data)
}

/// Per-step record: which timestep and focus the step used and how hard
/// the guidance pushed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostic {
    /// 0-based index of this step within the engine's lifetime.
    pub step: u64,
    pub t: u32,
    pub focus: FocusTag,
    pub kind: RenderKind,
    /// Euclidean norm of the latent-space gradient.
    pub latent_grad_norm: f64,
}

/// Owns the optimizer and per-step plumbing of score distillation: one
/// call renders a view, lifts it to latent space, forms the distillation
/// gradient, pulls it back to field parameters, and steps the optimizer.
/// Every fallible operation happens before the update, so a failed step
/// leaves the parameters untouched.
pub struct SdsEngine {
    router: GuidanceRouter,
    codec: Arc<dyn LatentCodec>,
    config: SdsConfig,
    schedule: NoiseSchedule,
    render_options: RenderOptions,
    optimizer: Adam,
    steps_taken: u64,
    face_steps: u64,
    body_steps: u64,
}

impl SdsEngine {
    pub fn new(
        router: GuidanceRouter,
        codec: Arc<dyn LatentCodec>,
        config: SdsConfig,
        schedule: NoiseSchedule,
        render_options: RenderOptions,
        params: &FieldParams,
    ) -> Result<SdsEngine, GuidanceError> {
        config.validate()?;
        schedule.validate()?;
        let optimizer = Adam::new(config.learning_rate, params.n_params());
        Ok(SdsEngine {
            router,
            codec,
            config,
            schedule,
            render_options,
            optimizer,
            steps_taken: 0,
            face_steps: 0,
            body_steps: 0,
        })
    }

    pub fn config(&self) -> &SdsConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn router(&self) -> &GuidanceRouter {
        &self.router
    }

    pub fn codec(&self) -> &Arc<dyn LatentCodec> {
        &self.codec
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// Steps taken under each focus tag, (face, body).
    pub fn focus_counts(&self) -> (u64, u64) {
        (self.face_steps, self.body_steps)
    }

    /// Optimizer state, exposed so checkpoints can persist it.
    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    /// Restores optimizer state from a checkpoint. The moment vectors
    /// must match the engine's parameter count.
    pub fn restore_optimizer(&mut self, optimizer: Adam) -> Result<(), GuidanceError> {
        if optimizer.m.len() != self.optimizer.m.len() {
            return Err(GuidanceError::Contract(format!(
                "optimizer state holds {} parameters, engine expects {}",
                optimizer.m.len(),
                self.optimizer.m.len()
            )));
        }
        self.optimizer = optimizer;
        Ok(())
    }

    /// Restores the step counters recorded in a checkpoint.
    pub fn restore_counters(&mut self, steps_taken: u64, face_steps: u64, body_steps: u64) {
        self.steps_taken = steps_taken;
        self.face_steps = face_steps;
        self.body_steps = body_steps;
    }

    /// One full distillation step. Draws the timestep and the noise from
    /// `rng`, then defers to [`SdsEngine::step_with_draws`]. The draw
    /// order is fixed: timestep, latent noise, render jitter, regularizer
    /// points.
    pub fn sds_step<R: Rng>(
        &mut self,
        params: &mut FieldParams,
        camera: &Camera,
        focus: FocusTag,
        kind: RenderKind,
        condition: Option<&ImageBuf>,
        supervision_resolution: u32,
        rng: &mut R,
    ) -> Result<StepDiagnostic, GuidanceError> {
        let (lh, lw) = self.latent_grid(supervision_resolution)?;
        let t = self.schedule.sample_t(rng);
        let eps = Latent::standard_normal(lh, lw, 3, rng);
        self.step_with_draws(
            params,
            camera,
            focus,
            kind,
            condition,
            supervision_resolution,
            t,
            &eps,
            rng,
        )
    }

    /// Latent grid shape for a square supervision image.
    fn latent_grid(&self, supervision_resolution: u32) -> Result<(usize, usize), GuidanceError> {
        let stride = self.codec.spatial_stride();
        let side = supervision_resolution as usize;
        if side == 0 || side % stride != 0 {
            return Err(GuidanceError::Contract(format!(
                "supervision resolution {side} is not a positive multiple of the codec stride {stride}"
            )));
        }
        Ok((side / stride, side / stride))
    }

    /// The deterministic core of one step, with the timestep and noise
    /// supplied by the caller; `rng` still drives render jitter and
    /// regularizer points.
    #[allow(clippy::too_many_arguments)]
    pub fn step_with_draws<R: Rng>(
        &mut self,
        params: &mut FieldParams,
        camera: &Camera,
        focus: FocusTag,
        kind: RenderKind,
        condition: Option<&ImageBuf>,
        supervision_resolution: u32,
        t: u32,
        eps: &Latent,
        rng: &mut R,
    ) -> Result<StepDiagnostic, GuidanceError> {
        let (lh, lw) = self.latent_grid(supervision_resolution)?;
        if eps.shape() != (lh, lw, 3) {
            return Err(GuidanceError::Contract(format!(
                "noise shape {:?} does not match the latent grid {lh}x{lw}x3",
                eps.shape()
            )));
        }

        let (image, capture) =
            render_for_training(params, camera, kind, None, &self.render_options, rng)?;
        let eik_points: Vec<[f32; 3]> = if self.config.eikonal_weight > 0.0 {
            let b = params.config.bound;
            (0..self.config.eikonal_points)
                .map(|_| [rng.gen_range(-b..b), rng.gen_range(-b..b), rng.gen_range(-b..b)])
                .collect()
        } else {
            Vec::new()
        };

        let supervised = schedule::upsample(&image, supervision_resolution)?;
        let z0 = self.codec.encode(&supervised)?;

        let backend = self.router.backend_arc(focus);
        let prompt = self.router.prompt_for(focus).to_string();
        let latent_grad = sds_grad(
            &z0,
            backend.as_ref(),
            &prompt,
            condition,
            t,
            eps,
            &self.config,
            &self.schedule,
        )?;
        let latent_grad_norm = latent_grad.norm();

        let d_supervised = self.codec.encode_adjoint(
            &latent_grad,
            supervision_resolution,
            supervision_resolution,
        )?;
        let d_image = schedule::upsample_adjoint(
            &d_supervised,
            image.height,
            image.width,
        )?;
        let mut grads = render_backward(params, &capture, &d_image)?;
        if !eik_points.is_empty() {
            accumulate_eikonal(
                params,
                &eik_points,
                self.config.eikonal_weight,
                &mut grads,
            );
        }

        // Everything fallible is done; commit the update.
        let mut flat = params.flatten();
        self.optimizer.update(&mut flat, &grads);
        params.set_from_flat(&flat);

        let diagnostic = StepDiagnostic {
            step: self.steps_taken,
            t,
            focus,
            kind,
            latent_grad_norm,
        };
        self.steps_taken += 1;
        match focus {
            FocusTag::Face => self.face_steps += 1,
            FocusTag::Body => self.body_steps += 1,
        }
        Ok(diagnostic)
    }
}

/// Adds the gradient of `weight * mean((|grad f| - 1)^2)` over `points`
/// to the distance-net entries of `grads`.
fn accumulate_eikonal(
    params: &FieldParams,
    points: &[[f32; 3]],
    weight: f32,
    grads: &mut [f32],
) {
    let sdf_n = params.sdf_param_count();
    let n = points.len() as f32;
    let mut tape = Tape::default();
    let dim = params.pos_enc.dim();
    let mut enc = vec![0.0f32; dim];
    let mut enc_tan = vec![0.0f32; 3 * dim];
    for &p in points {
        let (_, g) = params.sdf_forward_with_gradient(p, &mut tape, &mut enc, &mut enc_tan);
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-8);
        let r = norm - 1.0;
        let scale = 2.0 * weight * r / (n * norm);
        let gtan = [scale * g[0], scale * g[1], scale * g[2]];
        params
            .sdf_mlp
            .backward_with_tangents(&mut tape, &[0.0], &gtan, &mut grads[..sdf_n]);
    }
}
