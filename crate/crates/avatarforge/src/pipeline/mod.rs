//! End-to-end avatar generation: run configuration and mode dispatch,
//! the ladder-scheduled distillation loop with periodic resumable
//! checkpoints, turntable evaluation renders, and final mesh export.
//!
//! A run is single-writer: one process owns the output directory. The
//! three operating modes differ only in how the guidance backends and
//! prompts are prepared — text-only (`prompt`) routes one shared backend
//! pair with the configured prompts, photo-driven (`customized`)
//! personalizes the backends on the user's photos first, and `hybrid`
//! does both, substituting the personalization token into the user's
//! edited prompts.

mod checkpoint;

pub use checkpoint::{read_run_checkpoint, write_run_checkpoint, RngState, RunCheckpoint};

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldConfig, FieldError, FieldParams};
use crate::finetune::{
    body_finetune, caption_template, load_image_set, pose_consistent_finetune, FinetuneError,
    FinetuneRecipe, SyntheticViews,
};
use crate::guidance::{
    oracle_backend, GuidanceBackend, GuidanceError, GuidanceRouter, IdentityCodec, LatentCodec,
    NoiseSchedule, PooledCodec, RemoteBackend, SdsConfig, SdsEngine, StepDiagnostic,
};
use crate::image::{ImageBuf, ImageError};
use crate::mesh::{export, marching_cubes, MeshError, MeshFormat};
use crate::renderer::{render_view, Camera, RenderError, RenderKind, RenderOptions};
use crate::sampler::{
    sample_camera, sample_render_type, surround_view_cameras, CameraPolicy, PoseSkeleton,
    RenderTypePolicy, SamplerError, SURROUND_AZIMUTHS, SURROUND_ELEVATIONS,
};
use crate::schedule::{ResolutionLadder, ScheduleError};

/// Environment variable naming the endpoint of an external guidance
/// service (`host:port`).
pub const BACKEND_ENDPOINT_ENV: &str = "AVATARFORGE_BACKEND_ENDPOINT";

/// Placeholder in hybrid-mode prompts that the personalization token
/// replaces, as in "a [V] man with yellow hair".
pub const RARE_TOKEN_PLACEHOLDER: &str = "[V]";

/// How many recent per-step diagnostics a run keeps (and checkpoints).
pub const DIAGNOSTIC_CAPACITY: usize = 8192;

const TURNTABLE_FOV_DEGREES: f32 = 50.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config validation error: {0}")]
    Config(String),
    #[error("run checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// The three operating modes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Text-only generation from the configured prompts.
    #[default]
    Prompt,
    /// Photo-driven generation: backends are personalized on the image
    /// set and prompted with the personalization caption.
    Customized,
    /// Personalized backends plus user-edited prompts with the rare
    /// token substituted for [`RARE_TOKEN_PLACEHOLDER`].
    Hybrid,
}

/// Which guidance implementation the run talks to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// The analytic scoring backend aimed at `oracle_target`.
    #[default]
    Oracle,
    /// A remote noise-prediction service reached over TCP.
    External,
}

/// Full resolved settings of one generation run. Loadable from a TOML
/// document whose key paths mirror the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub mode: Mode,
    pub face_prompt: String,
    pub body_prompt: String,
    /// Photo set root with `face/` and/or `body/` subdirectories;
    /// required by the customized and hybrid modes, unused by prompt
    /// mode.
    pub image_root: Option<PathBuf>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backend_kind: BackendKind,
    /// Image the oracle backend scores against (oracle runs only).
    pub oracle_target: Option<PathBuf>,
    /// External service endpoint; [`BACKEND_ENDPOINT_ENV`] takes
    /// precedence when set.
    pub backend_endpoint: Option<String>,
    /// Latent downsampling factor: 1 keeps pixels, larger values pool.
    pub codec_stride: usize,
    /// Steps between periodic checkpoints.
    pub checkpoint_every: u64,
    pub turntable_views: usize,
    /// Marching-cubes grid resolution of the final mesh export.
    pub mesh_grid: usize,
    /// World-unit radius of the initial sphere surface.
    pub init_radius: f32,
    pub ladder: ResolutionLadder,
    pub camera_policy: CameraPolicy,
    pub render_type_policy: RenderTypePolicy,
    pub sds: SdsConfig,
    pub recipe: FinetuneRecipe,
    pub field: FieldConfig,
    pub render: RenderOptions,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            mode: Mode::Prompt,
            face_prompt: String::new(),
            body_prompt: String::new(),
            image_root: None,
            seed: 0,
            output_dir: PathBuf::from("avatarforge-out"),
            backend_kind: BackendKind::Oracle,
            oracle_target: None,
            backend_endpoint: None,
            codec_stride: 1,
            checkpoint_every: 500,
            turntable_views: 25,
            mesh_grid: 128,
            init_radius: 0.7,
            ladder: ResolutionLadder::default(),
            camera_policy: CameraPolicy::default(),
            render_type_policy: RenderTypePolicy::default(),
            sds: SdsConfig::default(),
            recipe: FinetuneRecipe::default(),
            field: FieldConfig::default(),
            render: RenderOptions::default(),
        }
    }
}

fn surround_rig_size() -> usize {
    SURROUND_AZIMUTHS * SURROUND_ELEVATIONS.len()
}

impl GenerationConfig {
    /// Cross-field validation; every run entry point calls this first.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));

        self.ladder
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.camera_policy
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.render_type_policy
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.sds
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.recipe
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;

        match self.mode {
            Mode::Prompt => {
                if self.face_prompt.trim().is_empty() || self.body_prompt.trim().is_empty() {
                    return bad("prompt mode needs non-empty face and body prompts".into());
                }
            }
            Mode::Customized => {
                if self.image_root.is_none() {
                    return bad("customized mode requires image_root".into());
                }
            }
            Mode::Hybrid => {
                if self.image_root.is_none() {
                    return bad("hybrid mode requires image_root".into());
                }
                if self.face_prompt.trim().is_empty() || self.body_prompt.trim().is_empty() {
                    return bad("hybrid mode requires face and body prompts too".into());
                }
            }
        }

        match self.backend_kind {
            BackendKind::Oracle => {
                if self.oracle_target.is_none() {
                    return bad("the oracle backend needs oracle_target".into());
                }
            }
            BackendKind::External => {
                if self.resolve_endpoint().is_none() {
                    return bad(format!(
                        "the external backend needs an endpoint: set {BACKEND_ENDPOINT_ENV} \
                         or backend_endpoint"
                    ));
                }
                if self.mode != Mode::Prompt {
                    return bad(
                        "the external protocol carries noise prediction only; customized \
                         and hybrid modes need a backend that can be personalized"
                            .into(),
                    );
                }
            }
        }

        if self.codec_stride == 0 {
            return bad("codec_stride must be at least 1".into());
        }
        for &(resolution, _) in &self.ladder.stages {
            if resolution as usize % self.codec_stride != 0 {
                return bad(format!(
                    "ladder resolution {resolution} is not divisible by codec_stride {}",
                    self.codec_stride
                ));
            }
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if self.turntable_views == 0 {
            return bad("turntable_views must be at least 1".into());
        }
        if self.mesh_grid < 16 {
            return bad(format!(
                "mesh_grid {} is below the marching-cubes minimum of 16",
                self.mesh_grid
            ));
        }
        if !(self.init_radius > 0.0 && self.init_radius < self.field.bound) {
            return bad(format!(
                "init_radius {} must sit inside (0, bound {})",
                self.init_radius, self.field.bound
            ));
        }
        if self.mode != Mode::Prompt && self.recipe.multiview_count > surround_rig_size() {
            return bad(format!(
                "multiview_count {} exceeds the {}-camera surround rig",
                self.recipe.multiview_count,
                surround_rig_size()
            ));
        }
        Ok(())
    }

    /// The endpoint an external backend would use, env var first.
    pub fn resolve_endpoint(&self) -> Option<String> {
        std::env::var(BACKEND_ENDPOINT_ENV)
            .ok()
            .filter(|v| !v.trim().is_empty())
            .or_else(|| self.backend_endpoint.clone())
    }
}

/// Reads a TOML run configuration.
pub fn load_generation_config(path: &Path) -> Result<GenerationConfig, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| {
        PipelineError::Config(format!("{} did not parse: {e}", path.display()))
    })
}

/// Replaces every [`RARE_TOKEN_PLACEHOLDER`] with the personalization
/// token; prompts without the placeholder pass through verbatim.
pub fn substitute_rare_token(prompt: &str, token: &str) -> String {
    prompt.replace(RARE_TOKEN_PLACEHOLDER, token)
}

/// The (face, body) prompts the router will carry for this config.
pub fn resolved_prompts(config: &GenerationConfig) -> (String, String) {
    match config.mode {
        Mode::Prompt => (config.face_prompt.clone(), config.body_prompt.clone()),
        Mode::Customized => {
            let fallback = caption_template(&config.recipe.rare_token);
            let pick = |p: &str| {
                if p.trim().is_empty() {
                    fallback.clone()
                } else {
                    p.to_string()
                }
            };
            (pick(&config.face_prompt), pick(&config.body_prompt))
        }
        Mode::Hybrid => (
            substitute_rare_token(&config.face_prompt, &config.recipe.rare_token),
            substitute_rare_token(&config.body_prompt, &config.recipe.rare_token),
        ),
    }
}

/// Everything a finished run leaves on disk, plus the final parameters.
#[derive(Debug)]
pub struct RunArtifacts {
    pub params: FieldParams,
    pub manifest: PathBuf,
    pub final_checkpoint: PathBuf,
    pub mesh: PathBuf,
    pub turntable: Vec<PathBuf>,
    pub diagnostics_csv: PathBuf,
    /// Synthesized multi-view directory (customized/hybrid runs only).
    pub synthetic_views: Option<PathBuf>,
}

fn ensure_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn build_codec(stride: usize) -> Result<Arc<dyn LatentCodec>, PipelineError> {
    Ok(if stride == 1 {
        Arc::new(IdentityCodec)
    } else {
        Arc::new(PooledCodec::new(stride)?)
    })
}

/// Constructs the configured base backend, failing fast (before step 0)
/// when it is unavailable.
pub fn build_configured_backend(
    config: &GenerationConfig,
) -> Result<Arc<dyn GuidanceBackend>, PipelineError> {
    match config.backend_kind {
        BackendKind::Oracle => {
            let path = config
                .oracle_target
                .as_ref()
                .ok_or_else(|| PipelineError::Config("oracle_target is not set".into()))?;
            let target = ImageBuf::load(path)?;
            let codec = build_codec(config.codec_stride)?;
            Ok(Arc::new(oracle_backend(
                &target,
                codec,
                NoiseSchedule::default(),
            )?))
        }
        BackendKind::External => {
            let endpoint = config.resolve_endpoint().ok_or_else(|| {
                PipelineError::Config(format!(
                    "no endpoint: set {BACKEND_ENDPOINT_ENV} or backend_endpoint"
                ))
            })?;
            // Probe now so a dead service fails the run before step 0.
            std::net::TcpStream::connect(&endpoint).map_err(|e| {
                PipelineError::Config(format!(
                    "guidance endpoint {endpoint} is unreachable: {e}"
                ))
            })?;
            Ok(Arc::new(RemoteBackend::new(endpoint)))
        }
    }
}

fn face_rig_radius(policy: &CameraPolicy) -> f32 {
    0.5 * (policy.radius_range_face.0 + policy.radius_range_face.1)
}

fn body_orbit_radius(policy: &CameraPolicy) -> f32 {
    0.5 * (policy.radius_range_body.0 + policy.radius_range_body.1)
}

/// Prepares the (face, body) backends for the configured mode,
/// personalizing them on the photo set in customized/hybrid runs. Draws
/// only the synthesis seeds from `rng`, so an identically seeded rerun
/// reproduces the same backends.
fn prepare_backends(
    config: &GenerationConfig,
    base: &Arc<dyn GuidanceBackend>,
    rng: &mut ChaCha8Rng,
) -> Result<
    (
        Arc<dyn GuidanceBackend>,
        Arc<dyn GuidanceBackend>,
        Option<SyntheticViews>,
    ),
    PipelineError,
> {
    if config.mode == Mode::Prompt {
        return Ok((Arc::clone(base), Arc::clone(base), None));
    }
    let root = config
        .image_root
        .as_ref()
        .expect("validated: customized/hybrid carry image_root");
    let set = load_image_set(root, &config.recipe.rare_token)?;
    let skeleton = PoseSkeleton::canonical_humanoid();

    let mut face_backend = Arc::clone(base);
    let mut body_backend = Arc::clone(base);
    let mut views = None;
    if !set.face_images.is_empty() {
        let rig = surround_view_cameras(
            skeleton.face_joint_center(),
            face_rig_radius(&config.camera_policy),
            config.camera_policy.resolution,
        )?;
        let cameras: Vec<Camera> = rig
            .into_iter()
            .take(config.recipe.multiview_count)
            .collect();
        let (tuned, synthesized) = pose_consistent_finetune(
            base.as_ref(),
            &set,
            &skeleton,
            &cameras,
            &config.recipe,
            rng,
        )?;
        face_backend = Arc::from(tuned);
        views = Some(synthesized);
    }
    if !set.body_images.is_empty() {
        body_backend = Arc::from(body_finetune(
            base.as_ref(),
            &set,
            config.recipe.body_steps,
        )?);
    }
    Ok((face_backend, body_backend, views))
}

fn write_diagnostics_csv(
    path: &Path,
    diagnostics: &VecDeque<StepDiagnostic>,
) -> Result<(), PipelineError> {
    let mut text = String::from("step,t,focus,kind,latent_grad_norm\n");
    for d in diagnostics {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            d.step,
            d.t,
            d.focus.as_str(),
            d.kind.as_str(),
            d.latent_grad_norm
        );
    }
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn snapshot(
    engine: &SdsEngine,
    params: &FieldParams,
    rng: &ChaCha8Rng,
    ladder: &ResolutionLadder,
    diagnostics: &VecDeque<StepDiagnostic>,
) -> RunCheckpoint {
    let (face_steps, body_steps) = engine.focus_counts();
    RunCheckpoint {
        step: engine.steps_taken(),
        face_steps,
        body_steps,
        ladder: ladder.clone(),
        rng: RngState::capture(rng),
        params: params.clone(),
        optimizer: engine.optimizer().clone(),
        diagnostics: diagnostics.iter().cloned().collect(),
    }
}

/// Runs the full generation pipeline for `config`: backend setup (with
/// personalization in customized/hybrid modes), the ladder-scheduled
/// distillation loop with checkpoints every `checkpoint_every` steps, a
/// final checkpoint, the turntable render set, and the mesh export.
pub fn run_generate(config: &GenerationConfig) -> Result<RunArtifacts, PipelineError> {
    config.validate()?;
    let base = build_configured_backend(config)?;
    run_generate_with(config, base, None)
}

/// Continues an interrupted run from a checkpoint written by
/// [`run_generate`]. The configuration must carry the same ladder; the
/// continuation reproduces an uninterrupted run bit for bit.
pub fn resume(
    checkpoint_path: &Path,
    config: &GenerationConfig,
) -> Result<RunArtifacts, PipelineError> {
    config.validate()?;
    let base = build_configured_backend(config)?;
    run_generate_with(config, base, Some(checkpoint_path))
}

/// [`run_generate`] with a caller-supplied base backend — the seam tests
/// use to audit backend traffic; `resume_from` continues a saved run.
pub fn run_generate_with(
    config: &GenerationConfig,
    base: Arc<dyn GuidanceBackend>,
    resume_from: Option<&Path>,
) -> Result<RunArtifacts, PipelineError> {
    config.validate()?;
    let restored = match resume_from {
        Some(path) => {
            let ckpt = read_run_checkpoint(path)?;
            if ckpt.ladder != config.ladder {
                return Err(PipelineError::Checkpoint(format!(
                    "resolution ladder changed since the checkpoint: saved stages {:?}, \
                     config stages {:?}",
                    ckpt.ladder.stages, config.ladder.stages
                )));
            }
            Some(ckpt)
        }
        None => None,
    };

    let out = &config.output_dir;
    let ckpt_dir = out.join("checkpoints");
    let turntable_dir = out.join("turntable");
    ensure_dir(out)?;
    ensure_dir(&ckpt_dir)?;
    ensure_dir(&turntable_dir)?;

    // The manifest pins the fully resolved configuration: runs with equal
    // manifests produce equal final checkpoints.
    let manifest = out.join("run.json");
    let manifest_json = serde_json::to_string_pretty(config)
        .map_err(|e| PipelineError::Config(format!("manifest serialization: {e}")))?;
    fs::write(&manifest, manifest_json).map_err(|source| PipelineError::Io {
        path: manifest.display().to_string(),
        source,
    })?;

    // Personalization consumes its draws from the same seeded stream on
    // every (re)start, so resumed runs rebuild identical backends before
    // the training generator state is restored.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (face_backend, body_backend, views) = prepare_backends(config, &base, &mut rng)?;
    let (face_prompt, body_prompt) = resolved_prompts(config);
    let router = GuidanceRouter::new(face_backend, body_backend, face_prompt, body_prompt);
    let codec = build_codec(config.codec_stride)?;

    let synthetic_views = match &views {
        Some(v) => Some(v.save(out)?),
        None => None,
    };

    let mut params = FieldParams::geometric_init(&config.field, config.init_radius, config.seed);
    let mut engine = SdsEngine::new(
        router,
        codec,
        config.sds,
        NoiseSchedule::default(),
        config.render,
        &params,
    )?;
    let mut diagnostics: VecDeque<StepDiagnostic> = VecDeque::new();
    let total = config.ladder.total_steps();
    let start = match restored {
        Some(ckpt) => {
            if ckpt.step as usize > total {
                return Err(PipelineError::Checkpoint(format!(
                    "checkpoint is {} steps in, past the ladder's {total}",
                    ckpt.step
                )));
            }
            engine.restore_optimizer(ckpt.optimizer)?;
            engine.restore_counters(ckpt.step, ckpt.face_steps, ckpt.body_steps);
            rng = ckpt.rng.restore();
            diagnostics = ckpt.diagnostics.into();
            params = ckpt.params;
            engine.steps_taken() as usize
        }
        None => 0,
    };

    let diagnostics_csv = out.join("diagnostics.csv");
    for step in start..total {
        let resolution = config.ladder.stage_for_step(step)?;
        let (camera, focus) = sample_camera(&config.camera_policy, &mut rng)?;
        let kind = sample_render_type(&config.render_type_policy, &mut rng)?;
        let diag = engine.sds_step(&mut params, &camera, focus, kind, None, resolution, &mut rng)?;
        if diagnostics.len() == DIAGNOSTIC_CAPACITY {
            diagnostics.pop_front();
        }
        diagnostics.push_back(diag);

        let done = step + 1;
        if done % config.checkpoint_every as usize == 0 && done != total {
            let path = ckpt_dir.join(format!("step_{done:06}.ckpt"));
            write_run_checkpoint(
                &snapshot(&engine, &params, &rng, &config.ladder, &diagnostics),
                &path,
            )?;
            write_diagnostics_csv(&diagnostics_csv, &diagnostics)?;
        }
    }

    let final_checkpoint = ckpt_dir.join("final.ckpt");
    write_run_checkpoint(
        &snapshot(&engine, &params, &rng, &config.ladder, &diagnostics),
        &final_checkpoint,
    )?;
    write_diagnostics_csv(&diagnostics_csv, &diagnostics)?;

    let turntable = run_turntable(
        &params,
        config.turntable_views,
        config.camera_policy.body_center,
        body_orbit_radius(&config.camera_policy),
        config.camera_policy.resolution,
        &config.render,
        &turntable_dir,
    )?;

    let mesh_path = out.join("avatar.obj");
    let mesh = marching_cubes(&params, config.mesh_grid, 0.0)?;
    export(&mesh, &mesh_path, MeshFormat::Obj)?;

    Ok(RunArtifacts {
        params,
        manifest,
        final_checkpoint,
        mesh: mesh_path,
        turntable,
        diagnostics_csv,
        synthetic_views,
    })
}

/// The fixed-elevation orbit used for evaluation renders: `n_views`
/// equally spaced azimuths at the horizon, starting in front of the
/// subject.
pub fn turntable_cameras(
    n_views: usize,
    center: [f32; 3],
    radius: f32,
    resolution: (usize, usize),
) -> Result<Vec<Camera>, PipelineError> {
    if n_views == 0 {
        return Err(PipelineError::Config(
            "a turntable needs at least one view".into(),
        ));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(PipelineError::Config(format!(
            "turntable radius {radius} must be positive"
        )));
    }
    let fov = TURNTABLE_FOV_DEGREES.to_radians();
    let focal = resolution.1 as f32 / 2.0 / (fov / 2.0).tan();
    (0..n_views)
        .map(|i| {
            let azimuth = (i as f32) * std::f32::consts::TAU / n_views as f32;
            let position = [
                center[0] + radius * azimuth.sin(),
                center[1],
                center[2] + radius * azimuth.cos(),
            ];
            Camera::look_at(position, center, [0.0, 1.0, 0.0], focal, resolution)
                .map_err(PipelineError::from)
        })
        .collect()
}

/// Renders the turntable orbit as `view_{i:03}.png` color images under
/// `out_dir` and returns the paths in view order.
pub fn run_turntable(
    params: &FieldParams,
    n_views: usize,
    center: [f32; 3],
    radius: f32,
    resolution: (usize, usize),
    options: &RenderOptions,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    ensure_dir(out_dir)?;
    let cameras = turntable_cameras(n_views, center, radius, resolution)?;
    let mut paths = Vec::with_capacity(cameras.len());
    for (i, camera) in cameras.iter().enumerate() {
        let image = render_view(params, camera, RenderKind::Color, None, options)?;
        let path = out_dir.join(format!("view_{i:03}.png"));
        image.save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads field parameters from either a field checkpoint or a full run
/// checkpoint, distinguished by their magic bytes.
pub fn load_params_from_checkpoint(path: &Path) -> Result<FieldParams, PipelineError> {
    let bytes = fs::read(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match bytes.get(..4) {
        Some(b"AVBF") => Ok(crate::field::decode_field(&bytes)?),
        Some(b"AVRC") => Ok(checkpoint::decode_run_checkpoint(&bytes)?.params),
        _ => Err(PipelineError::Checkpoint(format!(
            "{} is neither a field nor a run checkpoint",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use crate::guidance::{BackendCall, CallLog, RecordingBackend};

    use super::*;

    fn tiny_config(out: &Path) -> GenerationConfig {
        let mut camera_policy = CameraPolicy::default();
        camera_policy.resolution = (16, 16);
        GenerationConfig {
            mode: Mode::Prompt,
            face_prompt: "a portrait of an astronaut".into(),
            body_prompt: "an astronaut in a suit".into(),
            output_dir: out.to_path_buf(),
            oracle_target: Some(out.join("target.png")),
            checkpoint_every: 2,
            turntable_views: 3,
            mesh_grid: 16,
            ladder: ResolutionLadder {
                stages: vec![(16, 4)],
            },
            camera_policy,
            sds: SdsConfig {
                eikonal_points: 8,
                ..Default::default()
            },
            field: FieldConfig {
                hidden_dim: 16,
                sdf_hidden_layers: 2,
                color_hidden_layers: 2,
                point_octaves: 2,
                view_octaves: 1,
                ..Default::default()
            },
            render: RenderOptions {
                coarse_samples: 12,
                fine_samples: 6,
            },
            ..Default::default()
        }
    }

    fn write_target(config: &GenerationConfig) {
        let target = ImageBuf::filled(16, 16, [0.8, 0.3, 0.2]);
        target
            .save_png(config.oracle_target.as_ref().unwrap())
            .unwrap();
    }

    fn recorded_run(
        config: &GenerationConfig,
        resume_from: Option<&Path>,
    ) -> (RunArtifacts, Vec<BackendCall>) {
        write_target(config);
        let target = ImageBuf::load(config.oracle_target.as_ref().unwrap()).unwrap();
        let log = CallLog::new();
        let base = RecordingBackend::new(
            Box::new(
                oracle_backend(&target, Arc::new(IdentityCodec), NoiseSchedule::default())
                    .unwrap(),
            ),
            log.clone(),
        );
        let artifacts = run_generate_with(config, Arc::new(base), resume_from).unwrap();
        (artifacts, log.snapshot())
    }

    #[test]
    fn config_validation_catches_mode_and_backend_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let valid = {
            let c = tiny_config(dir.path());
            write_target(&c);
            c
        };
        valid.validate().unwrap();

        let customized_without_images = GenerationConfig {
            mode: Mode::Customized,
            ..valid.clone()
        };
        let err = customized_without_images.validate().unwrap_err();
        assert!(err.to_string().contains("image_root"), "{err}");

        let hybrid_without_prompts = GenerationConfig {
            mode: Mode::Hybrid,
            image_root: Some(dir.path().to_path_buf()),
            face_prompt: String::new(),
            ..valid.clone()
        };
        let err = hybrid_without_prompts.validate().unwrap_err();
        assert!(err.to_string().contains("prompt"), "{err}");

        let oracle_without_target = GenerationConfig {
            oracle_target: None,
            ..valid.clone()
        };
        assert!(oracle_without_target.validate().is_err());

        let external_without_endpoint = GenerationConfig {
            backend_kind: BackendKind::External,
            ..valid.clone()
        };
        let err = external_without_endpoint.validate().unwrap_err();
        assert!(err.to_string().contains("endpoint"), "{err}");

        let external_customized = GenerationConfig {
            backend_kind: BackendKind::External,
            backend_endpoint: Some("127.0.0.1:9".into()),
            mode: Mode::Customized,
            image_root: Some(dir.path().to_path_buf()),
            ..valid.clone()
        };
        assert!(external_customized.validate().is_err());

        for broken in [
            GenerationConfig {
                codec_stride: 0,
                ..valid.clone()
            },
            GenerationConfig {
                codec_stride: 3,
                ..valid.clone()
            },
            GenerationConfig {
                checkpoint_every: 0,
                ..valid.clone()
            },
            GenerationConfig {
                turntable_views: 0,
                ..valid.clone()
            },
            GenerationConfig {
                mesh_grid: 8,
                ..valid.clone()
            },
            GenerationConfig {
                init_radius: 2.0,
                ..valid.clone()
            },
        ] {
            assert!(broken.validate().is_err());
        }
    }

    #[test]
    fn toml_configs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.mode = Mode::Hybrid;
        config.image_root = Some(dir.path().join("photos"));
        config.backend_endpoint = Some("127.0.0.1:4000".into());

        let text = toml::to_string(&config).unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, &text).unwrap();
        let loaded = load_generation_config(&path).unwrap();
        assert_eq!(loaded, config);

        fs::write(&path, "mode = \"prompt\nbroken").unwrap();
        let err = load_generation_config(&path).unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)));

        // A partial document fills everything else with defaults.
        fs::write(&path, "seed = 7\n[ladder]\nstages = [[32, 10]]\n").unwrap();
        let partial = load_generation_config(&path).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.ladder.stages, vec![(32, 10)]);
        assert_eq!(partial.checkpoint_every, 500);
    }

    #[test]
    fn prompt_mode_never_personalizes_and_keeps_prompts_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let (_, calls) = recorded_run(&config, None);
        assert_eq!(calls.len(), config.ladder.total_steps());
        for call in &calls {
            match call {
                BackendCall::PredictNoise { prompt, .. } => {
                    assert!(
                        prompt == &config.face_prompt || prompt == &config.body_prompt,
                        "unexpected prompt {prompt:?}"
                    );
                }
                other => panic!("prompt mode made a non-prediction call: {other:?}"),
            }
        }
    }

    fn photo_root(dir: &Path) -> PathBuf {
        let root = dir.join("photos");
        fs::create_dir_all(root.join("face")).unwrap();
        fs::create_dir_all(root.join("body")).unwrap();
        ImageBuf::filled(16, 16, [0.2, 0.5, 0.7])
            .save_png(&root.join("face/a.png"))
            .unwrap();
        ImageBuf::filled(16, 16, [0.4, 0.4, 0.1])
            .save_png(&root.join("face/b.png"))
            .unwrap();
        ImageBuf::filled(16, 16, [0.6, 0.6, 0.6])
            .save_png(&root.join("body/c.png"))
            .unwrap();
        root
    }

    #[test]
    fn hybrid_runs_personalize_both_routes_and_substitute_the_token() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.mode = Mode::Hybrid;
        config.image_root = Some(photo_root(dir.path()));
        config.face_prompt = "a [V] person with yellow hair".into();
        config.body_prompt = "a [V] person wearing a red coat".into();
        config.recipe = FinetuneRecipe {
            stage1_steps: 3,
            stage2_steps: 2,
            body_steps: 4,
            multiview_count: 2,
            ..Default::default()
        };

        let (artifacts, calls) = recorded_run(&config, None);

        // Personalization traffic comes first, in recipe order.
        assert_eq!(
            calls[0],
            BackendCall::Finetune {
                dataset_size: 2,
                steps: 3
            }
        );
        assert!(matches!(
            calls[1],
            BackendCall::Generate {
                conditioned: true,
                ..
            }
        ));
        assert!(matches!(calls[2], BackendCall::Generate { .. }));
        assert_eq!(
            calls[3],
            BackendCall::Finetune {
                dataset_size: 4,
                steps: 2
            }
        );
        assert_eq!(
            calls[4],
            BackendCall::Finetune {
                dataset_size: 1,
                steps: 4
            }
        );

        // Training predictions carry the substituted prompts.
        let expected_face = "a sks person with yellow hair";
        let expected_body = "a sks person wearing a red coat";
        let predictions: Vec<&BackendCall> = calls[5..].iter().collect();
        assert_eq!(predictions.len(), config.ladder.total_steps());
        for call in predictions {
            match call {
                BackendCall::PredictNoise { prompt, .. } => {
                    assert!(
                        prompt == expected_face || prompt == expected_body,
                        "prompt {prompt:?} was not substituted"
                    );
                }
                other => panic!("unexpected call during training: {other:?}"),
            }
        }

        // The synthesized views landed next to the other artifacts.
        let mv = artifacts.synthetic_views.unwrap();
        assert!(mv.join("view_00.png").is_file());
        assert!(mv.join("pose_01.png").is_file());
        assert!(mv.join("provenance.json").is_file());
    }

    #[test]
    fn runs_leave_a_complete_artifact_trail() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        write_target(&config);
        let artifacts = run_generate(&config).unwrap();

        // Periodic checkpoint at step 2; step 4 is the final one.
        assert!(dir.path().join("checkpoints/step_000002.ckpt").is_file());
        assert_eq!(
            artifacts.final_checkpoint,
            dir.path().join("checkpoints/final.ckpt")
        );
        let final_ckpt = read_run_checkpoint(&artifacts.final_checkpoint).unwrap();
        assert_eq!(final_ckpt.step, 4);
        assert_eq!(final_ckpt.params, artifacts.params);

        let manifest: GenerationConfig =
            serde_json::from_str(&fs::read_to_string(&artifacts.manifest).unwrap()).unwrap();
        assert_eq!(manifest, config);

        let csv = fs::read_to_string(&artifacts.diagnostics_csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4, "header plus one row per step");
        assert_eq!(lines[0], "step,t,focus,kind,latent_grad_norm");
        assert!(lines[1].starts_with("0,"));

        assert_eq!(artifacts.turntable.len(), 3);
        for (i, path) in artifacts.turntable.iter().enumerate() {
            assert_eq!(
                path.file_name().unwrap().to_str().unwrap(),
                format!("view_{i:03}.png")
            );
            assert!(path.is_file());
        }

        let obj = fs::read_to_string(&artifacts.mesh).unwrap();
        assert!(obj.lines().any(|l| l.starts_with("v ")));
        assert!(obj.lines().any(|l| l.starts_with("f ")));
    }

    #[test]
    fn resume_continues_bit_identically_and_rejects_ladder_changes() {
        let base_dir = tempfile::tempdir().unwrap();
        let mut config_a = tiny_config(&base_dir.path().join("a"));
        config_a.ladder = ResolutionLadder {
            stages: vec![(16, 6)],
        };
        fs::create_dir_all(&config_a.output_dir).unwrap();
        write_target(&config_a);
        let artifacts_a = run_generate(&config_a).unwrap();
        let final_a = fs::read(&artifacts_a.final_checkpoint).unwrap();

        // Pretend the run died after step 2 and resume into a fresh dir.
        let mid = config_a.output_dir.join("checkpoints/step_000002.ckpt");
        assert!(mid.is_file());
        let mut config_b = config_a.clone();
        config_b.output_dir = base_dir.path().join("b");
        fs::create_dir_all(&config_b.output_dir).unwrap();
        write_target(&config_b);
        let artifacts_b = resume(&mid, &config_b).unwrap();
        let final_b = fs::read(&artifacts_b.final_checkpoint).unwrap();
        assert_eq!(final_a, final_b, "resumed run diverged");

        // The diagnostics trail covers the whole run after the resume.
        let csv = fs::read_to_string(&artifacts_b.diagnostics_csv).unwrap();
        assert_eq!(csv.lines().count(), 1 + 6);

        // A different ladder is rejected with both stage lists.
        let mut config_c = config_b.clone();
        config_c.ladder = ResolutionLadder {
            stages: vec![(16, 8)],
        };
        let err = resume(&mid, &config_c).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("(16, 6)") && message.contains("(16, 8)"), "{message}");
    }

    #[test]
    fn identical_seeds_produce_identical_final_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut finals = Vec::new();
        for name in ["first", "second"] {
            let config = tiny_config(&dir.path().join(name));
            fs::create_dir_all(&config.output_dir).unwrap();
            write_target(&config);
            let artifacts = run_generate(&config).unwrap();
            finals.push(fs::read(&artifacts.final_checkpoint).unwrap());
        }
        assert_eq!(finals[0], finals[1]);
    }

    #[test]
    fn turntable_views_are_evenly_spaced_and_named() {
        let center = [0.1, -0.2, 0.3];
        let cameras = turntable_cameras(25, center, 2.0, (16, 16)).unwrap();
        assert_eq!(cameras.len(), 25);
        // First view sits directly in front (+z of the subject).
        let first = cameras[0].translation;
        assert!((first[0] - center[0]).abs() < 1e-5);
        assert!((first[2] - (center[2] + 2.0)).abs() < 1e-5);
        // Adjacent azimuths are 360/25 = 14.4 degrees apart.
        for pair in cameras.windows(2) {
            let to = |c: &Camera| {
                let p = c.translation;
                [p[0] - center[0], p[2] - center[2]]
            };
            let a = to(&pair[0]);
            let b = to(&pair[1]);
            let dot = (a[0] * b[0] + a[1] * b[1]) / (2.0 * 2.0);
            let angle = dot.clamp(-1.0, 1.0).acos().to_degrees();
            assert!((angle - 14.4).abs() < 1e-3, "spacing {angle}");
        }

        let params = FieldParams::geometric_init(
            &FieldConfig {
                hidden_dim: 16,
                sdf_hidden_layers: 2,
                color_hidden_layers: 2,
                point_octaves: 2,
                view_octaves: 1,
                ..Default::default()
            },
            0.7,
            3,
        );
        let dir = tempfile::tempdir().unwrap();
        let options = RenderOptions {
            coarse_samples: 12,
            fine_samples: 6,
        };
        let paths =
            run_turntable(&params, 8, [0.0; 3], 2.0, (24, 24), &options, dir.path()).unwrap();
        assert_eq!(paths.len(), 8);
        assert!(dir.path().join("view_007.png").is_file());

        // A sphere's silhouette is identical from every azimuth, so
        // adjacent opacity masks overlap almost perfectly.
        let masks: Vec<Vec<bool>> = paths
            .iter()
            .map(|p| {
                let img = ImageBuf::load(p).unwrap();
                img.data
                    .chunks(3)
                    .map(|px| px.iter().any(|&c| (c - 1.0).abs() > 0.1))
                    .collect()
            })
            .collect();
        assert!(masks[0].iter().any(|&m| m), "sphere not visible");
        for pair in masks.windows(2) {
            let inter = pair[0]
                .iter()
                .zip(&pair[1])
                .filter(|&(&a, &b)| a && b)
                .count();
            let union = pair[0]
                .iter()
                .zip(&pair[1])
                .filter(|&(&a, &b)| a || b)
                .count();
            assert!(
                inter as f64 / union as f64 > 0.5,
                "adjacent-view IoU {inter}/{union}"
            );
        }

        let single = turntable_cameras(1, center, 2.0, (16, 16)).unwrap();
        assert_eq!(single.len(), 1);
        assert!(turntable_cameras(0, center, 2.0, (16, 16)).is_err());
    }

    #[test]
    fn both_checkpoint_flavors_load_as_field_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let params = FieldParams::geometric_init(
            &FieldConfig {
                hidden_dim: 16,
                sdf_hidden_layers: 2,
                color_hidden_layers: 2,
                point_octaves: 2,
                view_octaves: 1,
                ..Default::default()
            },
            0.6,
            8,
        );

        let field_path = dir.path().join("field.bin");
        crate::field::save_field(&params, &field_path).unwrap();
        assert_eq!(load_params_from_checkpoint(&field_path).unwrap(), params);

        let run_path = dir.path().join("run.ckpt");
        let ckpt = RunCheckpoint {
            step: 0,
            face_steps: 0,
            body_steps: 0,
            ladder: ResolutionLadder::default(),
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(1)),
            params: params.clone(),
            optimizer: crate::optim::Adam::new(0.005, params.n_params()),
            diagnostics: Vec::new(),
        };
        write_run_checkpoint(&ckpt, &run_path).unwrap();
        assert_eq!(load_params_from_checkpoint(&run_path).unwrap(), params);

        let junk = dir.path().join("junk.bin");
        fs::write(&junk, b"JUNKJUNK").unwrap();
        assert!(load_params_from_checkpoint(&junk).is_err());
    }
}
