//! Personalization orchestration: loading user photo sets, the two-stage
//! pose-consistent face specialization (initial model → pose-conditioned
//! multi-view synthesis → final model), and single-stage body
//! specialization — all through the pluggable guidance-backend contract.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::{GuidanceBackend, GuidanceError};
use crate::hash::sha256_hex;
use crate::image::{ImageBuf, ImageError};
use crate::renderer::Camera;
use crate::sampler::{render_skeleton_conditioning, PoseSkeleton};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("finetune contract violation: {0}")]
    Contract(String),
    #[error("image set validation failed: {0}")]
    Validation(String),
    #[error("image {path} did not load: {source}")]
    Image { path: String, source: ImageError },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    /// A backend call failed mid-sequence. The checkpoint carries every
    /// completed stage; pass it to [`resume_pose_consistent_finetune`] to
    /// finish the run without repeating finished work.
    #[error("backend failure after {} (resumable): {source}", checkpoint.progress())]
    Interrupted {
        checkpoint: FinetuneCheckpoint,
        source: GuidanceError,
    },
}

/// Caption applied to images that have no entry in `captions.txt`, and to
/// synthesized multi-view faces.
pub fn caption_template(rare_token: &str) -> String {
    format!("a photo of {rare_token} person")
}

/// User-supplied personalization photos, split by framing.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub face_images: Vec<(ImageBuf, String)>,
    pub body_images: Vec<(ImageBuf, String)>,
    pub source_dir: PathBuf,
}

impl ImageSet {
    /// In-memory set for callers that bypass the directory layout.
    pub fn from_parts(
        face_images: Vec<(ImageBuf, String)>,
        body_images: Vec<(ImageBuf, String)>,
    ) -> ImageSet {
        ImageSet {
            face_images,
            body_images,
            source_dir: PathBuf::new(),
        }
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.face_images.len(), self.body_images.len())
    }
}

/// Step counts and naming for the specialization stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneRecipe {
    /// Steps for the initial face model that synthesizes multi-views.
    pub stage1_steps: u32,
    /// Steps for the final face model trained on reals + multi-views.
    pub stage2_steps: u32,
    /// Steps for the body model.
    pub body_steps: u32,
    /// Number of surround views to synthesize between the face stages.
    pub multiview_count: usize,
    /// Rare identifier token every caption must carry.
    pub rare_token: String,
    /// Label written into provenance records.
    pub backend_label: String,
}

impl Default for FinetuneRecipe {
    fn default() -> Self {
        FinetuneRecipe {
            stage1_steps: 900,
            stage2_steps: 500,
            body_steps: 500,
            multiview_count: 16,
            rare_token: "sks".into(),
            backend_label: "guidance-backend".into(),
        }
    }
}

impl FinetuneRecipe {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if self.stage1_steps == 0 || self.stage2_steps == 0 || self.body_steps == 0 {
            return Err(FinetuneError::Contract(
                "all stage step counts must be positive".into(),
            ));
        }
        if self.multiview_count == 0 {
            return Err(FinetuneError::Contract(
                "multiview count must be positive".into(),
            ));
        }
        if self.rare_token.trim().is_empty() {
            return Err(FinetuneError::Contract(
                "the rare token must be a non-empty string".into(),
            ));
        }
        Ok(())
    }
}

/// Provenance of one synthesized view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewProvenance {
    pub index: usize,
    /// Seed of the dedicated generator stream for this view.
    pub seed: u64,
    /// SHA-256 of the PNG encoding of the conditioning image.
    pub conditioning_sha256: String,
}

/// The K synthesized surround-view faces with the pose images that
/// conditioned them and full provenance.
#[derive(Debug, Clone)]
pub struct SyntheticViews {
    pub images: Vec<ImageBuf>,
    pub conditioning: Vec<ImageBuf>,
    pub provenance: Vec<ViewProvenance>,
    pub backend_label: String,
}

impl SyntheticViews {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Writes `view_XX.png`, `pose_XX.png`, and `provenance.json` into
    /// `<out_dir>/mv/`.
    pub fn save(&self, out_dir: &Path) -> Result<PathBuf, FinetuneError> {
        let mv_dir = out_dir.join("mv");
        fs::create_dir_all(&mv_dir).map_err(|e| FinetuneError::Io {
            path: mv_dir.display().to_string(),
            source: e,
        })?;
        for (i, (image, pose)) in self.images.iter().zip(&self.conditioning).enumerate() {
            let view_path = mv_dir.join(format!("view_{i:02}.png"));
            image.save_png(&view_path).map_err(|e| FinetuneError::Image {
                path: view_path.display().to_string(),
                source: e,
            })?;
            let pose_path = mv_dir.join(format!("pose_{i:02}.png"));
            pose.save_png(&pose_path).map_err(|e| FinetuneError::Image {
                path: pose_path.display().to_string(),
                source: e,
            })?;
        }
        #[derive(Serialize)]
        struct ProvenanceFile<'a> {
            backend: &'a str,
            views: &'a [ViewProvenance],
        }
        let json = serde_json::to_string_pretty(&ProvenanceFile {
            backend: &self.backend_label,
            views: &self.provenance,
        })
        .map_err(|e| FinetuneError::Contract(format!("provenance serialization: {e}")))?;
        let path = mv_dir.join("provenance.json");
        fs::write(&path, json).map_err(|e| FinetuneError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(mv_dir)
    }
}

/// Everything completed before a mid-sequence backend failure: the
/// derived stage-1 backend (if that stage finished), the views produced
/// so far, and the per-view seeds drawn up front (so the remaining views
/// come out identical on resume).
pub struct FinetuneCheckpoint {
    stage1_backend: Option<Box<dyn GuidanceBackend>>,
    views: Vec<(ImageBuf, ImageBuf, ViewProvenance)>,
    view_seeds: Vec<u64>,
}

impl FinetuneCheckpoint {
    /// Human-readable completed-stage marker.
    pub fn progress(&self) -> String {
        match (&self.stage1_backend, self.views.len()) {
            (None, _) => "no completed stages".into(),
            (Some(_), n) => format!("stage 1 and {n} of {} views", self.view_seeds.len()),
        }
    }

    pub fn completed_views(&self) -> usize {
        self.views.len()
    }

    pub fn stage1_done(&self) -> bool {
        self.stage1_backend.is_some()
    }
}

// The backend handle has no Debug bound, so the derive is unavailable.
impl fmt::Debug for FinetuneCheckpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FinetuneCheckpoint")
            .field("stage1_done", &self.stage1_backend.is_some())
            .field("completed_views", &self.views.len())
            .field("planned_views", &self.view_seeds.len())
            .finish()
    }
}

/// Two-stage pose-consistent face specialization: (1) specialize `base`
/// on the real faces; (2) generate one face per camera, conditioned on
/// the skeleton rendered from that camera; (3) specialize `base` again on
/// reals plus synthetics. Returns the final backend and the views.
///
/// On a backend failure the error carries a [`FinetuneCheckpoint`];
/// finishing the run via [`resume_pose_consistent_finetune`] produces the
/// same backend-call sequence as an uninterrupted run.
pub fn pose_consistent_finetune(
    base: &dyn GuidanceBackend,
    faces: &ImageSet,
    skeleton: &PoseSkeleton,
    cameras: &[Camera],
    recipe: &FinetuneRecipe,
    rng: &mut dyn RngCore,
) -> Result<(Box<dyn GuidanceBackend>, SyntheticViews), FinetuneError> {
    let view_seeds: Vec<u64> = (0..recipe.multiview_count).map(|_| rng.next_u64()).collect();
    let checkpoint = FinetuneCheckpoint {
        stage1_backend: None,
        views: Vec::new(),
        view_seeds,
    };
    run_pose_consistent(base, faces, skeleton, cameras, recipe, checkpoint)
}

/// Continues an interrupted [`pose_consistent_finetune`] run from its
/// checkpoint, repeating no completed backend call.
pub fn resume_pose_consistent_finetune(
    base: &dyn GuidanceBackend,
    faces: &ImageSet,
    skeleton: &PoseSkeleton,
    cameras: &[Camera],
    recipe: &FinetuneRecipe,
    checkpoint: FinetuneCheckpoint,
) -> Result<(Box<dyn GuidanceBackend>, SyntheticViews), FinetuneError> {
    if checkpoint.view_seeds.len() != recipe.multiview_count {
        return Err(FinetuneError::Contract(format!(
            "checkpoint planned {} views but the recipe wants {}",
            checkpoint.view_seeds.len(),
            recipe.multiview_count
        )));
    }
    run_pose_consistent(base, faces, skeleton, cameras, recipe, checkpoint)
}

fn run_pose_consistent(
    base: &dyn GuidanceBackend,
    faces: &ImageSet,
    skeleton: &PoseSkeleton,
    cameras: &[Camera],
    recipe: &FinetuneRecipe,
    checkpoint: FinetuneCheckpoint,
) -> Result<(Box<dyn GuidanceBackend>, SyntheticViews), FinetuneError> {
    recipe.validate()?;
    if faces.face_images.is_empty() {
        return Err(FinetuneError::Validation(
            "the face image set is empty".into(),
        ));
    }
    if cameras.len() != recipe.multiview_count {
        return Err(FinetuneError::Contract(format!(
            "{} cameras supplied for {} views",
            cameras.len(),
            recipe.multiview_count
        )));
    }

    let FinetuneCheckpoint {
        stage1_backend,
        mut views,
        view_seeds,
    } = checkpoint;

    // Stage 1: the initial model that will synthesize surround views.
    let initial = match stage1_backend {
        Some(backend) => backend,
        None => match base.finetune(&faces.face_images, recipe.stage1_steps) {
            Ok(backend) => backend,
            Err(source) => {
                return Err(FinetuneError::Interrupted {
                    checkpoint: FinetuneCheckpoint {
                        stage1_backend: None,
                        views,
                        view_seeds,
                    },
                    source,
                })
            }
        },
    };

    // Stage 2 inputs: one generated face per surround camera, each on its
    // own seeded stream so a resumed run synthesizes identical views.
    let caption = caption_template(&recipe.rare_token);
    while views.len() < recipe.multiview_count {
        let i = views.len();
        let conditioning = render_skeleton_conditioning(skeleton, &cameras[i])
            .map_err(|e| FinetuneError::Contract(e.to_string()))?;
        let png = conditioning
            .encode_png()
            .map_err(|e| FinetuneError::Contract(format!("conditioning image: {e}")))?;
        let seed = view_seeds[i];
        let mut view_rng = ChaCha8Rng::seed_from_u64(seed);
        match initial.generate(&caption, Some(&conditioning), &mut view_rng) {
            Ok(image) => {
                let provenance = ViewProvenance {
                    index: i,
                    seed,
                    conditioning_sha256: sha256_hex(&png),
                };
                views.push((image, conditioning, provenance));
            }
            Err(source) => {
                return Err(FinetuneError::Interrupted {
                    checkpoint: FinetuneCheckpoint {
                        stage1_backend: Some(initial),
                        views,
                        view_seeds,
                    },
                    source,
                })
            }
        }
    }

    // Stage 3: the final model sees reals and synthetics together.
    let mut merged: Vec<(ImageBuf, String)> = faces.face_images.clone();
    merged.extend(
        views
            .iter()
            .map(|(image, _, _)| (image.clone(), caption.clone())),
    );
    let final_backend = match base.finetune(&merged, recipe.stage2_steps) {
        Ok(backend) => backend,
        Err(source) => {
            return Err(FinetuneError::Interrupted {
                checkpoint: FinetuneCheckpoint {
                    stage1_backend: Some(initial),
                    views,
                    view_seeds,
                },
                source,
            })
        }
    };

    let mut images = Vec::with_capacity(views.len());
    let mut conditioning = Vec::with_capacity(views.len());
    let mut provenance = Vec::with_capacity(views.len());
    for (image, pose, p) in views {
        images.push(image);
        conditioning.push(pose);
        provenance.push(p);
    }
    Ok((
        final_backend,
        SyntheticViews {
            images,
            conditioning,
            provenance,
            backend_label: recipe.backend_label.clone(),
        },
    ))
}

/// Single-stage body specialization.
pub fn body_finetune(
    base: &dyn GuidanceBackend,
    bodies: &ImageSet,
    steps: u32,
) -> Result<Box<dyn GuidanceBackend>, FinetuneError> {
    if steps == 0 {
        return Err(FinetuneError::Contract(
            "body specialization needs a positive step count".into(),
        ));
    }
    if bodies.body_images.is_empty() {
        return Err(FinetuneError::Validation(
            "the body image set is empty".into(),
        ));
    }
    Ok(base.finetune(&bodies.body_images, steps)?)
}

/// Loads `<dir>/face/` and `<dir>/body/` images (PNG/JPEG), applies
/// captions from `<dir>/captions.txt` (`filename<TAB>caption` lines) or
/// the default template, and validates every caption carries
/// `rare_token`.
pub fn load_image_set(dir: &Path, rare_token: &str) -> Result<ImageSet, FinetuneError> {
    if !dir.is_dir() {
        return Err(FinetuneError::Validation(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let captions = load_captions(dir)?;
    let default_caption = caption_template(rare_token);

    let mut offenders: Vec<String> = Vec::new();
    let mut load_group = |sub: &str| -> Result<Vec<(ImageBuf, String)>, FinetuneError> {
        let group_dir = dir.join(sub);
        if !group_dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut names: Vec<String> = Vec::new();
        let entries = fs::read_dir(&group_dir).map_err(|e| FinetuneError::Io {
            path: group_dir.display().to_string(),
            source: e,
        })?;
        for entry in entries {
            let entry = entry.map_err(|e| FinetuneError::Io {
                path: group_dir.display().to_string(),
                source: e,
            })?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let lower = name.to_lowercase();
            if lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
                names.push(name);
            }
        }
        names.sort();
        let mut images = Vec::with_capacity(names.len());
        for name in names {
            let path = group_dir.join(&name);
            let image = ImageBuf::load(&path).map_err(|e| FinetuneError::Image {
                path: path.display().to_string(),
                source: e,
            })?;
            let caption = captions
                .iter()
                .find(|(file, _)| file == &name)
                .map(|(_, c)| c.clone())
                .unwrap_or_else(|| default_caption.clone());
            if !caption.contains(rare_token) {
                offenders.push(format!("{sub}/{name}"));
            }
            images.push((image, caption));
        }
        Ok(images)
    };

    let face_images = load_group("face")?;
    let body_images = load_group("body")?;
    if !offenders.is_empty() {
        return Err(FinetuneError::Validation(format!(
            "captions missing the rare token {rare_token:?}: {}",
            offenders.join(", ")
        )));
    }
    if face_images.is_empty() && body_images.is_empty() {
        return Err(FinetuneError::Validation(format!(
            "no images found under {} (expected face/ and/or body/ subdirectories)",
            dir.display()
        )));
    }
    Ok(ImageSet {
        face_images,
        body_images,
        source_dir: dir.to_path_buf(),
    })
}

fn load_captions(dir: &Path) -> Result<Vec<(String, String)>, FinetuneError> {
    let path = dir.join("captions.txt");
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| FinetuneError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut captions = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((file, caption)) = line.split_once('\t') else {
            return Err(FinetuneError::Validation(format!(
                "captions.txt line {}: expected `filename<TAB>caption`, got {line:?}",
                lineno + 1
            )));
        };
        captions.push((file.trim().to_string(), caption.trim().to_string()));
    }
    Ok(captions)
}
