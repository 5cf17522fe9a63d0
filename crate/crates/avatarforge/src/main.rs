//! Command-line front end: full generation runs (resumable), standalone
//! photo-set personalization, turntable renders, and mesh export from
//! saved checkpoints.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use avatarforge::finetune::{body_finetune, load_image_set, pose_consistent_finetune};
use avatarforge::mesh::{export, marching_cubes, MeshFormat};
use avatarforge::pipeline::{
    build_configured_backend, load_generation_config, load_params_from_checkpoint, run_generate,
    run_turntable, resume, GenerationConfig, Mode, PipelineError,
};
use avatarforge::renderer::RenderOptions;
use avatarforge::sampler::{surround_view_cameras, CameraPolicy, PoseSkeleton};

#[derive(Parser)]
#[command(
    name = "avatarforge",
    version,
    about = "Text- and photo-driven 3D avatar generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full generation (personalizing first in photo-driven modes).
    Generate {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Continue from a run checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Personalize the guidance backends on a photo set and save the
    /// synthesized multi-view images, without starting a generation run.
    Finetune {
        /// TOML run configuration (customized or hybrid mode).
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Render an evaluation orbit around a saved avatar.
    Turntable {
        /// Field or run checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Equally spaced azimuths in the orbit.
        #[arg(long, default_value_t = 25)]
        views: usize,
        /// Directory the view images are written to.
        #[arg(long)]
        output_dir: PathBuf,
        /// Orbit radius in world units (default: the body orbit of the
        /// standard camera policy).
        #[arg(long)]
        radius: Option<f32>,
        /// Square image resolution in pixels.
        #[arg(long, default_value_t = 128)]
        resolution: usize,
    },
    /// Extract the avatar surface from a checkpoint and export it.
    ExportMesh {
        /// Field or run checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Marching-cubes grid resolution.
        #[arg(long, default_value_t = 256)]
        grid: usize,
        #[arg(long, value_enum, default_value_t = FormatArg::Obj)]
        format: FormatArg,
        /// Directory the mesh file is written to.
        #[arg(long)]
        output_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Obj,
    Ply,
}

impl FormatArg {
    fn mesh_format(self) -> MeshFormat {
        match self {
            FormatArg::Obj => MeshFormat::Obj,
            FormatArg::Ply => MeshFormat::Ply,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            FormatArg::Obj => "obj",
            FormatArg::Ply => "ply",
        }
    }
}

fn load_config(
    path: &PathBuf,
    output_dir: Option<PathBuf>,
) -> Result<GenerationConfig, PipelineError> {
    let mut config = load_generation_config(path)?;
    if let Some(dir) = output_dir {
        config.output_dir = dir;
    }
    Ok(config)
}

fn cmd_generate(
    config: PathBuf,
    resume_from: Option<PathBuf>,
    output_dir: Option<PathBuf>,
) -> Result<(), PipelineError> {
    let config = load_config(&config, output_dir)?;
    let artifacts = match &resume_from {
        Some(ckpt) => resume(ckpt, &config)?,
        None => run_generate(&config)?,
    };
    println!("manifest:         {}", artifacts.manifest.display());
    println!("final checkpoint: {}", artifacts.final_checkpoint.display());
    println!("mesh:             {}", artifacts.mesh.display());
    println!("diagnostics:      {}", artifacts.diagnostics_csv.display());
    println!("turntable views:  {}", artifacts.turntable.len());
    if let Some(mv) = &artifacts.synthetic_views {
        println!("multi-views:      {}", mv.display());
    }
    Ok(())
}

fn cmd_finetune(config: PathBuf, output_dir: Option<PathBuf>) -> Result<(), PipelineError> {
    let config = load_config(&config, output_dir)?;
    config.validate()?;
    if config.mode == Mode::Prompt {
        return Err(PipelineError::Config(
            "finetune needs a photo-driven config: set mode to customized or hybrid".into(),
        ));
    }
    let root = config
        .image_root
        .as_ref()
        .expect("validated: photo modes carry image_root");
    let set = load_image_set(root, &config.recipe.rare_token)?;
    let base = build_configured_backend(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    std::fs::create_dir_all(&config.output_dir).map_err(|source| PipelineError::Io {
        path: config.output_dir.display().to_string(),
        source,
    })?;
    if !set.face_images.is_empty() {
        let skeleton = PoseSkeleton::canonical_humanoid();
        let radius = 0.5
            * (config.camera_policy.radius_range_face.0 + config.camera_policy.radius_range_face.1);
        let rig = surround_view_cameras(
            skeleton.face_joint_center(),
            radius,
            config.camera_policy.resolution,
        )?;
        let cameras: Vec<_> = rig.into_iter().take(config.recipe.multiview_count).collect();
        let (_tuned, views) = pose_consistent_finetune(
            base.as_ref(),
            &set,
            &skeleton,
            &cameras,
            &config.recipe,
            &mut rng,
        )?;
        let mv = views.save(&config.output_dir)?;
        println!(
            "face personalization done ({} photos, {} synthesized views)",
            set.face_images.len(),
            views.len()
        );
        println!("multi-views:      {}", mv.display());
    } else {
        println!("no face photos found; skipped the face stages");
    }
    if !set.body_images.is_empty() {
        body_finetune(base.as_ref(), &set, config.recipe.body_steps)?;
        println!(
            "body personalization done ({} photos, {} steps)",
            set.body_images.len(),
            config.recipe.body_steps
        );
    } else {
        println!("no body photos found; skipped the body stage");
    }
    Ok(())
}

fn cmd_turntable(
    ckpt: PathBuf,
    views: usize,
    output_dir: PathBuf,
    radius: Option<f32>,
    resolution: usize,
) -> Result<(), PipelineError> {
    let params = load_params_from_checkpoint(&ckpt)?;
    let policy = CameraPolicy::default();
    let radius =
        radius.unwrap_or(0.5 * (policy.radius_range_body.0 + policy.radius_range_body.1));
    let paths = run_turntable(
        &params,
        views,
        policy.body_center,
        radius,
        (resolution, resolution),
        &RenderOptions::default(),
        &output_dir,
    )?;
    println!(
        "{} views written under {}",
        paths.len(),
        output_dir.display()
    );
    Ok(())
}

fn cmd_export_mesh(
    ckpt: PathBuf,
    grid: usize,
    format: FormatArg,
    output_dir: PathBuf,
) -> Result<(), PipelineError> {
    let params = load_params_from_checkpoint(&ckpt)?;
    let mesh = marching_cubes(&params, grid, 0.0)?;
    std::fs::create_dir_all(&output_dir).map_err(|source| PipelineError::Io {
        path: output_dir.display().to_string(),
        source,
    })?;
    let path = output_dir.join(format!("avatar.{}", format.extension()));
    export(&mesh, &path, format.mesh_format())?;
    println!(
        "{} vertices, {} triangles -> {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            config,
            resume,
            output_dir,
        } => cmd_generate(config, resume, output_dir),
        Command::Finetune { config, output_dir } => cmd_finetune(config, output_dir),
        Command::Turntable {
            ckpt,
            views,
            output_dir,
            radius,
            resolution,
        } => cmd_turntable(ckpt, views, output_dir, radius, resolution),
        Command::ExportMesh {
            ckpt,
            grid,
            format,
            output_dir,
        } => cmd_export_mesh(ckpt, grid, format, output_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
