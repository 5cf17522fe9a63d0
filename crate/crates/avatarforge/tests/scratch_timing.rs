//! Temporary scale-finding harness; deleted before commit.

use std::sync::Arc;
use std::time::Instant;

use avatarforge::field::{init_from_template_with, FieldConfig, TemplateBody};
use avatarforge::guidance::{
    oracle_backend, GuidanceRouter, IdentityCodec, LatentCodec, NoiseSchedule, SdsConfig,
    SdsEngine,
};
use avatarforge::renderer::{render_view, RenderKind, RenderOptions};
use avatarforge::sampler::{sample_camera, CameraPolicy};
use avatarforge::schedule::upsample;
use avatarforge::FieldParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn probe_fit_convergence() {
    for (hidden, steps) in [(32usize, 1000u32), (32, 2000), (48, 2000)] {
        let config = FieldConfig {
            hidden_dim: hidden,
            ..Default::default()
        };
        let template = TemplateBody::unit_sphere(3);
        let t0 = Instant::now();
        let (_params, report) = init_from_template_with(&config, &template, steps, 17).unwrap();
        println!(
            "hidden {hidden} steps {steps}: residual {:.5} in {:.1?}",
            report.mean_abs_residual,
            t0.elapsed()
        );
    }
}

#[test]
fn probe_render_and_mesh_on_fitted_sphere() {
    use avatarforge::mesh::{euler_characteristic, is_watertight, marching_cubes};
    use avatarforge::renderer::{generate_rays, render_normal, Camera};

    let config = FieldConfig {
        hidden_dim: 32,
        ..Default::default()
    };
    let template = TemplateBody::unit_sphere(3);
    let (mut params, report) = init_from_template_with(&config, &template, 2000, 17).unwrap();
    println!("fit residual {:.5}", report.mean_abs_residual);
    params.logistic_scale = 150.0;

    let res = 33usize;
    let camera = Camera::look_at(
        [0.0, 0.0, -3.0],
        [0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        res as f32,
        (res, res),
    )
    .unwrap();
    let t0 = Instant::now();
    let bundle = render_normal(&params, &camera).unwrap();
    println!("bundle render in {:.2?}", t0.elapsed());
    let center = (res / 2) * res + res / 2;
    println!(
        "center depth {:.4} (analytic 2.0), opacity {:.4}",
        bundle.depth[center], bundle.opacity[center]
    );
    let max_opacity = bundle.opacity.iter().cloned().fold(0.0f32, f32::max);
    println!("max opacity {max_opacity:.6}");

    let rays = generate_rays(&camera).unwrap();
    let mut cosines = Vec::new();
    let mut foreground = 0usize;
    let mut no_hit = 0usize;
    for (i, ray) in rays.iter().enumerate() {
        if bundle.opacity[i] <= 0.5 {
            continue;
        }
        foreground += 1;
        let o = ray.origin;
        let d = ray.dir;
        let b = o[0] * d[0] + o[1] * d[1] + o[2] * d[2];
        let c = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - 1.0;
        let disc = b * b - c;
        if disc < 0.0 {
            no_hit += 1;
            continue;
        }
        let t = -b - disc.sqrt();
        let hit = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
        let px = bundle.normal.pixel((i / res) as u32, (i % res) as u32);
        let n = [2.0 * px[0] - 1.0, 2.0 * px[1] - 1.0, 2.0 * px[2] - 1.0];
        let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-9);
        cosines.push((n[0] * hit[0] + n[1] * hit[1] + n[2] * hit[2]) / nn);
    }
    let mean = cosines.iter().sum::<f32>() / cosines.len() as f32;
    let min = cosines.iter().cloned().fold(1.0f32, f32::min);
    println!(
        "foreground {foreground}, no analytic hit {no_hit}, mean cosine {mean:.5}, min {min:.5}"
    );

    let t0 = Instant::now();
    let mesh = marching_cubes(&params, 128, 0.0).unwrap();
    println!(
        "grid-128 mesh: {} verts in {:.2?}, watertight {}, euler {}",
        mesh.vertices.len(),
        t0.elapsed(),
        is_watertight(&mesh),
        euler_characteristic(&mesh)
    );
    let cell = 2.0 * 1.5 / 127.0f32;
    let mut worst = 0.0f32;
    for v in &mesh.vertices {
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        worst = worst.max((r - 1.0).abs());
    }
    println!(
        "worst |r-1| {:.4} = {:.2} cells (allowed 1.5)",
        worst,
        worst / cell
    );
}

#[test]
fn probe_sds_step_cost() {
    let field = FieldConfig {
        hidden_dim: 16,
        sdf_hidden_layers: 2,
        color_hidden_layers: 2,
        point_octaves: 2,
        view_octaves: 1,
        ..Default::default()
    };
    let mut params = FieldParams::geometric_init(&field, 0.7, 3);
    let mut policy = CameraPolicy::default();
    policy.face_fraction = 0.0;
    policy.body_center = [0.0, 0.0, 0.0];
    policy.radius_range_body = (2.9999, 3.0001);
    policy.elevation_range = (0.0, 0.0);
    policy.azimuth_range = (0.0, 0.0);
    policy.fov_range = (45.0, 45.0);
    policy.resolution = (32, 32);
    policy.keep_out = None;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (camera, tag) = sample_camera(&policy, &mut rng).unwrap();

    let opts = RenderOptions {
        coarse_samples: 24,
        fine_samples: 8,
    };
    let base = render_view(&params, &camera, RenderKind::Color, None, &opts).unwrap();
    let mut target = base.clone();
    for row in 0..target.height {
        for col in 0..target.width {
            let px = base.pixel(row, col);
            let bgness = (px[0].min(px[1]).min(px[2])).powi(2);
            let blend = 1.0 - bgness;
            target.set_pixel(
                row,
                col,
                [
                    px[0] * (1.0 - blend) + 0.85 * blend,
                    px[1] * (1.0 - blend) + 0.20 * blend,
                    px[2] * (1.0 - blend) + 0.15 * blend,
                ],
            );
        }
    }
    let target64 = upsample(&target, 64).unwrap();

    let codec: Arc<dyn LatentCodec> = Arc::new(IdentityCodec);
    let oracle = oracle_backend(&target64, Arc::clone(&codec), NoiseSchedule::default()).unwrap();
    let target_latent = oracle.target_latent().clone();
    let router = GuidanceRouter::aliased(Arc::new(oracle), "face", "body");
    let mut engine = SdsEngine::new(
        router,
        codec,
        SdsConfig {
            eikonal_weight: 0.01,
            eikonal_points: 16,
            ..Default::default()
        },
        NoiseSchedule::default(),
        opts,
        &params,
    )
    .unwrap();

    let mse = |params: &FieldParams| -> f64 {
        let r = render_view(params, &camera, RenderKind::Color, None, &opts).unwrap();
        IdentityCodec
            .encode(&upsample(&r, 64).unwrap())
            .unwrap()
            .mse(&target_latent)
    };
    let initial = mse(&params);
    let t0 = Instant::now();
    for step in 0..300u32 {
        engine
            .sds_step(
                &mut params,
                &camera,
                avatarforge::sampler::FocusTag::Body,
                RenderKind::Color,
                None,
                64,
                &mut rng,
            )
            .unwrap();
        if step == 49 {
            println!("50 steps in {:.2?}", t0.elapsed());
        }
    }
    let elapsed = t0.elapsed();
    let fin = mse(&params);
    println!(
        "300 steps in {elapsed:.2?}; latent mse {initial:.6} -> {fin:.6} ({:.1}% drop)",
        100.0 * (1.0 - fin / initial)
    );
}
