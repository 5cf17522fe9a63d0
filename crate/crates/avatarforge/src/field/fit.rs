//! Template fitting: direct signed-distance regression that turns a
//! watertight template mesh into the initial neural field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::mlp::Tape;
use super::{FieldConfig, FieldError, FieldParams, TemplateBody};
use crate::optim::Adam;
use crate::parallel;

/// Uniform-cube samples in the regression pool.
const UNIFORM_POOL: usize = 10_000;
/// Jittered near-surface samples in the regression pool (1:1 with uniform).
const NEAR_POOL: usize = 10_000;
/// Regression minibatch size.
const BATCH: usize = 512;
/// Fresh gradient-regularization points per step.
const EIK_BATCH: usize = 128;
/// Weight of the unit-gradient-norm regularizer.
const EIK_WEIGHT: f32 = 0.1;
/// Peak Adam learning rate for fitting.
const FIT_LR: f32 = 3e-3;

/// Summary of one fitting run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub steps: u32,
    /// Combined objective value of the final step.
    pub final_loss: f32,
    /// Mean |field − exact template distance| over the uniform pool.
    pub mean_abs_residual: f32,
}

/// Fits a default-architecture field to the template. Zero `fit_steps`
/// returns the untrained sphere-like start.
pub fn init_from_template(
    template: &TemplateBody,
    fit_steps: u32,
    rng_seed: u64,
) -> Result<FieldParams, FieldError> {
    init_from_template_with(&FieldConfig::default(), template, fit_steps, rng_seed)
        .map(|(params, _)| params)
}

/// Fits a field with an explicit architecture, returning the fit summary
/// alongside the parameters.
pub fn init_from_template_with(
    config: &FieldConfig,
    template: &TemplateBody,
    fit_steps: u32,
    rng_seed: u64,
) -> Result<(FieldParams, FitReport), FieldError> {
    template.validate()?;
    let mut params = FieldParams::geometric_init(config, template.mean_radius(), rng_seed);
    if fit_steps == 0 {
        return Ok((
            params,
            FitReport {
                steps: 0,
                final_loss: f32::NAN,
                mean_abs_residual: f32::NAN,
            },
        ));
    }

    let bound = config.bound;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    // --- sample pool ---------------------------------------------------
    let mut points = Vec::with_capacity(UNIFORM_POOL + NEAR_POOL);
    for _ in 0..UNIFORM_POOL {
        points.push([
            rng.gen_range(-bound..bound),
            rng.gen_range(-bound..bound),
            rng.gen_range(-bound..bound),
        ]);
    }
    // Area-weighted surface draws with Gaussian jitter hug the zero set.
    let mut cumulative = Vec::with_capacity(template.faces.len());
    let mesh = template.as_mesh();
    let mut total_area = 0.0f64;
    for t in 0..template.faces.len() {
        total_area += mesh.triangle_area(t);
        cumulative.push(total_area);
    }
    let (lo, hi) = template.bounding_box();
    let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2))
        .sqrt();
    let jitter = Normal::new(0.0f32, 0.02 * diag).unwrap();
    for _ in 0..NEAR_POOL {
        let u = rng.gen::<f64>() * total_area;
        let fi = cumulative.partition_point(|&c| c < u).min(template.faces.len() - 1);
        let f = template.faces[fi];
        let (a, b, c) = (
            template.vertices[f[0] as usize],
            template.vertices[f[1] as usize],
            template.vertices[f[2] as usize],
        );
        let su = rng.gen::<f32>().sqrt();
        let (wa, wb, wc) = {
            let v = rng.gen::<f32>();
            (1.0 - su, su * (1.0 - v), su * v)
        };
        let mut p = [
            wa * a[0] + wb * b[0] + wc * c[0] + jitter.sample(&mut rng),
            wa * a[1] + wb * b[1] + wc * c[1] + jitter.sample(&mut rng),
            wa * a[2] + wb * b[2] + wc * c[2] + jitter.sample(&mut rng),
        ];
        for coord in p.iter_mut() {
            *coord = coord.clamp(-bound, bound);
        }
        points.push(p);
    }
    let oracle = template.distance_oracle();
    let targets = oracle.signed_batch(&points);

    // --- regression loop -------------------------------------------------
    let sdf_n = params.sdf_param_count();
    let mut flat = Vec::with_capacity(sdf_n);
    params.sdf_mlp.flatten_into(&mut flat);
    let mut adam = Adam::new(FIT_LR, sdf_n);
    let mut final_loss = 0.0f32;

    for step in 0..fit_steps {
        // Cosine decay from the peak rate to a tenth of it.
        let t = step as f32 / fit_steps as f32;
        adam.lr = FIT_LR * (0.55 + 0.45 * (std::f32::consts::PI * t).cos());

        let batch: Vec<usize> = (0..BATCH).map(|_| rng.gen_range(0..points.len())).collect();
        let eik_points: Vec<[f32; 3]> = (0..EIK_BATCH)
            .map(|_| {
                [
                    rng.gen_range(-bound..bound),
                    rng.gen_range(-bound..bound),
                    rng.gen_range(-bound..bound),
                ]
            })
            .collect();

        let data_parts = parallel::map_chunks(&batch, 64, |_, chunk| {
            let mut grads = vec![0.0f32; sdf_n];
            let mut tape = Tape::default();
            let mut enc = vec![0.0f32; params.pos_enc.dim()];
            let mut loss = 0.0f64;
            for &i in chunk {
                let f = params.sdf_forward(points[i], &mut tape, &mut enc);
                let r = f - targets[i];
                loss += (r as f64) * (r as f64);
                params
                    .sdf_mlp
                    .backward(&mut tape, &[2.0 * r / BATCH as f32], &mut grads);
            }
            (grads, loss)
        });
        let eik_parts = parallel::map_chunks(&eik_points, 32, |_, chunk| {
            let mut grads = vec![0.0f32; sdf_n];
            let mut tape = Tape::default();
            let dim = params.pos_enc.dim();
            let mut enc = vec![0.0f32; dim];
            let mut enc_tan = vec![0.0f32; 3 * dim];
            let mut loss = 0.0f64;
            for &p in chunk {
                let (_, g) =
                    params.sdf_forward_with_gradient(p, &mut tape, &mut enc, &mut enc_tan);
                let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-8);
                let r = norm - 1.0;
                loss += (r as f64) * (r as f64);
                let scale = 2.0 * EIK_WEIGHT * r / (EIK_BATCH as f32 * norm);
                let gtan = [scale * g[0], scale * g[1], scale * g[2]];
                params
                    .sdf_mlp
                    .backward_with_tangents(&mut tape, &[0.0], &gtan, &mut grads);
            }
            (grads, loss)
        });

        let mut grad = vec![0.0f32; sdf_n];
        let mut data_loss = 0.0f64;
        for (g, l) in data_parts {
            for (acc, v) in grad.iter_mut().zip(&g) {
                *acc += v;
            }
            data_loss += l;
        }
        let mut eik_loss = 0.0f64;
        for (g, l) in eik_parts {
            for (acc, v) in grad.iter_mut().zip(&g) {
                *acc += v;
            }
            eik_loss += l;
        }
        final_loss = (data_loss / BATCH as f64
            + EIK_WEIGHT as f64 * eik_loss / EIK_BATCH as f64) as f32;
        adam.update(&mut flat, &grad);
        params.sdf_mlp.unflatten_from(&flat);
    }

    let uniform = &points[..UNIFORM_POOL];
    let values = params.sdf_eval(uniform)?;
    let mean_abs_residual = (values
        .iter()
        .zip(&targets[..UNIFORM_POOL])
        .map(|(&f, &d)| (f - d).abs() as f64)
        .sum::<f64>()
        / UNIFORM_POOL as f64) as f32;

    Ok((
        params,
        FitReport {
            steps: fit_steps,
            final_loss,
            mean_abs_residual,
        },
    ))
}
