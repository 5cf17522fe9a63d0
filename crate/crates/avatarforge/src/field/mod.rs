//! Neural body representation: a signed-distance MLP plus a
//! view-conditioned color MLP over a bounded modeling cube, with
//! template-based initialization and binary checkpointing.

pub(crate) mod encoding;
pub(crate) mod mlp;

mod checkpoint;
mod fit;
mod template;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel;
use encoding::PosEncoding;
use mlp::{Activation, Mlp, Tape};

pub use checkpoint::{load_field, save_field};
pub(crate) use checkpoint::{decode_field, encode_field};
pub use fit::{init_from_template, init_from_template_with, FitReport};
pub use template::{TemplateBody, TemplateDistance};

/// Architecture and domain settings of the body field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Width of every hidden layer.
    pub hidden_dim: usize,
    /// Hidden layers of the distance network (weight layers = this + 1).
    pub sdf_hidden_layers: usize,
    /// Hidden layers of the color network (weight layers = this + 1).
    pub color_hidden_layers: usize,
    /// Frequency octaves encoding sample positions.
    pub point_octaves: u32,
    /// Frequency octaves encoding view directions.
    pub view_octaves: u32,
    /// Half-extent of the axis-aligned modeling cube (world units).
    pub bound: f32,
    /// Starting value of the learnable surface-sharpness scale.
    pub logistic_scale_init: f32,
    /// Sharpness of the softplus hidden activations.
    pub softplus_beta: f32,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            hidden_dim: 64,
            sdf_hidden_layers: 5,
            color_hidden_layers: 3,
            point_octaves: 6,
            view_octaves: 4,
            bound: 1.5,
            logistic_scale_init: 30.0,
            softplus_beta: 100.0,
        }
    }
}

/// Errors from field evaluation, initialization, and persistence.
#[derive(Debug, Error)]
pub enum FieldError {
    #[error(
        "point {index}: {axis} = {value} is outside the modeling cube [-{bound}, {bound}]"
    )]
    OutOfDomain {
        index: usize,
        axis: char,
        value: f32,
        bound: f32,
    },
    #[error("view direction {index} has norm {norm}, expected unit length within 1e-6")]
    NonUnitViewDir { index: usize, norm: f32 },
    #[error("mismatched batch: {points} points vs {dirs} view directions")]
    BatchMismatch { points: usize, dirs: usize },
    #[error("invalid template: {0}")]
    Template(String),
    #[error("field I/O failure at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad field checkpoint: {0}")]
    Checkpoint(String),
}

/// All learnable state of the body field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub(crate) sdf_mlp: Mlp,
    pub(crate) color_mlp: Mlp,
    /// Inverse width of the surface-crossing density; kept positive.
    pub logistic_scale: f32,
    pub(crate) pos_enc: PosEncoding,
    pub(crate) view_enc: PosEncoding,
}

/// Smallest value the sharpness scale may take under updates.
pub(crate) const MIN_LOGISTIC_SCALE: f32 = 1e-3;

fn sdf_dims(config: &FieldConfig, pos_dim: usize) -> Vec<usize> {
    let mut dims = vec![pos_dim];
    dims.extend(std::iter::repeat(config.hidden_dim).take(config.sdf_hidden_layers));
    dims.push(1);
    dims
}

fn color_dims(config: &FieldConfig, pos_dim: usize, view_dim: usize) -> Vec<usize> {
    let mut dims = vec![pos_dim + view_dim];
    dims.extend(std::iter::repeat(config.hidden_dim).take(config.color_hidden_layers));
    dims.push(3);
    dims
}

impl FieldParams {
    /// Initializes the distance network so its zero set starts as a sphere
    /// of the given world-unit radius (hidden layers scaled for the
    /// near-linear regime, last layer biased to the radius, frequency
    /// channels of the first layer zeroed), and the color network to emit
    /// mid-gray everywhere (zeroed output layer before the squashing).
    pub fn geometric_init(config: &FieldConfig, radius: f32, seed: u64) -> FieldParams {
        let pos_enc = PosEncoding::new(config.point_octaves);
        let view_enc = PosEncoding::new(config.view_octaves);
        let act = Activation::Softplus {
            beta: config.softplus_beta,
        };
        let mut sdf_mlp = Mlp::zeros(&sdf_dims(config, pos_enc.dim()), act, Activation::Linear);
        let mut color_mlp = Mlp::zeros(
            &color_dims(config, pos_enc.dim(), view_enc.dim()),
            act,
            Activation::Sigmoid,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let n_layers = sdf_mlp.layers.len();
        for (li, layer) in sdf_mlp.layers.iter_mut().enumerate() {
            let std = (2.0 / layer.out_dim as f64).sqrt();
            if li == 0 {
                // Raw-coordinate columns only; the sinusoid columns start
                // silent so the start shape is exactly radial.
                let dist = Normal::new(0.0, std).unwrap();
                for row in 0..layer.out_dim {
                    for col in 0..3 {
                        layer.w[row * layer.in_dim + col] = dist.sample(&mut rng) as f32;
                    }
                }
            } else if li == n_layers - 1 {
                let mean = (std::f64::consts::PI).sqrt() / (layer.in_dim as f64).sqrt();
                let dist = Normal::new(mean, 1e-4).unwrap();
                for w in layer.w.iter_mut() {
                    *w = dist.sample(&mut rng) as f32;
                }
                // Distances are evaluated on cube-normalized coordinates.
                layer.b[0] = -radius / config.bound;
            } else {
                let dist = Normal::new(0.0, std).unwrap();
                for w in layer.w.iter_mut() {
                    *w = dist.sample(&mut rng) as f32;
                }
            }
        }

        let n_color_layers = color_mlp.layers.len();
        for (li, layer) in color_mlp.layers.iter_mut().enumerate() {
            if li == n_color_layers - 1 {
                continue; // zero output layer: mid-gray through sigmoid
            }
            let std = (2.0 / layer.in_dim as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            for w in layer.w.iter_mut() {
                *w = dist.sample(&mut rng) as f32;
            }
        }

        FieldParams {
            config: config.clone(),
            sdf_mlp,
            color_mlp,
            logistic_scale: config.logistic_scale_init,
            pos_enc,
            view_enc,
        }
    }

    /// Signed distances (negative inside) at each point.
    pub fn sdf_eval(&self, points: &[[f32; 3]]) -> Result<Vec<f32>, FieldError> {
        self.check_points(points)?;
        let parts = parallel::map_chunks(points, 128, |_, chunk| {
            let mut tape = Tape::default();
            let mut enc = vec![0.0f32; self.pos_enc.dim()];
            chunk
                .iter()
                .map(|&p| self.sdf_forward(p, &mut tape, &mut enc))
                .collect::<Vec<f32>>()
        });
        Ok(concat_parts(parts, points.len()))
    }

    /// Spatial gradient of the signed distance at each point, from the
    /// same forward-tangent machinery the optimizer differentiates.
    pub fn sdf_gradient(&self, points: &[[f32; 3]]) -> Result<Vec<[f32; 3]>, FieldError> {
        Ok(self
            .sdf_eval_with_gradient(points)?
            .into_iter()
            .map(|(_, g)| g)
            .collect())
    }

    /// Signed distance and its spatial gradient at each point.
    pub fn sdf_eval_with_gradient(
        &self,
        points: &[[f32; 3]],
    ) -> Result<Vec<(f32, [f32; 3])>, FieldError> {
        self.check_points(points)?;
        let parts = parallel::map_chunks(points, 128, |_, chunk| {
            let mut tape = Tape::default();
            let dim = self.pos_enc.dim();
            let mut enc = vec![0.0f32; dim];
            let mut enc_tan = vec![0.0f32; 3 * dim];
            chunk
                .iter()
                .map(|&p| self.sdf_forward_with_gradient(p, &mut tape, &mut enc, &mut enc_tan))
                .collect::<Vec<(f32, [f32; 3])>>()
        });
        Ok(concat_parts(parts, points.len()))
    }

    /// RGB in `[0,1]` at each point seen from the paired unit view
    /// direction.
    pub fn color_eval(
        &self,
        points: &[[f32; 3]],
        view_dirs: &[[f32; 3]],
    ) -> Result<Vec<[f32; 3]>, FieldError> {
        if points.len() != view_dirs.len() {
            return Err(FieldError::BatchMismatch {
                points: points.len(),
                dirs: view_dirs.len(),
            });
        }
        self.check_points(points)?;
        for (i, d) in view_dirs.iter().enumerate() {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if !((norm - 1.0).abs() <= 1e-6) {
                return Err(FieldError::NonUnitViewDir { index: i, norm });
            }
        }
        let pairs: Vec<([f32; 3], [f32; 3])> = points
            .iter()
            .zip(view_dirs)
            .map(|(&p, &d)| (p, d))
            .collect();
        let parts = parallel::map_chunks(&pairs, 128, |_, chunk| {
            let mut tape = Tape::default();
            let mut enc = vec![0.0f32; self.pos_enc.dim() + self.view_enc.dim()];
            chunk
                .iter()
                .map(|&(p, d)| self.color_forward(p, d, &mut tape, &mut enc))
                .collect::<Vec<[f32; 3]>>()
        });
        Ok(concat_parts(parts, points.len()))
    }

    /// Total learnable scalar count (distance net + color net + scale).
    pub fn n_params(&self) -> usize {
        self.sdf_mlp.n_params() + self.color_mlp.n_params() + 1
    }

    pub(crate) fn sdf_param_count(&self) -> usize {
        self.sdf_mlp.n_params()
    }

    /// All parameters as one flat vector: distance net, color net, scale.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.n_params());
        self.sdf_mlp.flatten_into(&mut out);
        self.color_mlp.flatten_into(&mut out);
        out.push(self.logistic_scale);
        out
    }

    /// Restores parameters from [`FieldParams::flatten`] layout, keeping
    /// the sharpness scale strictly positive.
    pub fn set_from_flat(&mut self, flat: &[f32]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let used = self.sdf_mlp.unflatten_from(flat);
        let used2 = self.color_mlp.unflatten_from(&flat[used..]);
        self.logistic_scale = flat[used + used2].max(MIN_LOGISTIC_SCALE);
    }

    fn check_points(&self, points: &[[f32; 3]]) -> Result<(), FieldError> {
        let b = self.config.bound;
        for (index, p) in points.iter().enumerate() {
            for (a, &value) in p.iter().enumerate() {
                if !(value >= -b && value <= b) {
                    return Err(FieldError::OutOfDomain {
                        index,
                        axis: ['x', 'y', 'z'][a],
                        value,
                        bound: b,
                    });
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn normalized(&self, p: [f32; 3]) -> [f32; 3] {
        let inv = 1.0 / self.config.bound;
        [p[0] * inv, p[1] * inv, p[2] * inv]
    }

    /// One distance evaluation; `tape` and `enc` are caller scratch.
    pub(crate) fn sdf_forward(&self, p: [f32; 3], tape: &mut Tape, enc: &mut [f32]) -> f32 {
        self.pos_enc.encode(self.normalized(p), enc);
        let mut out = [0.0f32];
        self.sdf_mlp.forward(enc, tape, &mut out);
        out[0]
    }

    /// One distance + world-space-gradient evaluation.
    pub(crate) fn sdf_forward_with_gradient(
        &self,
        p: [f32; 3],
        tape: &mut Tape,
        enc: &mut [f32],
        enc_tan: &mut [f32],
    ) -> (f32, [f32; 3]) {
        self.pos_enc.encode_with_tangents(
            self.normalized(p),
            1.0 / self.config.bound,
            enc,
            enc_tan,
        );
        let mut out = [0.0f32];
        let mut out_tan = [0.0f32; 3];
        self.sdf_mlp
            .forward_with_tangents(enc, enc_tan, tape, &mut out, &mut out_tan);
        (out[0], out_tan)
    }

    /// One color evaluation; `enc` must hold both encodings back to back.
    pub(crate) fn color_forward(
        &self,
        p: [f32; 3],
        d: [f32; 3],
        tape: &mut Tape,
        enc: &mut [f32],
    ) -> [f32; 3] {
        let pd = self.pos_enc.dim();
        self.pos_enc.encode(self.normalized(p), &mut enc[..pd]);
        self.view_enc.encode(d, &mut enc[pd..]);
        let mut out = [0.0f32; 3];
        self.color_mlp.forward(enc, tape, &mut out);
        out
    }
}

fn concat_parts<T>(parts: Vec<Vec<T>>, capacity: usize) -> Vec<T> {
    parallel::fold_in_order(parts, Vec::with_capacity(capacity), |mut acc, mut p| {
        acc.append(&mut p);
        acc
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> FieldConfig {
        FieldConfig {
            hidden_dim: 32,
            ..Default::default()
        }
    }

    /// Independent double-precision re-implementation of the distance
    /// forward pass, used as the finite-difference reference.
    fn sdf_eval_f64(params: &FieldParams, p: [f64; 3]) -> f64 {
        let bound = params.config.bound as f64;
        let octaves = params.config.point_octaves;
        let mut x = Vec::new();
        let pn = [p[0] / bound, p[1] / bound, p[2] / bound];
        x.extend_from_slice(&pn);
        for o in 0..octaves {
            let w = (1u32 << o) as f64 * std::f64::consts::PI;
            for &c in &pn {
                x.push((w * c).sin());
                x.push((w * c).cos());
            }
        }
        let beta = params.config.softplus_beta as f64;
        let n = params.sdf_mlp.layers.len();
        for (li, layer) in params.sdf_mlp.layers.iter().enumerate() {
            let mut z = vec![0.0f64; layer.out_dim];
            for i in 0..layer.out_dim {
                let mut acc = layer.b[i] as f64;
                for j in 0..layer.in_dim {
                    acc += layer.w[i * layer.in_dim + j] as f64 * x[j];
                }
                z[i] = acc;
            }
            if li < n - 1 {
                for v in z.iter_mut() {
                    let bz = beta * *v;
                    *v = if bz > 30.0 {
                        *v + (-bz).exp().ln_1p() / beta
                    } else {
                        bz.exp().ln_1p() / beta
                    };
                }
            }
            x = z;
        }
        x[0]
    }

    /// Spherical Fibonacci set: deterministic, roughly uniform unit directions.
    fn fibonacci_directions(n: usize) -> Vec<[f32; 3]> {
        let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
        (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let a = std::f64::consts::TAU * (i as f64 / golden).fract();
                [(r * a.cos()) as f32, y as f32, (r * a.sin()) as f32]
            })
            .collect()
    }

    #[test]
    fn geometric_init_starts_as_a_sphere() {
        // At modest width the start network has direction-dependent gain
        // noise, so judge it by direction averages, not single probes.
        let params = FieldParams::geometric_init(&small_config(), 0.8, 3);
        let inside = params.sdf_eval(&[[0.0, 0.0, 0.0]]).unwrap()[0];
        assert!(inside < 0.0, "center value {inside}");

        let dirs = fibonacci_directions(64);
        let at = |radius: f32| -> f32 {
            let pts: Vec<[f32; 3]> = dirs
                .iter()
                .map(|d| [d[0] * radius, d[1] * radius, d[2] * radius])
                .collect();
            let vals = params.sdf_eval(&pts).unwrap();
            vals.iter().sum::<f32>() / vals.len() as f32
        };
        let near = at(0.8);
        let far = at(1.4);
        assert!(far > 0.0, "mean far value {far}");
        assert!(
            inside < near && near < far,
            "not radially increasing: {inside} {near} {far}"
        );

        // Where a sign change exists along a ray, it should sit near the
        // requested radius; most rays must have one.
        let mut crossings = Vec::new();
        for d in &dirs {
            let (mut lo, mut hi) = (0.0f32, 1.4f32);
            let v_hi = params
                .sdf_eval(&[[d[0] * hi, d[1] * hi, d[2] * hi]])
                .unwrap()[0];
            if v_hi <= 0.0 {
                continue;
            }
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                let v = params
                    .sdf_eval(&[[d[0] * mid, d[1] * mid, d[2] * mid]])
                    .unwrap()[0];
                if v < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            crossings.push(lo);
        }
        assert!(crossings.len() >= 48, "only {} rays cross", crossings.len());
        let mean = crossings.iter().sum::<f32>() / crossings.len() as f32;
        assert!((mean - 0.8).abs() < 0.25, "mean crossing at {mean}");
    }

    #[test]
    fn fresh_color_network_outputs_mid_gray() {
        let params = FieldParams::geometric_init(&small_config(), 0.8, 3);
        let c = params
            .color_eval(&[[0.2, -0.3, 0.1]], &[[0.0, 0.0, 1.0]])
            .unwrap()[0];
        for ch in c {
            assert!((ch - 0.5).abs() < 1e-6, "channel {ch}");
        }
    }

    #[test]
    fn out_of_cube_point_names_the_coordinate() {
        let params = FieldParams::geometric_init(&small_config(), 0.8, 3);
        let err = params
            .sdf_eval(&[[0.0, 0.0, 0.0], [0.1, 2.0, 0.0]])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("point 1"), "{msg}");
        assert!(msg.contains("y = 2"), "{msg}");
        // NaN coordinates are likewise out of domain.
        assert!(params.sdf_eval(&[[f32::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn non_unit_view_direction_is_rejected() {
        let params = FieldParams::geometric_init(&small_config(), 0.8, 3);
        let err = params
            .color_eval(&[[0.0, 0.0, 0.0]], &[[0.0, 0.0, 1.1]])
            .unwrap_err();
        assert!(matches!(err, FieldError::NonUnitViewDir { index: 0, .. }));
        let err = params
            .color_eval(&[[0.0, 0.0, 0.0]; 2], &[[0.0, 0.0, 1.0]])
            .unwrap_err();
        assert!(matches!(err, FieldError::BatchMismatch { .. }));
    }

    #[test]
    fn gradient_matches_double_precision_finite_differences() {
        let mut params = FieldParams::geometric_init(&small_config(), 0.8, 9);
        // Wake the frequency channels so the test covers a generic network.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for layer in params.sdf_mlp.layers.iter_mut() {
            for w in layer.w.iter_mut() {
                *w += rng.gen_range(-0.02..0.02);
            }
        }
        let probes = [
            [0.3f32, -0.2, 0.5],
            [0.0, 0.0, 0.0],
            [-0.9, 0.4, -0.3],
            [0.75, 0.75, 0.75],
        ];
        let grads = params.sdf_gradient(&probes).unwrap();
        let h = 1e-4f64;
        for (pi, &p) in probes.iter().enumerate() {
            let g = grads[pi];
            let mut fd = [0.0f64; 3];
            for a in 0..3 {
                let mut pp = [p[0] as f64, p[1] as f64, p[2] as f64];
                let mut pm = pp;
                pp[a] += h;
                pm[a] -= h;
                fd[a] = (sdf_eval_f64(&params, pp) - sdf_eval_f64(&params, pm)) / (2.0 * h);
            }
            let norm =
                (fd[0] * fd[0] + fd[1] * fd[1] + fd[2] * fd[2]).sqrt().max(1e-6);
            for a in 0..3 {
                let rel = (fd[a] - g[a] as f64).abs() / norm;
                assert!(
                    rel < 1e-3,
                    "probe {pi} axis {a}: fd {} vs analytic {} (rel {rel})",
                    fd[a],
                    g[a]
                );
            }
        }
    }

    #[test]
    fn flat_round_trip_is_exact() {
        let params = FieldParams::geometric_init(&small_config(), 0.8, 21);
        let flat = params.flatten();
        assert_eq!(flat.len(), params.n_params());
        let mut other = FieldParams::geometric_init(&small_config(), 0.3, 99);
        other.set_from_flat(&flat);
        assert_eq!(other, params);
    }

    #[test]
    fn scale_floor_preserves_positivity() {
        let mut params = FieldParams::geometric_init(&small_config(), 0.8, 21);
        let mut flat = params.flatten();
        *flat.last_mut().unwrap() = -5.0;
        params.set_from_flat(&flat);
        assert!(params.logistic_scale > 0.0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = FieldParams::geometric_init(&small_config(), 0.8, 5);
        let b = FieldParams::geometric_init(&small_config(), 0.8, 5);
        assert_eq!(a, b);
    }
}
