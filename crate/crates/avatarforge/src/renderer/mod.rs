//! Differentiable volume renderer: turns the distance/color field into
//! color, normal, and textureless images with alpha weights derived from
//! logistic densities over signed distances, and backpropagates image
//! gradients to field parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::mlp::Tape;
use crate::field::{FieldError, FieldParams};
use crate::image::ImageBuf;
use crate::parallel;

/// Default stratified samples per ray before refinement.
pub const COARSE_SAMPLES: usize = 64;
/// Default refinement samples placed by inverse-CDF over coarse weights.
pub const FINE_SAMPLES: usize = 32;

/// Per-interval opacity is kept strictly below one so transmittance math
/// stays finite in the reverse pass.
const ALPHA_MAX: f32 = 1.0 - 1e-6;
/// Pixels with accumulated weight below this show pure background.
const BACKGROUND_OPACITY: f32 = 1e-3;
/// Guard for the weighted-depth normalization.
const DEPTH_EPS: f32 = 1e-6;
/// Probability floor so refinement sampling covers every interval.
const PDF_FLOOR: f64 = 1e-5;
/// Backward passes split rays into at most this many parallel chunks.
const BACKWARD_CHUNKS: usize = 64;

const WHITE: [f32; 3] = [1.0, 1.0, 1.0];
const MID_GRAY: [f32; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("render contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Which supervision image a render produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderKind {
    Color,
    Normal,
    Textureless,
}

impl RenderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RenderKind::Color => "color",
            RenderKind::Normal => "normal",
            RenderKind::Textureless => "textureless",
        }
    }

    fn background(self) -> [f32; 3] {
        match self {
            RenderKind::Normal => MID_GRAY,
            _ => WHITE,
        }
    }
}

/// Pinhole camera. `rotation` columns are the camera's right, down, and
/// forward axes expressed in world coordinates (x right, y down, z forward);
/// `translation` is the camera center, which is also every ray origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: [[f32; 3]; 3],
    pub translation: [f32; 3],
    /// (fx, fy) in pixels.
    pub focal: (f32, f32),
    /// (cx, cy) in pixels.
    pub principal: (f32, f32),
    /// (height, width) in pixels.
    pub resolution: (usize, usize),
}

impl Camera {
    /// Camera at `position` looking toward `target`, image up aligned with
    /// world `up`, square pixels, principal point at the image center.
    pub fn look_at(
        position: [f32; 3],
        target: [f32; 3],
        up: [f32; 3],
        focal: f32,
        resolution: (usize, usize),
    ) -> Result<Camera, RenderError> {
        let forward = sub(target, position);
        let fl = norm(forward);
        if fl < 1e-6 {
            return Err(RenderError::Contract(
                "camera position and target coincide".into(),
            ));
        }
        let z = scale(forward, 1.0 / fl);
        let xr = cross(z, up);
        let xl = norm(xr);
        if xl < 1e-6 {
            return Err(RenderError::Contract(
                "camera up direction is parallel to the view direction".into(),
            ));
        }
        let x = scale(xr, 1.0 / xl);
        let y = cross(z, x);
        let rotation = [
            [x[0], y[0], z[0]],
            [x[1], y[1], z[1]],
            [x[2], y[2], z[2]],
        ];
        let (h, w) = resolution;
        let camera = Camera {
            rotation,
            translation: position,
            focal: (focal, focal),
            principal: (w as f32 / 2.0, h as f32 / 2.0),
            resolution,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Checks orthonormality, handedness, focal lengths, and minimum size.
    pub fn validate(&self) -> Result<(), RenderError> {
        let r = &self.rotation;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f32 = (0..3).map(|k| r[k][a] * r[k][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(RenderError::Contract(format!(
                        "rotation is not orthonormal: column dot ({a},{b}) = {dot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-5 {
            return Err(RenderError::Contract(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        let (fx, fy) = self.focal;
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(RenderError::Contract(format!(
                "focal lengths ({fx}, {fy}) must be positive and finite"
            )));
        }
        let (h, w) = self.resolution;
        if h < 8 || w < 8 {
            return Err(RenderError::Contract(format!(
                "resolution {h}x{w} is below the 8x8 minimum"
            )));
        }
        Ok(())
    }

    /// World-space viewing axis (unit, camera to scene).
    pub fn forward_axis(&self) -> [f32; 3] {
        let r = &self.rotation;
        [r[0][2], r[1][2], r[2][2]]
    }

    /// Light direction of a lamp sitting at the camera: points from the
    /// scene back toward the viewer, so frontal surfaces are lit fully.
    pub fn headlight(&self) -> [f32; 3] {
        let f = self.forward_axis();
        [-f[0], -f[1], -f[2]]
    }
}

/// One pixel's ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f32; 3],
    pub dir: [f32; 3],
}

/// One unit-direction ray per pixel, through pixel centers, row-major.
pub fn generate_rays(camera: &Camera) -> Result<Vec<Ray>, RenderError> {
    camera.validate()?;
    let (h, w) = camera.resolution;
    let (fx, fy) = camera.focal;
    let (cx, cy) = camera.principal;
    let r = &camera.rotation;
    let mut rays = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let vx = (col as f32 + 0.5 - cx) / fx;
            let vy = (row as f32 + 0.5 - cy) / fy;
            let world = [
                r[0][0] * vx + r[0][1] * vy + r[0][2],
                r[1][0] * vx + r[1][1] * vy + r[1][2],
                r[2][0] * vx + r[2][1] * vy + r[2][2],
            ];
            let n = norm(world);
            rays.push(Ray {
                origin: camera.translation,
                dir: scale(world, 1.0 / n),
            });
        }
    }
    Ok(rays)
}

// ---------------------------------------------------------------------------
// Alpha weights from signed distances.
// ---------------------------------------------------------------------------

/// log(sigmoid(u)), stable for large |u|.
fn ln_sigmoid(u: f32) -> f32 {
    -softplus(-u)
}

fn softplus(x: f32) -> f32 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(u: f32) -> f32 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Per-interval opacities and alpha-composited weights for one ray.
///
/// For `n` distances this yields `n-1` entries; entry `i` covers the
/// interval between samples `i` and `i+1` and is attributed to sample `i`.
fn alphas_and_weights(f: &[f32], s: f32) -> (Vec<f32>, Vec<f32>) {
    let m = f.len() - 1;
    let mut alphas = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    let mut transmittance = 1.0f32;
    for i in 0..m {
        let ratio = (ln_sigmoid(s * f[i + 1]) - ln_sigmoid(s * f[i])).exp();
        let alpha = (1.0 - ratio).clamp(0.0, ALPHA_MAX);
        alphas.push(alpha);
        weights.push(transmittance * alpha);
        transmittance *= 1.0 - alpha;
    }
    (alphas, weights)
}

/// Alpha-composited interval weights along one ray of signed distances.
///
/// The weight of interval `i` is the probability that the ray first becomes
/// opaque between samples `i` and `i+1` under a logistic surface-crossing
/// density of sharpness `s`; the weights sum to at most one.
pub fn neus_weights(sdf_along_ray: &[f32], s: f32) -> Result<Vec<f32>, RenderError> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(RenderError::Contract(format!(
            "sharpness scale {s} must be positive and finite"
        )));
    }
    if sdf_along_ray.len() < 2 {
        return Err(RenderError::Contract(format!(
            "need at least 2 samples per ray, got {}",
            sdf_along_ray.len()
        )));
    }
    Ok(alphas_and_weights(sdf_along_ray, s).1)
}

// ---------------------------------------------------------------------------
// Ray sampling.
// ---------------------------------------------------------------------------

/// Sample-count settings for one render.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub coarse_samples: usize,
    pub fine_samples: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            coarse_samples: COARSE_SAMPLES,
            fine_samples: FINE_SAMPLES,
        }
    }
}

impl RenderOptions {
    fn validate(&self) -> Result<(), RenderError> {
        if self.coarse_samples < 2 {
            return Err(RenderError::Contract(format!(
                "need at least 2 coarse samples per ray, got {}",
                self.coarse_samples
            )));
        }
        Ok(())
    }

    fn draws_per_ray(&self) -> usize {
        self.coarse_samples + self.fine_samples
    }
}

/// Entry/exit distances of a ray through the cube `[-bound, bound]^3`,
/// clipped to the forward half-line. `None` when the ray misses.
fn ray_cube_range(origin: [f32; 3], dir: [f32; 3], bound: f32) -> Option<(f32, f32)> {
    let mut t0 = 1e-4f32;
    let mut t1 = f32::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a].abs() > bound {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let mut lo = (-bound - origin[a]) * inv;
        let mut hi = (bound - origin[a]) * inv;
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    if t1 <= t0 {
        None
    } else {
        Some((t0, t1))
    }
}

/// Stratified parameters over `[t0, t1]`: one per bin, at the bin midpoint
/// or at the jittered position from `jitter`.
fn stratified_ts(t0: f32, t1: f32, n: usize, jitter: Option<&[f32]>) -> Vec<f32> {
    let step = (t1 - t0) / n as f32;
    (0..n)
        .map(|i| {
            let u = jitter.map_or(0.5, |j| j[i]);
            t0 + (i as f32 + u) * step
        })
        .collect()
}

/// Places `count` refinement parameters by inverting the CDF of the coarse
/// interval weights (with a floor so empty intervals remain reachable).
fn importance_ts(ts: &[f32], weights: &[f32], count: usize, jitter: Option<&[f32]>) -> Vec<f32> {
    debug_assert_eq!(ts.len(), weights.len() + 1);
    let m = weights.len();
    let mut cdf = Vec::with_capacity(m + 1);
    let mut acc = 0.0f64;
    cdf.push(0.0);
    for &w in weights {
        acc += w.max(0.0) as f64 + PDF_FLOOR;
        cdf.push(acc);
    }
    let total = acc;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let u = jitter.map_or(0.5, |j| j[k]);
        let q = ((k as f64 + u as f64) / count as f64) * total;
        let seg = cdf.partition_point(|&c| c <= q).clamp(1, m) - 1;
        let width = cdf[seg + 1] - cdf[seg];
        let local = if width > 0.0 {
            ((q - cdf[seg]) / width) as f32
        } else {
            0.5
        };
        out.push(ts[seg] + local * (ts[seg + 1] - ts[seg]));
    }
    out
}

/// Sorted union of both parameter lists, strictly increasing.
fn merge_strict(mut a: Vec<f32>, b: Vec<f32>) -> Vec<f32> {
    a.extend(b);
    a.sort_by(|x, y| x.partial_cmp(y).expect("sample parameters are finite"));
    let mut out = Vec::with_capacity(a.len());
    for t in a {
        if out.last().is_none_or(|&p| t > p) {
            out.push(t);
        }
    }
    out
}

fn point_on(origin: [f32; 3], dir: [f32; 3], t: f32, bound: f32) -> [f32; 3] {
    let mut p = [
        origin[0] + t * dir[0],
        origin[1] + t * dir[1],
        origin[2] + t * dir[2],
    ];
    for c in p.iter_mut() {
        *c = c.clamp(-bound, bound);
    }
    p
}

// ---------------------------------------------------------------------------
// Field access used by the render core (also lets tests plug in analytic
// surfaces).
// ---------------------------------------------------------------------------

pub(crate) trait FieldEval: Sync {
    fn bound(&self) -> f32;
    /// Sharpness of the surface-crossing density.
    fn sharpness(&self) -> f32;
    fn sdf_batch(&self, pts: &[[f32; 3]]) -> Result<Vec<f32>, FieldError>;
    fn sdf_grad_batch(&self, pts: &[[f32; 3]]) -> Result<Vec<(f32, [f32; 3])>, FieldError>;
    fn color_batch(
        &self,
        pts: &[[f32; 3]],
        dirs: &[[f32; 3]],
    ) -> Result<Vec<[f32; 3]>, FieldError>;
}

impl FieldEval for FieldParams {
    fn bound(&self) -> f32 {
        self.config.bound
    }

    fn sharpness(&self) -> f32 {
        self.logistic_scale
    }

    fn sdf_batch(&self, pts: &[[f32; 3]]) -> Result<Vec<f32>, FieldError> {
        self.sdf_eval(pts)
    }

    fn sdf_grad_batch(&self, pts: &[[f32; 3]]) -> Result<Vec<(f32, [f32; 3])>, FieldError> {
        self.sdf_eval_with_gradient(pts)
    }

    fn color_batch(
        &self,
        pts: &[[f32; 3]],
        dirs: &[[f32; 3]],
    ) -> Result<Vec<[f32; 3]>, FieldError> {
        self.color_eval(pts, dirs)
    }
}

// ---------------------------------------------------------------------------
// Render core.
// ---------------------------------------------------------------------------

/// Everything remembered about one rendered ray, enough to replay the pixel
/// and push gradients back through it.
#[derive(Debug, Clone)]
struct EvalRay {
    /// Row-major pixel index.
    pixel: usize,
    origin: [f32; 3],
    dir: [f32; 3],
    /// Strictly increasing sample parameters (world units).
    ts: Vec<f32>,
    /// Signed distance at each sample.
    f: Vec<f32>,
    /// World-space distance gradients (empty unless requested).
    g: Vec<[f32; 3]>,
    /// Sample colors as seen along `dir` (empty unless requested).
    c: Vec<[f32; 3]>,
}

#[derive(Debug, Clone, Copy)]
struct Wants {
    grads: bool,
    colors: bool,
}

impl Wants {
    fn for_kind(kind: RenderKind) -> Wants {
        match kind {
            RenderKind::Color => Wants {
                grads: false,
                colors: true,
            },
            _ => Wants {
                grads: true,
                colors: false,
            },
        }
    }

    const ALL: Wants = Wants {
        grads: true,
        colors: true,
    };
}

fn backward_chunk_len(n: usize) -> usize {
    n.div_ceil(BACKWARD_CHUNKS).max(1)
}

/// Traces every pixel: clips to the cube, places coarse samples, refines by
/// coarse weights, and evaluates the field at the merged samples.
fn trace_rays<E: FieldEval>(
    eval: &E,
    camera: &Camera,
    opts: &RenderOptions,
    jitter: Option<&[f32]>,
    wants: Wants,
) -> Result<Vec<EvalRay>, RenderError> {
    opts.validate()?;
    let rays = generate_rays(camera)?;
    if let Some(j) = jitter {
        debug_assert_eq!(j.len(), rays.len() * opts.draws_per_ray());
    }
    let bound = eval.bound();
    let s = eval.sharpness();
    let stride = opts.draws_per_ray();
    let chunk_len = backward_chunk_len(rays.len());

    let parts = parallel::map_chunks(&rays, chunk_len, |chunk_idx, chunk| {
        let base = chunk_idx * chunk_len;
        let mut out = Vec::with_capacity(chunk.len());
        for (local, ray) in chunk.iter().enumerate() {
            let pixel = base + local;
            let mut er = EvalRay {
                pixel,
                origin: ray.origin,
                dir: ray.dir,
                ts: Vec::new(),
                f: Vec::new(),
                g: Vec::new(),
                c: Vec::new(),
            };
            let Some((t0, t1)) = ray_cube_range(ray.origin, ray.dir, bound) else {
                out.push(Ok(er));
                continue;
            };
            let jray = jitter.map(|j| &j[pixel * stride..(pixel + 1) * stride]);
            let coarse = stratified_ts(
                t0,
                t1,
                opts.coarse_samples,
                jray.map(|j| &j[..opts.coarse_samples]),
            );
            let pts: Vec<[f32; 3]> = coarse
                .iter()
                .map(|&t| point_on(ray.origin, ray.dir, t, bound))
                .collect();
            let f_coarse = match eval.sdf_batch(&pts) {
                Ok(v) => v,
                Err(e) => {
                    out.push(Err(e));
                    continue;
                }
            };
            let ts = if opts.fine_samples > 0 {
                let (_, w) = alphas_and_weights(&f_coarse, s);
                let fine = importance_ts(
                    &coarse,
                    &w,
                    opts.fine_samples,
                    jray.map(|j| &j[opts.coarse_samples..]),
                );
                merge_strict(coarse, fine)
            } else {
                coarse
            };
            let pts: Vec<[f32; 3]> = ts
                .iter()
                .map(|&t| point_on(ray.origin, ray.dir, t, bound))
                .collect();
            let filled = (|| -> Result<EvalRay, FieldError> {
                if wants.grads {
                    let fg = eval.sdf_grad_batch(&pts)?;
                    er.f = fg.iter().map(|&(v, _)| v).collect();
                    er.g = fg.into_iter().map(|(_, g)| g).collect();
                } else {
                    er.f = eval.sdf_batch(&pts)?;
                }
                if wants.colors && pts.len() > 1 {
                    let m = pts.len() - 1;
                    let dirs = vec![ray.dir; m];
                    er.c = eval.color_batch(&pts[..m], &dirs)?;
                }
                er.ts = ts;
                Ok(er)
            })();
            out.push(filled);
        }
        out
    });

    let mut rays_out = Vec::with_capacity(rays.len());
    for part in parts {
        for r in part {
            rays_out.push(r?);
        }
    }
    Ok(rays_out)
}

/// All per-pixel render outputs computable from one traced ray.
#[derive(Debug, Clone, Copy)]
struct PixelOut {
    color: [f32; 3],
    normal: [f32; 3],
    textureless: [f32; 3],
    opacity: f32,
    depth: f32,
}

impl PixelOut {
    fn background() -> PixelOut {
        PixelOut {
            color: WHITE,
            normal: MID_GRAY,
            textureless: WHITE,
            opacity: 0.0,
            depth: 0.0,
        }
    }
}

/// Composites one ray. Fields whose inputs were not evaluated (gradients or
/// colors) keep their background value.
fn composite(ray: &EvalRay, s: f32, light: [f32; 3]) -> PixelOut {
    let mut out = PixelOut::background();
    if ray.ts.len() < 2 {
        return out;
    }
    let (_, weights) = alphas_and_weights(&ray.f, s);
    let mut op = 0.0f64;
    let mut depth = 0.0f64;
    let mut color = [0.0f64; 3];
    let mut m_vec = [0.0f64; 3];
    for (i, &w) in weights.iter().enumerate() {
        let wd = w as f64;
        op += wd;
        depth += wd * ray.ts[i] as f64;
        if !ray.c.is_empty() {
            for ch in 0..3 {
                color[ch] += wd * ray.c[i][ch] as f64;
            }
        }
        if !ray.g.is_empty() {
            for ch in 0..3 {
                m_vec[ch] += wd * ray.g[i][ch] as f64;
            }
        }
    }
    let opacity = (op as f32).clamp(0.0, 1.0);
    out.opacity = opacity;
    if opacity < BACKGROUND_OPACITY {
        return out;
    }
    out.depth = (depth / (op.max(DEPTH_EPS as f64))) as f32;
    if !ray.c.is_empty() {
        for ch in 0..3 {
            out.color[ch] = color[ch] as f32 + (1.0 - opacity) * WHITE[ch];
        }
    }
    if !ray.g.is_empty() {
        let norm_m = (m_vec[0] * m_vec[0] + m_vec[1] * m_vec[1] + m_vec[2] * m_vec[2])
            .sqrt()
            .max(1e-12);
        let n_hat = [
            (m_vec[0] / norm_m) as f32,
            (m_vec[1] / norm_m) as f32,
            (m_vec[2] / norm_m) as f32,
        ];
        for ch in 0..3 {
            out.normal[ch] = (n_hat[ch] + 1.0) / 2.0;
        }
        let lambert = (n_hat[0] * light[0] + n_hat[1] * light[1] + n_hat[2] * light[2]).max(0.0);
        let gray = 0.3 + 0.7 * lambert;
        let shaded = opacity * gray + (1.0 - opacity) * 1.0;
        out.textureless = [shaded, shaded, shaded];
    }
    out
}

/// The three supervision images of one viewpoint plus per-pixel opacity and
/// depth. `render_type_emitted` marks which image the producing operation
/// was asked for; all three are populated.
#[derive(Debug, Clone)]
pub struct RenderBundle {
    pub color: ImageBuf,
    pub normal: ImageBuf,
    pub textureless: ImageBuf,
    /// Row-major accumulated weight per pixel, in `[0, 1]`.
    pub opacity: Vec<f32>,
    /// Row-major expected hit distance (world units); 0 on background.
    pub depth: Vec<f32>,
    pub render_type_emitted: RenderKind,
}

impl RenderBundle {
    /// The image named by `render_type_emitted`.
    pub fn emitted(&self) -> &ImageBuf {
        match self.render_type_emitted {
            RenderKind::Color => &self.color,
            RenderKind::Normal => &self.normal,
            RenderKind::Textureless => &self.textureless,
        }
    }
}

fn bundle_with<E: FieldEval>(
    eval: &E,
    camera: &Camera,
    kind: RenderKind,
    light: [f32; 3],
    opts: &RenderOptions,
) -> Result<RenderBundle, RenderError> {
    let rays = trace_rays(eval, camera, opts, None, Wants::ALL)?;
    let (h, w) = camera.resolution;
    let s = eval.sharpness();
    let chunk_len = backward_chunk_len(rays.len());
    let pixel_parts = parallel::map_chunks(&rays, chunk_len, |_, chunk| {
        chunk
            .iter()
            .map(|r| composite(r, s, light))
            .collect::<Vec<PixelOut>>()
    });
    let mut color = ImageBuf::filled(h as u32, w as u32, WHITE);
    let mut normal = ImageBuf::filled(h as u32, w as u32, MID_GRAY);
    let mut textureless = ImageBuf::filled(h as u32, w as u32, WHITE);
    let mut opacity = vec![0.0f32; h * w];
    let mut depth = vec![0.0f32; h * w];
    for (part, chunk) in pixel_parts.iter().zip(rays.chunks(chunk_len)) {
        for (px, ray) in part.iter().zip(chunk) {
            let (row, col) = ((ray.pixel / w) as u32, (ray.pixel % w) as u32);
            color.set_pixel(row, col, px.color);
            normal.set_pixel(row, col, px.normal);
            textureless.set_pixel(row, col, px.textureless);
            opacity[ray.pixel] = px.opacity;
            depth[ray.pixel] = px.depth;
        }
    }
    Ok(RenderBundle {
        color,
        normal,
        textureless,
        opacity,
        depth,
        render_type_emitted: kind,
    })
}

fn check_unit_light(light: [f32; 3]) -> Result<(), RenderError> {
    let n = norm(light);
    if !((n - 1.0).abs() <= 1e-4) {
        return Err(RenderError::Contract(format!(
            "light direction has norm {n}, expected unit length"
        )));
    }
    Ok(())
}

/// Renders the color image (plus the rest of the bundle) of one viewpoint.
pub fn render_color(params: &FieldParams, camera: &Camera) -> Result<RenderBundle, RenderError> {
    bundle_with(
        params,
        camera,
        RenderKind::Color,
        camera.headlight(),
        &RenderOptions::default(),
    )
}

/// Renders the normal image: composited world gradients, normalized, then
/// mapped to RGB by `(n+1)/2`; background pixels are mid-gray.
pub fn render_normal(params: &FieldParams, camera: &Camera) -> Result<RenderBundle, RenderError> {
    bundle_with(
        params,
        camera,
        RenderKind::Normal,
        camera.headlight(),
        &RenderOptions::default(),
    )
}

/// Renders the textureless image: Lambertian gray `0.3 + 0.7*max(<n,l>,0)`
/// under the single directional light `light_dir`, composited over white.
pub fn render_textureless(
    params: &FieldParams,
    camera: &Camera,
    light_dir: [f32; 3],
) -> Result<RenderBundle, RenderError> {
    check_unit_light(light_dir)?;
    bundle_with(
        params,
        camera,
        RenderKind::Textureless,
        light_dir,
        &RenderOptions::default(),
    )
}

/// Renders only the requested image, at the given sample counts. Cheaper
/// than the full bundle; used for turntables and previews.
pub fn render_view(
    params: &FieldParams,
    camera: &Camera,
    kind: RenderKind,
    light_dir: Option<[f32; 3]>,
    opts: &RenderOptions,
) -> Result<ImageBuf, RenderError> {
    let light = match light_dir {
        Some(l) => {
            check_unit_light(l)?;
            l
        }
        None => camera.headlight(),
    };
    let rays = trace_rays(params, camera, opts, None, Wants::for_kind(kind))?;
    Ok(assemble_image(&rays, camera, kind, params.logistic_scale, light))
}

fn assemble_image(
    rays: &[EvalRay],
    camera: &Camera,
    kind: RenderKind,
    s: f32,
    light: [f32; 3],
) -> ImageBuf {
    let (h, w) = camera.resolution;
    let chunk_len = backward_chunk_len(rays.len());
    let parts = parallel::map_chunks(rays, chunk_len, |_, chunk| {
        chunk
            .iter()
            .map(|r| {
                let px = composite(r, s, light);
                match kind {
                    RenderKind::Color => px.color,
                    RenderKind::Normal => px.normal,
                    RenderKind::Textureless => px.textureless,
                }
            })
            .collect::<Vec<[f32; 3]>>()
    });
    let mut img = ImageBuf::filled(h as u32, w as u32, kind.background());
    for (part, chunk) in parts.iter().zip(rays.chunks(chunk_len)) {
        for (rgb, ray) in part.iter().zip(chunk) {
            img.set_pixel((ray.pixel / w) as u32, (ray.pixel % w) as u32, *rgb);
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Training path: capture + backward.
// ---------------------------------------------------------------------------

/// Replay record of one training render: the exact samples taken per ray
/// and the field values seen there. Gradients pushed into
/// [`render_backward`] treat these sample positions as fixed.
#[derive(Debug, Clone)]
pub struct RenderCapture {
    kind: RenderKind,
    light: [f32; 3],
    height: usize,
    width: usize,
    rays: Vec<EvalRay>,
}

impl RenderCapture {
    pub fn kind(&self) -> RenderKind {
        self.kind
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Rays that intersected the modeling cube.
    pub fn foreground_rays(&self) -> usize {
        self.rays.iter().filter(|r| r.ts.len() >= 2).count()
    }
}

/// Renders one supervision image with stratified/refined samples jittered
/// from `rng`, remembering everything needed to backpropagate through it.
///
/// Draws exactly `H*W*(coarse+fine)` values from `rng` regardless of scene
/// content, keeping random streams aligned across runs.
pub fn render_for_training<R: Rng>(
    params: &FieldParams,
    camera: &Camera,
    kind: RenderKind,
    light_dir: Option<[f32; 3]>,
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<(ImageBuf, RenderCapture), RenderError> {
    opts.validate()?;
    camera.validate()?;
    let light = match light_dir {
        Some(l) => {
            check_unit_light(l)?;
            l
        }
        None => camera.headlight(),
    };
    let (h, w) = camera.resolution;
    let jitter: Vec<f32> = (0..h * w * opts.draws_per_ray())
        .map(|_| rng.gen::<f32>())
        .collect();
    let rays = trace_rays(params, camera, opts, Some(&jitter), Wants::for_kind(kind))?;
    let image = assemble_image(&rays, camera, kind, params.logistic_scale, light);
    Ok((
        image,
        RenderCapture {
            kind,
            light,
            height: h,
            width: w,
            rays,
        },
    ))
}

/// Recomputes the captured image from the captured sample positions with
/// the current parameters. Exposed for gradient verification.
#[doc(hidden)]
pub fn forward_frozen(
    params: &FieldParams,
    capture: &RenderCapture,
) -> Result<ImageBuf, RenderError> {
    let wants = Wants::for_kind(capture.kind);
    let bound = params.config.bound;
    let chunk_len = backward_chunk_len(capture.rays.len());
    let parts = parallel::map_chunks(&capture.rays, chunk_len, |_, chunk| {
        chunk
            .iter()
            .map(|r| -> Result<EvalRay, FieldError> {
                let mut er = r.clone();
                if er.ts.len() < 2 {
                    return Ok(er);
                }
                let pts: Vec<[f32; 3]> = er
                    .ts
                    .iter()
                    .map(|&t| point_on(er.origin, er.dir, t, bound))
                    .collect();
                if wants.grads {
                    let fg = params.sdf_eval_with_gradient(&pts)?;
                    er.f = fg.iter().map(|&(v, _)| v).collect();
                    er.g = fg.into_iter().map(|(_, g)| g).collect();
                } else {
                    er.f = params.sdf_eval(&pts)?;
                }
                if wants.colors {
                    let m = pts.len() - 1;
                    let dirs = vec![er.dir; m];
                    er.c = params.color_eval(&pts[..m], &dirs)?;
                }
                Ok(er)
            })
            .collect::<Vec<_>>()
    });
    let mut rays = Vec::with_capacity(capture.rays.len());
    for part in parts {
        for r in part {
            rays.push(r?);
        }
    }
    let camera_shape = Camera {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
        focal: (1.0, 1.0),
        principal: (0.0, 0.0),
        resolution: (capture.height, capture.width),
    };
    Ok(assemble_image(
        &rays,
        &camera_shape,
        capture.kind,
        params.logistic_scale,
        capture.light,
    ))
}

/// Pushes a per-pixel image gradient back through a captured render,
/// returning gradients in the flat parameter layout (distance net, color
/// net, sharpness scale). Must be called with the same parameters the
/// capture was made from, inside the single optimization writer.
pub fn render_backward(
    params: &FieldParams,
    capture: &RenderCapture,
    d_image: &ImageBuf,
) -> Result<Vec<f32>, RenderError> {
    if (d_image.height as usize, d_image.width as usize) != (capture.height, capture.width) {
        return Err(RenderError::Contract(format!(
            "image gradient is {}x{} but the capture is {}x{}",
            d_image.height, d_image.width, capture.height, capture.width
        )));
    }
    let n_total = params.n_params();
    let ns = params.sdf_param_count();
    let nc = params.color_mlp.n_params();
    let s = params.logistic_scale;
    let bound = params.config.bound;
    let kind = capture.kind;
    let light = capture.light;

    let chunk_len = backward_chunk_len(capture.rays.len());
    let parts = parallel::map_chunks(&capture.rays, chunk_len, |_, chunk| {
        let mut grads = vec![0.0f32; n_total];
        let mut tape = Tape::default();
        let pos_dim = params.pos_enc.dim();
        let mut enc = vec![0.0f32; pos_dim + params.view_enc.dim()];
        let mut enc_tan = vec![0.0f32; 3 * pos_dim];
        for ray in chunk {
            backprop_ray(
                params, ray, kind, light, s, bound, d_image, &mut tape, &mut enc, &mut enc_tan,
                &mut grads, ns, nc,
            );
        }
        grads
    });
    Ok(parallel::fold_in_order(
        parts,
        vec![0.0f32; n_total],
        |mut acc, part| {
            for (a, p) in acc.iter_mut().zip(&part) {
                *a += p;
            }
            acc
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn backprop_ray(
    params: &FieldParams,
    ray: &EvalRay,
    kind: RenderKind,
    light: [f32; 3],
    s: f32,
    bound: f32,
    d_image: &ImageBuf,
    tape: &mut Tape,
    enc: &mut [f32],
    enc_tan: &mut [f32],
    grads: &mut [f32],
    ns: usize,
    nc: usize,
) {
    let n = ray.ts.len();
    if n < 2 {
        return;
    }
    let width = d_image.width as usize;
    let dpix = d_image.pixel((ray.pixel / width) as u32, (ray.pixel % width) as u32);
    if dpix == [0.0; 3] {
        return;
    }
    let m = n - 1;

    // Recompute alphas, transmittances, weights and the composite pieces.
    let mut alphas = vec![0.0f32; m];
    let mut clamped = vec![false; m];
    let mut trans = vec![0.0f32; m];
    let mut weights = vec![0.0f32; m];
    let mut t_acc = 1.0f32;
    for i in 0..m {
        let ratio = (ln_sigmoid(s * ray.f[i + 1]) - ln_sigmoid(s * ray.f[i])).exp();
        let raw = 1.0 - ratio;
        let alpha = raw.clamp(0.0, ALPHA_MAX);
        clamped[i] = raw <= 0.0 || raw >= ALPHA_MAX;
        alphas[i] = alpha;
        trans[i] = t_acc;
        weights[i] = t_acc * alpha;
        t_acc *= 1.0 - alpha;
    }
    let op_raw: f64 = weights.iter().map(|&w| w as f64).sum();
    let opacity = (op_raw as f32).clamp(0.0, 1.0);
    if opacity < BACKGROUND_OPACITY {
        // The pixel was overridden with the background constant.
        return;
    }

    // Per-weight and per-sample adjoints from the pixel gradient.
    let mut dl_dw = vec![0.0f32; m];
    let mut dl_dg: Vec<[f32; 3]> = Vec::new();
    match kind {
        RenderKind::Color => {
            for i in 0..m {
                dl_dw[i] = dpix[0] * (ray.c[i][0] - WHITE[0])
                    + dpix[1] * (ray.c[i][1] - WHITE[1])
                    + dpix[2] * (ray.c[i][2] - WHITE[2]);
            }
        }
        RenderKind::Normal | RenderKind::Textureless => {
            let mut m_vec = [0.0f64; 3];
            for i in 0..m {
                for ch in 0..3 {
                    m_vec[ch] += weights[i] as f64 * ray.g[i][ch] as f64;
                }
            }
            let norm_m = (m_vec[0] * m_vec[0] + m_vec[1] * m_vec[1] + m_vec[2] * m_vec[2])
                .sqrt()
                .max(1e-12);
            let n_hat = [
                (m_vec[0] / norm_m) as f32,
                (m_vec[1] / norm_m) as f32,
                (m_vec[2] / norm_m) as f32,
            ];
            let mut dl_dn = [0.0f32; 3];
            match kind {
                RenderKind::Normal => {
                    for ch in 0..3 {
                        dl_dn[ch] = dpix[ch] * 0.5;
                    }
                }
                RenderKind::Textureless => {
                    let dsum = dpix[0] + dpix[1] + dpix[2];
                    let lambert =
                        n_hat[0] * light[0] + n_hat[1] * light[1] + n_hat[2] * light[2];
                    let gray = 0.3 + 0.7 * lambert.max(0.0);
                    let dgray = opacity * dsum;
                    let dop = (gray - 1.0) * dsum;
                    if lambert > 0.0 {
                        for ch in 0..3 {
                            dl_dn[ch] = 0.7 * dgray * light[ch];
                        }
                    }
                    for w in dl_dw.iter_mut() {
                        *w = dop;
                    }
                }
                RenderKind::Color => unreachable!(),
            }
            // Through the normalization: project out the radial component.
            let along = n_hat[0] * dl_dn[0] + n_hat[1] * dl_dn[1] + n_hat[2] * dl_dn[2];
            let dl_dm = [
                ((dl_dn[0] - n_hat[0] * along) as f64 / norm_m) as f32,
                ((dl_dn[1] - n_hat[1] * along) as f64 / norm_m) as f32,
                ((dl_dn[2] - n_hat[2] * along) as f64 / norm_m) as f32,
            ];
            dl_dg = vec![[0.0f32; 3]; n];
            for i in 0..m {
                dl_dw[i] += dl_dm[0] * ray.g[i][0]
                    + dl_dm[1] * ray.g[i][1]
                    + dl_dm[2] * ray.g[i][2];
                for ch in 0..3 {
                    dl_dg[i][ch] = weights[i] * dl_dm[ch];
                }
            }
        }
    }

    // Weights -> alphas via reverse transmittance accumulation.
    let mut dl_dalpha = vec![0.0f32; m];
    let mut suffix = 0.0f64;
    for k in (0..m).rev() {
        dl_dalpha[k] =
            dl_dw[k] * trans[k] - (suffix / (1.0 - alphas[k]) as f64) as f32;
        suffix += dl_dw[k] as f64 * weights[k] as f64;
    }

    // Alphas -> distances and sharpness.
    let mut dl_df = vec![0.0f32; n];
    let mut dl_ds = 0.0f64;
    for i in 0..m {
        if clamped[i] || dl_dalpha[i] == 0.0 {
            continue;
        }
        let ratio = (ln_sigmoid(s * ray.f[i + 1]) - ln_sigmoid(s * ray.f[i])).exp();
        let qa = sigmoid(-s * ray.f[i]);
        let qb = sigmoid(-s * ray.f[i + 1]);
        dl_df[i] += dl_dalpha[i] * ratio * qa * s;
        dl_df[i + 1] -= dl_dalpha[i] * ratio * qb * s;
        dl_ds += dl_dalpha[i] as f64 * ratio as f64 * (qa * ray.f[i] - qb * ray.f[i + 1]) as f64;
    }
    grads[ns + nc] += dl_ds as f32;

    // Distances (and their spatial gradients) -> distance-net parameters.
    let pos_dim = params.pos_enc.dim();
    for j in 0..n {
        let needs_tan = !dl_dg.is_empty() && dl_dg[j] != [0.0; 3];
        if dl_df[j] == 0.0 && !needs_tan {
            continue;
        }
        let p = point_on(ray.origin, ray.dir, ray.ts[j], bound);
        if dl_dg.is_empty() {
            params.sdf_forward(p, tape, &mut enc[..pos_dim]);
            params
                .sdf_mlp
                .backward(tape, &[dl_df[j]], &mut grads[..ns]);
        } else {
            params.sdf_forward_with_gradient(p, tape, &mut enc[..pos_dim], enc_tan);
            params
                .sdf_mlp
                .backward_with_tangents(tape, &[dl_df[j]], &dl_dg[j], &mut grads[..ns]);
        }
    }

    // Sample colors -> color-net parameters.
    if kind == RenderKind::Color {
        for i in 0..m {
            if weights[i] == 0.0 {
                continue;
            }
            let dl_dc = [
                weights[i] * dpix[0],
                weights[i] * dpix[1],
                weights[i] * dpix[2],
            ];
            if dl_dc == [0.0; 3] {
                continue;
            }
            let p = point_on(ray.origin, ray.dir, ray.ts[i], bound);
            params.color_forward(p, ray.dir, tape, enc);
            params
                .color_mlp
                .backward(tape, &dl_dc, &mut grads[ns..ns + nc]);
        }
    }
}

// ---------------------------------------------------------------------------
// Small vector helpers.
// ---------------------------------------------------------------------------

fn sub(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(v: [f32; 3], k: f32) -> [f32; 3] {
    [v[0] * k, v[1] * k, v[2] * k]
}

fn cross(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(v: [f32; 3]) -> f32 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Analytic surface for oracle renders: exact distance, exact gradient,
    /// constant color.
    struct Analytic<F: Fn([f32; 3]) -> (f32, [f32; 3]) + Sync> {
        field: F,
        color: [f32; 3],
        bound: f32,
        sharp: f32,
    }

    impl<F: Fn([f32; 3]) -> (f32, [f32; 3]) + Sync> FieldEval for Analytic<F> {
        fn bound(&self) -> f32 {
            self.bound
        }
        fn sharpness(&self) -> f32 {
            self.sharp
        }
        fn sdf_batch(&self, pts: &[[f32; 3]]) -> Result<Vec<f32>, FieldError> {
            Ok(pts.iter().map(|&p| (self.field)(p).0).collect())
        }
        fn sdf_grad_batch(&self, pts: &[[f32; 3]]) -> Result<Vec<(f32, [f32; 3])>, FieldError> {
            Ok(pts.iter().map(|&p| (self.field)(p)).collect())
        }
        fn color_batch(
            &self,
            pts: &[[f32; 3]],
            _dirs: &[[f32; 3]],
        ) -> Result<Vec<[f32; 3]>, FieldError> {
            Ok(vec![self.color; pts.len()])
        }
    }

    fn unit_sphere() -> Analytic<impl Fn([f32; 3]) -> (f32, [f32; 3]) + Sync> {
        Analytic {
            field: |p: [f32; 3]| {
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-9);
                (r - 1.0, [p[0] / r, p[1] / r, p[2] / r])
            },
            color: [0.8, 0.3, 0.2],
            bound: 1.5,
            sharp: 100.0,
        }
    }

    fn sphere_camera(res: usize, focal: f32) -> Camera {
        Camera::look_at(
            [0.0, 0.0, -3.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            focal,
            (res, res),
        )
        .unwrap()
    }

    #[test]
    fn principal_ray_points_along_camera_forward() {
        let cam = Camera::look_at(
            [0.4, -0.2, -2.5],
            [0.1, 0.3, 0.0],
            [0.0, 1.0, 0.0],
            9.0,
            (9, 9),
        )
        .unwrap();
        let rays = generate_rays(&cam).unwrap();
        // 9x9 image: the principal point (4.5, 4.5) is the center of
        // pixel (4, 4).
        let center = rays[4 * 9 + 4];
        let f = cam.forward_axis();
        for ch in 0..3 {
            assert!((center.dir[ch] - f[ch]).abs() < 1e-6, "axis {ch}");
        }
        assert_eq!(center.origin, cam.translation);
    }

    #[test]
    fn doubling_focal_halves_the_pixel_tangent() {
        let mut cam = sphere_camera(16, 16.0);
        let rays1 = generate_rays(&cam).unwrap();
        cam.focal = (32.0, 32.0);
        let rays2 = generate_rays(&cam).unwrap();
        let f = cam.forward_axis();
        let tangent = |r: &Ray| {
            let along = r.dir[0] * f[0] + r.dir[1] * f[1] + r.dir[2] * f[2];
            let perp = (1.0 - along * along).max(0.0).sqrt();
            perp / along
        };
        let idx = 3 * 16 + 12; // an off-center pixel
        let t1 = tangent(&rays1[idx]);
        let t2 = tangent(&rays2[idx]);
        assert!((t2 - t1 / 2.0).abs() < 1e-6, "tangents {t1} {t2}");
    }

    #[test]
    fn every_ray_direction_is_unit() {
        let cam = sphere_camera(12, 10.0);
        for ray in generate_rays(&cam).unwrap() {
            assert!((norm(ray.dir) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_rotations_are_rejected() {
        let mut cam = sphere_camera(8, 8.0);
        cam.rotation = [[0.0; 3]; 3];
        assert!(matches!(
            cam.validate(),
            Err(RenderError::Contract(_))
        ));
        // A mirrored frame is orthonormal but not a rotation.
        let mut cam = sphere_camera(8, 8.0);
        for r in cam.rotation.iter_mut() {
            r[0] = -r[0];
        }
        assert!(cam.validate().is_err());
        // Up parallel to the view direction cannot define a frame.
        assert!(Camera::look_at(
            [0.0, 0.0, -3.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            8.0,
            (8, 8)
        )
        .is_err());
    }

    #[test]
    fn tiny_resolutions_are_rejected() {
        assert!(Camera::look_at(
            [0.0, 0.0, -3.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            8.0,
            (7, 8)
        )
        .is_err());
    }

    #[test]
    fn weights_vanish_in_empty_space() {
        let f = vec![10.0f32; 64];
        let w = neus_weights(&f, 30.0).unwrap();
        assert_eq!(w.len(), 63);
        for v in w {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn weights_reject_bad_inputs() {
        assert!(neus_weights(&[1.0, 0.5], 0.0).is_err());
        assert!(neus_weights(&[1.0, 0.5], -3.0).is_err());
        assert!(neus_weights(&[1.0], 10.0).is_err());
    }

    /// Dense-quadrature oracle for a single-crossing ray: integrates the
    /// continuous first-opaque density over each sample interval and
    /// compares interval masses with the discrete weights.
    #[test]
    fn single_crossing_weights_match_dense_quadrature() {
        let s = 100.0f32;
        let n = 64usize;
        let ts: Vec<f32> = (0..n).map(|i| i as f32 * (3.0 / (n - 1) as f32)).collect();
        // Monotone distance crossing zero once, mid-ray.
        let f_of = |t: f32| 0.8 - 0.65 * t;
        let f: Vec<f32> = ts.iter().map(|&t| f_of(t)).collect();
        let w = neus_weights(&f, s).unwrap();

        // Continuous form: density -d/dt ln(sigmoid(s f(t))) while the
        // distance decreases; survival up to t is sigmoid(s f(t)) /
        // sigmoid(s f(0)). Interval mass = survival(a) - survival(b).
        let quad_mass = |a: f32, b: f32| -> f64 {
            let steps = 4000;
            let mut mass = 0.0f64;
            let phi0 = sigmoid(s * f_of(0.0)) as f64;
            for k in 0..steps {
                let t0 = a + (b - a) * k as f32 / steps as f32;
                let t1 = a + (b - a) * (k + 1) as f32 / steps as f32;
                let d0 = sigmoid(s * f_of(t0)) as f64 / phi0;
                let d1 = sigmoid(s * f_of(t1)) as f64 / phi0;
                mass += d0 - d1;
            }
            mass
        };

        let mut total = 0.0f64;
        let mut argmax = 0usize;
        for (i, &wi) in w.iter().enumerate() {
            let oracle = quad_mass(ts[i], ts[i + 1]);
            assert!(
                (wi as f64 - oracle).abs() < 1e-4,
                "interval {i}: weight {wi} vs quadrature {oracle}"
            );
            total += wi as f64;
            if wi > w[argmax] {
                argmax = i;
            }
        }
        assert!(total > 0.95, "total mass {total}");
        // The crossing t* solves f(t*) = 0.
        let t_star = 0.8 / 0.65;
        assert!(
            ts[argmax] <= t_star && t_star <= ts[argmax + 1],
            "argmax interval [{}, {}] misses the crossing {t_star}",
            ts[argmax],
            ts[argmax + 1]
        );
    }

    #[test]
    fn random_weight_sequences_stay_below_unit_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let len = rng.gen_range(2..80);
            let scale = rng.gen_range(1.0f32..200.0);
            let f: Vec<f32> = (0..len).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let w = neus_weights(&f, scale).unwrap();
            let total: f64 = w.iter().map(|&v| v as f64).sum();
            assert!(total <= 1.0 + 1e-6, "mass {total}");
            for v in w {
                assert!(v >= 0.0 && v.is_finite());
            }
        }
    }

    #[test]
    fn empty_field_renders_pure_background() {
        let empty = Analytic {
            field: |_p: [f32; 3]| (10.0, [1.0, 0.0, 0.0]),
            color: [0.2, 0.2, 0.2],
            bound: 1.5,
            sharp: 50.0,
        };
        let cam = sphere_camera(16, 16.0);
        let b = bundle_with(
            &empty,
            &cam,
            RenderKind::Color,
            cam.headlight(),
            &RenderOptions::default(),
        )
        .unwrap();
        assert!(b.color.data.iter().all(|&v| v == 1.0));
        assert!(b.normal.data.iter().all(|&v| v == 0.5));
        assert!(b.textureless.data.iter().all(|&v| v == 1.0));
        assert!(b.opacity.iter().all(|&v| v == 0.0));
        assert!(b.depth.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sphere_depth_and_silhouette_match_ray_geometry() {
        let sphere = unit_sphere();
        let res = 64usize;
        let cam = sphere_camera(res, 64.0);
        let b = bundle_with(
            &sphere,
            &cam,
            RenderKind::Color,
            cam.headlight(),
            &RenderOptions::default(),
        )
        .unwrap();

        // Center ray hits the unit sphere at distance 2 from the camera at
        // distance 3; tolerance is twice the coarse sample spacing.
        let spacing = 3.0 / COARSE_SAMPLES as f32;
        let center = res / 2 * res + res / 2;
        assert!(
            (b.depth[center] - 2.0).abs() < 2.0 * spacing,
            "center depth {}",
            b.depth[center]
        );

        // Opacity bounds.
        for &o in &b.opacity {
            assert!((0.0..=1.0).contains(&o));
        }
        assert!(b.opacity[center] > 0.95, "center opacity {}", b.opacity[center]);

        // Silhouette: the projected disk radius in pixels is
        // focal * tan(asin(1/3)).
        let count = b.opacity.iter().filter(|&&o| o > 0.5).count() as f64;
        let measured = (count / std::f64::consts::PI).sqrt();
        let expected = 64.0 * (1.0f64 / 3.0).asin().tan();
        assert!(
            (measured - expected).abs() < 1.0,
            "silhouette radius {measured} px vs {expected} px"
        );

        // Foreground color approaches the surface color.
        let px = b.color.pixel((res / 2) as u32, (res / 2) as u32);
        for (got, want) in px.iter().zip([0.8, 0.3, 0.2]) {
            assert!((got - want).abs() < 0.02, "center color {px:?}");
        }
    }

    #[test]
    fn sphere_normals_match_the_analytic_surface() {
        let sphere = unit_sphere();
        let res = 48usize;
        let cam = sphere_camera(res, 48.0);
        let b = bundle_with(
            &sphere,
            &cam,
            RenderKind::Normal,
            cam.headlight(),
            &RenderOptions::default(),
        )
        .unwrap();
        let rays = generate_rays(&cam).unwrap();

        // Center pixel: surface faces the camera.
        let center = res / 2 * res + res / 2;
        let px = b.normal.pixel((res / 2) as u32, (res / 2) as u32);
        let n = [px[0] * 2.0 - 1.0, px[1] * 2.0 - 1.0, px[2] * 2.0 - 1.0];
        let d = rays[center].dir;
        let cos = -(n[0] * d[0] + n[1] * d[1] + n[2] * d[2]) / norm(n).max(1e-9);
        assert!(cos > 0.99, "center cosine {cos}");

        // All confident foreground pixels vs the analytic hit normal.
        let mut mean_cos = 0.0f64;
        let mut count = 0usize;
        for (idx, ray) in rays.iter().enumerate() {
            if b.opacity[idx] < 0.9 {
                continue;
            }
            // First root of |o + t d| = 1.
            let oc = ray.origin;
            let bq = oc[0] * ray.dir[0] + oc[1] * ray.dir[1] + oc[2] * ray.dir[2];
            let cq = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - 1.0;
            let disc = bq * bq - cq;
            if disc <= 0.0 {
                continue;
            }
            let t_hit = -bq - disc.sqrt();
            let hit = [
                oc[0] + t_hit * ray.dir[0],
                oc[1] + t_hit * ray.dir[1],
                oc[2] + t_hit * ray.dir[2],
            ];
            let px = b.normal.pixel((idx / res) as u32, (idx % res) as u32);
            let n = [px[0] * 2.0 - 1.0, px[1] * 2.0 - 1.0, px[2] * 2.0 - 1.0];
            let nn = norm(n).max(1e-9);
            mean_cos +=
                ((n[0] * hit[0] + n[1] * hit[1] + n[2] * hit[2]) / nn) as f64;
            count += 1;
        }
        assert!(count > 100, "too few foreground pixels: {count}");
        mean_cos /= count as f64;
        assert!(mean_cos > 0.99, "mean cosine {mean_cos}");
    }

    #[test]
    fn plane_renders_a_constant_normal_image() {
        // Solid half-space z >= 0 seen from the front.
        let plane = Analytic {
            field: |p: [f32; 3]| (-p[2], [0.0, 0.0, -1.0]),
            color: [0.5, 0.5, 0.5],
            bound: 1.5,
            sharp: 100.0,
        };
        let res = 16usize;
        let cam = sphere_camera(res, 32.0);
        let b = bundle_with(
            &plane,
            &cam,
            RenderKind::Normal,
            cam.headlight(),
            &RenderOptions::default(),
        )
        .unwrap();
        let want = [0.5, 0.5, 0.0];
        for row in 0..res as u32 {
            for col in 0..res as u32 {
                let px = b.normal.pixel(row, col);
                for ch in 0..3 {
                    assert!(
                        (px[ch] - want[ch]).abs() < 1e-2,
                        "pixel ({row},{col}) = {px:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn lambert_shading_hits_its_analytic_extremes() {
        let plane = Analytic {
            field: |p: [f32; 3]| (-p[2], [0.0, 0.0, -1.0]),
            color: [0.5, 0.5, 0.5],
            bound: 1.5,
            sharp: 100.0,
        };
        let cam = sphere_camera(16, 32.0);
        // Light along the normal: full brightness.
        let b = bundle_with(
            &plane,
            &cam,
            RenderKind::Textureless,
            [0.0, 0.0, -1.0],
            &RenderOptions::default(),
        )
        .unwrap();
        let px = b.textureless.pixel(8, 8);
        assert!((px[0] - 1.0).abs() < 1e-3, "lit pixel {px:?}");
        // Light orthogonal to the normal: ambient only.
        let b = bundle_with(
            &plane,
            &cam,
            RenderKind::Textureless,
            [1.0, 0.0, 0.0],
            &RenderOptions::default(),
        )
        .unwrap();
        let px = b.textureless.pixel(8, 8);
        assert!((px[0] - 0.3).abs() < 1e-3, "side-lit pixel {px:?}");
    }

    #[test]
    fn brightest_sphere_pixel_sits_at_the_light_foot() {
        let sphere = unit_sphere();
        let res = 64usize;
        let cam = sphere_camera(res, 64.0);
        let light = {
            let v = [0.45f32, 0.35, -0.82];
            scale(v, 1.0 / norm(v))
        };
        let b = bundle_with(
            &sphere,
            &cam,
            RenderKind::Textureless,
            light,
            &RenderOptions::default(),
        )
        .unwrap();

        // Brightest foreground pixel.
        let mut best = (0usize, -1.0f32);
        for idx in 0..res * res {
            if b.opacity[idx] > 0.5 {
                let v = b.textureless.data[idx * 3];
                if v > best.1 {
                    best = (idx, v);
                }
            }
        }
        let (brow, bcol) = (best.0 / res, best.0 % res);

        // The Lambert maximum is the surface point whose normal equals the
        // light direction: the point `light` itself on the unit sphere.
        let rel = sub(light, cam.translation);
        let r = &cam.rotation;
        let in_cam = [
            rel[0] * r[0][0] + rel[1] * r[1][0] + rel[2] * r[2][0],
            rel[0] * r[0][1] + rel[1] * r[1][1] + rel[2] * r[2][1],
            rel[0] * r[0][2] + rel[1] * r[1][2] + rel[2] * r[2][2],
        ];
        let (fx, fy) = cam.focal;
        let (cx, cy) = cam.principal;
        let col = fx * in_cam[0] / in_cam[2] + cx - 0.5;
        let row = fy * in_cam[1] / in_cam[2] + cy - 0.5;
        let dist =
            ((brow as f32 - row).powi(2) + (bcol as f32 - col).powi(2)).sqrt();
        assert!(
            dist <= 2.0,
            "brightest pixel ({brow},{bcol}) vs projected maximum ({row:.1},{col:.1})"
        );
    }

    #[test]
    fn non_unit_light_is_rejected() {
        let params = crate::field::FieldParams::geometric_init(
            &FieldConfig {
                hidden_dim: 16,
                sdf_hidden_layers: 2,
                color_hidden_layers: 1,
                point_octaves: 2,
                view_octaves: 1,
                ..Default::default()
            },
            0.5,
            1,
        );
        let cam = sphere_camera(8, 8.0);
        let err = render_textureless(&params, &cam, [0.0, 0.0, -2.0]).unwrap_err();
        assert!(err.to_string().contains("unit length"), "{err}");
    }

    #[test]
    fn training_render_is_reproducible_across_execution_modes() {
        let params = tiny_field();
        let cam = sphere_camera(8, 8.0);
        let opts = RenderOptions {
            coarse_samples: 16,
            fine_samples: 8,
        };
        let run = |sequential: bool| {
            parallel::force_sequential(sequential);
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let out = render_for_training(
                &params,
                &cam,
                RenderKind::Color,
                None,
                &opts,
                &mut rng,
            )
            .unwrap();
            parallel::force_sequential(false);
            out
        };
        let (img_a, cap_a) = run(false);
        let (img_b, cap_b) = run(true);
        assert_eq!(img_a.data, img_b.data);
        assert_eq!(cap_a.rays.len(), cap_b.rays.len());
        for (ra, rb) in cap_a.rays.iter().zip(&cap_b.rays) {
            assert_eq!(ra.ts, rb.ts);
            assert_eq!(ra.f, rb.f);
        }
    }

    #[test]
    fn captured_samples_are_strictly_increasing_and_inside_the_cube() {
        let params = tiny_field();
        let cam = sphere_camera(8, 8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, cap) = render_for_training(
            &params,
            &cam,
            RenderKind::Color,
            None,
            &RenderOptions {
                coarse_samples: 24,
                fine_samples: 12,
            },
            &mut rng,
        )
        .unwrap();
        assert!(cap.foreground_rays() > 0);
        let bound = params.config.bound;
        for ray in &cap.rays {
            for pair in ray.ts.windows(2) {
                assert!(pair[1] > pair[0], "non-increasing samples {pair:?}");
            }
            for &t in &ray.ts {
                let p = point_on(ray.origin, ray.dir, t, bound);
                for c in p {
                    assert!(c.abs() <= bound);
                }
            }
        }
    }

    fn tiny_field() -> FieldParams {
        FieldParams::geometric_init(
            &FieldConfig {
                hidden_dim: 16,
                sdf_hidden_layers: 2,
                color_hidden_layers: 2,
                point_octaves: 2,
                view_octaves: 1,
                ..Default::default()
            },
            0.7,
            9,
        )
    }

    /// Central finite differences of the frozen-sample render against the
    /// analytic backward pass, on the strongest parameter components.
    fn check_gradients(kind: RenderKind) {
        let params = tiny_field();
        let cam = sphere_camera(8, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let light = [0.0, 0.0, -1.0];
        let (_img, cap) = render_for_training(
            &params,
            &cam,
            kind,
            Some(light),
            &RenderOptions {
                coarse_samples: 24,
                fine_samples: 8,
            },
            &mut rng,
        )
        .unwrap();

        // A pseudo-random pixel weighting: a uniform one lets symmetric
        // contributions cancel, leaving gradients below finite-difference
        // noise on near-spherical fields. Thinly covered pixels are masked
        // out: their normalized composite normal has a huge local Lipschitz
        // constant (1/|sum w grad|), which wrecks finite differences while
        // the analytic derivative stays well-defined.
        let (h, w) = cap.resolution();
        let mut wrng = ChaCha8Rng::seed_from_u64(17);
        let mut pixel_weights: Vec<f32> = (0..h * w * 3)
            .map(|_| wrng.gen_range(-1.0f32..1.0) / (h * w * 3) as f32)
            .collect();
        for ray in &cap.rays {
            let op = composite(ray, params.logistic_scale, light).opacity;
            if op < 0.2 {
                for ch in 0..3 {
                    pixel_weights[ray.pixel * 3 + ch] = 0.0;
                }
            }
        }
        let d_image = ImageBuf::new(h as u32, w as u32, pixel_weights.clone()).unwrap();
        let analytic = render_backward(&params, &cap, &d_image).unwrap();

        let mean_of = |p: &FieldParams| -> f64 {
            let img = forward_frozen(p, &cap).unwrap();
            img.data
                .iter()
                .zip(&pixel_weights)
                .map(|(&v, &wt)| v as f64 * wt as f64)
                .sum::<f64>()
        };

        // Strongest distance-net components, a couple of color-net ones
        // (color renders only), and the sharpness scale.
        let ns = params.sdf_param_count();
        let mut picks: Vec<usize> = (0..ns).collect();
        picks.sort_by(|&a, &b| {
            analytic[b]
                .abs()
                .partial_cmp(&analytic[a].abs())
                .unwrap()
        });
        let mut targets: Vec<usize> = picks[..6].to_vec();
        if kind == RenderKind::Color {
            let mut cpick: Vec<usize> = (ns..analytic.len() - 1).collect();
            cpick.sort_by(|&a, &b| {
                analytic[b]
                    .abs()
                    .partial_cmp(&analytic[a].abs())
                    .unwrap()
            });
            targets.extend(&cpick[..3]);
        }
        targets.push(analytic.len() - 1);

        let flat = params.flatten();
        let mut probe = params.clone();
        let mut at = |fp: &mut Vec<f32>, idx: usize, v: f32| -> f64 {
            fp[idx] = v;
            probe.set_from_flat(fp);
            mean_of(&probe)
        };
        for &idx in &targets {
            // Fourth-order central difference: the sharp hidden activations
            // make plain central differences too curvature-sensitive.
            let h_step = 2e-4f32.max(flat[idx].abs() * 2e-4);
            let mut fp = flat.clone();
            let p2 = at(&mut fp, idx, flat[idx] + 2.0 * h_step);
            let p1 = at(&mut fp, idx, flat[idx] + h_step);
            let m1 = at(&mut fp, idx, flat[idx] - h_step);
            let m2 = at(&mut fp, idx, flat[idx] - 2.0 * h_step);
            fp[idx] = flat[idx];
            let fd = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h_step as f64);
            let an = analytic[idx] as f64;
            let denom = fd.abs().max(an.abs());
            // The absolute floor covers rounding noise of the f32 forward
            // passes on components whose true gradient is near zero.
            assert!(
                (fd - an).abs() <= 1e-2 * denom + 1e-6,
                "param {idx}: finite difference {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn color_gradients_match_finite_differences() {
        check_gradients(RenderKind::Color);
    }

    #[test]
    fn normal_gradients_match_finite_differences() {
        check_gradients(RenderKind::Normal);
    }

    #[test]
    fn textureless_gradients_match_finite_differences() {
        check_gradients(RenderKind::Textureless);
    }

    #[test]
    fn backward_rejects_mismatched_image_shapes() {
        let params = tiny_field();
        let cam = sphere_camera(8, 8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, cap) = render_for_training(
            &params,
            &cam,
            RenderKind::Color,
            None,
            &RenderOptions {
                coarse_samples: 8,
                fine_samples: 0,
            },
            &mut rng,
        )
        .unwrap();
        let wrong = ImageBuf::filled(9, 8, [0.0; 3]);
        assert!(render_backward(&params, &cap, &wrong).is_err());
    }
}
