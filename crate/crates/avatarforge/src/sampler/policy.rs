//! Camera-placement and render-type sampling policies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SamplerError;
use crate::field::TemplateBody;
use crate::renderer::{Camera, RenderKind};
use crate::sampler::PoseSkeleton;

/// Whether a sampled camera was aimed at the face or the whole body; the
/// key that routes each optimization step to its guidance backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocusTag {
    Face,
    Body,
}

impl FocusTag {
    pub fn as_str(self) -> &'static str {
        match self {
            FocusTag::Face => "face",
            FocusTag::Body => "body",
        }
    }
}

/// Stochastic camera placement: orbit the face with probability
/// `face_fraction`, otherwise the body, at a radius/elevation/azimuth/field
/// of view drawn uniformly from the configured ranges.
///
/// Angle ranges are degrees; elevation 0 is the horizon and +90 looks down
/// from above. Azimuth 0 faces the subject (who looks along +z). The
/// optional `keep_out` box (min/max corners) rejects camera positions
/// inside it, keeping every camera outside the (inflated) body volume.
/// The angle/fov defaults are documented choices, not derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPolicy {
    pub face_fraction: f32,
    pub face_center: [f32; 3],
    pub body_center: [f32; 3],
    pub radius_range_face: (f32, f32),
    pub radius_range_body: (f32, f32),
    pub elevation_range: (f32, f32),
    pub azimuth_range: (f32, f32),
    pub fov_range: (f32, f32),
    pub resolution: (usize, usize),
    pub keep_out: Option<([f32; 3], [f32; 3])>,
}

impl Default for CameraPolicy {
    fn default() -> Self {
        CameraPolicy::from_template(
            &TemplateBody::capsule_humanoid(),
            &PoseSkeleton::canonical_humanoid(),
            (128, 128),
        )
    }
}

impl CameraPolicy {
    /// Derives centers, radii, and the keep-out box from a body template
    /// and its skeleton: the face center is the mean of the five face
    /// joints, the body center is the bounding-box center, and radii scale
    /// with the bounding-box diagonal.
    pub fn from_template(
        template: &TemplateBody,
        skeleton: &PoseSkeleton,
        resolution: (usize, usize),
    ) -> CameraPolicy {
        let (lo, hi) = template.bounding_box();
        let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2))
            .sqrt();
        let center = [
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
            0.5 * (lo[2] + hi[2]),
        ];
        let mut inflated_lo = [0.0f32; 3];
        let mut inflated_hi = [0.0f32; 3];
        for a in 0..3 {
            let half = 0.5 * (hi[a] - lo[a]) * 1.1;
            inflated_lo[a] = center[a] - half;
            inflated_hi[a] = center[a] + half;
        }
        CameraPolicy {
            face_fraction: 0.25,
            face_center: skeleton.face_joint_center(),
            body_center: center,
            radius_range_face: (0.24 * diag, 0.50 * diag),
            radius_range_body: (0.75 * diag, 1.25 * diag),
            elevation_range: (-10.0, 45.0),
            azimuth_range: (0.0, 360.0),
            fov_range: (40.0, 70.0),
            resolution,
            keep_out: Some((inflated_lo, inflated_hi)),
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(0.0..=1.0).contains(&self.face_fraction) || !self.face_fraction.is_finite() {
            return Err(SamplerError::Contract(format!(
                "face_fraction {} is outside [0, 1]",
                self.face_fraction
            )));
        }
        for (name, (lo, hi)) in [
            ("radius_range_face", self.radius_range_face),
            ("radius_range_body", self.radius_range_body),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
                return Err(SamplerError::Contract(format!(
                    "{name} ({lo}, {hi}) needs 0 < min < max"
                )));
            }
        }
        for (name, (lo, hi)) in [
            ("elevation_range", self.elevation_range),
            ("azimuth_range", self.azimuth_range),
            ("fov_range", self.fov_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(SamplerError::Contract(format!(
                    "{name} ({lo}, {hi}) needs min <= max"
                )));
            }
        }
        let (elo, ehi) = self.elevation_range;
        if elo <= -89.0 || ehi >= 89.0 {
            return Err(SamplerError::Contract(format!(
                "elevation_range ({elo}, {ehi}) must stay inside (-89, 89) degrees"
            )));
        }
        let (flo, fhi) = self.fov_range;
        if flo <= 1.0 || fhi >= 175.0 {
            return Err(SamplerError::Contract(format!(
                "fov_range ({flo}, {fhi}) must stay inside (1, 175) degrees"
            )));
        }
        if self.resolution.0 < 8 || self.resolution.1 < 8 {
            return Err(SamplerError::Contract(format!(
                "resolution {}x{} is below the 8-pixel minimum",
                self.resolution.0, self.resolution.1
            )));
        }
        Ok(())
    }
}

fn inside_box(p: [f32; 3], lo: [f32; 3], hi: [f32; 3]) -> bool {
    (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
}

/// Unit direction for an (azimuth, elevation) pair in radians; azimuth 0
/// points along +z (in front of the subject), elevation raises toward +y.
fn orbit_direction(azimuth: f32, elevation: f32) -> [f32; 3] {
    [
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
        elevation.cos() * azimuth.cos(),
    ]
}

/// Draws one camera: the face/body branch first, then
/// azimuth/elevation/radius/fov uniforms (redrawn while the position lands
/// inside the keep-out box). Deterministic in the rng stream.
pub fn sample_camera<R: Rng>(
    policy: &CameraPolicy,
    rng: &mut R,
) -> Result<(Camera, FocusTag), SamplerError> {
    policy.validate()?;
    let face = rng.gen::<f32>() < policy.face_fraction;
    let (tag, center, radius_range) = if face {
        (FocusTag::Face, policy.face_center, policy.radius_range_face)
    } else {
        (FocusTag::Body, policy.body_center, policy.radius_range_body)
    };
    for _ in 0..1000 {
        let azimuth = rng
            .gen_range(policy.azimuth_range.0..=policy.azimuth_range.1)
            .to_radians();
        let elevation = rng
            .gen_range(policy.elevation_range.0..=policy.elevation_range.1)
            .to_radians();
        let radius = rng.gen_range(radius_range.0..=radius_range.1);
        let fov = rng
            .gen_range(policy.fov_range.0..=policy.fov_range.1)
            .to_radians();
        let dir = orbit_direction(azimuth, elevation);
        let position = [
            center[0] + radius * dir[0],
            center[1] + radius * dir[1],
            center[2] + radius * dir[2],
        ];
        if let Some((lo, hi)) = policy.keep_out {
            if inside_box(position, lo, hi) {
                continue;
            }
        }
        let focal = policy.resolution.1 as f32 / 2.0 / (fov / 2.0).tan();
        let camera = Camera::look_at(position, center, [0.0, 1.0, 0.0], focal, policy.resolution)
            .map_err(|e| SamplerError::Contract(e.to_string()))?;
        return Ok((camera, tag));
    }
    Err(SamplerError::Contract(
        "could not place a camera outside the keep-out box in 1000 draws; \
         radius ranges are too tight against the template"
            .into(),
    ))
}

/// Categorical weights over the three render types, in
/// (normal, textureless, color) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderTypePolicy {
    pub weights: (f32, f32, f32),
}

impl Default for RenderTypePolicy {
    fn default() -> Self {
        RenderTypePolicy {
            weights: (1.0, 1.0, 8.0),
        }
    }
}

impl RenderTypePolicy {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let (n, t, c) = self.weights;
        if !(n >= 0.0 && t >= 0.0 && c >= 0.0) || !(n + t + c).is_finite() {
            return Err(SamplerError::Contract(format!(
                "render-type weights ({n}, {t}, {c}) must be nonnegative and finite"
            )));
        }
        if n + t + c <= 0.0 {
            return Err(SamplerError::Contract(
                "render-type weights are all zero".into(),
            ));
        }
        Ok(())
    }
}

/// One categorical draw over the configured render-type weights.
pub fn sample_render_type<R: Rng>(
    policy: &RenderTypePolicy,
    rng: &mut R,
) -> Result<RenderKind, SamplerError> {
    policy.validate()?;
    let (n, t, c) = policy.weights;
    let u = rng.gen::<f32>() * (n + t + c);
    let kinds = [
        (RenderKind::Normal, n),
        (RenderKind::Textureless, t),
        (RenderKind::Color, c),
    ];
    let mut cumulative = 0.0;
    for &(kind, w) in &kinds {
        cumulative += w;
        if u < cumulative && w > 0.0 {
            return Ok(kind);
        }
    }
    // Float round-off can push u to the top of the range; return the last
    // kind that has any weight.
    Ok(kinds
        .iter()
        .rev()
        .find(|&&(_, w)| w > 0.0)
        .map(|&(k, _)| k)
        .expect("validated weights have a positive entry"))
}

/// Number of azimuths in the fixed surround rig.
pub const SURROUND_AZIMUTHS: usize = 8;
/// Elevations (degrees) paired with every surround azimuth.
pub const SURROUND_ELEVATIONS: [f32; 2] = [0.0, 20.0];

/// The fixed 16-view surround rig (8 equally spaced azimuths, each at 0°
/// and +20° elevation) used to condition multi-view synthesis around a
/// center point. Azimuth-major order, elevation inner.
pub fn surround_view_cameras(
    center: [f32; 3],
    radius: f32,
    resolution: (usize, usize),
) -> Result<Vec<Camera>, SamplerError> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(SamplerError::Contract(format!(
            "surround radius {radius} must be positive"
        )));
    }
    let fov = 50.0f32.to_radians();
    let focal = resolution.1 as f32 / 2.0 / (fov / 2.0).tan();
    let mut cameras = Vec::with_capacity(SURROUND_AZIMUTHS * SURROUND_ELEVATIONS.len());
    for k in 0..SURROUND_AZIMUTHS {
        let azimuth = (k as f32) * (360.0 / SURROUND_AZIMUTHS as f32);
        for elevation in SURROUND_ELEVATIONS {
            let dir = orbit_direction(azimuth.to_radians(), elevation.to_radians());
            let position = [
                center[0] + radius * dir[0],
                center[1] + radius * dir[1],
                center[2] + radius * dir[2],
            ];
            let camera = Camera::look_at(position, center, [0.0, 1.0, 0.0], focal, resolution)
                .map_err(|e| SamplerError::Contract(e.to_string()))?;
            cameras.push(camera);
        }
    }
    Ok(cameras)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Distance from a point to the camera's optical-axis line.
    fn axis_miss(camera: &Camera, point: [f32; 3]) -> f32 {
        let f = camera.forward_axis();
        let d = [
            point[0] - camera.translation[0],
            point[1] - camera.translation[1],
            point[2] - camera.translation[2],
        ];
        let along = d[0] * f[0] + d[1] * f[1] + d[2] * f[2];
        let mut m = 0.0;
        for a in 0..3 {
            let off = d[a] - along * f[a];
            m += off * off;
        }
        m.sqrt()
    }

    #[test]
    fn zero_face_fraction_yields_only_body_cameras() {
        let policy = CameraPolicy {
            face_fraction: 0.0,
            ..CameraPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (_, tag) = sample_camera(&policy, &mut rng).unwrap();
            assert_eq!(tag, FocusTag::Body);
        }
    }

    #[test]
    fn default_face_fraction_matches_the_configured_rate() {
        let policy = CameraPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut faces = 0usize;
        for _ in 0..10_000 {
            let (_, tag) = sample_camera(&policy, &mut rng).unwrap();
            if tag == FocusTag::Face {
                faces += 1;
            }
        }
        let fraction = faces as f64 / 10_000.0;
        assert!(
            (0.22..=0.28).contains(&fraction),
            "face fraction {fraction}"
        );
    }

    #[test]
    fn sampled_cameras_look_at_their_focus_center() {
        let policy = CameraPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let (camera, tag) = sample_camera(&policy, &mut rng).unwrap();
            let center = match tag {
                FocusTag::Face => policy.face_center,
                FocusTag::Body => policy.body_center,
            };
            assert!(axis_miss(&camera, center) < 0.05);
        }
    }

    #[test]
    fn sampled_cameras_stay_outside_the_inflated_template_box() {
        let policy = CameraPolicy::default();
        let (lo, hi) = policy.keep_out.expect("template policy sets a keep-out box");
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..2000 {
            let (camera, _) = sample_camera(&policy, &mut rng).unwrap();
            assert!(
                !inside_box(camera.translation, lo, hi),
                "camera {:?} is inside the keep-out box",
                camera.translation
            );
        }
    }

    #[test]
    fn camera_sequences_are_seed_deterministic() {
        let policy = CameraPolicy::default();
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| {
                    let (c, tag) = sample_camera(&policy, &mut rng).unwrap();
                    (
                        c.translation.map(f32::to_bits),
                        c.focal.0.to_bits(),
                        tag,
                    )
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn render_type_frequencies_follow_the_weights() {
        let policy = RenderTypePolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let kind = sample_render_type(&policy, &mut rng).unwrap();
            let slot = match kind {
                RenderKind::Normal => 0,
                RenderKind::Textureless => 1,
                RenderKind::Color => 2,
            };
            counts[slot] += 1;
        }
        let freq = counts.map(|c| c as f64 / 10_000.0);
        for (got, want) in freq.iter().zip([0.1, 0.1, 0.8]) {
            assert!(
                (got - want).abs() <= 0.02,
                "frequencies {freq:?} vs (0.1, 0.1, 0.8)"
            );
        }
    }

    #[test]
    fn degenerate_render_type_weights_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let only_normal = RenderTypePolicy {
            weights: (1.0, 0.0, 0.0),
        };
        let only_color = RenderTypePolicy {
            weights: (0.0, 0.0, 1.0),
        };
        for _ in 0..100 {
            assert_eq!(
                sample_render_type(&only_normal, &mut rng).unwrap(),
                RenderKind::Normal
            );
            assert_eq!(
                sample_render_type(&only_color, &mut rng).unwrap(),
                RenderKind::Color
            );
        }
    }

    #[test]
    fn bad_policies_are_rejected() {
        let mut p = CameraPolicy::default();
        p.face_fraction = 1.2;
        assert!(p.validate().is_err());
        let mut p = CameraPolicy::default();
        p.radius_range_face = (0.9, 0.9);
        assert!(p.validate().is_err());
        let mut p = CameraPolicy::default();
        p.elevation_range = (-10.0, 90.0);
        assert!(p.validate().is_err());
        for weights in [(-1.0, 1.0, 1.0), (0.0, 0.0, 0.0)] {
            let rt = RenderTypePolicy { weights };
            assert!(rt.validate().is_err());
        }
    }

    #[test]
    fn surround_rig_circles_the_center_at_two_elevations() {
        let center = [0.0f32, 0.68, 0.07];
        let radius = 0.6f32;
        let cameras = surround_view_cameras(center, radius, (64, 64)).unwrap();
        assert_eq!(cameras.len(), 16);
        for (i, camera) in cameras.iter().enumerate() {
            let azimuth = ((i / 2) as f32 * 45.0).to_radians();
            let elevation = SURROUND_ELEVATIONS[i % 2].to_radians();
            let dir = orbit_direction(azimuth, elevation);
            for a in 0..3 {
                let want = center[a] + radius * dir[a];
                assert!(
                    (camera.translation[a] - want).abs() < 1e-5,
                    "camera {i} axis {a}: {} vs {want}",
                    camera.translation[a]
                );
            }
            assert!(axis_miss(camera, center) < 1e-5);
        }
        assert!(surround_view_cameras(center, 0.0, (64, 64)).is_err());
    }
}
