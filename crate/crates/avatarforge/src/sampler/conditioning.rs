//! Keypoint-conditioning image synthesis: projects the 3D skeleton through
//! a camera and rasterizes it in the standard 18-joint color convention —
//! filled disks for joints, anti-aliased strokes for limbs, black
//! background.

use super::{SamplerError, JOINT_COLORS, JOINT_NAMES, LIMB_PAIRS, PoseSkeleton};
use crate::image::ImageBuf;
use crate::renderer::Camera;

/// How much deeper than the face center (world units) an ear may sit
/// before it is treated as self-occluded and culled. Large enough to keep
/// both ears of a frontal view, small enough to drop the far ear of a
/// profile view.
const EAR_DEPTH_MARGIN: f32 = 0.07;

/// Joint indices subject to the ear depth cull.
const EAR_JOINTS: [usize; 2] = [16, 17];

/// Projects a world point: `Some((row, col, depth))` in continuous pixel
/// coordinates, or `None` when the point is not in front of the camera.
pub fn project_point(camera: &Camera, point: [f32; 3]) -> Option<(f32, f32, f32)> {
    let t = camera.translation;
    let d = [point[0] - t[0], point[1] - t[1], point[2] - t[2]];
    let r = &camera.rotation;
    let x = r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2];
    let y = r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2];
    let z = r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2];
    if z <= 1e-4 {
        return None;
    }
    let (fx, fy) = camera.focal;
    let (cx, cy) = camera.principal;
    Some((fy * y / z + cy, fx * x / z + cx, z))
}

/// Projects every joint and applies the visibility rules: joints behind
/// the camera are dropped, and an ear markedly deeper than the face center
/// is culled as self-occluded. Errors when no joint is in front of the
/// camera.
pub fn visible_projected_joints(
    skeleton: &PoseSkeleton,
    camera: &Camera,
) -> Result<Vec<Option<(f32, f32)>>, SamplerError> {
    if skeleton.joints.len() != JOINT_NAMES.len() {
        return Err(SamplerError::Contract(format!(
            "skeleton has {} joints, expected {}",
            skeleton.joints.len(),
            JOINT_NAMES.len()
        )));
    }
    let projections: Vec<Option<(f32, f32, f32)>> = skeleton
        .joints
        .iter()
        .map(|&j| project_point(camera, j))
        .collect();
    if projections.iter().all(Option::is_none) {
        return Err(SamplerError::NoVisibleJoints);
    }
    let face_depth = project_point(camera, skeleton.face_joint_center()).map(|(_, _, z)| z);
    let mut visible: Vec<Option<(f32, f32)>> = projections
        .into_iter()
        .map(|p| p.map(|(row, col, _)| (row, col)))
        .collect();
    if let Some(reference) = face_depth {
        for ear in EAR_JOINTS {
            if let Some((_, _, z)) = project_point(camera, skeleton.joints[ear]) {
                if z > reference + EAR_DEPTH_MARGIN {
                    visible[ear] = None;
                }
            }
        }
    }
    Ok(visible)
}

fn blend_disk(buf: &mut [f32], size: (usize, usize), center: (f32, f32), radius: f32, color: [f32; 3]) {
    let (h, w) = size;
    let (pr, pc) = center;
    let r0 = ((pr - radius - 1.0).floor().max(0.0)) as usize;
    let r1 = ((pr + radius + 1.0).ceil().min(h as f32 - 1.0)).max(0.0) as usize;
    let c0 = ((pc - radius - 1.0).floor().max(0.0)) as usize;
    let c1 = ((pc + radius + 1.0).ceil().min(w as f32 - 1.0)).max(0.0) as usize;
    if pr + radius < 0.0 || pc + radius < 0.0 {
        return;
    }
    for row in r0..=r1.min(h - 1) {
        for col in c0..=c1.min(w - 1) {
            let dy = row as f32 + 0.5 - pr;
            let dx = col as f32 + 0.5 - pc;
            let dist = (dx * dx + dy * dy).sqrt();
            let alpha = (radius + 0.5 - dist).clamp(0.0, 1.0);
            if alpha > 0.0 {
                let i = (row * w + col) * 3;
                for ch in 0..3 {
                    buf[i + ch] = alpha * color[ch] + (1.0 - alpha) * buf[i + ch];
                }
            }
        }
    }
}

fn blend_segment(
    buf: &mut [f32],
    size: (usize, usize),
    a: (f32, f32),
    b: (f32, f32),
    halfwidth: f32,
    color: [f32; 3],
) {
    let (h, w) = size;
    let pad = halfwidth + 1.0;
    let r0 = ((a.0.min(b.0) - pad).floor().max(0.0)) as usize;
    let r1 = ((a.0.max(b.0) + pad).ceil().min(h as f32 - 1.0)).max(0.0) as usize;
    let c0 = ((a.1.min(b.1) - pad).floor().max(0.0)) as usize;
    let c1 = ((a.1.max(b.1) + pad).ceil().min(w as f32 - 1.0)).max(0.0) as usize;
    if a.0.max(b.0) + pad < 0.0 || a.1.max(b.1) + pad < 0.0 {
        return;
    }
    let seg = (b.0 - a.0, b.1 - a.1);
    let len2 = seg.0 * seg.0 + seg.1 * seg.1;
    for row in r0..=r1.min(h - 1) {
        for col in c0..=c1.min(w - 1) {
            let p = (row as f32 + 0.5, col as f32 + 0.5);
            let t = if len2 > 0.0 {
                (((p.0 - a.0) * seg.0 + (p.1 - a.1) * seg.1) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let foot = (a.0 + t * seg.0, a.1 + t * seg.1);
            let dist = ((p.0 - foot.0).powi(2) + (p.1 - foot.1).powi(2)).sqrt();
            let alpha = (halfwidth + 0.5 - dist).clamp(0.0, 1.0);
            if alpha > 0.0 {
                let i = (row * w + col) * 3;
                for ch in 0..3 {
                    buf[i + ch] = alpha * color[ch] + (1.0 - alpha) * buf[i + ch];
                }
            }
        }
    }
}

/// Rasterizes the skeleton as seen by `camera`: limbs first (stroked in
/// the child joint's color, drawn only when both endpoints are visible),
/// then joint disks on top. Joints behind the camera are omitted; every
/// joint behind the camera is an error.
pub fn render_skeleton_conditioning(
    skeleton: &PoseSkeleton,
    camera: &Camera,
) -> Result<ImageBuf, SamplerError> {
    camera
        .validate()
        .map_err(|e| SamplerError::Contract(e.to_string()))?;
    let visible = visible_projected_joints(skeleton, camera)?;
    let (h, w) = camera.resolution;
    let radius = (0.015 * h.min(w) as f32).max(2.0);
    let halfwidth = (0.6 * radius).max(1.2);
    let mut buf = vec![0.0f32; h * w * 3];
    let color_of = |j: usize| JOINT_COLORS[j].map(|c| c as f32 / 255.0);
    for &(parent, child) in &LIMB_PAIRS {
        if let (Some(a), Some(b)) = (visible[parent], visible[child]) {
            blend_segment(&mut buf, (h, w), a, b, halfwidth, color_of(child));
        }
    }
    for (j, &p) in visible.iter().enumerate() {
        if let Some(center) = p {
            blend_disk(&mut buf, (h, w), center, radius, color_of(j));
        }
    }
    ImageBuf::new(h as u32, w as u32, buf)
        .map_err(|e| SamplerError::Contract(format!("conditioning buffer: {e}")))
}
