//! Canonical 18-joint body skeleton: joint layout, drawing colors, limb
//! connectivity, and JSON (de)serialization.

use std::collections::BTreeMap;

use super::SamplerError;

/// Joint order of the 18-keypoint body layout.
pub const JOINT_NAMES: [&str; 18] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
];

/// Standard drawing color per joint (RGB bytes).
pub const JOINT_COLORS: [[u8; 3]; 18] = [
    [255, 0, 0],
    [255, 85, 0],
    [255, 170, 0],
    [255, 255, 0],
    [170, 255, 0],
    [85, 255, 0],
    [0, 255, 0],
    [0, 255, 85],
    [0, 255, 170],
    [0, 255, 255],
    [0, 170, 255],
    [0, 85, 255],
    [0, 0, 255],
    [85, 0, 255],
    [170, 0, 255],
    [255, 0, 255],
    [255, 0, 170],
    [255, 0, 85],
];

/// Limbs as (parent, child) joint index pairs; drawn in the child's color.
pub const LIMB_PAIRS: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

/// Index pairs that must mirror across the x = 0 sagittal plane.
const MIRROR_PAIRS: [(usize, usize); 8] = [
    (2, 5),
    (3, 6),
    (4, 7),
    (8, 11),
    (9, 12),
    (10, 13),
    (14, 15),
    (16, 17),
];

/// 18 named 3D keypoints in canonical pose, world units, in
/// [`JOINT_NAMES`] order. The subject faces +z with +y up, so the
/// subject's left side is at positive x.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSkeleton {
    pub joints: Vec<[f32; 3]>,
}

impl PoseSkeleton {
    /// Joint position by name.
    pub fn joint(&self, name: &str) -> Option<[f32; 3]> {
        JOINT_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| self.joints[i])
    }

    /// Mean of the five face keypoints (nose, eyes, ears); the reference
    /// point for face-centric cameras and occlusion depth tests.
    pub fn face_joint_center(&self) -> [f32; 3] {
        let ids = [0usize, 14, 15, 16, 17];
        let mut c = [0.0f32; 3];
        for &i in &ids {
            for a in 0..3 {
                c[a] += self.joints[i][a];
            }
        }
        c.map(|v| v / ids.len() as f32)
    }

    /// Checks the joint count and left/right mirror symmetry about the
    /// sagittal plane (within 1e-3 world units).
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.joints.len() != JOINT_NAMES.len() {
            return Err(SamplerError::Contract(format!(
                "skeleton has {} joints, expected {}",
                self.joints.len(),
                JOINT_NAMES.len()
            )));
        }
        let tol = 1e-3f32;
        for &(r, l) in &MIRROR_PAIRS {
            let (jr, jl) = (self.joints[r], self.joints[l]);
            if (jl[0] + jr[0]).abs() > tol
                || (jl[1] - jr[1]).abs() > tol
                || (jl[2] - jr[2]).abs() > tol
            {
                return Err(SamplerError::Contract(format!(
                    "joints {} and {} are not mirror-symmetric",
                    JOINT_NAMES[r], JOINT_NAMES[l]
                )));
            }
        }
        for &mid in &[0usize, 1] {
            if self.joints[mid][0].abs() > tol {
                return Err(SamplerError::Contract(format!(
                    "midline joint {} is off the sagittal plane",
                    JOINT_NAMES[mid]
                )));
            }
        }
        Ok(())
    }

    /// Serializes as a `{joint_name: [x, y, z]}` JSON document.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, Vec<f32>> = JOINT_NAMES
            .iter()
            .zip(&self.joints)
            .map(|(&n, j)| (n, j.to_vec()))
            .collect();
        serde_json::to_string_pretty(&map).expect("skeleton serialization cannot fail")
    }

    /// Parses a `{joint_name: [x, y, z]}` JSON document; every joint of
    /// the 18-joint layout must be present.
    pub fn from_json(text: &str) -> Result<Self, SamplerError> {
        let map: BTreeMap<String, Vec<f32>> = serde_json::from_str(text)
            .map_err(|e| SamplerError::Contract(format!("bad skeleton JSON: {e}")))?;
        let mut joints = Vec::with_capacity(JOINT_NAMES.len());
        for name in JOINT_NAMES {
            let v = map
                .get(name)
                .ok_or_else(|| SamplerError::Contract(format!("skeleton missing joint {name}")))?;
            if v.len() != 3 {
                return Err(SamplerError::Contract(format!(
                    "joint {name} needs 3 coordinates, got {}",
                    v.len()
                )));
            }
            joints.push([v[0], v[1], v[2]]);
        }
        Ok(PoseSkeleton { joints })
    }

    /// Returns a copy with every joint scaled about the origin and then
    /// translated, for adapting the canonical skeleton to a loaded body.
    pub fn scaled(&self, scale: f32, offset: [f32; 3]) -> PoseSkeleton {
        PoseSkeleton {
            joints: self
                .joints
                .iter()
                .map(|j| {
                    [
                        j[0] * scale + offset[0],
                        j[1] * scale + offset[1],
                        j[2] * scale + offset[2],
                    ]
                })
                .collect(),
        }
    }

    /// The canonical A-pose humanoid skeleton matching the bundled
    /// capsule-body template (about 1.64 units tall, feet near y = -0.82).
    pub fn canonical_humanoid() -> PoseSkeleton {
        PoseSkeleton {
            joints: vec![
                [0.0, 0.66, 0.115],    // nose
                [0.0, 0.44, 0.0],      // neck
                [-0.14, 0.35, 0.0],    // right shoulder
                [-0.30, 0.12, 0.0],    // right elbow
                [-0.42, -0.10, 0.0],   // right wrist
                [0.14, 0.35, 0.0],     // left shoulder
                [0.30, 0.12, 0.0],     // left elbow
                [0.42, -0.10, 0.0],    // left wrist
                [-0.09, -0.05, 0.0],   // right hip
                [-0.10, -0.45, 0.0],   // right knee
                [-0.10, -0.77, 0.0],   // right ankle
                [0.09, -0.05, 0.0],    // left hip
                [0.10, -0.45, 0.0],    // left knee
                [0.10, -0.77, 0.0],    // left ankle
                [-0.04, 0.70, 0.098],  // right eye
                [0.04, 0.70, 0.098],   // left eye
                [-0.11, 0.67, 0.03],   // right ear
                [0.11, 0.67, 0.03],    // left ear
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_skeleton_is_mirror_symmetric() {
        let s = PoseSkeleton::canonical_humanoid();
        s.validate().unwrap();
    }

    #[test]
    fn asymmetric_skeleton_is_rejected() {
        let mut s = PoseSkeleton::canonical_humanoid();
        s.joints[16][0] = -0.2; // drag the right ear outward
        assert!(s.validate().is_err());
    }

    #[test]
    fn json_round_trip_preserves_joints() {
        let s = PoseSkeleton::canonical_humanoid();
        let text = s.to_json();
        let back = PoseSkeleton::from_json(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn missing_joint_in_json_is_reported() {
        let s = PoseSkeleton::canonical_humanoid();
        let text = s.to_json().replace("\"left_ear\"", "\"left_fin\"");
        let err = PoseSkeleton::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("left_ear"));
    }

    #[test]
    fn face_joint_center_sits_in_the_head() {
        let s = PoseSkeleton::canonical_humanoid();
        let c = s.face_joint_center();
        assert!(c[0].abs() < 1e-6);
        assert!((c[1] - 0.68).abs() < 0.01);
        assert!(c[2] > 0.05 && c[2] < 0.10);
    }

    #[test]
    fn joint_lookup_by_name() {
        let s = PoseSkeleton::canonical_humanoid();
        assert_eq!(s.joint("nose"), Some([0.0, 0.66, 0.115]));
        assert_eq!(s.joint("tail"), None);
    }
}
