//! Template bodies used to initialize the distance field: bundled
//! procedural shapes, ASCII OBJ/PLY loading, and an exact point-to-mesh
//! signed-distance oracle.

use std::path::Path;

use super::FieldError;
use crate::mesh::{self, MeshDistanceIndex, TriangleMesh};
use crate::parallel;
use crate::sampler::PoseSkeleton;

/// Height of the canonical humanoid the bundled skeleton is posed for.
const CANONICAL_BODY_HEIGHT: f32 = 1.635;

/// Watertight triangle mesh with body landmarks, used as the fitting
/// target when initializing a field.
#[derive(Debug, Clone)]
pub struct TemplateBody {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub face_center: [f32; 3],
    pub body_center: [f32; 3],
    pub pose_skeleton: PoseSkeleton,
}

impl TemplateBody {
    /// Builds a template from geometry plus a matching skeleton; centers
    /// are derived (face from the skeleton, body from the bounding box).
    pub fn new(
        vertices: Vec<[f32; 3]>,
        faces: Vec<[u32; 3]>,
        pose_skeleton: PoseSkeleton,
    ) -> TemplateBody {
        let mesh = TriangleMesh {
            vertices: vertices.clone(),
            triangles: faces.clone(),
            colors: None,
        };
        let (lo, hi) = mesh.bounding_box();
        let body_center = [
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
            0.5 * (lo[2] + hi[2]),
        ];
        let face_center = pose_skeleton.face_joint_center();
        TemplateBody {
            vertices,
            faces,
            face_center,
            body_center,
            pose_skeleton,
        }
    }

    /// Adopts loaded geometry, scaling the canonical skeleton to the
    /// mesh's height and recentering it on the bounding box.
    pub fn from_mesh(vertices: Vec<[f32; 3]>, faces: Vec<[u32; 3]>) -> TemplateBody {
        let mesh = TriangleMesh {
            vertices: vertices.clone(),
            triangles: faces.clone(),
            colors: None,
        };
        let (lo, hi) = mesh.bounding_box();
        let scale = ((hi[1] - lo[1]) / CANONICAL_BODY_HEIGHT).max(1e-6);
        let center = [
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
            0.5 * (lo[2] + hi[2]),
        ];
        let skeleton = PoseSkeleton::canonical_humanoid().scaled(scale, center);
        TemplateBody::new(vertices, faces, skeleton)
    }

    /// View of the template geometry as a plain mesh.
    pub fn as_mesh(&self) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.clone(),
            triangles: self.faces.clone(),
            colors: None,
        }
    }

    /// Axis-aligned bounding box (min, max).
    pub fn bounding_box(&self) -> ([f32; 3], [f32; 3]) {
        self.as_mesh().bounding_box()
    }

    /// Mean vertex distance from the vertex centroid; the starting radius
    /// for sphere-like field initialization.
    pub fn mean_radius(&self) -> f32 {
        let n = self.vertices.len().max(1) as f64;
        let mut c = [0.0f64; 3];
        for v in &self.vertices {
            for a in 0..3 {
                c[a] += v[a] as f64;
            }
        }
        for ca in c.iter_mut() {
            *ca /= n;
        }
        let sum: f64 = self
            .vertices
            .iter()
            .map(|v| {
                ((v[0] as f64 - c[0]).powi(2)
                    + (v[1] as f64 - c[1]).powi(2)
                    + (v[2] as f64 - c[2]).powi(2))
                .sqrt()
            })
            .sum();
        (sum / n) as f32
    }

    /// Checks watertightness and that the face landmark sits in the upper
    /// third of the bounding box.
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.vertices.is_empty() || self.faces.is_empty() {
            return Err(FieldError::Template("template mesh is empty".into()));
        }
        if !mesh::is_watertight(&self.as_mesh()) {
            return Err(FieldError::Template(
                "template mesh is not watertight (an edge is not shared by exactly 2 faces)"
                    .into(),
            ));
        }
        let (lo, hi) = self.bounding_box();
        let upper_third = lo[1] + (hi[1] - lo[1]) * (2.0 / 3.0);
        let fc = self.face_center;
        let inside = (0..3).all(|a| fc[a] >= lo[a] - 1e-6 && fc[a] <= hi[a] + 1e-6);
        if !inside || fc[1] < upper_third {
            return Err(FieldError::Template(format!(
                "face center {fc:?} is not in the bounding-box upper third"
            )));
        }
        Ok(())
    }

    /// Builds the exact signed-distance oracle for this template.
    pub fn distance_oracle(&self) -> TemplateDistance {
        TemplateDistance::build(self)
    }

    /// Unit icosphere: icosahedron subdivided `subdiv` times, vertices on
    /// the radius-1 sphere.
    pub fn unit_sphere(subdiv: u32) -> TemplateBody {
        let (vertices, faces) = icosphere(subdiv);
        TemplateBody::from_mesh(vertices, faces)
    }

    /// The bundled A-pose body: a union of capsules (torso, neck, head,
    /// limbs) surfaced on a regular grid, so it is watertight by
    /// construction. About 1.64 units tall, feet near y = -0.82.
    pub fn capsule_humanoid() -> TemplateBody {
        let capsules = humanoid_capsules();
        let sdf = |p: [f32; 3]| {
            capsules
                .iter()
                .map(|&(a, b, r)| capsule_distance(p, a, b, r))
                .fold(f32::INFINITY, f32::min)
        };
        let n = 72;
        let grid = mesh::GridValues::from_fn(n, [-0.9; 3], 1.8 / (n - 1) as f32, sdf);
        let surface = mesh::extract_iso(&grid, 0.0);
        TemplateBody::new(
            surface.vertices,
            surface.triangles,
            PoseSkeleton::canonical_humanoid(),
        )
    }

    /// Loads an ASCII OBJ file (`v` and `f` lines; extra vertex color
    /// columns are ignored; polygon faces are fan-triangulated).
    pub fn load_obj(path: &Path) -> Result<TemplateBody, FieldError> {
        let text = std::fs::read_to_string(path).map_err(|source| FieldError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let (vertices, faces) = parse_obj(&text)
            .map_err(|msg| FieldError::Template(format!("{}: {msg}", path.display())))?;
        Ok(TemplateBody::from_mesh(vertices, faces))
    }

    /// Loads an ASCII PLY file (any vertex property order containing
    /// x, y, z; polygon faces are fan-triangulated).
    pub fn load_ply(path: &Path) -> Result<TemplateBody, FieldError> {
        let text = std::fs::read_to_string(path).map_err(|source| FieldError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let (vertices, faces) = parse_ply(&text)
            .map_err(|msg| FieldError::Template(format!("{}: {msg}", path.display())))?;
        Ok(TemplateBody::from_mesh(vertices, faces))
    }
}

/// Capsule segments (endpoints, radius) of the bundled humanoid.
fn humanoid_capsules() -> Vec<([f32; 3], [f32; 3], f32)> {
    let mut caps = vec![
        ([0.0, -0.08, 0.0], [0.0, 0.38, 0.0], 0.155), // torso
        ([0.0, 0.38, 0.0], [0.0, 0.50, 0.0], 0.05),   // neck
        ([0.0, 0.60, 0.0], [0.0, 0.70, 0.0], 0.115),  // head
    ];
    for side in [-1.0f32, 1.0] {
        caps.push(([side * 0.14, 0.35, 0.0], [side * 0.30, 0.12, 0.0], 0.055)); // upper arm
        caps.push((
            [side * 0.30, 0.12, 0.0],
            [side * 0.42, -0.10, 0.0],
            0.045,
        )); // forearm
        caps.push((
            [side * 0.09, -0.05, 0.0],
            [side * 0.10, -0.45, 0.0],
            0.065,
        )); // thigh
        caps.push((
            [side * 0.10, -0.45, 0.0],
            [side * 0.10, -0.77, 0.0],
            0.05,
        )); // shin
    }
    caps
}

/// Distance from `p` to a capsule around segment `ab` with radius `r`.
fn capsule_distance(p: [f32; 3], a: [f32; 3], b: [f32; 3], r: f32) -> f32 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [
        ap[0] - t * ab[0],
        ap[1] - t * ab[1],
        ap[2] - t * ab[2],
    ];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - r
}

/// Exact signed distance to a closed template mesh: unsigned distance via
/// a spatial index, sign via the generalized winding number (robust to
/// either global orientation).
pub struct TemplateDistance {
    index: MeshDistanceIndex,
    tris: Vec<[[f64; 3]; 3]>,
}

impl TemplateDistance {
    fn build(template: &TemplateBody) -> TemplateDistance {
        let index = MeshDistanceIndex::build(&template.as_mesh());
        let tris = template
            .faces
            .iter()
            .map(|f| {
                let v = |i: u32| {
                    let p = template.vertices[i as usize];
                    [p[0] as f64, p[1] as f64, p[2] as f64]
                };
                [v(f[0]), v(f[1]), v(f[2])]
            })
            .collect();
        TemplateDistance { index, tris }
    }

    /// Solid-angle sum over all triangles, divided by 4π; about ±1 for
    /// interior points and about 0 outside.
    pub fn winding_number(&self, p: [f32; 3]) -> f64 {
        let q = [p[0] as f64, p[1] as f64, p[2] as f64];
        let mut total = 0.0f64;
        for t in &self.tris {
            let a = [t[0][0] - q[0], t[0][1] - q[1], t[0][2] - q[2]];
            let b = [t[1][0] - q[0], t[1][1] - q[1], t[1][2] - q[2]];
            let c = [t[2][0] - q[0], t[2][1] - q[1], t[2][2] - q[2]];
            let la = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let lb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            let lc = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            let numer = a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                + a[2] * (b[0] * c[1] - b[1] * c[0]);
            let denom = la * lb * lc
                + (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) * lc
                + (b[0] * c[0] + b[1] * c[1] + b[2] * c[2]) * la
                + (c[0] * a[0] + c[1] * a[1] + c[2] * a[2]) * lb;
            total += 2.0 * numer.atan2(denom);
        }
        total / (4.0 * std::f64::consts::PI)
    }

    /// Signed distance (negative inside) at one point.
    pub fn signed(&self, p: [f32; 3]) -> f32 {
        let d = self.index.distance(p);
        if self.winding_number(p).abs() > 0.5 {
            -d
        } else {
            d
        }
    }

    /// Signed distances for a batch, parallelized.
    pub fn signed_batch(&self, points: &[[f32; 3]]) -> Vec<f32> {
        let parts = parallel::map_chunks(points, 64, |_, chunk| {
            chunk.iter().map(|&p| self.signed(p)).collect::<Vec<f32>>()
        });
        parallel::fold_in_order(parts, Vec::with_capacity(points.len()), |mut acc, mut p| {
            acc.append(&mut p);
            acc
        })
    }
}

/// Icosahedron subdivided `subdiv` times and projected to the unit sphere.
fn icosphere(subdiv: u32) -> (Vec<[f32; 3]>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let normalize = |v: [f64; 3]| {
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [
            (v[0] / l) as f32,
            (v[1] / l) as f32,
            (v[2] / l) as f32,
        ]
    };
    let mut vertices: Vec<[f32; 3]> = raw.iter().map(|&v| normalize(v)).collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdiv {
        let mut midpoint: std::collections::HashMap<(u32, u32), u32> =
            std::collections::HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    let va = vertices[a as usize];
                    let vb = vertices[b as usize];
                    let m = normalize([
                        (va[0] + vb[0]) as f64 * 0.5,
                        (va[1] + vb[1]) as f64 * 0.5,
                        (va[2] + vb[2]) as f64 * 0.5,
                    ]);
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    (vertices, faces)
}

fn parse_obj(text: &str) -> Result<(Vec<[f32; 3]>, Vec<[u32; 3]>), String> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f32> = parts
                    .map(|p| p.parse::<f32>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| format!("line {}: bad vertex: {e}", ln + 1))?;
                if coords.len() < 3 {
                    return Err(format!("line {}: vertex needs 3 coordinates", ln + 1));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let ids: Vec<u32> = parts
                    .map(|p| {
                        p.split('/')
                            .next()
                            .unwrap_or("")
                            .parse::<u32>()
                            .map_err(|e| format!("line {}: bad face index: {e}", ln + 1))
                    })
                    .collect::<Result<_, _>>()?;
                if ids.len() < 3 {
                    return Err(format!("line {}: face needs 3 indices", ln + 1));
                }
                if ids.iter().any(|&i| i == 0) {
                    return Err(format!("line {}: face indices are 1-based", ln + 1));
                }
                for k in 1..ids.len() - 1 {
                    faces.push([ids[0] - 1, ids[k] - 1, ids[k + 1] - 1]);
                }
            }
            _ => {}
        }
    }
    if vertices.is_empty() {
        return Err("no vertices found".into());
    }
    check_indices(&vertices, &faces)?;
    Ok((vertices, faces))
}

fn parse_ply(text: &str) -> Result<(Vec<[f32; 3]>, Vec<[u32; 3]>), String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing ply magic line".into());
    }
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current_element = String::new();
    let mut ascii = false;
    for line in lines.by_ref() {
        let line = line.trim();
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", kind, _] => ascii = *kind == "ascii",
            ["element", "vertex", n] => {
                current_element = "vertex".into();
                n_vertices = n.parse().map_err(|e| format!("bad vertex count: {e}"))?;
            }
            ["element", "face", n] => {
                current_element = "face".into();
                n_faces = n.parse().map_err(|e| format!("bad face count: {e}"))?;
            }
            ["element", ..] => current_element = "other".into(),
            ["property", "list", ..] => {}
            ["property", _ty, name] if current_element == "vertex" => {
                vertex_props.push((*name).to_string());
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    if !ascii {
        return Err("only ascii 1.0 is supported".into());
    }
    let (xi, yi, zi) = (
        vertex_props.iter().position(|p| p == "x"),
        vertex_props.iter().position(|p| p == "y"),
        vertex_props.iter().position(|p| p == "z"),
    );
    let (xi, yi, zi) = match (xi, yi, zi) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err("vertex element lacks x/y/z properties".into()),
    };
    let mut vertices = Vec::with_capacity(n_vertices);
    let mut faces = Vec::with_capacity(n_faces);
    let body: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    if body.len() < n_vertices + n_faces {
        return Err(format!(
            "expected {} body lines, found {}",
            n_vertices + n_faces,
            body.len()
        ));
    }
    for line in &body[..n_vertices] {
        let cols: Vec<f32> = line
            .split_whitespace()
            .map(|p| p.parse::<f32>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("bad vertex line: {e}"))?;
        if cols.len() < vertex_props.len() {
            return Err("vertex line shorter than declared properties".into());
        }
        vertices.push([cols[xi], cols[yi], cols[zi]]);
    }
    for line in &body[n_vertices..n_vertices + n_faces] {
        let ids: Vec<u32> = line
            .split_whitespace()
            .map(|p| p.parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("bad face line: {e}"))?;
        let count = *ids.first().ok_or("empty face line")? as usize;
        if ids.len() != count + 1 || count < 3 {
            return Err("face line count mismatch".into());
        }
        for k in 2..count {
            faces.push([ids[1], ids[k], ids[k + 1]]);
        }
    }
    check_indices(&vertices, &faces)?;
    Ok((vertices, faces))
}

fn check_indices(vertices: &[[f32; 3]], faces: &[[u32; 3]]) -> Result<(), String> {
    let n = vertices.len() as u32;
    for f in faces {
        if f.iter().any(|&i| i >= n) {
            return Err(format!("face {f:?} references vertex beyond {n}"));
        }
    }
    Ok(())
}
