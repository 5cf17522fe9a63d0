//! Isosurface extraction from signed-distance fields, mesh topology
//! checks, point-to-surface distance queries, and OBJ/PLY export.

mod tables;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::field::{FieldError, FieldParams};
use crate::parallel;
use tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE};

/// Indexed triangle mesh with optional per-vertex RGB colors in `[0, 1]`.
#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub colors: Option<Vec<[f32; 3]>>,
}

/// Errors from mesh extraction and export.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh contract violation: {0}")]
    Contract(String),
    #[error("mesh I/O failure at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("field evaluation failed: {0}")]
    Field(#[from] FieldError),
}

impl TriangleMesh {
    /// Checks index ranges and color-array length.
    pub fn validate(&self) -> Result<(), MeshError> {
        let n = self.vertices.len() as u32;
        for (ti, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&i| i >= n) {
                return Err(MeshError::Contract(format!(
                    "triangle {ti} references vertex beyond {n}"
                )));
            }
        }
        if let Some(c) = &self.colors {
            if c.len() != self.vertices.len() {
                return Err(MeshError::Contract(format!(
                    "{} colors for {} vertices",
                    c.len(),
                    self.vertices.len()
                )));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounding box as (min, max); zeros for an empty mesh.
    pub fn bounding_box(&self) -> ([f32; 3], [f32; 3]) {
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        if self.vertices.is_empty() {
            ([0.0; 3], [0.0; 3])
        } else {
            (lo, hi)
        }
    }

    /// Area of triangle `t` (f64 for robustness near degeneracy).
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        triangle_area_of(
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        )
    }
}

fn triangle_area_of(a: [f32; 3], b: [f32; 3], c: [f32; 3]) -> f64 {
    let u = [
        (b[0] - a[0]) as f64,
        (b[1] - a[1]) as f64,
        (b[2] - a[2]) as f64,
    ];
    let v = [
        (c[0] - a[0]) as f64,
        (c[1] - a[1]) as f64,
        (c[2] - a[2]) as f64,
    ];
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
}

/// Number of distinct undirected edges.
pub fn undirected_edge_count(mesh: &TriangleMesh) -> usize {
    edge_uses(mesh).len()
}

/// True when every undirected edge is used by exactly two triangles with
/// opposite directions (closed, consistently oriented surface).
pub fn is_watertight(mesh: &TriangleMesh) -> bool {
    if mesh.triangles.is_empty() {
        return false;
    }
    edge_uses(mesh)
        .values()
        .all(|&(count, balance)| count == 2 && balance == 0)
}

/// V − E + F (2 for each sphere-topology component).
pub fn euler_characteristic(mesh: &TriangleMesh) -> i64 {
    mesh.vertices.len() as i64 - undirected_edge_count(mesh) as i64 + mesh.triangles.len() as i64
}

/// Per undirected edge: (use count, forward-minus-backward direction sum).
fn edge_uses(mesh: &TriangleMesh) -> HashMap<(u32, u32), (u32, i32)> {
    let mut map: HashMap<(u32, u32), (u32, i32)> = HashMap::new();
    for t in &mesh.triangles {
        for e in 0..3 {
            let a = t[e];
            let b = t[(e + 1) % 3];
            let (key, dir) = if a < b { ((a, b), 1) } else { ((b, a), -1) };
            let entry = map.entry(key).or_insert((0, 0));
            entry.0 += 1;
            entry.1 += dir;
        }
    }
    map
}

/// Scalar samples on a cubic lattice: `n` points per axis, spacing `cell`,
/// lattice point `(i, j, k)` at `origin + cell * (i, j, k)`, values indexed
/// `i + n * (j + n * k)`.
#[derive(Debug, Clone)]
pub struct GridValues {
    pub n: usize,
    pub origin: [f32; 3],
    pub cell: f32,
    pub values: Vec<f32>,
}

impl GridValues {
    /// Evaluates `f` over the lattice, parallelized over z-slabs.
    pub fn from_fn<F>(n: usize, origin: [f32; 3], cell: f32, f: F) -> Self
    where
        F: Fn([f32; 3]) -> f32 + Sync,
    {
        assert!(n >= 2, "a grid needs at least 2 points per axis");
        let mut values = vec![0.0f32; n * n * n];
        parallel::for_each_slice(&mut values, n * n, |k, slab| {
            let z = origin[2] + cell * k as f32;
            for j in 0..n {
                let y = origin[1] + cell * j as f32;
                for i in 0..n {
                    let x = origin[0] + cell * i as f32;
                    slab[i + n * j] = f([x, y, z]);
                }
            }
        });
        GridValues {
            n,
            origin,
            cell,
            values,
        }
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[i + self.n * (j + self.n * k)]
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize, k: usize) -> [f32; 3] {
        [
            self.origin[0] + self.cell * i as f32,
            self.origin[1] + self.cell * j as f32,
            self.origin[2] + self.cell * k as f32,
        ]
    }
}

/// Keeps interpolated vertices strictly off lattice points so no triangle
/// collapses to zero area.
const EDGE_T_MARGIN: f32 = 1e-4;

/// Extracts the `iso` level set of the sampled scalar field as a triangle
/// mesh (marching cubes with linear edge interpolation). Values below the
/// level are inside. A field with no sign change yields an empty mesh.
pub fn extract_iso(grid: &GridValues, iso: f32) -> TriangleMesh {
    let n = grid.n;
    let idx = |i: usize, j: usize, k: usize| i + n * (j + n * k);
    // Vertex id per crossed lattice edge: 3 * point index + axis.
    let mut edge_vertex: HashMap<u64, u32> = HashMap::new();
    let mut vertices: Vec<[f32; 3]> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();

    let global_edge = |i: usize, j: usize, k: usize, e: usize| -> (u64, usize) {
        // (base lattice point, axis) of local cube edge e
        let (p, axis) = match e {
            0 => ((i, j, k), 0),
            1 => ((i + 1, j, k), 1),
            2 => ((i, j + 1, k), 0),
            3 => ((i, j, k), 1),
            4 => ((i, j, k + 1), 0),
            5 => ((i + 1, j, k + 1), 1),
            6 => ((i, j + 1, k + 1), 0),
            7 => ((i, j, k + 1), 1),
            8 => ((i, j, k), 2),
            9 => ((i + 1, j, k), 2),
            10 => ((i + 1, j + 1, k), 2),
            _ => ((i, j + 1, k), 2),
        };
        ((idx(p.0, p.1, p.2) as u64) * 3 + axis as u64, axis)
    };

    for k in 0..n - 1 {
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let mut corner_vals = [0.0f32; 8];
                let mut case = 0usize;
                for (c, &(di, dj, dk)) in CORNER_OFFSETS.iter().enumerate() {
                    let v = grid.value(i + di, j + dj, k + dk) - iso;
                    corner_vals[c] = v;
                    if v < 0.0 {
                        case |= 1 << c;
                    }
                }
                let crossed = EDGE_TABLE[case];
                if crossed == 0 {
                    continue;
                }
                let mut cube_edge_vertex = [u32::MAX; 12];
                for (e, slot) in cube_edge_vertex.iter_mut().enumerate() {
                    if crossed & (1 << e) == 0 {
                        continue;
                    }
                    let (key, axis) = global_edge(i, j, k, e);
                    let id = *edge_vertex.entry(key).or_insert_with(|| {
                        // Orient the edge along +axis so interpolation walks
                        // from the lattice base point toward its neighbor.
                        let (mut ca, mut cb) = EDGE_CORNERS[e];
                        let along = |c: usize| match axis {
                            0 => CORNER_OFFSETS[c].0,
                            1 => CORNER_OFFSETS[c].1,
                            _ => CORNER_OFFSETS[c].2,
                        };
                        if along(ca) > along(cb) {
                            std::mem::swap(&mut ca, &mut cb);
                        }
                        let (fa, fb) = (corner_vals[ca], corner_vals[cb]);
                        let t = (-fa / (fb - fa)).clamp(EDGE_T_MARGIN, 1.0 - EDGE_T_MARGIN);
                        let (ai, aj, ak) = CORNER_OFFSETS[ca];
                        let mut p = grid.point(i + ai, j + aj, k + ak);
                        p[axis] += t * grid.cell;
                        vertices.push(p);
                        (vertices.len() - 1) as u32
                    });
                    *slot = id;
                }
                for tri in TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let a = cube_edge_vertex[tri[0] as usize];
                    let b = cube_edge_vertex[tri[1] as usize];
                    let c = cube_edge_vertex[tri[2] as usize];
                    // The lookup table lists corners clockwise as seen from
                    // outside in this right-handed frame; swap to emit
                    // counterclockwise (outward) triangles.
                    if a != b && b != c && a != c {
                        triangles.push([a, c, b]);
                    }
                }
            }
        }
    }

    TriangleMesh {
        vertices,
        triangles,
        colors: None,
    }
}

/// Extracts the `iso` level set of the field's signed distance over its
/// modeling cube and bakes per-vertex colors, querying the color field
/// along the outward surface normal.
pub fn marching_cubes(
    params: &FieldParams,
    grid_resolution: usize,
    iso: f32,
) -> Result<TriangleMesh, MeshError> {
    if grid_resolution < 16 {
        return Err(MeshError::Contract(format!(
            "grid resolution {grid_resolution} below minimum 16"
        )));
    }
    let bound = params.config.bound;
    let n = grid_resolution;
    let cell = 2.0 * bound / (n - 1) as f32;
    let mut points = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                points.push([
                    -bound + cell * i as f32,
                    -bound + cell * j as f32,
                    -bound + cell * k as f32,
                ]);
            }
        }
    }
    let values = params.sdf_eval(&points)?;
    let grid = GridValues {
        n,
        origin: [-bound; 3],
        cell,
        values,
    };
    let mut mesh = extract_iso(&grid, iso);

    if !mesh.vertices.is_empty() {
        // Interpolated vertices can land a float rounding step outside the
        // cube; pull them back in before querying the field.
        let clamped: Vec<[f32; 3]> = mesh
            .vertices
            .iter()
            .map(|v| {
                let mut p = *v;
                for c in p.iter_mut() {
                    *c = c.clamp(-bound, bound);
                }
                p
            })
            .collect();
        let grads = params.sdf_gradient(&clamped)?;
        let normals: Vec<[f32; 3]> = grads
            .iter()
            .map(|g| {
                let len = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-12);
                [g[0] / len, g[1] / len, g[2] / len]
            })
            .collect();
        mesh.colors = Some(params.color_eval(&clamped, &normals)?);
    }
    Ok(mesh)
}

/// Supported export formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

/// Writes the mesh to `path` in the chosen format.
pub fn export(mesh: &TriangleMesh, path: &Path, format: MeshFormat) -> Result<(), MeshError> {
    match format {
        MeshFormat::Obj => export_obj(mesh, path),
        MeshFormat::Ply => export_ply(mesh, path),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MeshError + '_ {
    move |source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// ASCII OBJ: `v x y z [r g b]` lines then 1-based `f` lines.
pub fn export_obj(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshError> {
    mesh.validate()?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        for (i, v) in mesh.vertices.iter().enumerate() {
            match &mesh.colors {
                Some(cols) => {
                    let c = cols[i];
                    writeln!(
                        out,
                        "v {} {} {} {} {} {}",
                        v[0], v[1], v[2], c[0], c[1], c[2]
                    )?;
                }
                None => writeln!(out, "v {} {} {}", v[0], v[1], v[2])?,
            }
        }
        for t in &mesh.triangles {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        out.flush()
    };
    write(&mut out).map_err(io_err(path))
}

/// ASCII PLY with uchar per-vertex colors when present.
pub fn export_ply(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshError> {
    mesh.validate()?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(out, "ply")?;
        writeln!(out, "format ascii 1.0")?;
        writeln!(out, "element vertex {}", mesh.vertices.len())?;
        writeln!(out, "property float x")?;
        writeln!(out, "property float y")?;
        writeln!(out, "property float z")?;
        if mesh.colors.is_some() {
            writeln!(out, "property uchar red")?;
            writeln!(out, "property uchar green")?;
            writeln!(out, "property uchar blue")?;
        }
        writeln!(out, "element face {}", mesh.triangles.len())?;
        writeln!(out, "property list uchar int vertex_indices")?;
        writeln!(out, "end_header")?;
        for (i, v) in mesh.vertices.iter().enumerate() {
            match &mesh.colors {
                Some(cols) => {
                    let c = cols[i];
                    let q = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
                    writeln!(
                        out,
                        "{} {} {} {} {} {}",
                        v[0],
                        v[1],
                        v[2],
                        q(c[0]),
                        q(c[1]),
                        q(c[2])
                    )?;
                }
                None => writeln!(out, "{} {} {}", v[0], v[1], v[2])?,
            }
        }
        for t in &mesh.triangles {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        out.flush()
    };
    write(&mut out).map_err(io_err(path))
}

/// Closest point to `p` on triangle `(a, b, c)` (Voronoi-region walk).
pub fn closest_point_on_triangle(
    p: [f32; 3],
    a: [f32; 3],
    b: [f32; 3],
    c: [f32; 3],
) -> [f32; 3] {
    let sub = |x: [f32; 3], y: [f32; 3]| [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
    let dot = |x: [f32; 3], y: [f32; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return [a[0] + t * ac[0], a[1] + t * ac[1], a[2] + t * ac[2]];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [
            b[0] + t * (c[0] - b[0]),
            b[1] + t * (c[1] - b[1]),
            b[2] + t * (c[2] - b[2]),
        ];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ]
}

/// Uniform-grid acceleration structure for exact unsigned point-to-mesh
/// distance queries.
pub struct MeshDistanceIndex {
    tris: Vec<[[f32; 3]; 3]>,
    lo: [f32; 3],
    cell: f32,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl MeshDistanceIndex {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let tris: Vec<[[f32; 3]; 3]> = mesh
            .triangles
            .iter()
            .map(|t| {
                [
                    mesh.vertices[t[0] as usize],
                    mesh.vertices[t[1] as usize],
                    mesh.vertices[t[2] as usize],
                ]
            })
            .collect();
        let (lo, hi) = mesh.bounding_box();
        let extent = (0..3)
            .map(|a| hi[a] - lo[a])
            .fold(0.0f32, f32::max)
            .max(1e-6);
        let res = 32usize;
        let cell = extent / res as f32;
        let dims = [
            (((hi[0] - lo[0]) / cell).ceil() as usize + 1).max(1),
            (((hi[1] - lo[1]) / cell).ceil() as usize + 1).max(1),
            (((hi[2] - lo[2]) / cell).ceil() as usize + 1).max(1),
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (ti, t) in tris.iter().enumerate() {
            let mut tlo = [f32::INFINITY; 3];
            let mut thi = [f32::NEG_INFINITY; 3];
            for v in t {
                for a in 0..3 {
                    tlo[a] = tlo[a].min(v[a]);
                    thi[a] = thi[a].max(v[a]);
                }
            }
            let cl: Vec<usize> = (0..3)
                .map(|a| (((tlo[a] - lo[a]) / cell) as usize).min(dims[a] - 1))
                .collect();
            let ch: Vec<usize> = (0..3)
                .map(|a| (((thi[a] - lo[a]) / cell) as usize).min(dims[a] - 1))
                .collect();
            for k in cl[2]..=ch[2] {
                for j in cl[1]..=ch[1] {
                    for i in cl[0]..=ch[0] {
                        buckets[i + dims[0] * (j + dims[1] * k)].push(ti as u32);
                    }
                }
            }
        }
        MeshDistanceIndex {
            tris,
            lo,
            cell,
            dims,
            buckets,
        }
    }

    /// Exact distance from `p` to the closest triangle.
    pub fn distance(&self, p: [f32; 3]) -> f32 {
        let cc: Vec<i64> = (0..3)
            .map(|a| ((p[a] - self.lo[a]) / self.cell).floor() as i64)
            .collect();
        let mut best = f32::INFINITY;
        let max_ring = self.dims.iter().max().copied().unwrap_or(1) as i64 + 2;
        for ring in 0..=max_ring {
            // Once a hit exists, stop when closer cells are exhausted: every
            // cell in ring r is at least (r - 1) * cell away.
            if best.is_finite() && (ring - 1) as f32 * self.cell > best {
                break;
            }
            let mut any_valid = false;
            for dk in -ring..=ring {
                for dj in -ring..=ring {
                    for di in -ring..=ring {
                        if di.abs().max(dj.abs()).max(dk.abs()) != ring {
                            continue;
                        }
                        let (i, j, k) = (cc[0] + di, cc[1] + dj, cc[2] + dk);
                        if i < 0
                            || j < 0
                            || k < 0
                            || i >= self.dims[0] as i64
                            || j >= self.dims[1] as i64
                            || k >= self.dims[2] as i64
                        {
                            continue;
                        }
                        any_valid = true;
                        let bucket = &self.buckets
                            [i as usize + self.dims[0] * (j as usize + self.dims[1] * k as usize)];
                        for &ti in bucket {
                            let t = &self.tris[ti as usize];
                            let q = closest_point_on_triangle(p, t[0], t[1], t[2]);
                            let d2 = (p[0] - q[0]).powi(2)
                                + (p[1] - q[1]).powi(2)
                                + (p[2] - q[2]).powi(2);
                            best = best.min(d2.sqrt());
                        }
                    }
                }
            }
            if !any_valid && best.is_finite() {
                break;
            }
        }
        best
    }
}

/// Deterministic surface samples: every vertex plus each triangle's
/// centroid and edge midpoints.
pub fn sample_surface_points(mesh: &TriangleMesh) -> Vec<[f32; 3]> {
    let mut pts = mesh.vertices.clone();
    for t in &mesh.triangles {
        let a = mesh.vertices[t[0] as usize];
        let b = mesh.vertices[t[1] as usize];
        let c = mesh.vertices[t[2] as usize];
        pts.push([
            (a[0] + b[0] + c[0]) / 3.0,
            (a[1] + b[1] + c[1]) / 3.0,
            (a[2] + b[2] + c[2]) / 3.0,
        ]);
        for (u, v) in [(a, b), (b, c), (c, a)] {
            pts.push([
                0.5 * (u[0] + v[0]),
                0.5 * (u[1] + v[1]),
                0.5 * (u[2] + v[2]),
            ]);
        }
    }
    pts
}

/// Symmetric Hausdorff distance estimated from dense surface samples of
/// each mesh against exact triangle distance to the other.
pub fn hausdorff_distance(a: &TriangleMesh, b: &TriangleMesh) -> f32 {
    let one_way = |src: &TriangleMesh, dst: &TriangleMesh| -> f32 {
        let index = MeshDistanceIndex::build(dst);
        let samples = sample_surface_points(src);
        let parts = parallel::map_chunks(&samples, 256, |_, chunk| {
            chunk
                .iter()
                .map(|&p| index.distance(p))
                .fold(0.0f32, f32::max)
        });
        parallel::fold_in_order(parts, 0.0f32, f32::max)
    };
    one_way(a, b).max(one_way(b, a))
}
