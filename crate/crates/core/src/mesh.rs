//! Triangle meshes: the input to data synthesis and the output of
//! iso-surface extraction. Geometry is kept in f64; volumes stay f32.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

/// Triangles below this area are dropped when cleaning.
pub const DEGENERATE_AREA_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh is empty")]
    Empty,
    #[error("triangle {0} references vertex {1} out of range ({2} vertices)")]
    IndexOutOfRange(usize, u32, usize),
    #[error("OBJ parse error at line {line}: {reason}")]
    ObjParse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        let mesh = Self { vertices, triangles };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty() || self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        for (t, tri) in self.triangles.iter().enumerate() {
            for &i in tri {
                if i as usize >= self.vertices.len() {
                    return Err(MeshError::IndexOutOfRange(t, i, self.vertices.len()));
                }
            }
        }
        Ok(())
    }

    /// Drops triangles with area below [`DEGENERATE_AREA_EPS`].
    pub fn clean(&mut self) {
        let verts = &self.vertices;
        self.triangles.retain(|tri| {
            let a = verts[tri[0] as usize];
            let b = verts[tri[1] as usize];
            let c = verts[tri[2] as usize];
            triangle_area(a, b, c) > DEGENERATE_AREA_EPS
        });
    }

    /// Axis-aligned bounding box as (min, max). Meshes are validated nonempty first.
    pub fn bounding_box(&self) -> Result<([f64; 3], [f64; 3]), MeshError> {
        if self.vertices.is_empty() {
            return Err(MeshError::Empty);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Ok((lo, hi))
    }

    pub fn total_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                triangle_area(
                    self.vertices[t[0] as usize],
                    self.vertices[t[1] as usize],
                    self.vertices[t[2] as usize],
                )
            })
            .sum()
    }

    /// Reads an OBJ file, keeping only `v` and triangular `f` records.
    /// Faces with more than three vertices are fan-triangulated.
    pub fn read_obj(path: &Path) -> Result<Self, MeshError> {
        let reader = BufReader::new(File::open(path)?);
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let mut coords = [0.0f64; 3];
                    for c in &mut coords {
                        let tok = parts.next().ok_or_else(|| MeshError::ObjParse {
                            line: lineno + 1,
                            reason: "vertex needs 3 coordinates".into(),
                        })?;
                        *c = tok.parse().map_err(|_| MeshError::ObjParse {
                            line: lineno + 1,
                            reason: format!("bad coordinate {tok:?}"),
                        })?;
                    }
                    vertices.push(coords);
                }
                Some("f") => {
                    let idx: Vec<u32> = parts
                        .map(|tok| parse_face_index(tok, vertices.len(), lineno + 1))
                        .collect::<Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(MeshError::ObjParse {
                            line: lineno + 1,
                            reason: "face needs at least 3 vertices".into(),
                        });
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let mut mesh = Self::new(vertices, triangles)?;
        mesh.clean();
        Ok(mesh)
    }

    pub fn write_obj(&self, path: &Path) -> Result<(), MeshError> {
        let mut w = BufWriter::new(File::create(path)?);
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_face_index(tok: &str, n_vertices: usize, line: usize) -> Result<u32, MeshError> {
    // OBJ faces may carry texture/normal refs as v/vt/vn; only v is used.
    let first = tok.split('/').next().unwrap_or(tok);
    let raw: i64 = first.parse().map_err(|_| MeshError::ObjParse {
        line,
        reason: format!("bad face index {tok:?}"),
    })?;
    let idx = if raw < 0 { n_vertices as i64 + raw } else { raw - 1 };
    if idx < 0 || idx as usize >= n_vertices {
        return Err(MeshError::ObjParse { line, reason: format!("face index {raw} out of range") });
    }
    Ok(idx as u32)
}

pub fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u = sub(b, a);
    let v = sub(c, a);
    0.5 * norm(cross(u, v))
}

#[inline]
pub fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    if n == 0.0 {
        a
    } else {
        scale(a, 1.0 / n)
    }
}

/// Icosphere centered at the origin: an icosahedron subdivided `subdivisions`
/// times with vertices projected onto the radius-`radius` sphere.
pub fn icosphere(radius: f64, subdivisions: u32) -> TriangleMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = vec![
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
    for v in &mut vertices {
        *v = normalize(*v);
    }
    let mut triangles: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints = std::collections::HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for tri in &triangles {
            let mut mid = [0u32; 3];
            for e in 0..3 {
                let a = tri[e];
                let b = tri[(e + 1) % 3];
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoints.entry(key).or_insert_with(|| {
                    let m = normalize(scale(add(vertices[a as usize], vertices[b as usize]), 0.5));
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
            }
            next.push([tri[0], mid[0], mid[2]]);
            next.push([tri[1], mid[1], mid[0]]);
            next.push([tri[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        triangles = next;
    }
    for v in &mut vertices {
        *v = scale(*v, radius);
    }
    TriangleMesh { vertices, triangles }
}

/// Axis-aligned box centered at the origin with the given half-extents,
/// two triangles per face, outward winding.
pub fn box_mesh(half_extents: [f64; 3]) -> TriangleMesh {
    let [hx, hy, hz] = half_extents;
    let vertices = vec![
        [-hx, -hy, -hz],
        [hx, -hy, -hz],
        [hx, hy, -hz],
        [-hx, hy, -hz],
        [-hx, -hy, hz],
        [hx, -hy, hz],
        [hx, hy, hz],
        [-hx, hy, hz],
    ];
    let triangles = vec![
        [0, 2, 1], [0, 3, 2], // z-
        [4, 5, 6], [4, 6, 7], // z+
        [0, 1, 5], [0, 5, 4], // y-
        [3, 6, 2], [3, 7, 6], // y+
        [0, 7, 3], [0, 4, 7], // x-
        [1, 2, 6], [1, 6, 5], // x+
    ];
    TriangleMesh { vertices, triangles }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_vertices_on_sphere() {
        let m = icosphere(0.4, 2);
        for v in &m.vertices {
            assert!((norm(*v) - 0.4).abs() < 1e-12);
        }
        assert_eq!(m.triangles.len(), 20 * 4 * 4);
    }

    #[test]
    fn box_mesh_area() {
        let m = box_mesh([0.5, 0.5, 0.5]);
        assert!((m.total_area() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn obj_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        let m = icosphere(1.0, 1);
        m.write_obj(&path).unwrap();
        let back = TriangleMesh::read_obj(&path).unwrap();
        assert_eq!(back.triangles, m.triangles);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn obj_quad_faces_are_fan_triangulated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("quad.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        let m = TriangleMesh::read_obj(&path).unwrap();
        assert_eq!(m.triangles.len(), 2);
    }

    #[test]
    fn obj_rejects_bad_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.obj");
        std::fs::write(&path, "v 0 0 0\nf 1 2 3\n").unwrap();
        assert!(matches!(TriangleMesh::read_obj(&path), Err(MeshError::ObjParse { .. })));
    }

    #[test]
    fn clean_drops_degenerate_triangles() {
        let mut m = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2], [0, 1, 3]],
        )
        .unwrap();
        m.clean();
        assert_eq!(m.triangles, vec![[0, 1, 3]]);
    }
}
