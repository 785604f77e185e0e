//! Virtual scanning: pinhole cameras on a view sphere and ray-cast depth maps.

use rayon::prelude::*;

use crate::mesh::{cross, dot, norm, normalize, scale, sub, TriangleMesh};

use super::DatagenError;

/// Rigid camera pose: position plus an orthonormal basis looking at a target.
#[derive(Debug, Clone, Copy)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub forward: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
}

impl CameraPose {
    /// Looks from `position` toward `target`. A near-parallel `up` hint is
    /// swapped for +X to keep the basis well conditioned.
    pub fn look_at(position: [f64; 3], target: [f64; 3]) -> Self {
        let forward = normalize(sub(target, position));
        let mut up_hint = [0.0, 1.0, 0.0];
        if dot(forward, up_hint).abs() > 0.99 {
            up_hint = [1.0, 0.0, 0.0];
        }
        let right = normalize(cross(forward, up_hint));
        let up = cross(right, forward);
        Self { position, forward, right, up }
    }
}

/// Pinhole intrinsics, square pixels, principal point at the image center.
#[derive(Debug, Clone, Copy)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
}

impl Intrinsics {
    pub fn from_fov(width: usize, height: usize, fov_deg: f64) -> Self {
        let focal = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self { width, height, focal }
    }
}

/// A rendered view: camera, intrinsics, and per-pixel distance along the ray
/// (0 where no surface was hit).
#[derive(Debug, Clone)]
pub struct DepthView {
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    pub depth: Vec<f64>,
}

impl DepthView {
    #[inline]
    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.intrinsics.width + u]
    }

    /// World-space ray through the center of pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: usize, v: usize) -> [f64; 3] {
        let a = (u as f64 + 0.5 - self.intrinsics.width as f64 / 2.0) / self.intrinsics.focal;
        let b = (v as f64 + 0.5 - self.intrinsics.height as f64 / 2.0) / self.intrinsics.focal;
        let p = &self.pose;
        normalize([
            p.right[0] * a - p.up[0] * b + p.forward[0],
            p.right[1] * a - p.up[1] * b + p.forward[1],
            p.right[2] * a - p.up[2] * b + p.forward[2],
        ])
    }

    /// Projects a world point to its pixel and camera-space depth along the
    /// pixel ray direction; `None` when behind the camera or off-screen.
    pub fn project(&self, p: [f64; 3]) -> Option<(usize, usize, f64)> {
        let rel = sub(p, self.pose.position);
        let z = dot(rel, self.pose.forward);
        if z <= 1e-9 {
            return None;
        }
        let x = dot(rel, self.pose.right);
        let y = -dot(rel, self.pose.up);
        let u = self.intrinsics.focal * x / z + self.intrinsics.width as f64 / 2.0 - 0.5;
        let v = self.intrinsics.focal * y / z + self.intrinsics.height as f64 / 2.0 - 0.5;
        let u = u.round();
        let v = v.round();
        if u < 0.0 || v < 0.0 || u >= self.intrinsics.width as f64 || v >= self.intrinsics.height as f64 {
            return None;
        }
        Some((u as usize, v as usize, norm(rel)))
    }
}

/// `n` viewpoints on a Fibonacci sphere of the given radius, all looking at
/// the origin.
pub fn fibonacci_viewpoints(n: usize, radius: f64) -> Vec<CameraPose> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let theta = golden * i as f64;
            let p = [r * theta.cos() * radius, y * radius, r * theta.sin() * radius];
            CameraPose::look_at(p, [0.0, 0.0, 0.0])
        })
        .collect()
}

/// Renders the nearest ray/triangle intersection distance per pixel.
/// Deterministic: identical inputs produce bit-identical depth maps.
pub fn render_depth(
    mesh: &TriangleMesh,
    pose: CameraPose,
    intrinsics: Intrinsics,
) -> Result<DepthView, DatagenError> {
    if mesh.is_empty() {
        return Err(DatagenError::EmptyMesh);
    }
    let (lo, hi) = mesh.bounding_box()?;
    let inside = (0..3).all(|a| pose.position[a] >= lo[a] && pose.position[a] <= hi[a]);
    if inside {
        return Err(DatagenError::CameraInsideMesh);
    }

    let bvh = Bvh::build(mesh);
    let mut view = DepthView {
        pose,
        intrinsics,
        depth: vec![0.0; intrinsics.width * intrinsics.height],
    };
    let rays: Vec<[f64; 3]> = (0..intrinsics.width * intrinsics.height)
        .map(|i| view.ray(i % intrinsics.width, i / intrinsics.width))
        .collect();
    view.depth
        .par_iter_mut()
        .zip(rays.par_iter())
        .for_each(|(d, dir)| {
            *d = bvh.nearest_hit(pose.position, *dir).unwrap_or(0.0);
        });
    Ok(view)
}

/// Renders all views of a camera rig in parallel.
pub fn render_views(
    mesh: &TriangleMesh,
    poses: &[CameraPose],
    intrinsics: Intrinsics,
) -> Result<Vec<DepthView>, DatagenError> {
    poses
        .par_iter()
        .map(|&pose| render_depth(mesh, pose, intrinsics))
        .collect()
}

// ---------------------------------------------------------------------------
// Median-split BVH over triangles.

struct BvhNode {
    lo: [f64; 3],
    hi: [f64; 3],
    // leaf: range into tri_order; inner: child indices
    kind: BvhKind,
}

enum BvhKind {
    Leaf { start: usize, end: usize },
    Inner { left: usize, right: usize },
}

pub struct Bvh<'a> {
    mesh: &'a TriangleMesh,
    nodes: Vec<BvhNode>,
    tri_order: Vec<usize>,
}

const LEAF_SIZE: usize = 8;

impl<'a> Bvh<'a> {
    pub fn build(mesh: &'a TriangleMesh) -> Self {
        let mut tri_order: Vec<usize> = (0..mesh.triangles.len()).collect();
        let centroids: Vec<[f64; 3]> = mesh
            .triangles
            .iter()
            .map(|t| {
                let a = mesh.vertices[t[0] as usize];
                let b = mesh.vertices[t[1] as usize];
                let c = mesh.vertices[t[2] as usize];
                scale([a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]], 1.0 / 3.0)
            })
            .collect();
        let mut nodes = Vec::new();
        let n = tri_order.len();
        build_node(mesh, &centroids, &mut tri_order, 0, n, &mut nodes);
        Self { mesh, nodes, tri_order }
    }

    /// Distance along the ray to the nearest triangle hit, if any.
    pub fn nearest_hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = [1.0 / dir[0], 1.0 / dir[1], 1.0 / dir[2]];
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            let Some(t_box) = slab_test(node.lo, node.hi, origin, inv) else { continue };
            if t_box >= best {
                continue;
            }
            match node.kind {
                BvhKind::Leaf { start, end } => {
                    for &ti in &self.tri_order[start..end] {
                        let tri = self.mesh.triangles[ti];
                        let a = self.mesh.vertices[tri[0] as usize];
                        let b = self.mesh.vertices[tri[1] as usize];
                        let c = self.mesh.vertices[tri[2] as usize];
                        if let Some(t) = ray_triangle(origin, dir, a, b, c) {
                            if t < best {
                                best = t;
                            }
                        }
                    }
                }
                BvhKind::Inner { left, right } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        (best < f64::INFINITY).then_some(best)
    }
}

fn build_node(
    mesh: &TriangleMesh,
    centroids: &[[f64; 3]],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<BvhNode>,
) -> usize {
    let slice = &order[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &ti in slice {
        for &vi in &mesh.triangles[ti] {
            let v = mesh.vertices[vi as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
    }
    let me = nodes.len();
    nodes.push(BvhNode { lo, hi, kind: BvhKind::Leaf { start, end } });
    if end - start > LEAF_SIZE {
        let mut axis = 0;
        let mut span = hi[0] - lo[0];
        for a in 1..3 {
            if hi[a] - lo[a] > span {
                span = hi[a] - lo[a];
                axis = a;
            }
        }
        let mid = (start + end) / 2;
        order[start..end].sort_unstable_by(|&a, &b| {
            centroids[a][axis]
                .total_cmp(&centroids[b][axis])
                .then_with(|| a.cmp(&b))
        });
        let left = build_node(mesh, centroids, order, start, mid, nodes);
        let right = build_node(mesh, centroids, order, mid, end, nodes);
        nodes[me].kind = BvhKind::Inner { left, right };
    }
    me
}

#[inline]
fn slab_test(lo: [f64; 3], hi: [f64; 3], origin: [f64; 3], inv: [f64; 3]) -> Option<f64> {
    let mut tmin = 0.0f64;
    let mut tmax = f64::INFINITY;
    for a in 0..3 {
        let t1 = (lo[a] - origin[a]) * inv[a];
        let t2 = (hi[a] - origin[a]) * inv[a];
        let (t1, t2) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        tmin = tmin.max(t1);
        tmax = tmax.min(t2);
        if tmin > tmax {
            return None;
        }
    }
    Some(tmin)
}

/// Watertight-enough Moller-Trumbore; hits from either side count.
#[inline]
fn ray_triangle(origin: [f64; 3], dir: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Option<f64> {
    let e1 = sub(b, a);
    let e2 = sub(c, a);
    let pvec = cross(dir, e2);
    let det = dot(e1, pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = sub(origin, a);
    let u = dot(tvec, pvec) * inv_det;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let qvec = cross(tvec, e1);
    let v = dot(dir, qvec) * inv_det;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    let t = dot(e2, qvec) * inv_det;
    (t > 1e-9).then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{box_mesh, icosphere, TriangleMesh};

    fn camera_on_z(dist: f64) -> CameraPose {
        CameraPose::look_at([0.0, 0.0, dist], [0.0, 0.0, 0.0])
    }

    #[test]
    fn plane_center_pixel_depth_is_distance() {
        // unit square in the xy-plane at z = 0, camera 2 units out on z
        let mesh = TriangleMesh::new(
            vec![
                [-0.5, -0.5, 0.0],
                [0.5, -0.5, 0.0],
                [0.5, 0.5, 0.0],
                [-0.5, 0.5, 0.0],
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let view = render_depth(&mesh, camera_on_z(2.0), Intrinsics::from_fov(240, 240, 50.0)).unwrap();
        let c = view.depth_at(120, 120);
        assert!((c - 2.0).abs() < 1e-5, "center depth {c}");
        // corner pixels shoot past the square: no hit
        assert_eq!(view.depth_at(0, 0), 0.0);
        assert_eq!(view.depth_at(239, 239), 0.0);
    }

    #[test]
    fn icosphere_center_depth_matches_analytic_sphere() {
        let mesh = icosphere(1.0, 4);
        let view = render_depth(&mesh, camera_on_z(2.0), Intrinsics::from_fov(64, 64, 50.0)).unwrap();
        let c = view.depth_at(32, 32);
        // analytic ray-sphere: camera at 2, unit sphere => first hit at distance 1
        assert!((c - 1.0).abs() < 2e-2, "center depth {c}");
    }

    #[test]
    fn camera_inside_bbox_is_rejected() {
        let mesh = box_mesh([1.0, 1.0, 1.0]);
        let err = render_depth(&mesh, camera_on_z(0.5), Intrinsics::from_fov(16, 16, 50.0));
        assert!(matches!(err, Err(DatagenError::CameraInsideMesh)));
    }

    #[test]
    fn rendering_is_bit_deterministic() {
        let mesh = icosphere(0.4, 3);
        let intr = Intrinsics::from_fov(64, 64, 50.0);
        let pose = fibonacci_viewpoints(20, 2.0)[7];
        let a = render_depth(&mesh, pose, intr).unwrap();
        let b = render_depth(&mesh, pose, intr).unwrap();
        let same = a.depth.iter().zip(&b.depth).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
    }

    #[test]
    fn bvh_agrees_with_brute_force() {
        let mesh = icosphere(0.4, 2);
        let bvh = Bvh::build(&mesh);
        let origin = [1.7, 0.3, -0.9];
        for i in 0..50 {
            let t = i as f64 / 50.0;
            let dir = normalize([-1.0 + 0.3 * t, -0.2 + 0.4 * t, 0.5 - 0.9 * t]);
            let brute = mesh
                .triangles
                .iter()
                .filter_map(|tri| {
                    ray_triangle(
                        origin,
                        dir,
                        mesh.vertices[tri[0] as usize],
                        mesh.vertices[tri[1] as usize],
                        mesh.vertices[tri[2] as usize],
                    )
                })
                .fold(f64::INFINITY, f64::min);
            let fast = bvh.nearest_hit(origin, dir).unwrap_or(f64::INFINITY);
            assert!((brute - fast).abs() < 1e-12 || (brute.is_infinite() && fast.is_infinite()));
        }
    }

    #[test]
    fn project_inverts_ray() {
        let intr = Intrinsics::from_fov(64, 64, 50.0);
        let pose = fibonacci_viewpoints(20, 2.0)[3];
        let view = DepthView { pose, intrinsics: intr, depth: vec![0.0; 64 * 64] };
        for (u, v) in [(0usize, 0usize), (31, 40), (63, 63), (17, 5)] {
            let dir = view.ray(u, v);
            let p = [
                pose.position[0] + dir[0] * 1.7,
                pose.position[1] + dir[1] * 1.7,
                pose.position[2] + dir[2] * 1.7,
            ];
            let (pu, pv, d) = view.project(p).unwrap();
            assert_eq!((pu, pv), (u, v));
            assert!((d - 1.7).abs() < 1e-9);
        }
    }
}
