//! Volumetric fusion of depth views into a truncated signed distance grid
//! (weighted averaging of per-view projective signed distances).

use rayon::prelude::*;

use crate::grid::{ClampPolicy, TsdfGrid};

use super::render::DepthView;
use super::DatagenError;

/// How to resolve voxels that no view observed within the truncation band.
///
/// A ray observes a voxel when it is in free space or within `truncation` of
/// the surface along the ray. Voxels farther behind a surface are occluded.
/// Complete fusion treats a voxel occluded in every projecting view as
/// enclosed by surface and fills it with `-truncation`, which is what closes
/// the interior when fusing many views all around a shape. Partial fusion
/// never does this: a sparse scan must not hallucinate occupancy, so
/// unobserved space stays at `+truncation`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    Complete,
    Partial,
}

/// Fuses one or more depth views into a `d^3` TSDF centered at the origin.
///
/// `truncation` is in voxel units; stored values stay in voxel units within
/// `[-truncation, +truncation]`. Per view, a projectable voxel contributes
/// `min(depth - distance, truncation)` when that is `>= -truncation`; a pixel
/// with no hit observes free space along its whole ray and contributes
/// `+truncation`. Voxels observed by no view keep `+truncation` (subject to
/// the [`FuseMode::Complete`] interior fill).
pub fn fuse_views(
    views: &[DepthView],
    d: usize,
    truncation: f32,
    voxel_size: f32,
    mode: FuseMode,
) -> Result<TsdfGrid, DatagenError> {
    if views.is_empty() {
        return Err(DatagenError::NoViews);
    }
    let trunc_world = truncation as f64 * voxel_size as f64;
    let vs = voxel_size as f64;
    let half = 0.5 * d as f64 * vs;

    let mut values = vec![0.0f32; d * d * d];
    values
        .par_chunks_mut(d * d)
        .enumerate()
        .for_each(|(x, slab)| {
            let px = (x as f64 + 0.5) * vs - half;
            for y in 0..d {
                let py = (y as f64 + 0.5) * vs - half;
                for z in 0..d {
                    let pz = (z as f64 + 0.5) * vs - half;
                    let p = [px, py, pz];
                    let mut weight = 0.0f64;
                    let mut acc = 0.0f64;
                    let mut occluded = 0usize;
                    for view in views {
                        let Some((u, v, dist)) = view.project(p) else { continue };
                        let depth = view.depth_at(u, v);
                        let sdf = if depth == 0.0 {
                            trunc_world // no surface along this ray: free space
                        } else {
                            let raw = depth - dist;
                            if raw < -trunc_world {
                                occluded += 1;
                                continue;
                            }
                            raw.min(trunc_world)
                        };
                        acc += sdf;
                        weight += 1.0;
                    }
                    let world = if weight > 0.0 {
                        acc / weight
                    } else if mode == FuseMode::Complete && occluded > 0 {
                        // behind a surface in every view that reaches it:
                        // enclosed interior
                        -trunc_world
                    } else {
                        trunc_world
                    };
                    slab[y * d + z] = ((world / vs) as f32).clamp(-truncation, truncation);
                }
            }
        });
    TsdfGrid::from_values(d, truncation, voxel_size, values, ClampPolicy::Clamp)
        .map_err(DatagenError::Grid)
}

/// Mask of voxels at least one view observed (in free space or within the
/// truncation band).
pub fn observed_mask(views: &[DepthView], d: usize, truncation: f32, voxel_size: f32) -> Vec<bool> {
    let trunc_world = truncation as f64 * voxel_size as f64;
    let vs = voxel_size as f64;
    let half = 0.5 * d as f64 * vs;
    let mut mask = vec![false; d * d * d];
    for (i, m) in mask.iter_mut().enumerate() {
        let z = i % d;
        let y = (i / d) % d;
        let x = i / (d * d);
        let p = [
            (x as f64 + 0.5) * vs - half,
            (y as f64 + 0.5) * vs - half,
            (z as f64 + 0.5) * vs - half,
        ];
        for view in views {
            if let Some((u, v, dist)) = view.project(p) {
                let depth = view.depth_at(u, v);
                if depth == 0.0 || depth - dist >= -trunc_world {
                    *m = true;
                    break;
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::render::{fibonacci_viewpoints, render_depth, render_views, Intrinsics};
    use crate::mesh::{icosphere, TriangleMesh};

    fn sphere_views(radius: f64, n: usize) -> Vec<DepthView> {
        let mesh = icosphere(radius, 3);
        let intr = Intrinsics::from_fov(240, 240, 50.0);
        render_views(&mesh, &fibonacci_viewpoints(n, 2.0), intr).unwrap()
    }

    #[test]
    fn fused_sphere_sign_matches_analytic_sdf() {
        let views = sphere_views(0.4, 20);
        let d = 32;
        let grid = fuse_views(&views, d, 2.5, 1.0 / d as f32, FuseMode::Complete).unwrap();
        // Signs must agree wherever the analytic distance is > 1 voxel unit.
        let voxel = 1.0 / d as f64;
        let mut checked = 0;
        for x in 0..d {
            for y in 0..d {
                for z in 0..d {
                    let p = grid.voxel_center(x, y, z);
                    let analytic = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.4;
                    if analytic.abs() > voxel {
                        checked += 1;
                        let fused = grid.value(x, y, z);
                        assert_eq!(
                            fused < 0.0,
                            analytic < 0.0,
                            "sign mismatch at ({x},{y},{z}): fused {fused}, analytic {analytic}"
                        );
                    }
                }
            }
        }
        assert!(checked > 10_000, "oracle covered too few voxels: {checked}");
        // deep inside and far outside saturate at the truncation bound
        let center = grid.value(d / 2, d / 2, d / 2);
        assert_eq!(center, -2.5);
        assert_eq!(grid.value(0, 0, 0), 2.5);
    }

    #[test]
    fn single_plane_view_signs_split_front_and_back() {
        // square at z=0 facing the camera at +z: voxels in front (z>0) must be
        // positive, voxels just behind must be negative inside the band.
        let mesh = TriangleMesh::new(
            vec![
                [-0.6, -0.6, 0.0],
                [0.6, -0.6, 0.0],
                [0.6, 0.6, 0.0],
                [-0.6, 0.6, 0.0],
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let pose = super::super::render::CameraPose::look_at([0.0, 0.0, 2.0], [0.0, 0.0, 0.0]);
        let view = render_depth(&mesh, pose, Intrinsics::from_fov(240, 240, 50.0)).unwrap();
        let d = 32;
        let grid =
            fuse_views(std::slice::from_ref(&view), d, 2.5, 1.0 / d as f32, FuseMode::Partial).unwrap();
        let t_world = 2.5 / d as f32;
        for z in 0..d {
            let p = grid.voxel_center(d / 2, d / 2, z);
            let v = grid.value(d / 2, d / 2, z);
            if p[2] > 0.0 {
                assert!(v > 0.0, "in front at z={} got {v}", p[2]);
            } else if p[2] > -(t_world as f64) {
                assert!(v < 0.0, "behind at z={} got {v}", p[2]);
            }
        }
        // far behind the plane is unknown: a partial scan leaves it empty
        assert_eq!(grid.value(d / 2, d / 2, 0), 2.5);
    }

    #[test]
    fn fusing_same_view_twice_equals_once() {
        let views = sphere_views(0.4, 1);
        for mode in [FuseMode::Complete, FuseMode::Partial] {
            let once = fuse_views(&views, 16, 2.5, 1.0 / 16.0, mode).unwrap();
            let doubled = vec![views[0].clone(), views[0].clone()];
            let twice = fuse_views(&doubled, 16, 2.5, 1.0 / 16.0, mode).unwrap();
            let same = once
                .values()
                .iter()
                .zip(twice.values())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn zero_views_is_an_error() {
        assert!(matches!(
            fuse_views(&[], 16, 2.5, 1.0 / 16.0, FuseMode::Complete),
            Err(DatagenError::NoViews)
        ));
    }
}
