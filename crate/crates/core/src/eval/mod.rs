//! Metric pipeline: iso-surface extraction at level zero, area-uniform
//! surface sampling, L1 Chamfer distance (reported x100), IoU, and
//! instance/category-average reporting.

mod mc_tables;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::LoadedSample;
use crate::grid::TsdfGrid;
use crate::mesh::TriangleMesh;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot sample points from an empty mesh")]
    EmptyMesh,
    #[error("point sets must be nonempty")]
    EmptyPointSet,
    #[error("grids have mismatched resolutions {0} and {1}")]
    ResolutionMismatch(usize, usize),
    #[error("prediction failed for {id}: {reason}")]
    Prediction { id: String, reason: String },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Chamfer sentinel for shapes whose iso-surface is empty: twice the diagonal
/// of the canonical unit cube. Keeps aggregates finite and unambiguous.
pub const EMPTY_MESH_CD: f64 = 3.4641016151377544; // 2 * sqrt(3)

/// Extracts the level-`iso` surface with marching cubes over voxel-center
/// cells, linear interpolation along edges, vertices in canonical
/// coordinates. A grid with only one sign present yields an empty mesh.
pub fn marching_cubes(grid: &TsdfGrid, iso: f32) -> TriangleMesh {
    let d = grid.resolution();
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // shared vertex per (voxel, voxel) edge
    let mut edge_vertex: std::collections::HashMap<(u32, u32), u32> = std::collections::HashMap::new();

    let vidx = |x: usize, y: usize, z: usize| ((x * d + y) * d + z) as u32;
    for x in 0..d - 1 {
        for y in 0..d - 1 {
            for z in 0..d - 1 {
                let mut case = 0usize;
                let mut corner_vals = [0.0f32; 8];
                for (i, off) in mc_tables::CORNER_OFFSETS.iter().enumerate() {
                    let v = grid.value(x + off[0], y + off[1], z + off[2]);
                    corner_vals[i] = v;
                    if v < iso {
                        case |= 1 << i;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let tri_row = &mc_tables::TRIANGLE_TABLE[case];
                let mut t = 0;
                while tri_row[t] >= 0 {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in ids.iter_mut().zip(&tri_row[t..t + 3]) {
                        let [c1, c2] = mc_tables::EDGE_CORNERS[e as usize];
                        let o1 = mc_tables::CORNER_OFFSETS[c1];
                        let o2 = mc_tables::CORNER_OFFSETS[c2];
                        let k1 = vidx(x + o1[0], y + o1[1], z + o1[2]);
                        let k2 = vidx(x + o2[0], y + o2[1], z + o2[2]);
                        let key = (k1.min(k2), k1.max(k2));
                        *slot = *edge_vertex.entry(key).or_insert_with(|| {
                            let (v1, v2) = (corner_vals[c1], corner_vals[c2]);
                            let t_lerp = ((iso - v1) / (v2 - v1)) as f64;
                            let p1 = grid.voxel_center(x + o1[0], y + o1[1], z + o1[2]);
                            let p2 = grid.voxel_center(x + o2[0], y + o2[1], z + o2[2]);
                            vertices.push([
                                p1[0] + (p2[0] - p1[0]) * t_lerp,
                                p1[1] + (p2[1] - p1[1]) * t_lerp,
                                p1[2] + (p2[2] - p1[2]) * t_lerp,
                            ]);
                            (vertices.len() - 1) as u32
                        });
                    }
                    // skip degenerate triangles from vertices merged on edges
                    if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                        triangles.push(ids);
                    }
                    t += 3;
                }
            }
        }
    }
    TriangleMesh { vertices, triangles }
}

/// `n` points sampled uniformly by area, deterministic per seed.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<[f64; 3]>, EvalError> {
    if mesh.is_empty() {
        return Err(EvalError::EmptyMesh);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0f64;
    for t in &mesh.triangles {
        let area = crate::mesh::triangle_area(
            mesh.vertices[t[0] as usize],
            mesh.vertices[t[1] as usize],
            mesh.vertices[t[2] as usize],
        );
        total += area;
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(EvalError::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.gen_range(0.0..total);
        let ti = cumulative.partition_point(|&c| c <= target).min(mesh.triangles.len() - 1);
        let tri = mesh.triangles[ti];
        let a = mesh.vertices[tri[0] as usize];
        let b = mesh.vertices[tri[1] as usize];
        let c = mesh.vertices[tri[2] as usize];
        let r1: f64 = rng.gen();
        let r2: f64 = rng.gen();
        let su = r1.sqrt();
        let (wa, wb, wc) = (1.0 - su, su * (1.0 - r2), su * r2);
        points.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
    }
    Ok(points)
}

/// Symmetric L1 Chamfer distance: `0.5 * (mean_a min_b |a-b| + mean_b min_a
/// |a-b|)` with exact (brute-force) nearest neighbors and un-squared
/// Euclidean distances. Exactly symmetric in its arguments.
pub fn chamfer_l1(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyPointSet);
    }
    let one_way = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let sum: f64 = from
            .par_iter()
            .map(|p| {
                let mut best = f64::INFINITY;
                for q in to {
                    let dx = p[0] - q[0];
                    let dy = p[1] - q[1];
                    let dz = p[2] - q[2];
                    let d2 = dx * dx + dy * dy + dz * dz;
                    if d2 < best {
                        best = d2;
                    }
                }
                best.sqrt()
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        sum / from.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}

/// Occupancy IoU: occupied means value < 0. An empty union counts as 1
/// (two empty shapes agree perfectly).
pub fn iou(pred: &TsdfGrid, gt: &TsdfGrid) -> Result<f64, EvalError> {
    if pred.resolution() != gt.resolution() {
        return Err(EvalError::ResolutionMismatch(pred.resolution(), gt.resolution()));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.values().iter().zip(gt.values()) {
        let po = *p < 0.0;
        let go = *g < 0.0;
        if po && go {
            inter += 1;
        }
        if po || go {
            union += 1;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub category: String,
    pub cd_x100: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rollups {
    pub inst_avg_cd: f64,
    pub cat_avg_cd: f64,
    pub inst_avg_iou: f64,
    pub cat_avg_iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub rollups: Rollups,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub n_points: usize,
    pub seed: u64,
    pub export_meshes: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_points: 10_000, seed: 0, export_meshes: None }
    }
}

/// Instance average and unweighted per-category average of the rows.
pub fn rollups(rows: &[EvalRow]) -> Rollups {
    let n = rows.len().max(1) as f64;
    let inst_avg_cd = rows.iter().map(|r| r.cd_x100).sum::<f64>() / n;
    let inst_avg_iou = rows.iter().map(|r| r.iou).sum::<f64>() / n;
    let mut by_cat: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = by_cat.entry(&r.category).or_insert((0.0, 0.0, 0));
        e.0 += r.cd_x100;
        e.1 += r.iou;
        e.2 += 1;
    }
    let c = by_cat.len().max(1) as f64;
    let cat_avg_cd = by_cat.values().map(|(cd, _, k)| cd / *k as f64).sum::<f64>() / c;
    let cat_avg_iou = by_cat.values().map(|(_, io, k)| io / *k as f64).sum::<f64>() / c;
    Rollups { inst_avg_cd, cat_avg_cd, inst_avg_iou, cat_avg_iou }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Scores one (prediction, ground truth) pair: Chamfer x100 between 10K-point
/// surface samples of the level-zero iso-surfaces, and occupancy IoU. Both
/// meshes are sampled with the same per-row seed, so a prediction identical
/// to the ground truth scores exactly CD 0.
pub fn score_pair(
    pred: &TsdfGrid,
    gt: &TsdfGrid,
    row_id: &str,
    opts: &EvalOptions,
) -> Result<(f64, f64, TriangleMesh), EvalError> {
    let mesh_pred = marching_cubes(pred, 0.0);
    let mesh_gt = marching_cubes(gt, 0.0);
    let seed = opts.seed ^ fnv1a(row_id.as_bytes());
    let cd = if mesh_pred.is_empty() || mesh_gt.is_empty() {
        EMPTY_MESH_CD
    } else {
        let pa = sample_surface(&mesh_pred, opts.n_points, seed)?;
        let pb = sample_surface(&mesh_gt, opts.n_points, seed)?;
        chamfer_l1(&pa, &pb)?
    };
    let iou_v = iou(pred, gt)?;
    Ok((cd * 100.0, iou_v, mesh_pred))
}

/// Runs a completion model over every partial scan of every sample and
/// aggregates both metrics. Each (sample, partial) pair is one instance,
/// identified as `<sample id>#<partial index>`. Evaluation order and worker
/// count do not affect the result.
pub fn evaluate<F>(
    samples: &[LoadedSample],
    predict: F,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError>
where
    F: Fn(&TsdfGrid, &LoadedSample) -> Result<TsdfGrid, String> + Sync,
{
    let jobs: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.partials.len()).map(move |pi| (si, pi)))
        .collect();
    let rows_and_meshes: Vec<(EvalRow, TriangleMesh)> = jobs
        .par_iter()
        .map(|&(si, pi)| {
            let sample = &samples[si];
            let row_id = format!("{}#{pi}", sample.id);
            let pred = predict(&sample.partials[pi], sample)
                .map_err(|reason| EvalError::Prediction { id: row_id.clone(), reason })?;
            let (cd_x100, iou_v, mesh) = score_pair(&pred, &sample.gt, &row_id, opts)?;
            Ok((
                EvalRow { id: row_id, category: sample.category.clone(), cd_x100, iou: iou_v },
                mesh,
            ))
        })
        .collect::<Result<_, EvalError>>()?;

    let mut rows = Vec::with_capacity(rows_and_meshes.len());
    for (row, mesh) in rows_and_meshes {
        if let Some(dir) = &opts.export_meshes {
            std::fs::create_dir_all(dir)?;
            let safe = row.id.replace(['/', '#'], "_");
            mesh.write_obj(&dir.join(format!("{safe}.obj")))
                .map_err(|e| EvalError::Report(e.to_string()))?;
        }
        rows.push(row);
    }
    let rollups = rollups(&rows);
    Ok(EvalReport { rows, rollups })
}

pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "id,category,cd_x100,iou")?;
    for r in &report.rows {
        writeln!(w, "{},{},{},{}", r.id, r.category, r.cd_x100, r.iou)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let json =
        serde_json::to_string_pretty(report).map_err(|e| EvalError::Report(e.to_string()))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ClampPolicy;

    fn sdf_grid(d: usize, f: impl Fn([f64; 3]) -> f64) -> TsdfGrid {
        let vs = 1.0 / d as f32;
        let mut values = Vec::with_capacity(d * d * d);
        for x in 0..d {
            for y in 0..d {
                for z in 0..d {
                    let p = [
                        (x as f64 + 0.5) * vs as f64 - 0.5,
                        (y as f64 + 0.5) * vs as f64 - 0.5,
                        (z as f64 + 0.5) * vs as f64 - 0.5,
                    ];
                    // store in voxel units, clamped to the truncation band
                    values.push(((f(p) / vs as f64) as f32).clamp(-2.5, 2.5));
                }
            }
        }
        TsdfGrid::from_values(d, 2.5, vs, values, ClampPolicy::Clamp).unwrap()
    }

    #[test]
    fn sphere_vertices_sit_on_the_sphere() {
        let d = 32;
        let grid = sdf_grid(d, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.3);
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        let half_voxel = 0.5 / d as f64;
        for v in &mesh.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 0.3).abs() <= half_voxel, "vertex radius {r}");
        }
    }

    #[test]
    fn all_positive_grid_gives_empty_mesh() {
        let grid = sdf_grid(16, |_| 1.0);
        assert!(marching_cubes(&grid, 0.0).is_empty());
    }

    #[test]
    fn plane_vertices_interpolate_exactly() {
        let d = 32;
        let grid = sdf_grid(d, |p| p[0] - 0.1);
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!((v[0] - 0.1).abs() < 1e-5, "vertex x {}", v[0]);
        }
    }

    #[test]
    fn surface_sampling_is_area_uniform() {
        // unit square as two triangles; chi-square over a 4x4 bin grid,
        // df = 15, p = 0.01 critical value 30.578
        let mesh = TriangleMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let pts = sample_surface(&mesh, 10_000, 42).unwrap();
        let mut bins = [0usize; 16];
        for p in &pts {
            let bx = ((p[0] * 4.0) as usize).min(3);
            let by = ((p[1] * 4.0) as usize).min(3);
            bins[by * 4 + bx] += 1;
        }
        let expected = 10_000.0 / 16.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 30.578, "chi2 {chi2}");
    }

    #[test]
    fn single_triangle_samples_stay_inside() {
        let mesh = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 3.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let pts = sample_surface(&mesh, 500, 7).unwrap();
        for p in &pts {
            // barycentric containment for the right triangle
            assert!(p[0] >= -1e-12 && p[1] >= -1e-12);
            assert!(p[0] / 2.0 + p[1] / 3.0 <= 1.0 + 1e-12);
            assert_eq!(p[2], 0.0);
        }
        let one = sample_surface(&mesh, 1, 9).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn chamfer_identity_and_two_point_case() {
        let a = vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]];
        assert_eq!(chamfer_l1(&a, &a).unwrap(), 0.0);

        let p = vec![[0.0, 0.0, 0.0]];
        let q = vec![[0.07, 0.0, 0.0]];
        let cd = chamfer_l1(&p, &q).unwrap();
        assert!((cd - 0.07).abs() < 1e-12);
        assert!((cd * 100.0 - 7.0).abs() < 1e-9);
    }

    #[test]
    fn chamfer_matches_brute_force_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gen = |n: usize| -> Vec<[f64; 3]> {
            (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
        };
        let a = gen(50);
        let b = gen(50);
        // independent O(n^2) loop
        let one_way = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
            let mut acc = 0.0;
            for p in from {
                let mut best = f64::INFINITY;
                for q in to {
                    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                        .sqrt();
                    if d < best {
                        best = d;
                    }
                }
                acc += best;
            }
            acc / from.len() as f64
        };
        let want = 0.5 * (one_way(&a, &b) + one_way(&b, &a));
        let got = chamfer_l1(&a, &b).unwrap();
        assert_eq!(got.to_bits(), want.to_bits());
    }

    #[test]
    fn chamfer_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gen = |n: usize| -> Vec<[f64; 3]> {
            (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
        };
        let a = gen(33);
        let b = gen(47);
        assert_eq!(chamfer_l1(&a, &b).unwrap().to_bits(), chamfer_l1(&b, &a).unwrap().to_bits());
    }

    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_identity_disjoint_and_counting_oracle() {
        let d = 32;
        let cube = |c: [f64; 3], h: f64| {
            move |p: [f64; 3]| {
                let dx = (p[0] - c[0]).abs() - h;
                let dy = (p[1] - c[1]).abs() - h;
                let dz = (p[2] - c[2]).abs() - h;
                dx.max(dy).max(dz)
            }
        };
        let a = sdf_grid(d, cube([0.0, 0.0, 0.0], 0.25));
        assert_eq!(iou(&a, &a).unwrap(), 1.0);

        let left = sdf_grid(d, cube([-0.3, 0.0, 0.0], 0.1));
        let right = sdf_grid(d, cube([0.3, 0.0, 0.0], 0.1));
        assert_eq!(iou(&left, &right).unwrap(), 0.0);

        // half-overlapping cubes (16 voxels wide, shifted 8 voxels in x)
        let b = sdf_grid(d, cube([0.25, 0.0, 0.0], 0.25));
        let got = iou(&a, &b).unwrap();
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..d * d * d {
            let pa = a.values()[i] < 0.0;
            let pb = b.values()[i] < 0.0;
            if pa && pb {
                inter += 1;
            }
            if pa || pb {
                union += 1;
            }
        }
        assert_eq!(got, inter as f64 / union as f64);

        // both empty: union empty counts as full agreement
        let empty = sdf_grid(d, |_| 1.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn rollup_math_matches_hand_computation() {
        let rows = vec![
            EvalRow { id: "a#0".into(), category: "a".into(), cd_x100: 2.0, iou: 0.5 },
            EvalRow { id: "a#1".into(), category: "a".into(), cd_x100: 4.0, iou: 0.7 },
            EvalRow { id: "b#0".into(), category: "b".into(), cd_x100: 6.0, iou: 0.9 },
        ];
        let r = rollups(&rows);
        assert!((r.inst_avg_cd - 4.0).abs() < 1e-12);
        // cat a mean = 3.0, cat b mean = 6.0, cat-avg = 4.5
        assert!((r.cat_avg_cd - 4.5).abs() < 1e-12);
        assert!((r.inst_avg_iou - (0.5 + 0.7 + 0.9) / 3.0).abs() < 1e-12);
        assert!((r.cat_avg_iou - (0.6 + 0.9) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_gt_as_prediction_scores_perfectly() {
        let d = 16;
        let gt = sdf_grid(d, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.3);
        let samples = vec![LoadedSample {
            id: "s".into(),
            category: "c".into(),
            split: crate::datagen::Split::Test,
            gt: gt.clone(),
            partials: vec![gt.clone(), gt.clone()],
        }];
        let report =
            evaluate(&samples, |partial, _| Ok(partial.clone()), &EvalOptions::default()).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert_eq!(row.cd_x100, 0.0);
            assert_eq!(row.iou, 1.0);
        }
    }

    #[test]
    fn all_empty_prediction_scores_zero_iou_and_sentinel_cd() {
        let d = 16;
        let gt = sdf_grid(d, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.3);
        let empty = sdf_grid(d, |_| 1.0);
        let samples = vec![LoadedSample {
            id: "s".into(),
            category: "c".into(),
            split: crate::datagen::Split::Test,
            gt,
            partials: vec![empty.clone()],
        }];
        let report =
            evaluate(&samples, move |_, _| Ok(empty.clone()), &EvalOptions::default()).unwrap();
        assert_eq!(report.rows[0].iou, 0.0);
        assert_eq!(report.rows[0].cd_x100, EMPTY_MESH_CD * 100.0);
    }
}
