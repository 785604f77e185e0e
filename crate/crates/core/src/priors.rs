//! The learnable complete-shape prior pool: mean-shift initialization per
//! category, chunked value volumes, and freeze/train state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{Params, Scalar, Tensor};
use crate::grid::TsdfGrid;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("category {0:?} has no shapes")]
    EmptyCategory(String),
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("mean-shift input contains a non-finite value")]
    NonFinite,
    #[error("prior pool resolution {0} is not divisible by patch side {1}")]
    NotDivisible(usize, usize),
    #[error("shapes disagree on resolution: {0} vs {1}")]
    MixedResolution(usize, usize),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
}

/// Ordered category names with ids fixed at dataset-build time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRegistry {
    names: Vec<String>,
}

impl CategoryRegistry {
    pub fn new(mut names: Vec<String>) -> Self {
        names.dedup();
        Self { names }
    }

    pub fn from_labels<'a>(labels: impl Iterator<Item = &'a str>) -> Self {
        let mut names: Vec<String> = labels.map(|s| s.to_string()).collect();
        names.sort();
        names.dedup();
        Self { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Hyperparameters for prior initialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Maximum priors kept per category (by descending cluster population).
    pub k_max: usize,
    /// Bandwidth = this factor times the median pairwise distance within the
    /// category (flat kernel, Euclidean on flattened TSDFs).
    pub bandwidth_factor: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { k_max: 3, bandwidth_factor: 0.5, max_iter: 100, tol: 1e-4 }
    }
}

/// Per-category learnable complete-shape priors, each a `D^3` TSDF-shaped
/// parameter tensor. Read access is thread-safe; mutation happens only on
/// the training thread via the parameter store.
#[derive(Debug, Clone)]
pub struct PriorPool {
    registry: CategoryRegistry,
    resolution: usize,
    truncation: f32,
    /// Count of priors per category, in registry order.
    counts: Vec<usize>,
}

impl PriorPool {
    pub fn registry(&self) -> &CategoryRegistry {
        &self.registry
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn truncation(&self) -> f32 {
        self.truncation
    }

    pub fn count_for(&self, category_id: usize) -> usize {
        self.counts[category_id]
    }

    pub fn total_priors(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Parameter name of prior `k` of `category`.
    pub fn param_name(category: &str, k: usize) -> String {
        format!("prior/{category}/{k}")
    }

    /// All prior parameter names, in (category-major, k ascending) order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (c, cat) in self.registry.names().iter().enumerate() {
            for k in 0..self.counts[c] {
                names.push(Self::param_name(cat, k));
            }
        }
        names
    }

    /// Serializable description of the pool layout (counts per category).
    pub fn layout(&self) -> PoolLayout {
        PoolLayout {
            categories: self.registry.names().to_vec(),
            counts: self.counts.clone(),
            resolution: self.resolution,
            truncation: self.truncation,
        }
    }

    pub fn from_layout(layout: &PoolLayout) -> Self {
        Self {
            registry: CategoryRegistry::new(layout.categories.clone()),
            resolution: layout.resolution,
            truncation: layout.truncation,
            counts: layout.counts.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolLayout {
    pub categories: Vec<String>,
    pub counts: Vec<usize>,
    pub resolution: usize,
    pub truncation: f32,
}

/// Initializes the prior pool from training shapes grouped by category:
/// mean-shift over flattened TSDF vectors, modes capped at `k_max` by
/// descending cluster population. A single-shape category yields one prior
/// bit-equal to that shape. Parameters are inserted into `params` under
/// `prior/<category>/<k>`, trainable.
pub fn init_priors(
    shapes_by_category: &BTreeMap<String, Vec<&TsdfGrid>>,
    cfg: &PriorConfig,
    params: &mut Params<f32>,
) -> Result<PriorPool, PriorError> {
    let mut resolution = 0usize;
    let mut truncation = 0.0f32;
    let mut counts = Vec::new();
    let registry = CategoryRegistry::new(shapes_by_category.keys().cloned().collect());

    for (category, shapes) in shapes_by_category {
        if shapes.is_empty() {
            return Err(PriorError::EmptyCategory(category.clone()));
        }
        for s in shapes {
            if resolution == 0 {
                resolution = s.resolution();
                truncation = s.truncation();
            } else if s.resolution() != resolution {
                return Err(PriorError::MixedResolution(resolution, s.resolution()));
            }
        }
        let vectors: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| s.values().iter().map(|&v| v as f64).collect())
            .collect();

        let modes = if vectors.len() == 1 {
            vec![(vectors[0].clone(), 1usize)]
        } else {
            let bandwidth = cfg.bandwidth_factor * median_pairwise_distance(&vectors);
            if bandwidth <= 0.0 {
                // all shapes identical: one mode
                vec![(vectors[0].clone(), vectors.len())]
            } else {
                mean_shift_with_population(&vectors, bandwidth, cfg.max_iter, cfg.tol)?
            }
        };

        let mut modes = modes;
        // descending population; ties broken by first-seen order (stable)
        modes.sort_by(|a, b| b.1.cmp(&a.1));
        modes.truncate(cfg.k_max);

        for (k, (mode, _pop)) in modes.iter().enumerate() {
            let data: Vec<f32> = mode.iter().map(|&v| (v as f32).clamp(-truncation, truncation)).collect();
            let tensor = Tensor::new(vec![resolution, resolution, resolution], data)?;
            params.insert(PriorPool::param_name(category, k), tensor, true);
        }
        counts.push(modes.len());
    }

    Ok(PriorPool { registry, resolution, truncation, counts })
}

/// Flat-kernel mean shift: every point iterates to the mean of its
/// `bandwidth`-neighborhood until the shift norm drops below `tol` (or
/// `max_iter`). Modes closer than `bandwidth / 2` merge; assignment order
/// follows input order, so the result is deterministic.
pub fn mean_shift(
    points: &[Vec<f64>],
    bandwidth: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<Vec<f64>>, PriorError> {
    Ok(mean_shift_with_population(points, bandwidth, max_iter, tol)?
        .into_iter()
        .map(|(m, _)| m)
        .collect())
}

fn mean_shift_with_population(
    points: &[Vec<f64>],
    bandwidth: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<(Vec<f64>, usize)>, PriorError> {
    if bandwidth <= 0.0 || !bandwidth.is_finite() {
        return Err(PriorError::BadBandwidth(bandwidth));
    }
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(PriorError::NonFinite);
    }
    let dim = points.first().map(|p| p.len()).unwrap_or(0);

    let mut converged: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for p in points {
        let mut cur = p.clone();
        for _ in 0..max_iter {
            let mut mean = vec![0.0f64; dim];
            let mut n = 0usize;
            for q in points {
                if euclidean(&cur, q) <= bandwidth {
                    for (m, v) in mean.iter_mut().zip(q) {
                        *m += v;
                    }
                    n += 1;
                }
            }
            // the window always contains the point itself
            for m in &mut mean {
                *m /= n as f64;
            }
            let shift = euclidean(&cur, &mean);
            cur = mean;
            if shift < tol {
                break;
            }
        }
        converged.push(cur);
    }

    // merge modes within bandwidth/2, first-seen mode wins
    let mut modes: Vec<(Vec<f64>, usize)> = Vec::new();
    for c in converged {
        match modes.iter_mut().find(|(m, _)| euclidean(m, &c) <= bandwidth / 2.0) {
            Some((_, pop)) => *pop += 1,
            None => modes.push((c, 1)),
        }
    }
    Ok(modes)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn median_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut dists = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            dists.push(euclidean(&points[i], &points[j]));
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    dists[dists.len() / 2]
}

/// Raw `R^3` TSDF chunks of every prior, flattened into a value matrix whose
/// row order is category-major, then prior index, then patch index in
/// canonical chunk order. This is exactly the key order `net::encode_priors`
/// produces, so attention weights index values correctly.
pub fn chunk_values<T: Scalar>(
    pool: &PriorPool,
    params: &Params<T>,
    r: usize,
) -> Result<Tensor<T>, PriorError> {
    let d = pool.resolution;
    if r == 0 || d % r != 0 {
        return Err(PriorError::NotDivisible(d, r));
    }
    let n = d / r;
    let patches_per_prior = n * n * n;
    let total_rows = pool.total_priors() * patches_per_prior;
    let mut data = Vec::with_capacity(total_rows * r * r * r);
    for name in pool.param_names() {
        let prior = params.value(&name)?;
        let pd = prior.data();
        for cx in 0..n {
            for cy in 0..n {
                for cz in 0..n {
                    for dx in 0..r {
                        for dy in 0..r {
                            for dz in 0..r {
                                let x = cx * r + dx;
                                let y = cy * r + dy;
                                let z = cz * r + dz;
                                data.push(pd[(x * d + y) * d + z]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![total_rows, r * r * r], data)?)
}

/// Marks every prior tensor frozen (no gradient updates).
pub fn freeze(pool: &PriorPool, params: &mut Params<f32>) {
    for name in pool.param_names() {
        let _ = params.set_trainable(&name, false);
    }
}

/// Marks every prior tensor trainable again.
pub fn unfreeze(pool: &PriorPool, params: &mut Params<f32>) {
    for name in pool.param_names() {
        let _ = params.set_trainable(&name, true);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ClampPolicy;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sphere_grid(d: usize, radius: f64, jitter: f64, seed: u64) -> TsdfGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = 2.5f32;
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
                    let dist = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius;
                    let noisy = dist / vs as f64 + jitter * rng.gen_range(-1.0..1.0);
                    values.push((noisy as f32).clamp(-t, t));
                }
            }
        }
        TsdfGrid::from_values(d, t, vs, values, ClampPolicy::Clamp).unwrap()
    }

    #[test]
    fn single_shape_category_yields_that_shape() {
        let g = sphere_grid(8, 0.3, 0.0, 1);
        let mut params = Params::new();
        let mut by_cat = BTreeMap::new();
        by_cat.insert("solo".to_string(), vec![&g]);
        let pool = init_priors(&by_cat, &PriorConfig::default(), &mut params).unwrap();
        assert_eq!(pool.total_priors(), 1);
        let prior = params.value("prior/solo/0").unwrap();
        assert!(prior.data().iter().zip(g.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn identical_shapes_merge_to_one_prior() {
        let g = sphere_grid(8, 0.3, 0.0, 2);
        let g2 = g.clone();
        let mut params = Params::new();
        let mut by_cat = BTreeMap::new();
        by_cat.insert("dup".to_string(), vec![&g, &g2]);
        let pool = init_priors(&by_cat, &PriorConfig::default(), &mut params).unwrap();
        assert_eq!(pool.total_priors(), 1);
        let prior = params.value("prior/dup/0").unwrap();
        assert!(prior.data().iter().zip(g.values()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn two_well_separated_clusters_give_two_priors_near_cluster_means() {
        // 10 shapes: 5 noisy spheres of radius 0.2 and 5 of radius 0.4
        let small: Vec<TsdfGrid> = (0..5).map(|i| sphere_grid(8, 0.2, 0.01, 10 + i)).collect();
        let large: Vec<TsdfGrid> = (0..5).map(|i| sphere_grid(8, 0.4, 0.01, 20 + i)).collect();
        let mut shapes: Vec<&TsdfGrid> = small.iter().collect();
        shapes.extend(large.iter());

        let mut params = Params::new();
        let mut by_cat = BTreeMap::new();
        by_cat.insert("spheres".to_string(), shapes);
        let pool = init_priors(&by_cat, &PriorConfig::default(), &mut params).unwrap();
        assert_eq!(pool.total_priors(), 2);

        // brute-force oracle: the two cluster means
        let mean_of = |grids: &[TsdfGrid]| -> Vec<f64> {
            let n = grids.len() as f64;
            let len = grids[0].values().len();
            let mut m = vec![0.0f64; len];
            for g in grids {
                for (acc, v) in m.iter_mut().zip(g.values()) {
                    *acc += *v as f64 / n;
                }
            }
            m
        };
        let m_small = mean_of(&small);
        let m_large = mean_of(&large);

        let p0: Vec<f64> = params.value("prior/spheres/0").unwrap().data().iter().map(|&v| v as f64).collect();
        let p1: Vec<f64> = params.value("prior/spheres/1").unwrap().data().iter().map(|&v| v as f64).collect();
        // each prior matches one distinct cluster mean to 1e-3 (L2)
        let d00 = euclidean(&p0, &m_small);
        let d01 = euclidean(&p0, &m_large);
        let (e0, e1) = if d00 < d01 {
            (d00, euclidean(&p1, &m_large))
        } else {
            (d01, euclidean(&p1, &m_small))
        };
        assert!(e0 < 1e-3, "prior 0 off its cluster mean by {e0}");
        assert!(e1 < 1e-3, "prior 1 off its cluster mean by {e1}");
    }

    #[test]
    fn empty_category_names_the_category() {
        let mut params = Params::new();
        let mut by_cat: BTreeMap<String, Vec<&TsdfGrid>> = BTreeMap::new();
        by_cat.insert("void".to_string(), vec![]);
        match init_priors(&by_cat, &PriorConfig::default(), &mut params) {
            Err(PriorError::EmptyCategory(name)) => assert_eq!(name, "void"),
            other => panic!("expected EmptyCategory, got {other:?}"),
        }
    }

    #[test]
    fn mean_shift_identical_points() {
        let pts = vec![vec![1.0, 2.0]; 4];
        let modes = mean_shift(&pts, 0.5, 50, 1e-6).unwrap();
        assert_eq!(modes.len(), 1);
        assert!((modes[0][0] - 1.0).abs() < 1e-9 && (modes[0][1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn mean_shift_single_point_is_fixed() {
        let pts = vec![vec![3.0, -1.0]];
        let modes = mean_shift(&pts, 1.0, 50, 1e-6).unwrap();
        assert_eq!(modes.len(), 1);
        assert_eq!(modes[0], vec![3.0, -1.0]);
    }

    #[test]
    fn mean_shift_two_far_clusters() {
        // clusters 10 bandwidths apart: the flat-kernel fixed point of each
        // cluster is its mean
        let bandwidth = 1.0;
        let mut pts = Vec::new();
        for i in 0..5 {
            pts.push(vec![0.1 * i as f64, 0.0]);
        }
        for i in 0..5 {
            pts.push(vec![10.0 + 0.1 * i as f64, 0.0]);
        }
        let modes = mean_shift(&pts, bandwidth, 100, 1e-9).unwrap();
        assert_eq!(modes.len(), 2);
        assert!((modes[0][0] - 0.2).abs() < 1e-6);
        assert!((modes[1][0] - 10.2).abs() < 1e-6);
    }

    #[test]
    fn mean_shift_rejects_bad_input() {
        assert!(matches!(
            mean_shift(&[vec![1.0]], 0.0, 10, 1e-6),
            Err(PriorError::BadBandwidth(_))
        ));
        assert!(matches!(
            mean_shift(&[vec![f64::NAN]], 1.0, 10, 1e-6),
            Err(PriorError::NonFinite)
        ));
    }

    #[test]
    fn chunk_values_identity_when_r_equals_d() {
        let g = sphere_grid(8, 0.3, 0.0, 30);
        let mut params = Params::new();
        let mut by_cat = BTreeMap::new();
        by_cat.insert("c".to_string(), vec![&g]);
        let pool = init_priors(&by_cat, &PriorConfig::default(), &mut params).unwrap();
        let v = chunk_values(&pool, &params, 8).unwrap();
        assert_eq!(v.shape(), &[1, 512]);
        assert!(v.data().iter().zip(g.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn chunk_values_row_count_at_r8() {
        let g = sphere_grid(32, 0.3, 0.0, 31);
        let mut params = Params::new();
        let mut by_cat = BTreeMap::new();
        by_cat.insert("c".to_string(), vec![&g]);
        let pool = init_priors(&by_cat, &PriorConfig::default(), &mut params).unwrap();
        let v = chunk_values(&pool, &params, 8).unwrap();
        // 64 patch rows per prior at D=32, R=8
        assert_eq!(v.shape(), &[64, 512]);
    }

    #[test]
    fn chunk_values_permutes_with_categories() {
        let ga = sphere_grid(8, 0.2, 0.0, 40);
        let gb = sphere_grid(8, 0.4, 0.0, 41);
        let cfg = PriorConfig::default();

        let mut params_ab = Params::new();
        let mut ab = BTreeMap::new();
        ab.insert("a".to_string(), vec![&ga]);
        ab.insert("b".to_string(), vec![&gb]);
        let pool_ab = init_priors(&ab, &cfg, &mut params_ab).unwrap();
        let v_ab = chunk_values(&pool_ab, &params_ab, 4).unwrap();

        // categories renamed so their registry order flips: values must be
        // the same blocks, swapped
        let mut params_ba = Params::new();
        let mut ba = BTreeMap::new();
        ba.insert("z_was_a".to_string(), vec![&ga]);
        ba.insert("a_was_b".to_string(), vec![&gb]);
        let pool_ba = init_priors(&ba, &cfg, &mut params_ba).unwrap();
        let v_ba = chunk_values(&pool_ba, &params_ba, 4).unwrap();

        let rows = v_ab.shape()[0];
        let cols = v_ab.shape()[1];
        let half = rows / 2;
        for r in 0..half {
            for c in 0..cols {
                // block a in v_ab == block 2 (z_was_a) in v_ba
                assert_eq!(
                    v_ab.data()[r * cols + c].to_bits(),
                    v_ba.data()[(half + r) * cols + c].to_bits()
                );
                assert_eq!(
                    v_ab.data()[(half + r) * cols + c].to_bits(),
                    v_ba.data()[r * cols + c].to_bits()
                );
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let shapes: Vec<TsdfGrid> = (0..4).map(|i| sphere_grid(8, 0.3, 0.05, 50 + i)).collect();
        let run = || {
            let mut params = Params::new();
            let mut by_cat = BTreeMap::new();
            by_cat.insert("c".to_string(), shapes.iter().collect::<Vec<_>>());
            init_priors(&by_cat, &PriorConfig::default(), &mut params).unwrap();
            params
                .iter()
                .map(|(n, p)| (n.clone(), p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn freeze_marks_priors_untrainable() {
        let g = sphere_grid(8, 0.3, 0.0, 60);
        let mut params = Params::new();
        let mut by_cat = BTreeMap::new();
        by_cat.insert("c".to_string(), vec![&g]);
        let pool = init_priors(&by_cat, &PriorConfig::default(), &mut params).unwrap();
        assert!(params.get("prior/c/0").unwrap().trainable);
        freeze(&pool, &mut params);
        assert!(!params.get("prior/c/0").unwrap().trainable);
        unfreeze(&pool, &mut params);
        assert!(params.get("prior/c/0").unwrap().trainable);
    }
}
