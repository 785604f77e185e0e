// phase timing for one stage-2 cached step
use std::collections::BTreeMap;
use std::time::Instant;

use patchforge_core::diff::{Bound, Params, Tape, Tensor};
use patchforge_core::grid::{ClampPolicy, TsdfGrid};
use patchforge_core::net::*;
use patchforge_core::priors::{init_priors, PriorConfig, PriorPool};
use patchforge_core::train::{cache_stage2_features, weighted_l1, LossConfig, TrainPair};

fn sphere(d: usize, radius: f64) -> TsdfGrid {
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
                let dist = ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius) / vs as f64;
                values.push((dist as f32).clamp(-2.5, 2.5));
            }
        }
    }
    TsdfGrid::from_values(d, 2.5, vs, values, ClampPolicy::Clamp).unwrap()
}

fn main() {
    let d_grid = 32usize;
    let cfg = ModelConfig {
        d: 32,
        resolutions: vec![32, 8, 4],
        channels: 16,
        norm: NormKind::Group,
        norm_groups: 8,
        k_max_priors: 2,
        dec_width: 32,
        grid_resolution: d_grid,
        truncation: 2.5,
        enc_kernel: 4,
    };
    let shapes: Vec<TsdfGrid> = (0..8).map(|i| sphere(d_grid, 0.2 + 0.03 * i as f64)).collect();
    let pairs: Vec<TrainPair> = shapes
        .iter()
        .map(|g| TrainPair { input: g.values().to_vec(), target: g.values().to_vec() })
        .collect();

    let mmodel = MultiResModel::new(&cfg).unwrap();
    let mut stage_params = Vec::new();
    let mut pools: Vec<PriorPool> = Vec::new();
    for stage in &mmodel.stages {
        let mut p = Params::new();
        stage.init_params(&mut p, 10 + stage.r as u64);
        let mut bc = BTreeMap::new();
        bc.insert("a".to_string(), shapes[..4].iter().collect::<Vec<_>>());
        bc.insert("b".to_string(), shapes[4..].iter().collect::<Vec<_>>());
        let pool = init_priors(&bc, &PriorConfig { k_max: 2, ..PriorConfig::default() }, &mut p).unwrap();
        stage_params.push(p);
        pools.push(pool);
    }
    let mut s2 = Params::new();
    mmodel.init_stage2_params(&mut s2, 11);

    let t0 = Instant::now();
    let stage_refs: Vec<&Params<f32>> = stage_params.iter().collect();
    let pool_refs: Vec<&PriorPool> = pools.iter().collect();
    let cached = cache_stage2_features(&mmodel, &stage_refs, &pool_refs, &pairs, d_grid).unwrap();
    println!("cache: {:.2}s", t0.elapsed().as_secs_f64());

    // stack batch of 8
    let feats: Vec<CachedStageFeatures<f32>> = (0..3)
        .map(|si| {
            let k = cached[0][si].k.clone();
            let dd = cached[0][si].q.shape()[1];
            let mut qd = Vec::new();
            for i in 0..8 {
                qd.extend_from_slice(cached[i][si].q.data());
            }
            let rows = qd.len() / dd;
            CachedStageFeatures { q: Tensor::new(vec![rows, dd], qd).unwrap(), k }
        })
        .collect();
    let mut target = Vec::new();
    for p in &pairs {
        target.extend_from_slice(&p.target);
    }

    for trial in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let mut s2_bound = Bound::new();
        let out = stage2_forward_cached(&mmodel, &s2, &mut s2_bound, &mut tape, &feats, 8, AttentionMode::Attention).unwrap();
        let t_fwd = t0.elapsed().as_secs_f64();
        let (loss, _) = weighted_l1(&mut tape, out.pred, &target, &LossConfig::default()).unwrap();
        let t_loss = t0.elapsed().as_secs_f64();
        let grads = tape.backward(loss).unwrap();
        let t_bwd = t0.elapsed().as_secs_f64();
        let _ = grads;
        println!(
            "trial {trial}: fwd {:.2}s, loss +{:.2}s, bwd +{:.2}s",
            t_fwd,
            t_loss - t_fwd,
            t_bwd - t_loss
        );
    }
}
