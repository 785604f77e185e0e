// profiling scratch for the overfit-scale training step
use std::collections::BTreeMap;
use std::time::Instant;

use patchforge_core::diff::Params;
use patchforge_core::grid::{ClampPolicy, TsdfGrid};
use patchforge_core::net::{ModelConfig, MultiResModel, NormKind, PatchPriorModel};
use patchforge_core::priors::{init_priors, PriorConfig};
use patchforge_core::train::{train_stage1, train_stage2, TrainConfig, TrainPair};
use patchforge_core::net::AttentionMode;
use patchforge_core::priors::PriorPool;

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

fn wipe_half(g: &TsdfGrid) -> Vec<f32> {
    let d = g.resolution();
    let mut v = g.values().to_vec();
    for x in 0..d / 2 {
        for y in 0..d {
            for z in 0..d {
                v[(x * d + y) * d + z] = 2.5;
            }
        }
    }
    v
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
        .map(|g| TrainPair { input: wipe_half(g), target: g.values().to_vec() })
        .collect();

    // stage-1 R=8
    let model = PatchPriorModel::new(&cfg, 8);
    let mut params = Params::new();
    model.init_params(&mut params, 1);
    let mut by_cat = BTreeMap::new();
    by_cat.insert("a".to_string(), shapes[..4].iter().collect::<Vec<_>>());
    by_cat.insert("b".to_string(), shapes[4..].iter().collect::<Vec<_>>());
    let pool = init_priors(&by_cat, &PriorConfig { k_max: 2, ..PriorConfig::default() }, &mut params).unwrap();
    println!("priors: {}", pool.total_priors());

    let tc = TrainConfig { epochs: 5, lr_halve_epoch: 0, batch_size: 8, max_steps: 5, seed: 1, ..TrainConfig::default() };
    let t0 = Instant::now();
    let report = train_stage1(&model, &pairs, &pool, &mut params, &tc).unwrap();
    println!(
        "stage1 R=8: {} steps in {:.2}s ({:.0} ms/step), loss {:.4}",
        report.steps,
        t0.elapsed().as_secs_f64(),
        t0.elapsed().as_secs_f64() * 1000.0 / report.steps as f64,
        report.final_loss
    );

    // stage-2 step timing
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
    let pool_refs: Vec<&PriorPool> = pools.iter().collect();
    let t0 = Instant::now();
    let report = train_stage2(&mmodel, &pairs, &mut stage_params, &pool_refs, &mut s2, &tc, AttentionMode::Attention).unwrap();
    println!(
        "stage2: {} steps in {:.2}s ({:.0} ms/step), loss {:.4}",
        report.steps,
        t0.elapsed().as_secs_f64(),
        t0.elapsed().as_secs_f64() * 1000.0 / report.steps as f64,
        report.final_loss
    );
}
