//! Loss, optimizer schedule, and the three training protocols: per-resolution
//! prior learning, multi-resolution fusion with everything pre-trained
//! frozen, and input-encoder-only fine-tuning on corrupted scans.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{Bound, DiffError, Gradients, Params, Tape, Tensor, Val};
use crate::grid::{ClampPolicy, TsdfGrid};
use crate::net::{
    stage1_forward, stage2_forward_cached, AttentionMode, CachedStageFeatures, MultiResModel,
    PatchPriorModel, Stage1Context, Stage2Bounds, Stage2Inputs,
};
use crate::priors::PriorPool;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {0}; aborting")]
    Diverged(usize),
    #[error("no training pairs")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("freezing audit failed at step {step}: {names:?} changed")]
    FrozenChanged { step: usize, names: Vec<String> },
    #[error("gradient reached frozen parameter {0}")]
    FrozenGradient(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sign-weighted loss weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_occ: f32,
    pub w_empty: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w_occ: 3.0, w_empty: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    S1_32,
    S1_8,
    S1_4,
    S2,
    Finetune,
}

/// Optimization schedule. The learning rate is `lr0` before
/// `lr_halve_epoch` and exactly `lr0 / 2` from that epoch on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f32,
    pub epochs: usize,
    pub lr_halve_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps regardless of epochs (0 = no cap).
    pub max_steps: usize,
    /// Use the sign-weighted loss (plain L1 when false).
    pub weighted_loss: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            epochs: 80,
            lr_halve_epoch: 50,
            batch_size: 32,
            seed: 0,
            max_steps: 0,
            weighted_loss: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr0 <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig("lr0, epochs, batch_size must be positive".into()));
        }
        if self.lr_halve_epoch >= self.epochs {
            return Err(TrainError::BadConfig(format!(
                "lr_halve_epoch {} must be < epochs {}",
                self.lr_halve_epoch, self.epochs
            )));
        }
        Ok(())
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f32 {
        if epoch < self.lr_halve_epoch {
            self.lr0
        } else {
            self.lr0 * 0.5
        }
    }
}

/// One (partial scan, ground truth) training pair, flattened values.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

/// Builds sign masks with the same rule as `grid::sign_partition` (zero is
/// positive), over any number of stacked grids.
fn sign_masks(pred: &[f32], target: &[f32]) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let n = pred.len();
    let shape = [n];
    let mut occ = Tensor::zeros(&shape);
    let mut empty = Tensor::zeros(&shape);
    let mut correct = Tensor::zeros(&shape);
    for i in 0..n {
        let p_neg = pred[i] < 0.0;
        let g_neg = target[i] < 0.0;
        match (g_neg, p_neg) {
            (false, true) => occ.data_mut()[i] = 1.0,
            (true, false) => empty.data_mut()[i] = 1.0,
            _ => correct.data_mut()[i] = 1.0,
        }
    }
    (occ, empty, correct)
}

/// Per-term values of one weighted-L1 evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f32,
    pub occ: f32,
    pub empty: f32,
    pub correct: f32,
}

/// Sign-weighted L1 of Eq.-5 form:
/// `w_occ * l1(occ-wrong) + w_empty * l1(empty-wrong) + l1(correct)`,
/// each term a mean over its own mask, empty masks contributing 0. Masks come
/// from the current forward values and are constants of the pass (gradients
/// do not flow through the sign test).
pub fn weighted_l1(
    tape: &mut Tape<f32>,
    pred: Val,
    target: &[f32],
    cfg: &LossConfig,
) -> Result<(Val, LossParts), TrainError> {
    let pred_shape = tape.value(pred).shape().to_vec();
    let n: usize = pred_shape.iter().product();
    if n != target.len() {
        return Err(TrainError::Diff(DiffError::Shape {
            op: "weighted_l1",
            detail: format!("pred {pred_shape:?} vs target len {}", target.len()),
        }));
    }
    let flat = tape.reshape(pred, &[n])?;
    let (occ, empty, correct) = sign_masks(tape.value(flat).data(), target);
    let target_t = Tensor::new(vec![n], target.to_vec()).map_err(TrainError::Diff)?;

    let l_occ = tape.l1_masked(flat, &target_t, &occ)?;
    let l_empty = tape.l1_masked(flat, &target_t, &empty)?;
    let l_correct = tape.l1_masked(flat, &target_t, &correct)?;
    let parts = LossParts {
        total: 0.0,
        occ: tape.value(l_occ).item().map_err(TrainError::Diff)?,
        empty: tape.value(l_empty).item().map_err(TrainError::Diff)?,
        correct: tape.value(l_correct).item().map_err(TrainError::Diff)?,
    };
    let w_occ = tape.scale(l_occ, cfg.w_occ)?;
    let w_empty = tape.scale(l_empty, cfg.w_empty)?;
    let partial = tape.add(w_occ, w_empty)?;
    let total = tape.add(partial, l_correct)?;
    let total_v = tape.value(total).item().map_err(TrainError::Diff)?;
    Ok((total, LossParts { total: total_v, ..parts }))
}

/// Adam with bias correction; state is keyed by parameter name so update
/// order is independent of graph construction order.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update to every trainable bound parameter that received a
    /// gradient. Errors if a gradient reached a frozen parameter.
    pub fn step(
        &mut self,
        params: &mut Params<f32>,
        bound: &Bound,
        grads: &Gradients<f32>,
        lr: f32,
    ) -> Result<(), TrainError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, &val) in bound.iter() {
            let Some(g) = grads.get(val) else { continue };
            let param = params.get(name)?;
            if !param.trainable {
                return Err(TrainError::FrozenGradient(name.clone()));
            }
            let mut value = param.value.clone();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; value.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; value.len()]);
            for ((p, &gi), (mi, vi)) in
                value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            params.set_value(name, value)?;
        }
        Ok(())
    }
}

/// One row of the loss-curve CSV.
#[derive(Debug, Clone)]
pub struct CurveRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
    pub loss_occ: f32,
    pub loss_empty: f32,
    pub loss_correct: f32,
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<(), TrainError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,step,lr,loss,loss_occ,loss_empty,loss_correct")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch, r.step, r.lr, r.loss, r.loss_occ, r.loss_empty, r.loss_correct
        )?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f32,
    pub curve: Vec<CurveRow>,
}

fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn stack_batch(pairs: &[TrainPair], idx: &[usize], d: usize) -> (Tensor<f32>, Vec<f32>) {
    let vol = d * d * d;
    let mut input = Vec::with_capacity(idx.len() * vol);
    let mut target = Vec::with_capacity(idx.len() * vol);
    for &i in idx {
        input.extend_from_slice(&pairs[i].input);
        target.extend_from_slice(&pairs[i].target);
    }
    let t = Tensor::new(vec![idx.len(), 1, d, d, d], input).expect("batch shape");
    (t, target)
}

fn clamp_priors(pool: &PriorPool, params: &mut Params<f32>) {
    let t = pool.truncation();
    for name in pool.param_names() {
        if let Ok(p) = params.get(&name) {
            let mut v = p.value.clone();
            for x in v.data_mut() {
                *x = x.clamp(-t, t);
            }
            let _ = params.set_value(&name, v);
        }
    }
}

fn loss_of(
    tape: &mut Tape<f32>,
    pred: Val,
    target: &[f32],
    cfg: &TrainConfig,
) -> Result<(Val, LossParts), TrainError> {
    if cfg.weighted_loss {
        weighted_l1(tape, pred, target, &cfg.loss)
    } else {
        weighted_l1(tape, pred, target, &LossConfig { w_occ: 1.0, w_empty: 1.0 })
    }
}

/// Stage 1: trains one single-resolution patch-prior model, its prior
/// encoder, and the prior tensors jointly. Deterministic given the seed.
pub fn train_stage1(
    model: &PatchPriorModel,
    pairs: &[TrainPair],
    pool: &PriorPool,
    params: &mut Params<f32>,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let d = pool.resolution();
    let mut adam = Adam::new();
    let mut curve = Vec::new();
    let mut step = 0usize;
    let mut final_loss = f32::INFINITY;
    'training: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        for batch in batches(pairs.len(), cfg.batch_size, cfg.seed, epoch) {
            let (input, target) = stack_batch(pairs, &batch, d);
            let mut tape = Tape::new();
            let mut bound = Bound::new();
            let scan = tape.leaf(input, false)?;
            let ctx = Stage1Context { model, params, pool };
            let pred = stage1_forward(&ctx, &mut tape, &mut bound, scan)?;
            let (loss, parts) = loss_of(&mut tape, pred, &target, cfg)?;
            if !parts.total.is_finite() {
                return Err(TrainError::Diverged(step));
            }
            let grads = tape.backward(loss)?;
            adam.step(params, &bound, &grads, lr)?;
            clamp_priors(pool, params);
            step += 1;
            final_loss = parts.total;
            curve.push(CurveRow {
                epoch,
                step,
                lr,
                loss: parts.total,
                loss_occ: parts.occ,
                loss_empty: parts.empty,
                loss_correct: parts.correct,
            });
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'training;
            }
        }
    }
    Ok(TrainReport { steps: step, final_loss, curve })
}

/// Precomputed frozen-encoder features for every training pair.
pub fn cache_stage2_features(
    model: &MultiResModel,
    stage_params: &[&Params<f32>],
    pools: &[&PriorPool],
    pairs: &[TrainPair],
    d: usize,
) -> Result<Vec<Vec<CachedStageFeatures<f32>>>, TrainError> {
    pairs
        .iter()
        .map(|p| {
            crate::net::compute_stage_features(model, stage_params, pools, &p.input, d)
                .map_err(TrainError::Diff)
        })
        .collect()
}

/// Stage 2: trains only the fusion parameters (post-attention projections,
/// decoder chain, final conv) on top of three frozen stage-1 models. The
/// freezing invariant is audited on every step by bit-comparison.
pub fn train_stage2(
    model: &MultiResModel,
    pairs: &[TrainPair],
    stage_params: &mut [Params<f32>],
    pools: &[&PriorPool],
    s2_params: &mut Params<f32>,
    cfg: &TrainConfig,
    mode: AttentionMode,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for sp in stage_params.iter_mut() {
        sp.freeze_all();
    }
    let frozen_snapshot: Vec<_> = stage_params.iter().map(|sp| sp.snapshot(|_| true)).collect();

    let d = model.cfg.grid_resolution;
    let stage_refs: Vec<&Params<f32>> = stage_params.iter().collect();
    let cached = cache_stage2_features(model, &stage_refs, pools, pairs, d)?;

    let mut adam = Adam::new();
    let mut curve = Vec::new();
    let mut step = 0usize;
    let mut final_loss = f32::INFINITY;
    'training: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        for batch in batches(pairs.len(), cfg.batch_size, cfg.seed, epoch) {
            // batch via concatenated cached features
            let feats: Vec<CachedStageFeatures<f32>> = (0..model.stages.len())
                .map(|si| stack_cached(&cached, &batch, si))
                .collect();
            let (_, target) = stack_batch(pairs, &batch, d);
            let mut tape = Tape::new();
            let mut s2_bound = Bound::new();
            let out = stage2_forward_cached(
                model,
                s2_params,
                &mut s2_bound,
                &mut tape,
                &feats,
                batch.len(),
                mode,
            )?;
            let (loss, parts) = loss_of(&mut tape, out.pred, &target, cfg)?;
            if !parts.total.is_finite() {
                return Err(TrainError::Diverged(step));
            }
            let grads = tape.backward(loss)?;
            adam.step(s2_params, &s2_bound, &grads, lr)?;
            step += 1;
            final_loss = parts.total;

            // per-step freezing audit
            for (sp, snap) in stage_params.iter().zip(&frozen_snapshot) {
                let changed = sp.diff_from_snapshot(snap);
                if !changed.is_empty() {
                    return Err(TrainError::FrozenChanged { step, names: changed });
                }
            }
            curve.push(CurveRow {
                epoch,
                step,
                lr,
                loss: parts.total,
                loss_occ: parts.occ,
                loss_empty: parts.empty,
                loss_correct: parts.correct,
            });
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'training;
            }
        }
    }
    Ok(TrainReport { steps: step, final_loss, curve })
}

fn stack_cached(
    cached: &[Vec<CachedStageFeatures<f32>>],
    batch: &[usize],
    stage: usize,
) -> CachedStageFeatures<f32> {
    let k = cached[batch[0]][stage].k.clone();
    let d = cached[batch[0]][stage].q.shape()[1];
    let mut q_data = Vec::new();
    for &i in batch {
        q_data.extend_from_slice(cached[i][stage].q.data());
    }
    let rows = q_data.len() / d;
    CachedStageFeatures { q: Tensor::new(vec![rows, d], q_data).expect("stacked q"), k }
}

/// Fine-tuning: only the three input encoders receive updates; the prior
/// encoders, priors, and all stage-2 parameters stay bit-frozen.
pub fn finetune_input_encoders(
    model: &MultiResModel,
    pairs: &[TrainPair],
    stage_params: &mut [Params<f32>],
    pools: &[&PriorPool],
    s2_params: &mut Params<f32>,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for sp in stage_params.iter_mut() {
        sp.freeze_all();
        sp.set_trainable_where(|n| n.contains("/enc_in/"), true);
    }
    s2_params.freeze_all();
    let frozen_snapshot: Vec<_> = stage_params
        .iter()
        .map(|sp| sp.snapshot(|n| !n.contains("/enc_in/")))
        .collect();
    let s2_snapshot = s2_params.snapshot(|_| true);

    // prior keys depend only on frozen parameters: cache them once
    let d = model.cfg.grid_resolution;
    let stage_refs: Vec<&Params<f32>> = stage_params.iter().collect();
    let keys: Vec<Tensor<f32>> = {
        let probe = crate::net::compute_stage_features(
            model,
            &stage_refs,
            pools,
            &pairs[0].input,
            d,
        )?;
        probe.into_iter().map(|f| f.k).collect()
    };

    let mut adams: Vec<Adam> = stage_params.iter().map(|_| Adam::new()).collect();
    let mut curve = Vec::new();
    let mut step = 0usize;
    let mut final_loss = f32::INFINITY;
    'training: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        for batch in batches(pairs.len(), cfg.batch_size, cfg.seed, epoch) {
            let (input, target) = stack_batch(pairs, &batch, d);
            let mut tape = Tape::new();
            let mut bounds = Stage2Bounds::new(model.stages.len());
            let scan = tape.leaf(input, false)?;
            let inputs = Stage2Inputs {
                stage_params: stage_params.iter().collect(),
                pools: pools.to_vec(),
                s2_params,
            };
            let out = crate::net::stage2_forward_keys_cached(
                model,
                &inputs,
                &mut bounds,
                &mut tape,
                scan,
                &keys,
                AttentionMode::Attention,
            )?;
            let (loss, parts) = loss_of(&mut tape, out.pred, &target, cfg)?;
            if !parts.total.is_finite() {
                return Err(TrainError::Diverged(step));
            }
            let grads = tape.backward(loss)?;
            drop(inputs);
            for (i, sp) in stage_params.iter_mut().enumerate() {
                adams[i].step(sp, &bounds.stage_bounds[i], &grads, lr)?;
            }
            step += 1;
            final_loss = parts.total;

            for (sp, snap) in stage_params.iter().zip(&frozen_snapshot) {
                let changed = sp.diff_from_snapshot(snap);
                if !changed.is_empty() {
                    return Err(TrainError::FrozenChanged { step, names: changed });
                }
            }
            let s2_changed = s2_params.diff_from_snapshot(&s2_snapshot);
            if !s2_changed.is_empty() {
                return Err(TrainError::FrozenChanged { step, names: s2_changed });
            }
            curve.push(CurveRow {
                epoch,
                step,
                lr,
                loss: parts.total,
                loss_occ: parts.occ,
                loss_empty: parts.empty,
                loss_correct: parts.correct,
            });
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'training;
            }
        }
    }
    Ok(TrainReport { steps: step, final_loss, curve })
}

/// Desk-scale stand-in for real-scan degradation: sparsify the observed
/// region (a random sub-box of the band reverts to +truncation) and add a
/// couple of small clutter blobs of spurious occupancy. Deterministic per
/// seed.
pub fn corrupt_scan(grid: &TsdfGrid, seed: u64) -> TsdfGrid {
    let d = grid.resolution();
    let t = grid.truncation();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = grid.values().to_vec();

    // view sparsification: wipe a random box back to "unobserved"
    let side = d / 3;
    let ox = rng.gen_range(0..d - side);
    let oy = rng.gen_range(0..d - side);
    let oz = rng.gen_range(0..d - side);
    for x in ox..ox + side {
        for y in oy..oy + side {
            for z in oz..oz + side {
                values[(x * d + y) * d + z] = t;
            }
        }
    }

    // clutter blobs: spheres of spurious occupancy
    for _ in 0..2 {
        let c = [
            rng.gen_range(2..d - 2) as f32,
            rng.gen_range(2..d - 2) as f32,
            rng.gen_range(2..d - 2) as f32,
        ];
        let radius = rng.gen_range(1.5f32..2.5);
        for x in 0..d {
            for y in 0..d {
                for z in 0..d {
                    let dist = ((x as f32 - c[0]).powi(2)
                        + (y as f32 - c[1]).powi(2)
                        + (z as f32 - c[2]).powi(2))
                    .sqrt()
                        - radius;
                    let idx = (x * d + y) * d + z;
                    values[idx] = values[idx].min(dist.clamp(-t, t));
                }
            }
        }
    }
    TsdfGrid::from_values(d, t, grid.voxel_size(), values, ClampPolicy::Clamp)
        .expect("corrupted grid stays valid")
}
