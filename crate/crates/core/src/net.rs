//! The two network stages over the diff engine: single-resolution patch-prior
//! completion (attention from input patch features to prior patch features,
//! blending raw prior chunks), and multi-resolution feature fusion decoding
//! three frozen single-resolution models into one dense prediction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Bound, DiffError, Params, Scalar, Tape, Tensor, Val};
use crate::priors::PriorPool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Group,
    None,
}

/// Architecture hyperparameters shared by both stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Patch feature dimension.
    pub d: usize,
    /// Patch resolutions, largest first.
    pub resolutions: Vec<usize>,
    /// First encoder block width; widths double per block up to `d`.
    pub channels: usize,
    pub norm: NormKind,
    pub norm_groups: usize,
    pub k_max_priors: usize,
    /// Decoder deconv width.
    pub dec_width: usize,
    /// TSDF grid side.
    pub grid_resolution: usize,
    /// Truncation bound for the scaled-tanh output, voxel units.
    pub truncation: f32,
    /// Encoder conv kernel; stride is always 2, padding `(kernel - 2) / 2`.
    /// Kernel 2 gives block-local (stride-only) receptive fields.
    pub enc_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            resolutions: vec![32, 8, 4],
            channels: 16,
            norm: NormKind::Group,
            norm_groups: 8,
            k_max_priors: 3,
            dec_width: 128,
            grid_resolution: 32,
            truncation: 2.5,
            enc_kernel: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DiffError> {
        for &r in &self.resolutions {
            if !r.is_power_of_two() || r < 2 {
                return Err(DiffError::Shape {
                    op: "model_config",
                    detail: format!("patch resolution {r} must be a power of two >= 2"),
                });
            }
            if self.grid_resolution % r != 0 {
                return Err(DiffError::Shape {
                    op: "model_config",
                    detail: format!("grid {} not divisible by resolution {r}", self.grid_resolution),
                });
            }
        }
        if self.enc_kernel != 2 && self.enc_kernel != 4 {
            return Err(DiffError::Shape {
                op: "model_config",
                detail: format!("encoder kernel {} must be 2 or 4", self.enc_kernel),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// One {input encoder, prior encoder} pair for a single patch resolution.
/// Both encoders downsample by a factor of `r`, so a `D^3` volume becomes an
/// `(D/r)^3` grid of `d`-dimensional patch features.
#[derive(Debug, Clone)]
pub struct PatchPriorModel {
    pub r: usize,
    pub d: usize,
    norm: NormKind,
    norm_groups: usize,
    blocks: Vec<ConvBlock>,
}

impl PatchPriorModel {
    pub fn new(cfg: &ModelConfig, r: usize) -> Self {
        let n_blocks = r.trailing_zeros() as usize; // log2(r) stride-2 halvings
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut c_in = 1usize;
        for i in 0..n_blocks {
            let c_out = if i + 1 == n_blocks {
                cfg.d
            } else {
                (cfg.channels << i).min(cfg.d)
            };
            blocks.push(ConvBlock {
                c_in,
                c_out,
                kernel: cfg.enc_kernel,
                stride: 2,
                pad: (cfg.enc_kernel - 2) / 2,
            });
            c_in = c_out;
        }
        Self { r, d: cfg.d, norm: cfg.norm, norm_groups: cfg.norm_groups, blocks }
    }

    /// Patch grid side for a `d_grid` input.
    pub fn n(&self, d_grid: usize) -> usize {
        d_grid / self.r
    }

    fn block_names(prefix: &str, i: usize) -> (String, String, String, String) {
        (
            format!("{prefix}/b{i}/w"),
            format!("{prefix}/b{i}/b"),
            format!("{prefix}/b{i}/g"),
            format!("{prefix}/b{i}/be"),
        )
    }

    /// All parameter names of one encoder under `prefix`.
    pub fn encoder_param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.blocks.len() {
            let (w, b, g, be) = Self::block_names(prefix, i);
            names.push(w);
            names.push(b);
            if self.norm == NormKind::Group {
                names.push(g);
                names.push(be);
            }
        }
        names
    }

    pub fn input_encoder_prefix(&self) -> String {
        format!("s1/{}/enc_in", self.r)
    }

    pub fn prior_encoder_prefix(&self) -> String {
        format!("s1/{}/enc_pr", self.r)
    }

    /// Inserts freshly initialized encoder parameters (if missing).
    pub fn init_params(&self, params: &mut Params<f32>, seed: u64) {
        for prefix in [self.input_encoder_prefix(), self.prior_encoder_prefix()] {
            for (i, blk) in self.blocks.iter().enumerate() {
                let (w, b, g, be) = Self::block_names(&prefix, i);
                let k = blk.kernel;
                insert_conv_init(params, &w, &[blk.c_out, blk.c_in, k, k, k], blk.c_in * k * k * k, seed);
                insert_conv_init(params, &b, &[blk.c_out], blk.c_in * k * k * k, seed);
                if self.norm == NormKind::Group {
                    if !params.contains(&g) {
                        params.insert(&g, Tensor::full(&[blk.c_out], 1.0f32), true);
                    }
                    if !params.contains(&be) {
                        params.insert(&be, Tensor::zeros(&[blk.c_out]), true);
                    }
                }
            }
        }
    }

    /// Runs one encoder stack on `[B, 1, D, D, D]`, giving `[B, d, N, N, N]`.
    fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &mut Bound,
        params: &Params<T>,
        prefix: &str,
        input: Val,
    ) -> Result<Val, DiffError> {
        let mut x = input;
        for (i, blk) in self.blocks.iter().enumerate() {
            let (wn, bn, gn, ben) = Self::block_names(prefix, i);
            let w = bound.bind(tape, params, &wn)?;
            let b = bound.bind(tape, params, &bn)?;
            x = tape.conv3d(x, w, Some(b), blk.stride, blk.pad)?;
            if self.norm == NormKind::Group {
                let g = bound.bind(tape, params, &gn)?;
                let be = bound.bind(tape, params, &ben)?;
                let groups = largest_divisor_at_most(blk.c_out, self.norm_groups);
                x = tape.group_norm(x, g, be, groups)?;
            }
            x = tape.relu(x)?;
        }
        Ok(x)
    }
}

fn largest_divisor_at_most(c: usize, cap: usize) -> usize {
    (1..=cap.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

fn insert_conv_init(params: &mut Params<f32>, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
    if params.contains(name) {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
    let lim = 1.0 / (fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-lim..lim)).collect();
    params.insert(name, Tensor::new(shape.to_vec(), data).expect("shape/data"), true);
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// `[B, C, N, N, N]` feature volume to a `[B*N^3, C]` patch-feature matrix in
/// canonical patch order.
pub fn to_patch_matrix<T: Scalar>(tape: &mut Tape<T>, vol: Val) -> Result<Val, DiffError> {
    let shape = tape.value(vol).shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    let n3: usize = shape[2..].iter().product();
    let moved = tape.permute(vol, &[0, 2, 3, 4, 1])?;
    tape.reshape(moved, &[b * n3, c])
}

/// Inverse of [`to_patch_matrix`]: `[B*N^3, C]` back to `[B, C, N, N, N]`.
pub fn to_feature_volume<T: Scalar>(
    tape: &mut Tape<T>,
    mat: Val,
    b: usize,
    n: usize,
) -> Result<Val, DiffError> {
    let c = tape.value(mat).shape()[1];
    let x = tape.reshape(mat, &[b, n, n, n, c])?;
    tape.permute(x, &[0, 4, 1, 2, 3])
}

/// Encodes a batch of input scans into patch features `{Q_i}`:
/// `[B, 1, D, D, D] -> [B*N^3, d]`, canonical patch order.
pub fn encode_input<T: Scalar>(
    model: &PatchPriorModel,
    tape: &mut Tape<T>,
    bound: &mut Bound,
    params: &Params<T>,
    scan: Val,
) -> Result<Val, DiffError> {
    let shape = tape.value(scan).shape().to_vec();
    if shape.len() != 5 || shape[1] != 1 || shape[2] % model.r != 0 {
        return Err(DiffError::Shape {
            op: "encode_input",
            detail: format!("want [B,1,D,D,D] with D divisible by {}, got {shape:?}", model.r),
        });
    }
    let vol = model.encode(tape, bound, params, &model.input_encoder_prefix(), scan)?;
    to_patch_matrix(tape, vol)
}

/// Encodes every prior in the pool into the key set `K = {K^c_i}`:
/// `[M, d]` with rows in category-major, prior-index, patch-index order —
/// the same order as [`crate::priors::chunk_values`].
pub fn encode_priors<T: Scalar>(
    model: &PatchPriorModel,
    tape: &mut Tape<T>,
    bound: &mut Bound,
    params: &Params<T>,
    pool: &PriorPool,
) -> Result<Val, DiffError> {
    if pool.total_priors() == 0 {
        return Err(DiffError::EmptyInput { op: "encode_priors" });
    }
    let d_grid = pool.resolution();
    // batch all priors through the prior encoder at once
    let mut prior_vals = Vec::new();
    for name in pool.param_names() {
        let leaf = bound.bind(tape, params, &name)?;
        prior_vals.push(tape.reshape(leaf, &[1, 1, d_grid, d_grid, d_grid])?);
    }
    let batch = if prior_vals.len() == 1 {
        prior_vals[0]
    } else {
        tape.concat(&prior_vals, 0)?
    };
    let vol = model.encode(tape, bound, params, &model.prior_encoder_prefix(), batch)?;
    to_patch_matrix(tape, vol)
}

/// Cross-attention weights from patch features to prior keys:
/// `softmax(Q . K^T / (d/2))`, rows summing to 1. The scale is literally
/// `d/2`, as specified, not `sqrt(d)`. With `stable` the softmax lanes are
/// bit-identical under any permutation of the key axis (the score inner
/// product runs over the feature axis, which never permutes, so plain
/// matmul is already permutation-safe there).
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Val,
    k: Val,
    d: usize,
    stable: bool,
) -> Result<Val, DiffError> {
    if tape.value(k).shape()[0] == 0 {
        return Err(DiffError::EmptyInput { op: "attention" });
    }
    let kt = tape.permute(k, &[1, 0])?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::from_f64(2.0 / d as f64))?;
    if stable {
        tape.softmax_stable(scaled, 1)
    } else {
        tape.softmax(scaled, 1)
    }
}

/// Blends prior chunks with attention weights and reassembles the volume:
/// `weights [B*N^3, M] x values [M, R^3] -> [B, 1, D, D, D]`.
pub fn reconstruct_patches<T: Scalar>(
    tape: &mut Tape<T>,
    weights: Val,
    values: Val,
    batch: usize,
    n: usize,
    r: usize,
) -> Result<Val, DiffError> {
    // stable blend: category permutations stay bit-identical and one-hot
    // weights reproduce chunks verbatim
    let patches = tape.matmul_stable(weights, values)?;
    let split = tape.reshape(patches, &[batch, n, n, n, r, r, r])?;
    let interleaved = tape.permute(split, &[0, 1, 4, 2, 5, 3, 6])?;
    let d = n * r;
    tape.reshape(interleaved, &[batch, 1, d, d, d])
}

/// Chunks every prior into raw `R^3` patch volumes on the tape (so gradients
/// reach the priors), in the same row order as [`encode_priors`].
pub fn chunk_values_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &mut Bound,
    params: &Params<T>,
    pool: &PriorPool,
    r: usize,
) -> Result<Val, DiffError> {
    let d = pool.resolution();
    let n = d / r;
    let mut rows = Vec::new();
    for name in pool.param_names() {
        let leaf = bound.bind(tape, params, &name)?;
        let split = tape.reshape(leaf, &[n, r, n, r, n, r])?;
        let grouped = tape.permute(split, &[0, 2, 4, 1, 3, 5])?;
        rows.push(tape.reshape(grouped, &[n * n * n, r * r * r])?);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat(&rows, 0)
    }
}

/// Everything stage-1 needs for one resolution.
pub struct Stage1Context<'a, T: Scalar> {
    pub model: &'a PatchPriorModel,
    pub params: &'a Params<T>,
    pub pool: &'a PriorPool,
}

/// Full single-resolution forward pass: encode the scan and the priors,
/// attend, blend raw prior chunks, recompose. Differentiable end to end,
/// including through the prior tensors.
pub fn stage1_forward<T: Scalar>(
    ctx: &Stage1Context<'_, T>,
    tape: &mut Tape<T>,
    bound: &mut Bound,
    scan: Val,
) -> Result<Val, DiffError> {
    let batch = tape.value(scan).shape()[0];
    let d_grid = tape.value(scan).shape()[2];
    let n = ctx.model.n(d_grid);
    let q = encode_input(ctx.model, tape, bound, ctx.params, scan)?;
    let k = encode_priors(ctx.model, tape, bound, ctx.params, ctx.pool)?;
    let a = attention(tape, q, k, ctx.model.d, true)?;
    let v = chunk_values_on_tape(tape, bound, ctx.params, ctx.pool, ctx.model.r)?;
    reconstruct_patches(tape, a, v, batch, n, ctx.model.r)
}

/// How stage-2 associates input patches with prior features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Cross-attention per the model definition.
    Attention,
    /// Ablation: uniform weights (mean over prior features).
    UniformMean,
}

/// The multi-resolution fusion model: three frozen single-resolution stages,
/// per-resolution post-attention projections, and an upsample/concat decoder
/// chain ending in a scaled-tanh TSDF regression.
pub struct MultiResModel {
    pub cfg: ModelConfig,
    pub stages: Vec<PatchPriorModel>,
}

impl MultiResModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self, DiffError> {
        cfg.validate()?;
        let mut resolutions = cfg.resolutions.clone();
        resolutions.sort_unstable_by(|a, b| b.cmp(a)); // largest patch first
        let stages = resolutions.iter().map(|&r| PatchPriorModel::new(cfg, r)).collect();
        Ok(Self { cfg: cfg.clone(), stages })
    }

    /// Patch-grid sides per stage, ascending (coarsest stage first).
    fn stage_sides(&self) -> Vec<usize> {
        self.stages.iter().map(|m| self.cfg.grid_resolution / m.r).collect()
    }

    pub fn post_names(r: usize) -> (String, String) {
        (format!("s2/post/{r}/w"), format!("s2/post/{r}/b"))
    }

    pub fn dec_names(i: usize) -> (String, String) {
        (format!("s2/dec/{i}/w"), format!("s2/dec/{i}/b"))
    }

    /// Initializes the stage-2 parameters (post projections, decoder chain,
    /// final conv) in `params`.
    pub fn init_stage2_params(&self, params: &mut Params<f32>, seed: u64) {
        let d2 = 2 * self.cfg.d;
        let w_dec = self.cfg.dec_width;
        for m in &self.stages {
            let (wn, bn) = Self::post_names(m.r);
            insert_conv_init(params, &wn, &[d2, d2, 1, 1, 1], d2, seed);
            insert_conv_init(params, &bn, &[d2], d2, seed);
        }
        let sides = self.stage_sides();
        let mut c_in = d2;
        for i in 1..sides.len() {
            let f = sides[i] / sides[i - 1];
            let (wn, bn) = Self::dec_names(i - 1);
            insert_conv_init(params, &wn, &[c_in, w_dec, f, f, f], c_in * f * f * f, seed);
            insert_conv_init(params, &bn, &[w_dec], c_in * f * f * f, seed);
            c_in = w_dec + d2; // deconv output concatenated with that stage's features
        }
        let f_last = self.cfg.grid_resolution / sides[sides.len() - 1];
        let (wn, bn) = Self::dec_names(sides.len() - 1);
        insert_conv_init(params, &wn, &[c_in, w_dec, f_last, f_last, f_last], c_in * f_last.pow(3), seed);
        insert_conv_init(params, &bn, &[w_dec], c_in * f_last.pow(3), seed);
        insert_conv_init(params, "s2/final/w", &[1, w_dec, 3, 3, 3], w_dec * 27, seed);
        insert_conv_init(params, "s2/final/b", &[1], w_dec * 27, seed);
    }

    pub fn stage2_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for m in &self.stages {
            let (w, b) = Self::post_names(m.r);
            names.push(w);
            names.push(b);
        }
        for i in 0..self.stage_sides().len() {
            let (w, b) = Self::dec_names(i);
            names.push(w);
            names.push(b);
        }
        names.push("s2/final/w".into());
        names.push("s2/final/b".into());
        names
    }
}

/// Per-resolution inputs to the stage-2 forward pass.
pub struct Stage2Inputs<'a, T: Scalar> {
    /// Frozen stage-1 parameter sets, aligned with `MultiResModel::stages`.
    pub stage_params: Vec<&'a Params<T>>,
    /// Prior pools, aligned with `MultiResModel::stages`.
    pub pools: Vec<&'a PriorPool>,
    /// Stage-2 trainable parameters.
    pub s2_params: &'a Params<T>,
}

/// Per-stage bindings (separate parameter namespaces stay separate).
pub struct Stage2Bounds {
    pub stage_bounds: Vec<Bound>,
    pub s2_bound: Bound,
}

impl Stage2Bounds {
    pub fn new(n_stages: usize) -> Self {
        Self { stage_bounds: (0..n_stages).map(|_| Bound::new()).collect(), s2_bound: Bound::new() }
    }
}

pub struct Stage2Output {
    /// `[B, 1, D, D, D]` TSDF prediction bounded to the truncation.
    pub pred: Val,
    /// Per-resolution fused feature volumes `[B, 2d, N_R, N_R, N_R]`,
    /// aligned with the model's stages (largest patch first).
    pub features: Vec<Val>,
}

/// Precomputed patch features for one resolution (from the frozen encoders),
/// used to skip re-encoding when nothing upstream of attention can change.
pub struct CachedStageFeatures<T: Scalar> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
}

/// Multi-resolution forward pass from raw scans.
pub fn stage2_forward<T: Scalar>(
    model: &MultiResModel,
    inputs: &Stage2Inputs<'_, T>,
    bounds: &mut Stage2Bounds,
    tape: &mut Tape<T>,
    scan: Val,
    mode: AttentionMode,
) -> Result<Stage2Output, DiffError> {
    let batch = tape.value(scan).shape()[0];
    let mut features = Vec::with_capacity(model.stages.len());
    for (i, stage) in model.stages.iter().enumerate() {
        let q = encode_input(stage, tape, &mut bounds.stage_bounds[i], inputs.stage_params[i], scan)?;
        let k = encode_priors(stage, tape, &mut bounds.stage_bounds[i], inputs.stage_params[i], inputs.pools[i])?;
        features.push(fuse_stage_features(model, tape, &mut bounds.s2_bound, inputs.s2_params, stage, q, k, batch, mode)?);
    }
    decode_features(model, tape, &mut bounds.s2_bound, inputs.s2_params, &features, batch)
}

/// Multi-resolution forward pass with the input encoders on the tape but the
/// prior keys supplied as constants (fine-tuning trains only the input
/// encoders, and the keys depend on nothing trainable there).
pub fn stage2_forward_keys_cached<T: Scalar>(
    model: &MultiResModel,
    inputs: &Stage2Inputs<'_, T>,
    bounds: &mut Stage2Bounds,
    tape: &mut Tape<T>,
    scan: Val,
    keys: &[Tensor<T>],
    mode: AttentionMode,
) -> Result<Stage2Output, DiffError> {
    let batch = tape.value(scan).shape()[0];
    let mut features = Vec::with_capacity(model.stages.len());
    for (i, stage) in model.stages.iter().enumerate() {
        let q = encode_input(stage, tape, &mut bounds.stage_bounds[i], inputs.stage_params[i], scan)?;
        let k = tape.constant(keys[i].clone())?;
        features.push(fuse_stage_features(model, tape, &mut bounds.s2_bound, inputs.s2_params, stage, q, k, batch, mode)?);
    }
    decode_features(model, tape, &mut bounds.s2_bound, inputs.s2_params, &features, batch)
}

/// Multi-resolution forward pass from cached (frozen-encoder) features.
pub fn stage2_forward_cached<T: Scalar>(
    model: &MultiResModel,
    s2_params: &Params<T>,
    s2_bound: &mut Bound,
    tape: &mut Tape<T>,
    cached: &[CachedStageFeatures<T>],
    batch: usize,
    mode: AttentionMode,
) -> Result<Stage2Output, DiffError> {
    let mut features = Vec::with_capacity(model.stages.len());
    for (i, stage) in model.stages.iter().enumerate() {
        let q = tape.constant(cached[i].q.clone())?;
        let k = tape.constant(cached[i].k.clone())?;
        features.push(fuse_stage_features(model, tape, s2_bound, s2_params, stage, q, k, batch, mode)?);
    }
    decode_features(model, tape, s2_bound, s2_params, &features, batch)
}

/// One resolution of Eq.-3-style fusion: attend from input patches to prior
/// features (the prior features themselves are the values), concatenate with
/// the input patches, and post-process with a 1x1x1 conv + relu.
#[allow(clippy::too_many_arguments)]
fn fuse_stage_features<T: Scalar>(
    model: &MultiResModel,
    tape: &mut Tape<T>,
    s2_bound: &mut Bound,
    s2_params: &Params<T>,
    stage: &PatchPriorModel,
    q: Val,
    k: Val,
    batch: usize,
    mode: AttentionMode,
) -> Result<Val, DiffError> {
    let attended = match mode {
        AttentionMode::Attention => {
            let a = attention(tape, q, k, stage.d, false)?;
            tape.matmul(a, k)?
        }
        AttentionMode::UniformMean => {
            let rows = tape.value(q).shape()[0];
            let m = tape.value(k).shape()[0];
            if m == 0 {
                return Err(DiffError::EmptyInput { op: "attention" });
            }
            let uniform = tape.constant(Tensor::full(&[rows, m], T::from_f64(1.0 / m as f64)))?;
            tape.matmul(uniform, k)?
        }
    };
    let o = tape.concat(&[q, attended], 1)?;
    let n = model.cfg.grid_resolution / stage.r;
    let vol = to_feature_volume(tape, o, batch, n)?;
    let (wn, bn) = MultiResModel::post_names(stage.r);
    let w = s2_bound.bind(tape, s2_params, &wn)?;
    let b = s2_bound.bind(tape, s2_params, &bn)?;
    let projected = tape.conv3d(vol, w, Some(b), 1, 0)?;
    tape.relu(projected)
}

/// Recursive upsample/concat decoding from the coarsest feature volume to the
/// full-resolution TSDF, bounded by a scaled tanh.
fn decode_features<T: Scalar>(
    model: &MultiResModel,
    tape: &mut Tape<T>,
    s2_bound: &mut Bound,
    s2_params: &Params<T>,
    features: &[Val],
    _batch: usize,
) -> Result<Stage2Output, DiffError> {
    let sides = model.stage_sides();
    let mut x = features[0];
    for i in 1..features.len() {
        let f = sides[i] / sides[i - 1];
        let (wn, bn) = MultiResModel::dec_names(i - 1);
        let w = s2_bound.bind(tape, s2_params, &wn)?;
        let b = s2_bound.bind(tape, s2_params, &bn)?;
        let up = tape.conv3d_transpose(x, w, Some(b), f)?;
        let up = tape.relu(up)?;
        x = tape.concat(&[up, features[i]], 1)?;
    }
    let f_last = model.cfg.grid_resolution / sides[sides.len() - 1];
    let (wn, bn) = MultiResModel::dec_names(sides.len() - 1);
    let w = s2_bound.bind(tape, s2_params, &wn)?;
    let b = s2_bound.bind(tape, s2_params, &bn)?;
    let up = tape.conv3d_transpose(x, w, Some(b), f_last)?;
    let up = tape.relu(up)?;
    let wf = s2_bound.bind(tape, s2_params, "s2/final/w")?;
    let bf = s2_bound.bind(tape, s2_params, "s2/final/b")?;
    let raw = tape.conv3d(up, wf, Some(bf), 1, 1)?;
    let squashed = tape.tanh(raw)?;
    let pred = tape.scale(squashed, T::from_f64(model.cfg.truncation as f64))?;
    Ok(Stage2Output { pred, features: features.to_vec() })
}

/// Computes the frozen-encoder features for one scan outside any training
/// tape (stage-2 training and evaluation reuse them across steps).
pub fn compute_stage_features(
    model: &MultiResModel,
    stage_params: &[&Params<f32>],
    pools: &[&PriorPool],
    scan_values: &[f32],
    d_grid: usize,
) -> Result<Vec<CachedStageFeatures<f32>>, DiffError> {
    let mut out = Vec::with_capacity(model.stages.len());
    for (i, stage) in model.stages.iter().enumerate() {
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        let scan = tape.leaf(
            Tensor::new(vec![1, 1, d_grid, d_grid, d_grid], scan_values.to_vec())?,
            false,
        )?;
        let q = encode_input(stage, &mut tape, &mut bound, stage_params[i], scan)?;
        let k = encode_priors(stage, &mut tape, &mut bound, stage_params[i], pools[i])?;
        out.push(CachedStageFeatures { q: tape.value(q).clone(), k: tape.value(k).clone() });
    }
    Ok(out)
}
