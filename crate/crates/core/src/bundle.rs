//! On-disk model bundles: the per-resolution stage-1 checkpoints, the prior
//! pools, and the stage-2 fusion parameters, with inference entry points.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{Bound, DiffError, Params, Tape, Tensor};
use crate::grid::{ClampPolicy, GridError, TsdfGrid};
use crate::net::{
    stage1_forward, stage2_forward, AttentionMode, ModelConfig, MultiResModel, PatchPriorModel,
    Stage1Context, Stage2Bounds, Stage2Inputs,
};
use crate::priors::{PoolLayout, PriorPool};

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("missing checkpoint file {0}")]
    MissingCheckpoint(String),
    #[error("bundle metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One trained single-resolution model: encoders plus its prior pool.
pub struct Stage1Bundle {
    pub cfg: ModelConfig,
    pub r: usize,
    pub params: Params<f32>,
    pub pool: PriorPool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stage1Meta {
    model: ModelConfig,
    r: usize,
    pool: PoolLayout,
}

impl Stage1Bundle {
    pub fn save(&self, dir: &Path) -> Result<(), BundleError> {
        fs::create_dir_all(dir)?;
        let meta = Stage1Meta { model: self.cfg.clone(), r: self.r, pool: self.pool.layout() };
        fs::write(
            dir.join(format!("s1_{}.json", self.r)),
            serde_json::to_string_pretty(&meta).map_err(|e| BundleError::Metadata(e.to_string()))? + "\n",
        )?;
        self.params.save(&dir.join(format!("s1_{}.ckpt", self.r)))?;
        Ok(())
    }

    pub fn load(dir: &Path, r: usize) -> Result<Self, BundleError> {
        let meta_path = dir.join(format!("s1_{r}.json"));
        if !meta_path.exists() {
            return Err(BundleError::MissingCheckpoint(meta_path.display().to_string()));
        }
        let meta: Stage1Meta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
            .map_err(|e| BundleError::Metadata(e.to_string()))?;
        let ckpt_path = dir.join(format!("s1_{r}.ckpt"));
        if !ckpt_path.exists() {
            return Err(BundleError::MissingCheckpoint(ckpt_path.display().to_string()));
        }
        let params = Params::load(&ckpt_path, true)?;
        Ok(Self { cfg: meta.model, r, params, pool: PriorPool::from_layout(&meta.pool) })
    }

    /// Single-resolution completion: the recomposed attention blend of prior
    /// chunks.
    pub fn predict(&self, partial: &TsdfGrid) -> Result<TsdfGrid, BundleError> {
        let model = PatchPriorModel::new(&self.cfg, self.r);
        let d = partial.resolution();
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        let scan =
            tape.leaf(Tensor::new(vec![1, 1, d, d, d], partial.values().to_vec())?, false)?;
        let ctx = Stage1Context { model: &model, params: &self.params, pool: &self.pool };
        let pred = stage1_forward(&ctx, &mut tape, &mut bound, scan)?;
        let values = tape.value(pred).data().to_vec();
        Ok(TsdfGrid::from_values(
            d,
            partial.truncation(),
            partial.voxel_size(),
            values,
            ClampPolicy::Clamp,
        )?)
    }
}

/// The full multi-resolution model: three stage-1 bundles plus the fusion
/// parameters.
pub struct FusionBundle {
    pub model: MultiResModel,
    pub stages: Vec<Stage1Bundle>,
    pub s2_params: Params<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FusionMeta {
    model: ModelConfig,
}

impl FusionBundle {
    pub fn save(&self, dir: &Path) -> Result<(), BundleError> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("model.json"),
            serde_json::to_string_pretty(&FusionMeta { model: self.model.cfg.clone() })
                .map_err(|e| BundleError::Metadata(e.to_string()))?
                + "\n",
        )?;
        for stage in &self.stages {
            stage.save(dir)?;
        }
        self.s2_params.save(&dir.join("s2.ckpt"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, BundleError> {
        let meta_path = dir.join("model.json");
        if !meta_path.exists() {
            return Err(BundleError::MissingCheckpoint(meta_path.display().to_string()));
        }
        let meta: FusionMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
            .map_err(|e| BundleError::Metadata(e.to_string()))?;
        let model = MultiResModel::new(&meta.model)?;
        let mut stages = Vec::new();
        for stage in &model.stages {
            stages.push(Stage1Bundle::load(dir, stage.r)?);
        }
        let s2_path = dir.join("s2.ckpt");
        if !s2_path.exists() {
            return Err(BundleError::MissingCheckpoint(s2_path.display().to_string()));
        }
        let s2_params = Params::load(&s2_path, true)?;
        Ok(Self { model, stages, s2_params })
    }

    /// Full multi-resolution completion of one partial scan.
    pub fn predict(&self, partial: &TsdfGrid, mode: AttentionMode) -> Result<TsdfGrid, BundleError> {
        let d = partial.resolution();
        let mut tape = Tape::new();
        let mut bounds = Stage2Bounds::new(self.stages.len());
        let scan =
            tape.leaf(Tensor::new(vec![1, 1, d, d, d], partial.values().to_vec())?, false)?;
        let inputs = Stage2Inputs {
            stage_params: self.stages.iter().map(|s| &s.params).collect(),
            pools: self.stages.iter().map(|s| &s.pool).collect(),
            s2_params: &self.s2_params,
        };
        let out = stage2_forward(&self.model, &inputs, &mut bounds, &mut tape, scan, mode)?;
        let values = tape.value(out.pred).data().to_vec();
        Ok(TsdfGrid::from_values(
            d,
            partial.truncation(),
            partial.voxel_size(),
            values,
            ClampPolicy::Clamp,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NormKind;
    use crate::priors::{init_priors, PriorConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn random_grid(d: usize, seed: u64) -> TsdfGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..d * d * d).map(|_| rng.gen_range(-2.5f32..2.5)).collect();
        TsdfGrid::from_values(d, 2.5, 1.0 / d as f32, values, ClampPolicy::Reject).unwrap()
    }

    fn mini_cfg() -> ModelConfig {
        ModelConfig {
            d: 4,
            resolutions: vec![8, 4, 2],
            channels: 4,
            norm: NormKind::Group,
            norm_groups: 2,
            k_max_priors: 1,
            dec_width: 4,
            grid_resolution: 8,
            truncation: 2.5,
            enc_kernel: 4,
        }
    }

    #[test]
    fn bundle_roundtrip_and_identical_prediction() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = mini_cfg();
        let model = MultiResModel::new(&cfg).unwrap();
        let g = random_grid(8, 1);

        let mut stages = Vec::new();
        for stage in &model.stages {
            let mut p = Params::new();
            stage.init_params(&mut p, 2 + stage.r as u64);
            let mut by_cat = BTreeMap::new();
            by_cat.insert("c".to_string(), vec![&g]);
            let pool = init_priors(&by_cat, &PriorConfig::default(), &mut p).unwrap();
            stages.push(Stage1Bundle { cfg: cfg.clone(), r: stage.r, params: p, pool });
        }
        let mut s2 = Params::new();
        model.init_stage2_params(&mut s2, 3);
        let bundle = FusionBundle { model, stages, s2_params: s2 };
        bundle.save(dir.path()).unwrap();

        let partial = random_grid(8, 4);
        let pred_a = bundle.predict(&partial, AttentionMode::Attention).unwrap();

        let loaded = FusionBundle::load(dir.path()).unwrap();
        let pred_b = loaded.predict(&partial, AttentionMode::Attention).unwrap();
        assert!(pred_a
            .values()
            .iter()
            .zip(pred_b.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        match FusionBundle::load(dir.path()) {
            Err(BundleError::MissingCheckpoint(p)) => assert!(p.contains("model.json")),
            other => panic!("expected MissingCheckpoint, got {:?}", other.err().map(|e| e.to_string())),
        }
    }
}
