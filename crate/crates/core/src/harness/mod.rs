//! Run configuration, optimization, training and evaluation loops,
//! checkpoints, and the gradient-check and parameter-count reports.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod train;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::FreezePreset;
use crate::attention::{BlockStrides, TrunkConfig};
use crate::error::Result;
use crate::model::{HctModel, ModelConfig};
use crate::objectives::{ClassWeights, TaxonomySizes};
use crate::params::ParamCount;
use crate::synthdata::{generate_dataset, ClipSample, GenerateOptions};
use crate::tensor::{grad_check_params, GradCheckReport};

pub use checkpoint::Checkpoint;
pub use config::{ClassWeighting, Overrides, RunConfig, ScheduleConfig};
pub use optim::{cosine_warmup_lr, AdamW, OptimConfig};
pub use train::{evaluate, train, EpochLog, TrainOutcome};

/// Tolerance of the full-model gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Shrinks a model configuration to `4×8×8` clips, `C = 12` and a single
/// block (`L = 8` tokens), keeping every mechanism toggle.
pub fn tiny_model(cfg: &ModelConfig) -> ModelConfig {
    let trunk = TrunkConfig {
        clip_len: 4,
        frame_height: 8,
        frame_width: 8,
        in_channels: 3,
        patch: [2, 4, 4],
        channels: 12,
        heads: 2,
        mlp_ratio: 2,
        blocks: vec![BlockStrides { q_stride: [1, 1, 1], kv_stride: [1, 2, 2] }],
        pool: cfg.trunk.pool,
    };
    let mut out = cfg.clone();
    out.trunk = trunk;
    out.hram.heads = 2;
    out.hram.mlp_ratio = 2;
    out.icl.proj_dim = out.icl.proj_dim.map(|p| p.min(8));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSummary {
    pub report: GradCheckReport,
    pub tokens: usize,
    pub channels: usize,
    pub passed: bool,
}

/// Finite-difference check of the whole model loss on the tiny variant of
/// `cfg`, over a two-clip batch; `max_coords` samples per tensor.
pub fn gradcheck_cmd(cfg: &RunConfig, max_coords: Option<usize>) -> Result<GradCheckSummary> {
    let mcfg = tiny_model(&cfg.model);
    let opts = GenerateOptions {
        seed: cfg.seed,
        train_clips: 2,
        test_clips: 0,
        clip_len: mcfg.trunk.clip_len,
        height: mcfg.trunk.frame_height,
        width: mcfg.trunk.frame_width,
        channels: mcfg.trunk.in_channels,
        ..GenerateOptions::default()
    };
    let data = generate_dataset(&opts)?;
    let sizes = data.taxonomy.sizes;
    let mut model = HctModel::new(mcfg, sizes, cfg.seed)?;
    let batch: Vec<&ClipSample> = data.samples.iter().collect();
    let weights = ClassWeights::uniform(sizes);
    let lambdas = cfg.loss;
    let shell = model.clone();
    let stage = cfg.stage;
    let report = grad_check_params(
        &mut model.store,
        |g, store| Ok(shell.batch_loss_with(store, g, &batch, &weights, &lambdas, stage)?.total),
        2e-3,
        max_coords,
        cfg.seed,
    )?;
    Ok(GradCheckSummary {
        passed: report.max_rel_error < GRADCHECK_TOLERANCE,
        tokens: shell.cfg.trunk.output_grid()?.len(),
        channels: shell.channels(),
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCountRow {
    pub preset: FreezePreset,
    pub label: String,
    #[serde(flatten)]
    pub count: ParamCount,
}

/// Total and tunable parameters of `cfg`'s model under each reported
/// freeze preset, at `cfg`'s adapter ratio and kernel.
pub fn paramcount_cmd(cfg: &RunConfig, sizes: TaxonomySizes) -> Result<Vec<ParamCountRow>> {
    FreezePreset::TABLE
        .iter()
        .map(|&preset| {
            let mut m = cfg.model.clone();
            m.adapters = preset.adapters(cfg.model.adapters.ratio, cfg.model.adapters.temporal_kernel);
            m.freeze = preset.plan();
            let model = HctModel::new(m, sizes, cfg.seed)?;
            Ok(ParamCountRow { preset, label: preset.label().to_string(), count: model.param_count() })
        })
        .collect()
}

/// Aligned text rendering of parameter-count rows.
pub struct ParamTable<'a>(pub &'a [ParamCountRow]);

impl fmt::Display for ParamTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>10} {:>10} {:>9}", "Setting", "Total", "Tunable", "Fraction")?;
        for r in self.0 {
            writeln!(
                f,
                "{:<12} {:>10} {:>10} {:>8.2}%",
                r.label,
                r.count.total,
                r.count.tunable,
                100.0 * r.count.fraction
            )?;
        }
        Ok(())
    }
}
