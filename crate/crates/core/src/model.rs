//! The full multi-task model: shared trunk, optional temporal adapter,
//! instrument box projector, optional relation aggregation, task heads and
//! contrastive projections.
//!
//! Per clip, phase, step and action start from the same trunk map and the
//! instrument map holds the projected box tokens. Tasks outside the
//! aggregation set read their unrefined map. A batch is one graph; every clip
//! binds the same parameter leaves, so gradients accumulate across clips.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, SpatialAdapter, TemporalAdapter};
use crate::attention::{Grid, Trunk, TrunkConfig};
use crate::error::{HctError, Result};
use crate::hram::{Hram, HramConfig, InstrumentProjector, TaskFeatures, TaskId};
use crate::metrics::{Detection, GroundTruth};
use crate::nn::Linear;
use crate::objectives::{
    icl_embed, icl_pair_loss, total_loss, weighted_bce, weighted_cross_entropy, ClassWeights, HeadSet, IclConfig,
    IclProjection, IclReduction, LossWeights, TaskPair, TaxonomySizes,
};
use crate::params::{count_params, FreezePlan, ParamCount, ParamStore};
use crate::rng;
use crate::synthdata::ClipSample;
use crate::tensor::{Graph, Tensor, Var};

/// Tasks supervised during a training stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Phase and step only.
    Ps,
    /// Instrument and action only.
    Ia,
    #[default]
    Joint,
}

impl Stage {
    pub fn includes(self, task: TaskId) -> bool {
        match self {
            Stage::Joint => true,
            Stage::Ps => matches!(task, TaskId::Phase | TaskId::Step),
            Stage::Ia => matches!(task, TaskId::Instrument | TaskId::Action),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ps => "ps",
            Stage::Ia => "ia",
            Stage::Joint => "joint",
        })
    }
}

impl FromStr for Stage {
    type Err = HctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ps" => Ok(Stage::Ps),
            "ia" => Ok(Stage::Ia),
            "joint" => Ok(Stage::Joint),
            _ => Err(HctError::Config(format!("unknown stage `{s}`; expected ps, ia or joint"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub trunk: TrunkConfig,
    /// Relation aggregation on or off; off gives the trunk-only baseline.
    pub use_hram: bool,
    pub hram: HramConfig,
    /// Contrastive pairs; an empty list disables the contrastive terms.
    pub icl: IclConfig,
    pub adapters: AdapterConfig,
    pub freeze: FreezePlan,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunk: TrunkConfig::default(),
            use_hram: true,
            hram: HramConfig::default(),
            icl: IclConfig::default(),
            adapters: AdapterConfig::default(),
            freeze: FreezePlan::nothing(),
        }
    }
}

impl ModelConfig {
    /// Trunk features only: no aggregation and no contrastive terms.
    pub fn baseline() -> Self {
        Self { use_hram: false, icl: IclConfig { pairs: vec![], ..IclConfig::default() }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        let c = self.trunk.channels;
        if self.use_hram {
            self.hram.validate(c)?;
        }
        self.icl.validate()?;
        self.adapters.validate(c)?;
        let len = self.trunk.output_grid()?.len();
        if len == 0 {
            return Err(HctError::Config("trunk output has no tokens".into()));
        }
        Ok(())
    }
}

/// Per-clip scores used by evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPrediction {
    pub phase: Vec<f64>,
    pub step: Vec<f64>,
    /// Sigmoid probabilities.
    pub action: Vec<f64>,
    /// Class probabilities of each kept box, in box order.
    pub boxes: Vec<Vec<f64>>,
}

/// Scalar values of every loss term of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub tasks: BTreeMap<TaskId, f64>,
    pub icl: BTreeMap<TaskPair, f64>,
}

/// Graph outputs of one batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub tasks: BTreeMap<TaskId, Var>,
    pub icl: Vec<(TaskPair, Var)>,
}

impl BatchLoss {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.scalar(self.total),
            tasks: self.tasks.iter().map(|(&t, &v)| (t, g.scalar(v))).collect(),
            icl: self.icl.iter().map(|&(p, v)| (p, g.scalar(v))).collect(),
        }
    }
}

/// Features of one clip ready for the heads.
struct ClipFeatures {
    /// `[1, C]` pooled maps of phase and step, `[1, 2C]` for action.
    pooled: BTreeMap<TaskId, Var>,
    /// `[B, C]` box rows, `None` without kept boxes.
    boxes: Option<Var>,
    /// `[P]` contrastive embeddings.
    embeds: BTreeMap<TaskId, Var>,
}

#[derive(Clone, Debug)]
pub struct HctModel {
    pub cfg: ModelConfig,
    pub sizes: TaxonomySizes,
    pub store: ParamStore,
    pub trunk: Trunk,
    pub t_ada: Option<TemporalAdapter>,
    pub projector: InstrumentProjector,
    pub hram: Option<Hram>,
    pub heads: HeadSet,
    pub icl_proj: BTreeMap<TaskId, IclProjection>,
}

impl HctModel {
    /// Builds every parameter from `seed` and applies the freeze plan.
    pub fn new(cfg: ModelConfig, sizes: TaxonomySizes, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, 0x6d_6f64_656c);
        let mut store = ParamStore::new();
        let c = cfg.trunk.channels;
        let bottleneck = if cfg.adapters.any() { Some(cfg.adapters.bottleneck(c)?) } else { None };
        let s_ada = bottleneck.filter(|_| cfg.adapters.spatial);
        let mut trunk = Trunk::new(&mut store, "trunk", cfg.trunk.clone(), &mut r)?;
        if let Some(b) = s_ada {
            for (i, block) in trunk.blocks.iter_mut().enumerate() {
                block.s_ada = Some(SpatialAdapter::new(&mut store, &format!("trunk.blocks.{i}.s_ada"), c, b, &mut r)?);
            }
        }
        let t_ada = match bottleneck.filter(|_| cfg.adapters.temporal) {
            Some(b) => Some(TemporalAdapter::new(&mut store, "t_ada", c, b, cfg.adapters.temporal_kernel, &mut r)?),
            None => None,
        };
        let projector = InstrumentProjector::new(&mut store, "projector", c, &mut r)?;
        let hram = if cfg.use_hram {
            let shared = trunk.blocks.last().map(|b| b.attn);
            Some(Hram::new(&mut store, "hram", cfg.hram.clone(), c, s_ada, shared, &mut r)?)
        } else {
            None
        };
        let heads = HeadSet::new(&mut store, "heads", c, sizes, &mut r)?;
        let p = cfg.icl.proj_dim.unwrap_or(c);
        let icl_proj = cfg
            .icl
            .tasks()
            .into_iter()
            .map(|t| {
                Ok((t, IclProjection::new(&mut store, &format!("icl.proj.{t}"), c, p, cfg.icl.proj_layers, &mut r)?))
            })
            .collect::<Result<_>>()?;
        cfg.freeze.apply(&mut store)?;
        Ok(Self { cfg, sizes, store, trunk, t_ada, projector, hram, heads, icl_proj })
    }

    pub fn param_count(&self) -> ParamCount {
        count_params(&self.store)
    }

    pub fn channels(&self) -> usize {
        self.cfg.trunk.channels
    }

    fn check_sample(&self, s: &ClipSample) -> Result<()> {
        let z = &self.sizes;
        if s.phase >= z.phases || s.step >= z.steps || s.actions.len() != z.actions {
            return Err(HctError::Data(format!("clip {} has labels outside the model taxonomy", s.id)));
        }
        if let Some(b) = s.kept_boxes().find(|b| b.class as usize >= z.instruments) {
            return Err(HctError::Data(format!("clip {}: instrument class {} out of range", s.id, b.class)));
        }
        Ok(())
    }

    fn clip_features(&self, g: &mut Graph, store: &ParamStore, s: &ClipSample, embed: bool) -> Result<ClipFeatures> {
        self.check_sample(s)?;
        let c = self.channels();
        let clip = g.constant(s.clip_tensor());
        let (mut f, grid): (Var, Grid) = self.trunk.forward(g, store, clip)?;
        if let Some(t) = &self.t_ada {
            f = t.forward(g, store, f, grid)?;
        }
        let boxes = s.box_feature_tensor().map(|t| g.constant(t));
        let tokens = self.projector.project(g, store, boxes, grid.len())?;
        let mut maps: BTreeMap<TaskId, Var> = BTreeMap::new();
        maps.insert(TaskId::Phase, f);
        maps.insert(TaskId::Step, f);
        maps.insert(TaskId::Action, f);
        maps.insert(TaskId::Instrument, tokens.map);
        let mut box_rows = tokens.rows;
        if let Some(hram) = &self.hram {
            let mut feats = TaskFeatures::new(grid);
            for &t in &hram.cfg.tasks {
                let keep = (t == TaskId::Instrument).then(|| tokens.keep.clone());
                feats = feats.with(t, maps[&t], keep);
            }
            for (t, refined) in hram.forward(g, store, &feats)? {
                maps.insert(t, refined);
                if t == TaskId::Instrument && tokens.boxes > 0 {
                    box_rows = Some(g.rows(refined, 0, tokens.boxes)?);
                }
            }
        }
        let mut pooled = BTreeMap::new();
        for t in [TaskId::Phase, TaskId::Step] {
            let m = g.mean_rows(maps[&t]);
            pooled.insert(t, g.reshape(m, &[1, c])?);
        }
        let act = g.mean_rows(maps[&TaskId::Action]);
        let act = g.reshape(act, &[1, c])?;
        let inst = match box_rows {
            Some(r) => {
                let m = g.mean_rows(r);
                g.reshape(m, &[1, c])?
            }
            None => g.constant(Tensor::zeros(&[1, c])),
        };
        pooled.insert(TaskId::Action, g.concat_channels(&[act, inst])?);
        let mut embeds = BTreeMap::new();
        if embed {
            for (&t, proj) in &self.icl_proj {
                embeds.insert(t, icl_embed(g, store, proj, maps[&t])?);
            }
        }
        Ok(ClipFeatures { pooled, boxes: box_rows, embeds })
    }

    /// Supervised and contrastive losses of a batch for the tasks of `stage`.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &[&ClipSample],
        class_weights: &ClassWeights,
        lambdas: &LossWeights,
        stage: Stage,
    ) -> Result<BatchLoss> {
        self.batch_loss_with(&self.store, g, batch, class_weights, lambdas, stage)
    }

    /// [`Self::batch_loss`] with parameters read from `store`, which must share
    /// this model's layout.
    pub fn batch_loss_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        batch: &[&ClipSample],
        class_weights: &ClassWeights,
        lambdas: &LossWeights,
        stage: Stage,
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(HctError::Usage("empty batch".into()));
        }
        let pairs: Vec<TaskPair> =
            self.cfg.icl.pairs.iter().copied().filter(|p| stage.includes(p.0) && stage.includes(p.1)).collect();
        let feats =
            batch.iter().map(|s| self.clip_features(g, store, s, !pairs.is_empty())).collect::<Result<Vec<_>>>()?;
        let mut tasks = BTreeMap::new();
        for t in [TaskId::Phase, TaskId::Step] {
            if !stage.includes(t) {
                continue;
            }
            let rows: Vec<Var> = feats.iter().map(|f| f.pooled[&t]).collect();
            let x = g.concat_rows(&rows)?;
            let logits = self.heads.head(t).forward(g, store, x)?;
            let labels: Vec<usize> = batch.iter().map(|s| if t == TaskId::Phase { s.phase } else { s.step }).collect();
            tasks.insert(t, weighted_cross_entropy(g, logits, &labels, class_weights.get(t))?);
        }
        if stage.includes(TaskId::Action) {
            let rows: Vec<Var> = feats.iter().map(|f| f.pooled[&TaskId::Action]).collect();
            let x = g.concat_rows(&rows)?;
            let logits = self.heads.action.forward(g, store, x)?;
            let targets: Vec<f64> = batch.iter().flat_map(|s| s.action_targets()).collect();
            tasks.insert(TaskId::Action, weighted_bce(g, logits, &targets, &class_weights.action)?);
        }
        if stage.includes(TaskId::Instrument) {
            let rows: Vec<Var> = feats.iter().filter_map(|f| f.boxes).collect();
            if !rows.is_empty() {
                let x = g.concat_rows(&rows)?;
                let logits = self.heads.instrument.forward(g, store, x)?;
                let labels: Vec<usize> = batch.iter().flat_map(|s| s.kept_boxes().map(|b| b.class as usize)).collect();
                tasks
                    .insert(TaskId::Instrument, weighted_cross_entropy(g, logits, &labels, &class_weights.instrument)?);
            }
        }
        let mut icl = Vec::with_capacity(pairs.len());
        for p in pairs {
            let stack = |g: &mut Graph, t: TaskId| -> Result<Var> {
                let rows = feats
                    .iter()
                    .map(|f| g.reshape(f.embeds[&t], &[1, g.shape(f.embeds[&t])[0]]))
                    .collect::<Result<Vec<_>>>()?;
                g.concat_rows(&rows)
            };
            let zi = stack(g, p.0)?;
            let zj = stack(g, p.1)?;
            let mut l = icl_pair_loss(g, zi, zj, self.cfg.icl.tau)?;
            if self.cfg.icl.reduction == IclReduction::Mean {
                l = g.scale(l, 1.0 / batch.len() as f64);
            }
            icl.push((p, l));
        }
        let icl_vars: Vec<Var> = icl.iter().map(|&(_, v)| v).collect();
        let total = total_loss(g, &tasks, &icl_vars, lambdas)?;
        Ok(BatchLoss { total, tasks, icl })
    }

    /// Scores of one clip in a fresh graph.
    pub fn predict(&self, s: &ClipSample) -> Result<ClipPrediction> {
        let mut g = Graph::new();
        let f = self.clip_features(&mut g, &self.store, s, false)?;
        let store = &self.store;
        let softmax = |g: &mut Graph, head: &Linear, x: Var| -> Result<Var> {
            let logits = head.forward(g, store, x)?;
            g.softmax_rows(logits, None)
        };
        let phase = softmax(&mut g, &self.heads.phase, f.pooled[&TaskId::Phase])?;
        let step = softmax(&mut g, &self.heads.step, f.pooled[&TaskId::Step])?;
        let action = self.heads.action.forward(&mut g, store, f.pooled[&TaskId::Action])?;
        let boxes = match f.boxes {
            Some(rows) => {
                let p = softmax(&mut g, &self.heads.instrument, rows)?;
                g.value(p).chunks(self.sizes.instruments).map(<[f64]>::to_vec).collect()
            }
            None => Vec::new(),
        };
        let pred = ClipPrediction {
            phase: g.value(phase).to_vec(),
            step: g.value(step).to_vec(),
            action: g.value(action).iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
            boxes,
        };
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&pred.phase) && finite(&pred.step) && finite(&pred.action) && pred.boxes.iter().all(|b| finite(b)))
        {
            return Err(HctError::Numerical(format!("non-finite prediction for clip {}", s.id)));
        }
        Ok(pred)
    }
}

/// One scored detection per kept box and instrument class, scored by
/// detector confidence times class probability.
pub fn detections(image: usize, s: &ClipSample, pred: &ClipPrediction) -> Vec<Detection> {
    s.kept_boxes()
        .zip(&pred.boxes)
        .flat_map(|(b, probs)| {
            probs.iter().enumerate().map(move |(class, &p)| Detection {
                image,
                bbox: b.detected.map(f64::from),
                class,
                score: f64::from(b.confidence) * p,
            })
        })
        .collect()
}

/// Every true instrument box, detected or not.
pub fn ground_truth(image: usize, s: &ClipSample) -> Vec<GroundTruth> {
    s.boxes.iter().map(|b| GroundTruth { image, bbox: b.gt.map(f64::from), class: b.class as usize }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::BlockStrides;
    use crate::synthdata::{generate_dataset, GenerateOptions};

    pub(crate) fn tiny_config() -> ModelConfig {
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
            ..TrunkConfig::default()
        };
        let hram = HramConfig { heads: 2, mlp_ratio: 2, ..HramConfig::default() };
        ModelConfig { trunk, hram, ..ModelConfig::default() }
    }

    fn tiny_data() -> crate::synthdata::Dataset {
        let opts = GenerateOptions {
            train_clips: 20,
            test_clips: 20,
            clip_len: 4,
            height: 8,
            width: 8,
            ..GenerateOptions::default()
        };
        generate_dataset(&opts).unwrap()
    }

    #[test]
    fn batch_loss_is_finite_and_complete() {
        let data = tiny_data();
        let model = HctModel::new(tiny_config(), data.taxonomy.sizes, 3).unwrap();
        let batch: Vec<&ClipSample> = data.train().into_iter().take(4).collect();
        let mut g = Graph::new();
        let cw = ClassWeights::uniform(model.sizes);
        let loss = model.batch_loss(&mut g, &batch, &cw, &LossWeights::default(), Stage::Joint).unwrap();
        let v = loss.values(&g);
        assert!(v.total.is_finite());
        assert_eq!(v.icl.len(), 2);
        assert!(v.tasks.contains_key(&TaskId::Phase) && v.tasks.contains_key(&TaskId::Action));
        let ps = model.batch_loss(&mut Graph::new(), &batch, &cw, &LossWeights::default(), Stage::Ps).unwrap();
        assert_eq!(ps.tasks.len(), 2);
        assert_eq!(ps.icl.len(), 1);
    }

    #[test]
    fn prediction_shapes() {
        let data = tiny_data();
        let model = HctModel::new(tiny_config(), data.taxonomy.sizes, 3).unwrap();
        let s = data.test()[0];
        let p = model.predict(s).unwrap();
        assert_eq!(p.phase.len(), 4);
        assert!((p.step.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p.boxes.len(), s.kept_boxes().count());
        assert_eq!(p, model.predict(s).unwrap());
    }

    #[test]
    fn baseline_has_no_relation_parameters() {
        let sizes = TaxonomySizes::default();
        let cfg = ModelConfig { trunk: tiny_config().trunk, ..ModelConfig::baseline() };
        let m = HctModel::new(cfg, sizes, 1).unwrap();
        assert!(m.store.ids().all(|id| !m.store.name(id).starts_with("hram") && !m.store.name(id).starts_with("icl")));
    }

    #[test]
    fn full_model_gradcheck() {
        let data = tiny_data();
        let mut model = HctModel::new(tiny_config(), data.taxonomy.sizes, 5).unwrap();
        let batch: Vec<ClipSample> = data.train().into_iter().take(3).cloned().collect();
        let refs: Vec<&ClipSample> = batch.iter().collect();
        let cw = ClassWeights::uniform(model.sizes);
        let shell = model.clone();
        let report = crate::tensor::grad_check_params(
            &mut model.store,
            |g, store| Ok(shell.batch_loss_with(store, g, &refs, &cw, &LossWeights::default(), Stage::Joint)?.total),
            1e-5,
            Some(3),
            9,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn stage_parsing() {
        assert_eq!("ia".parse::<Stage>().unwrap(), Stage::Ia);
        assert!(matches!("x".parse::<Stage>(), Err(HctError::Config(_))));
        assert!(Stage::Ps.includes(TaskId::Step) && !Stage::Ps.includes(TaskId::Action));
    }
}
