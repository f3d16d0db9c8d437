//! Relation aggregation across tasks: each primary task's feature map is
//! refined by correlation attention against every other participating task.
//!
//! For a primary task `i` with normalized input `x = LN(f_i)`:
//!
//! ```text
//! C_j   = softmax(P(x W_q^ij; s1) P(f_j W_k^ij; s2)ᵀ / √d) P(f_j W_v^ij; s2)
//! S     = concat_j MLP_j(C_j)                       [L1, C]
//! T     = MLP_ij(S + MLP_i(MHPA(x)))
//! F     = T (+ f_q)                                 optional skip
//! out   = F + FFN(LN(F))
//! ```
//!
//! Row-masked maps (instrument box tokens) are never pooled; their padded
//! rows are excluded from every softmax.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::SpatialAdapter;
use crate::attention::{
    feed_forward_residual, mhpa, pooled_qkv_cross, scaled_attention, AttentionConfig, AttentionWeights, Grid, Stride3,
    UNIT_STRIDE,
};
use crate::error::{HctError, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::{Graph, PoolKind, Var};

/// Width of a detector box embedding.
pub const BOX_FEATURE_DIM: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Phase,
    Step,
    Action,
    Instrument,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::Phase, TaskId::Step, TaskId::Action, TaskId::Instrument];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Phase => "phase",
            TaskId::Step => "step",
            TaskId::Action => "action",
            TaskId::Instrument => "instrument",
        }
    }

    /// One-letter code used in pair names such as `PS`.
    pub fn letter(self) -> char {
        match self {
            TaskId::Phase => 'P',
            TaskId::Step => 'S',
            TaskId::Action => 'A',
            TaskId::Instrument => 'I',
        }
    }

    pub fn from_letter(c: char) -> Option<TaskId> {
        TaskId::ALL.into_iter().find(|t| t.letter() == c.to_ascii_uppercase())
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = HctError;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| HctError::Config(format!("unknown task `{s}`")))
    }
}

/// One task's token map. A `keep` mask marks the valid rows of a padded
/// map; masked maps are never pooled.
#[derive(Clone, Debug)]
pub struct TaskMap {
    pub map: Var,
    pub keep: Option<Vec<bool>>,
}

/// Per-task feature maps sharing one `[L, C]` layout and factorization.
#[derive(Clone, Debug)]
pub struct TaskFeatures {
    pub grid: Grid,
    pub maps: BTreeMap<TaskId, TaskMap>,
}

impl TaskFeatures {
    pub fn new(grid: Grid) -> Self {
        Self { grid, maps: BTreeMap::new() }
    }

    pub fn with(mut self, task: TaskId, map: Var, keep: Option<Vec<bool>>) -> Self {
        self.maps.insert(task, TaskMap { map, keep });
        self
    }

    fn get(&self, task: TaskId) -> Result<&TaskMap> {
        self.maps
            .get(&task)
            .ok_or_else(|| HctError::Usage(format!("no {task} features supplied for relation aggregation")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HramConfig {
    /// Participating tasks; each becomes a primary task with its own block.
    pub tasks: Vec<TaskId>,
    pub heads: usize,
    pub q_stride: Stride3,
    pub kv_stride: Stride3,
    /// Tasks whose refined map adds the pooled-query skip.
    pub slicing_skip: Vec<TaskId>,
    /// Reuse the trunk's last attention weights for the self-attention term.
    pub share_trunk_attention: bool,
    pub mlp_ratio: usize,
    pub pool: PoolKind,
}

impl Default for HramConfig {
    fn default() -> Self {
        Self {
            tasks: TaskId::ALL.to_vec(),
            heads: 4,
            q_stride: UNIT_STRIDE,
            kv_stride: [1, 2, 2],
            slicing_skip: vec![TaskId::Instrument],
            share_trunk_attention: false,
            mlp_ratio: 4,
            pool: PoolKind::Avg,
        }
    }
}

impl HramConfig {
    /// Number of participating tasks `n`.
    pub fn n(&self) -> usize {
        self.tasks.len()
    }

    /// Width `C / (n − 1)` of each secondary slice.
    pub fn slice_width(&self, channels: usize) -> Result<usize> {
        let n = self.n();
        if n < 2 {
            return Err(HctError::Config(format!("relation aggregation needs n >= 2 tasks, got n = {n}")));
        }
        if !channels.is_multiple_of(n - 1) {
            return Err(HctError::Config(format!("C = {channels} is not divisible by n − 1 for n = {n} tasks")));
        }
        Ok(channels / (n - 1))
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        self.slice_width(channels)?;
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return Err(HctError::Config(format!("task {t} listed twice")));
            }
        }
        if self.tasks.contains(&TaskId::Instrument) && self.q_stride != UNIT_STRIDE {
            return Err(HctError::Config("instrument box tokens cannot be pooled; use a unit query stride".into()));
        }
        self.attention(channels, self.kv_stride).validate()
    }

    fn attention(&self, channels: usize, kv_stride: Stride3) -> AttentionConfig {
        AttentionConfig { channels, heads: self.heads, q_stride: self.q_stride, kv_stride, pool: self.pool }
    }

    /// Attention layout when keys and values come from `map`.
    fn attention_for(&self, channels: usize, map: &TaskMap) -> AttentionConfig {
        let kv = if map.keep.is_some() { UNIT_STRIDE } else { self.kv_stride };
        self.attention(channels, kv)
    }
}

/// Correlation-attention weights for one ordered pair `j → i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairWeights {
    pub secondary: TaskId,
    pub attn: AttentionWeights,
    /// `C -> C/(n−1)`
    pub mlp_j: Linear,
}

/// Aggregation and feed-forward weights of one primary task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HramTaskWeights {
    pub task: TaskId,
    pub norm1: LayerNorm,
    pub mhpa: AttentionWeights,
    pub mlp_i: Linear,
    pub mlp_ij: Linear,
    pub pairs: Vec<PairWeights>,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub s_ada: Option<SpatialAdapter>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hram {
    pub cfg: HramConfig,
    pub channels: usize,
    pub blocks: Vec<HramTaskWeights>,
}

impl Hram {
    /// `shared_attention` replaces every block's own self-attention weights
    /// when the configuration asks for sharing.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: HramConfig,
        channels: usize,
        s_ada_bottleneck: Option<usize>,
        shared_attention: Option<AttentionWeights>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let width = cfg.slice_width(channels)?;
        if cfg.share_trunk_attention && shared_attention.is_none() {
            return Err(HctError::Config("attention sharing requested without trunk blocks".into()));
        }
        let mut blocks = Vec::with_capacity(cfg.n());
        for &task in &cfg.tasks {
            let p = format!("{prefix}.{task}");
            let norm1 = LayerNorm::new(store, &format!("{p}.norm1"), channels)?;
            let mhpa = match shared_attention.filter(|_| cfg.share_trunk_attention) {
                Some(w) => w,
                None => AttentionWeights::new(store, &format!("{p}.mhpa"), channels, false, rng)?,
            };
            let mlp_i = Linear::new(store, &format!("{p}.mlp_i"), channels, channels, true, rng)?;
            let mut pairs = Vec::new();
            for &j in cfg.tasks.iter().filter(|&&j| j != task) {
                let pp = format!("{p}.pair.{j}");
                pairs.push(PairWeights {
                    secondary: j,
                    attn: AttentionWeights::new(store, &pp, channels, false, rng)?,
                    mlp_j: Linear::new(store, &format!("{pp}.mlp_j"), channels, width, true, rng)?,
                });
            }
            let mlp_ij = Linear::new(store, &format!("{p}.mlp_ij"), channels, channels, true, rng)?;
            let norm2 = LayerNorm::new(store, &format!("{p}.norm2"), channels)?;
            let ffn = FeedForward::new(store, &format!("{p}.ffn"), channels, channels * cfg.mlp_ratio, rng)?;
            let s_ada = match s_ada_bottleneck {
                Some(b) => Some(SpatialAdapter::new(store, &format!("{p}.s_ada"), channels, b, rng)?),
                None => None,
            };
            blocks.push(HramTaskWeights { task, norm1, mhpa, mlp_i, mlp_ij, pairs, norm2, ffn, s_ada });
        }
        Ok(Self { cfg, channels, blocks })
    }

    /// Refined maps of every participating task.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: &TaskFeatures) -> Result<BTreeMap<TaskId, Var>> {
        self.blocks.iter().map(|w| Ok((w.task, hram_block(g, store, feats, self, w)?))).collect()
    }
}

/// Query from `f_i` at stride `s1`, key/value from `f_j` at the stride in
/// `cfg`, combined by scaled dot-product attention.
#[allow(clippy::too_many_arguments)]
pub fn correlation_attention(
    g: &mut Graph,
    store: &ParamStore,
    f_i: Var,
    grid_i: Grid,
    f_j: Var,
    grid_j: Grid,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    key_keep: Option<&[bool]>,
) -> Result<Var> {
    if key_keep.is_some() && cfg.kv_stride != UNIT_STRIDE {
        return Err(HctError::Config("key masks require a unit key/value stride".into()));
    }
    let qkv = pooled_qkv_cross(g, store, f_i, grid_i, f_j, grid_j, cfg, w)?;
    scaled_attention(g, qkv.q, qkv.k, qkv.v, cfg.heads, key_keep)
}

/// `concat(MLP_j(C_{j→i}), MLP_i(self_att))` along channels.
pub fn fuse_pair(
    g: &mut Graph,
    store: &ParamStore,
    correlation: Var,
    self_att: Var,
    mlp_j: &Linear,
    mlp_i: &Linear,
) -> Result<Var> {
    let a = mlp_j.forward(g, store, correlation)?;
    let b = mlp_i.forward(g, store, self_att)?;
    g.concat_channels(&[a, b])
}

/// `F_{all→i}` before the block's feed-forward, with the pooled query `f_q`.
#[derive(Clone, Copy, Debug)]
pub struct Aggregated {
    pub refined: Var,
    pub query: Var,
    pub grid: Grid,
}

pub fn aggregate_task(
    g: &mut Graph,
    store: &ParamStore,
    feats: &TaskFeatures,
    hram: &Hram,
    w: &HramTaskWeights,
) -> Result<Aggregated> {
    let c = hram.channels;
    let primary = feats.get(w.task)?;
    let x = w.norm1.forward(g, store, primary.map)?;
    let self_cfg = hram.cfg.attention_for(c, primary);
    let att = mhpa(g, store, x, feats.grid, &self_cfg, &w.mhpa, primary.keep.as_deref())?;
    let mut slices = Vec::with_capacity(w.pairs.len());
    for pair in &w.pairs {
        let sec = feats.get(pair.secondary)?;
        let cfg = hram.cfg.attention_for(c, sec);
        let corr =
            correlation_attention(g, store, x, feats.grid, sec.map, feats.grid, &cfg, &pair.attn, sec.keep.as_deref())?;
        slices.push(pair.mlp_j.forward(g, store, corr)?);
    }
    let stacked = g.concat_channels(&slices)?;
    let own = w.mlp_i.forward(g, store, att.out)?;
    let sum = g.add(stacked, own)?;
    let mut refined = w.mlp_ij.forward(g, store, sum)?;
    if hram.cfg.slicing_skip.contains(&w.task) {
        let skip = g.slice_channels(att.query, 0, c)?;
        refined = g.add(refined, skip)?;
    }
    Ok(Aggregated { refined, query: att.query, grid: att.grid })
}

/// Aggregation followed by the block's feed-forward residual.
pub fn hram_block(
    g: &mut Graph,
    store: &ParamStore,
    feats: &TaskFeatures,
    hram: &Hram,
    w: &HramTaskWeights,
) -> Result<Var> {
    let agg = aggregate_task(g, store, feats, hram, w)?;
    feed_forward_residual(g, store, agg.refined, &w.norm2, &w.ffn, w.s_ada.as_ref())
}

/// Box embeddings `[B, 256] -> [B, C]` through two linear layers with a GELU
/// between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstrumentProjector {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Projected box tokens: the per-box rows and the zero-padded `[L, C]` map.
#[derive(Clone, Debug)]
pub struct InstrumentTokens {
    pub boxes: usize,
    pub rows: Option<Var>,
    pub map: Var,
    pub keep: Vec<bool>,
}

impl InstrumentProjector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), BOX_FEATURE_DIM, channels, true, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), channels, channels, true, rng)?,
        })
    }

    /// `boxes` is `None` for a clip without detections.
    pub fn project(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        boxes: Option<Var>,
        len: usize,
    ) -> Result<InstrumentTokens> {
        let c = self.fc2.out_dim;
        let Some(b) = boxes else {
            let map = g.constant(crate::tensor::Tensor::zeros(&[len, c]));
            return Ok(InstrumentTokens { boxes: 0, rows: None, map, keep: vec![false; len] });
        };
        let s = g.shape(b).to_vec();
        if s.len() != 2 || s[1] != BOX_FEATURE_DIM {
            return Err(HctError::Dimension(format!("box features {s:?}, expected [B, {BOX_FEATURE_DIM}]")));
        }
        if s[0] > len {
            return Err(HctError::Data(format!("{} boxes exceed the token capacity L = {len}", s[0])));
        }
        let h = self.fc1.forward(g, store, b)?;
        let h = g.gelu(h);
        let rows = self.fc2.forward(g, store, h)?;
        let map = g.pad_rows(rows, len)?;
        let keep = (0..len).map(|r| r < s[0]).collect();
        Ok(InstrumentTokens { boxes: s[0], rows: Some(rows), map, keep })
    }
}
