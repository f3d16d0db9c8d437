//! Task heads, supervised losses, the inter-task contrastive loss and the
//! total objective.
//!
//! Reductions: supervised losses average over the batch; each directional
//! contrastive term sums over the batch. The model divides a pair's sum by
//! the batch size before it enters the objective unless
//! [`IclReduction::Sum`] is configured.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HctError, Result};
use crate::hram::TaskId;
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var, NORM_EPS};

/// Class counts of the four label spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomySizes {
    pub phases: usize,
    pub steps: usize,
    pub actions: usize,
    pub instruments: usize,
}

impl Default for TaxonomySizes {
    fn default() -> Self {
        Self { phases: 4, steps: 10, actions: 49, instruments: 13 }
    }
}

impl TaxonomySizes {
    pub fn classes(&self, task: TaskId) -> usize {
        match task {
            TaskId::Phase => self.phases,
            TaskId::Step => self.steps,
            TaskId::Action => self.actions,
            TaskId::Instrument => self.instruments,
        }
    }
}

impl fmt::Display for TaxonomySizes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.phases, self.steps, self.actions, self.instruments)
    }
}

/// Parses the [`fmt::Display`] form `phases,steps,actions,instruments`.
impl std::str::FromStr for TaxonomySizes {
    type Err = HctError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || HctError::Config(format!("taxonomy sizes `{s}`: expected four comma-separated counts"));
        let n: Vec<usize> = s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
        match n[..] {
            [phases, steps, actions, instruments] => Ok(Self { phases, steps, actions, instruments }),
            _ => Err(bad()),
        }
    }
}

/// Linear classifiers on pooled features. The action head reads the pooled
/// action map concatenated with mean-pooled instrument tokens (`2C` wide).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSet {
    pub phase: Linear,
    pub step: Linear,
    pub action: Linear,
    pub instrument: Linear,
}

impl HeadSet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        sizes: TaxonomySizes,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            phase: Linear::new(store, &format!("{prefix}.phase"), channels, sizes.phases, true, rng)?,
            step: Linear::new(store, &format!("{prefix}.step"), channels, sizes.steps, true, rng)?,
            action: Linear::new(store, &format!("{prefix}.action"), 2 * channels, sizes.actions, true, rng)?,
            instrument: Linear::new(store, &format!("{prefix}.instrument"), channels, sizes.instruments, true, rng)?,
        })
    }

    pub fn head(&self, task: TaskId) -> &Linear {
        match task {
            TaskId::Phase => &self.phase,
            TaskId::Step => &self.step,
            TaskId::Action => &self.action,
            TaskId::Instrument => &self.instrument,
        }
    }
}

/// Inverse class frequencies (counts clamped to at least 1), scaled to mean 1.
pub fn class_weights(counts: &[usize]) -> Vec<f64> {
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len().max(1) as f64;
    inv.into_iter().map(|w| w / mean).collect()
}

/// Per-class loss weights of every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub phase: Vec<f64>,
    pub step: Vec<f64>,
    pub action: Vec<f64>,
    pub instrument: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(sizes: TaxonomySizes) -> Self {
        Self {
            phase: vec![1.0; sizes.phases],
            step: vec![1.0; sizes.steps],
            action: vec![1.0; sizes.actions],
            instrument: vec![1.0; sizes.instruments],
        }
    }

    pub fn get(&self, task: TaskId) -> &[f64] {
        match task {
            TaskId::Phase => &self.phase,
            TaskId::Step => &self.step,
            TaskId::Action => &self.action,
            TaskId::Instrument => &self.instrument,
        }
    }
}

/// Unordered pair of tasks, written as two letters (`"PS"`, `"IA"`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TaskPair(pub TaskId, pub TaskId);

impl TaskPair {
    pub fn new(a: TaskId, b: TaskId) -> Result<Self> {
        if a == b {
            return Err(HctError::Config(format!("contrastive pair needs two distinct tasks, got {a} twice")));
        }
        Ok(TaskPair(a, b))
    }

    pub fn contains(&self, t: TaskId) -> bool {
        self.0 == t || self.1 == t
    }
}

impl fmt::Display for TaskPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.0.letter(), self.1.letter())
    }
}

impl TryFrom<String> for TaskPair {
    type Error = HctError;

    fn try_from(s: String) -> Result<Self> {
        let letters: Vec<char> = s.chars().collect();
        let bad = || HctError::Config(format!("bad task pair `{s}`; expected two of P, S, A, I"));
        if letters.len() != 2 {
            return Err(bad());
        }
        let a = TaskId::from_letter(letters[0]).ok_or_else(bad)?;
        let b = TaskId::from_letter(letters[1]).ok_or_else(bad)?;
        TaskPair::new(a, b)
    }
}

impl From<TaskPair> for String {
    fn from(p: TaskPair) -> String {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IclConfig {
    /// Temperature `τ`.
    pub tau: f64,
    pub pairs: Vec<TaskPair>,
    /// Embedding width `P`; the channel width when unset.
    pub proj_dim: Option<usize>,
    /// Depth of the mapping from pooled features to embeddings (1 or 2).
    pub proj_layers: usize,
    /// How each pair loss enters the training objective.
    pub reduction: IclReduction,
}

/// Scaling of a pair loss in the objective: the batch sum as computed by
/// [`icl_pair_loss`], or that sum divided by the batch size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IclReduction {
    Sum,
    #[default]
    Mean,
}

impl Default for IclConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            pairs: vec![TaskPair(TaskId::Phase, TaskId::Step), TaskPair(TaskId::Instrument, TaskId::Action)],
            proj_dim: None,
            proj_layers: 2,
            reduction: IclReduction::Mean,
        }
    }
}

impl IclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(HctError::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(1..=2).contains(&self.proj_layers) || self.proj_dim == Some(0) {
            return Err(HctError::Config("contrastive projection needs 1 or 2 layers and a positive width".into()));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            TaskPair::new(p.0, p.1)?;
            if self.pairs[..i].iter().any(|q| q.contains(p.0) && q.contains(p.1)) {
                return Err(HctError::Config(format!("contrastive pair {p} listed twice")));
            }
        }
        Ok(())
    }

    /// Tasks that need an embedding projection.
    pub fn tasks(&self) -> Vec<TaskId> {
        let mut t: Vec<TaskId> = self.pairs.iter().flat_map(|p| [p.0, p.1]).collect();
        t.sort();
        t.dedup();
        t
    }
}

/// Supervised loss weights `λ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub phase: f64,
    pub step: f64,
    pub instrument: f64,
    pub action: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { phase: 0.3, step: 0.2, instrument: 0.3, action: 0.2 }
    }
}

impl LossWeights {
    pub fn get(&self, task: TaskId) -> f64 {
        match task {
            TaskId::Phase => self.phase,
            TaskId::Step => self.step,
            TaskId::Action => self.action,
            TaskId::Instrument => self.instrument,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in TaskId::ALL {
            let w = self.get(t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(HctError::Config(format!("loss weight for {t} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Mapping from a pooled feature `[1, C]` to an embedding `[1, P]`: one
/// linear layer, or two with a GELU between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IclProjection {
    pub hidden: Option<Linear>,
    pub out: Linear,
}

impl IclProjection {
    pub fn linear(out: Linear) -> Self {
        Self { hidden: None, out }
    }

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        dim: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match layers {
            1 => Ok(Self::linear(Linear::new(store, prefix, channels, dim, true, rng)?)),
            2 => Ok(Self {
                hidden: Some(Linear::new(store, &format!("{prefix}.hidden"), channels, channels, true, rng)?),
                out: Linear::new(store, &format!("{prefix}.out"), channels, dim, true, rng)?,
            }),
            n => Err(HctError::Config(format!("contrastive projection needs 1 or 2 layers, got {n}"))),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let x = match &self.hidden {
            Some(h) => {
                let y = h.forward(g, store, x)?;
                g.gelu(y)
            }
            None => x,
        };
        self.out.forward(g, store, x)
    }
}

/// Mean over tokens, mapping, then unit normalization: `[L, C] -> [P]`.
pub fn icl_embed(g: &mut Graph, store: &ParamStore, proj: &IclProjection, f: Var) -> Result<Var> {
    let c = *g.shape(f).last().unwrap();
    let pooled = g.mean_rows(f);
    let pooled = g.reshape(pooled, &[1, c])?;
    let z = proj.forward(g, store, pooled)?;
    let norm = g.value(z).iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        return Err(HctError::Degenerate("contrastive embedding has zero norm".into()));
    }
    let z = g.l2_normalize(z);
    g.reshape(z, &[proj.out.out_dim])
}

/// `L_cij = L_ci + L_cj` over a batch of aligned embeddings `[B, P]`. Row `b`
/// of each side is the positive for row `b` of the other; the remaining
/// rows are negatives.
pub fn icl_pair_loss(g: &mut Graph, zi: Var, zj: Var, tau: f64) -> Result<Var> {
    let (si, sj) = (g.shape(zi).to_vec(), g.shape(zj).to_vec());
    if si.len() != 2 || si != sj {
        return Err(HctError::Dimension(format!("contrastive embeddings {si:?} and {sj:?}")));
    }
    let (b, p) = (si[0], si[1]);
    if b < 2 {
        return Err(HctError::Usage(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(HctError::Config(format!("temperature must be positive, got {tau}")));
    }
    for z in [zi, zj] {
        if g.value(z).chunks(p).any(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() <= NORM_EPS) {
            return Err(HctError::Degenerate("contrastive embedding row has zero norm".into()));
        }
    }
    let ni = g.l2_normalize(zi);
    let nj = g.l2_normalize(zj);
    let njt = g.transpose(nj)?;
    let sim = g.matmul(ni, njt)?;
    let logits = g.scale(sim, 1.0 / tau);
    let logits_t = g.transpose(logits)?;
    let diag: Vec<usize> = (0..b).collect();
    let mut terms = Vec::with_capacity(2);
    for l in [logits, logits_t] {
        let lsm = g.log_softmax_rows(l);
        let pos = g.pick_rows(lsm, &diag)?;
        terms.push(g.sum(pos));
    }
    let total = g.add(terms[0], terms[1])?;
    Ok(g.scale(total, -1.0))
}

/// `Σ_n w_{y_n} · (−log softmax(x_n)_{y_n}) / N`
pub fn weighted_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[1] != weights.len() {
        return Err(HctError::Dimension(format!(
            "cross-entropy over logits {s:?} with {} labels and {} class weights",
            labels.len(),
            weights.len()
        )));
    }
    if let Some((row, &y)) = labels.iter().enumerate().find(|&(_, &y)| y >= s[1]) {
        return Err(HctError::Data(format!("label {y} at row {row} out of range for {} classes", s[1])));
    }
    let n = s[0] as f64;
    let lsm = g.log_softmax_rows(logits);
    let picked = g.pick_rows(lsm, labels)?;
    let scale: Vec<f64> = labels.iter().map(|&y| -weights[y] / n).collect();
    let weighted = g.mul_const(picked, &scale)?;
    Ok(g.sum(weighted))
}

/// Multi-label binary cross-entropy, summed over classes (each scaled by its
/// class weight) and averaged over the batch.
pub fn weighted_bce(g: &mut Graph, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[1] != weights.len() || targets.len() != s[0] * s[1] {
        return Err(HctError::Dimension(format!(
            "binary cross-entropy over logits {s:?} with {} targets and {} class weights",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| !(0.0..=1.0).contains(&t)) {
        return Err(HctError::Data(format!("binary target {t} outside [0, 1]")));
    }
    let n = s[0] as f64;
    let w: Vec<f64> = (0..targets.len()).map(|i| weights[i % s[1]] / n).collect();
    g.bce_with_logits(logits, targets, &w)
}

/// `L_f = Σ_i λ_i L_i + Σ L_cij`
pub fn total_loss(
    g: &mut Graph,
    task_losses: &BTreeMap<TaskId, Var>,
    icl_losses: &[Var],
    weights: &LossWeights,
) -> Result<Var> {
    let mut total = g.constant(Tensor::zeros(&[1]));
    for (&t, &l) in task_losses {
        let term = g.scale(l, weights.get(t));
        total = g.add(total, term)?;
    }
    for &l in icl_losses {
        total = g.add(total, l)?;
    }
    Ok(total)
}
