//! Training and evaluation loops.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{ClassWeighting, RunConfig};
use super::optim::{cosine_warmup_lr, AdamW};
use crate::error::{HctError, Result};
use crate::hram::TaskId;
use crate::metrics::{map_detection, MetricsReport, TaskMetrics};
use crate::model::{detections, ground_truth, HctModel};
use crate::objectives::{class_weights, ClassWeights, TaskPair, TaxonomySizes};
use crate::rng;
use crate::synthdata::{ClipSample, Frequencies};
use crate::tensor::Graph;

/// Mean loss terms and the learning rate of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer updates taken by the end of the epoch.
    pub step: u64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    /// `L_f`
    pub total: f64,
    pub tasks: BTreeMap<TaskId, f64>,
    pub icl: BTreeMap<TaskPair, f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Checkpoint files written, in order.
    pub saved: Vec<PathBuf>,
}

pub fn training_class_weights(mode: ClassWeighting, sizes: TaxonomySizes, train: &[&ClipSample]) -> ClassWeights {
    match mode {
        ClassWeighting::Uniform => ClassWeights::uniform(sizes),
        ClassWeighting::Inverse => {
            let f = Frequencies::count(sizes, train.iter().copied());
            ClassWeights {
                phase: class_weights(&f.phase),
                step: class_weights(&f.step),
                action: class_weights(&f.action),
                instrument: class_weights(&f.instrument_boxes),
            }
        }
    }
}

/// Running loss sums of an epoch: total, per task and per contrastive pair.
type EpochSums = (f64, BTreeMap<TaskId, f64>, BTreeMap<TaskPair, f64>);

/// Index batches of one epoch: a seeded shuffle cut into `batch` chunks. A
/// trailing chunk smaller than `min_batch` is dropped.
pub fn epoch_batches(n: usize, batch: usize, min_batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, 0x7368_7566 ^ epoch as u64));
    order.chunks(batch).filter(|c| c.len() >= min_batch).map(<[usize]>::to_vec).collect()
}

/// Trains from scratch on `train`. Each epoch's log line is written to
/// `log_sink` as one JSON object per line.
pub fn train(
    cfg: &RunConfig,
    sizes: TaxonomySizes,
    train: &[&ClipSample],
    log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = HctModel::new(cfg.model.clone(), sizes, cfg.seed)?;
    let start =
        Checkpoint { config: cfg.clone(), optimizer: Some(AdamW::new(cfg.optim, &model.store)), model, epoch: 0 };
    resume(start, train, log_sink)
}

/// Continues a checkpoint until its configured epoch count.
pub fn resume(mut ck: Checkpoint, train: &[&ClipSample], mut log_sink: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    let cfg = ck.config.clone();
    if train.is_empty() {
        return Err(HctError::Data("training split is empty".into()));
    }
    let sched = cfg.schedule;
    let min_batch = if cfg.model.icl.pairs.is_empty() { 1 } else { 2 };
    let per_epoch = epoch_batches(train.len(), sched.batch_size, min_batch, cfg.seed, 0).len();
    if per_epoch == 0 {
        return Err(HctError::Data(format!("{} training clips form no batch of size {min_batch}", train.len())));
    }
    let total_steps = per_epoch * sched.epochs;
    let warmup = per_epoch * sched.warmup_epochs;
    let weights = training_class_weights(cfg.class_weighting, ck.model.sizes, train);
    let mut opt = ck.optimizer.take().unwrap_or_else(|| AdamW::new(cfg.optim, &ck.model.store));
    let mut log = Vec::new();
    let mut saved = Vec::new();
    for epoch in ck.epoch..sched.epochs {
        let t0 = Instant::now();
        let mut sums: Option<EpochSums> = None;
        let batches = epoch_batches(train.len(), sched.batch_size, min_batch, cfg.seed, epoch);
        let mut lr = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&ClipSample> = idx.iter().map(|&i| train[i]).collect();
            let mut g = Graph::new();
            let loss = ck.model.batch_loss(&mut g, &batch, &weights, &cfg.loss, cfg.stage)?;
            let values = loss.values(&g);
            if !values.total.is_finite() {
                return Err(HctError::Numerical(format!(
                    "non-finite loss at epoch {epoch}, step {} (batch {b})",
                    opt.t
                )));
            }
            g.backward(loss.total)?;
            ck.model.store.zero_grads();
            ck.model.store.absorb_grads(&g)?;
            drop(g);
            lr = cosine_warmup_lr(opt.t as usize, total_steps, warmup, cfg.optim.lr);
            opt.step(&mut ck.model.store, lr)?;
            ck.model.store.zero_grads();
            let s = sums.get_or_insert_with(|| (0.0, BTreeMap::new(), BTreeMap::new()));
            s.0 += values.total;
            for (t, v) in values.tasks {
                *s.1.entry(t).or_default() += v;
            }
            for (p, v) in values.icl {
                *s.2.entry(p).or_default() += v;
            }
        }
        let n = batches.len() as f64;
        let (total, tasks, icl) = sums.unwrap_or_default();
        let entry = EpochLog {
            epoch,
            step: opt.t,
            lr,
            total: total / n,
            tasks: tasks.into_iter().map(|(t, v)| (t, v / n)).collect(),
            icl: icl.into_iter().map(|(p, v)| (p, v / n)).collect(),
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(w) = log_sink.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry)?)?;
        }
        log.push(entry);
        ck.epoch = epoch + 1;
        let due = sched.checkpoint_every > 0 && ck.epoch.is_multiple_of(sched.checkpoint_every);
        if let Some(dir) = &cfg.out_dir {
            if due || ck.epoch == sched.epochs {
                ck.optimizer = Some(opt.clone());
                let path = dir.join(format!("epoch-{:03}.ckpt", ck.epoch));
                ck.save(&path)?;
                saved.push(path);
            }
        }
    }
    ck.optimizer = Some(opt);
    Ok(TrainOutcome { checkpoint: ck, log, saved })
}

/// Scores every clip and reduces the metrics; reads nothing but the model.
pub fn evaluate(model: &HctModel, clips: &[&ClipSample]) -> Result<MetricsReport> {
    if clips.is_empty() {
        return Err(HctError::Usage("evaluation set is empty".into()));
    }
    let sizes = model.sizes;
    let (mut phase, mut step, mut action) = (Vec::new(), Vec::new(), Vec::new());
    let (mut box_scores, mut box_labels) = (Vec::new(), Vec::new());
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for (k, s) in clips.iter().enumerate() {
        let p = model.predict(s)?;
        dets.extend(detections(k, s, &p));
        gts.extend(ground_truth(k, s));
        box_labels.extend(s.kept_boxes().map(|b| b.class as usize));
        box_scores.extend(p.boxes);
        phase.push(p.phase);
        step.push(p.step);
        action.push(p.action);
    }
    let phase_labels: Vec<usize> = clips.iter().map(|s| s.phase).collect();
    let step_labels: Vec<usize> = clips.iter().map(|s| s.step).collect();
    let action_labels: Vec<Vec<bool>> = clips.iter().map(|s| s.actions.clone()).collect();
    let instrument = if box_scores.is_empty() {
        TaskMetrics::default()
    } else {
        TaskMetrics::single_label(&box_scores, &box_labels)?
    };
    Ok(MetricsReport {
        clips: clips.len(),
        phase: TaskMetrics::single_label(&phase, &phase_labels)?,
        step: TaskMetrics::single_label(&step, &step_labels)?,
        action: TaskMetrics::multi_label(&action, &action_labels)?,
        instrument,
        detection_map: map_detection(&dets, &gts, sizes.instruments, 0.5)?.map,
        params: Some(model.param_count()),
    })
}

/// The dataset's taxonomy must match the one the model was built for.
pub fn check_taxonomy(model: &HctModel, sizes: TaxonomySizes) -> Result<()> {
    if model.sizes != sizes {
        return Err(HctError::Config(format!(
            "checkpoint taxonomy {} does not match dataset taxonomy {sizes}",
            model.sizes
        )));
    }
    Ok(())
}
