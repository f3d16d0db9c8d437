//! Synthetic hierarchical workflow clips.
//!
//! A taxonomy partitions steps over phases and gives every step a sparse
//! co-occurrence row over actions and instruments. A clip is rendered as a
//! phase pattern plus a step pattern (low-frequency sinusoids), plus one
//! Gaussian blob per (instrument, action) pair whose drift direction is
//! fixed by the action, plus pixel noise.
//!
//! Clips are grouped into videos that walk through the steps in order, two
//! clips per step, so every step is covered once per video. Splits are made
//! by video.

mod io;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HctError, Result};
use crate::hram::BOX_FEATURE_DIM;
use crate::objectives::TaxonomySizes;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub use io::{manifest_path, read_dataset, read_manifest, write_dataset, DATASET_MAGIC, DATASET_VERSION};

/// Detector confidence below which boxes are discarded.
pub const CONFIDENCE_THRESHOLD: f32 = 0.75;

const MAX_ACTIONS_PER_STEP: usize = 6;
const MIN_ACTIONS_PER_STEP: usize = 2;
const MAX_INSTRUMENTS_PER_STEP: usize = 3;
const PATTERN_AMPLITUDE: f64 = 0.5;
const BLOB_SIGMA: f64 = 1.5;
const BLOB_SPEED: f64 = 0.6;
const BOX_JITTER: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub sizes: TaxonomySizes,
    pub seed: u64,
    /// Parent phase of every step; steps are ordered by phase.
    pub step_phase: Vec<usize>,
    /// `[step][action]` inclusion probabilities; zero where not permitted.
    pub action_probs: Vec<Vec<f64>>,
    /// `[step][instrument]` inclusion probabilities.
    pub instrument_probs: Vec<Vec<f64>>,
}

fn permitted_row<R: rand::Rng + ?Sized>(n: usize, chosen: &[usize], rng: &mut R) -> Vec<f64> {
    let mut row = vec![0.0; n];
    for &c in chosen {
        row[c] = if chosen.len() == 1 { 1.0 } else { rng.random_range(0.4..=1.0) };
    }
    row
}

/// Sparse `[steps][items]` table. Items are dealt round-robin first so each
/// is reachable, then every row is topped up to a random size in `lo..=hi`.
fn co_occurrence(items: usize, steps: usize, lo: usize, hi: usize, r: &mut Rng) -> Vec<Vec<f64>> {
    let mut per_step: Vec<Vec<usize>> = vec![Vec::new(); steps];
    for k in 0..items {
        per_step[k % steps].push(k);
    }
    per_step
        .iter_mut()
        .map(|row| {
            let target = r.random_range(lo.min(items)..=hi.min(items)).max(row.len());
            let mut pool: Vec<usize> = (0..items).filter(|k| !row.contains(k)).collect();
            pool.shuffle(r);
            row.extend(pool.into_iter().take(target - row.len()));
            row.sort_unstable();
            permitted_row(items, row, r)
        })
        .collect()
}

/// Deterministic taxonomy for `sizes`.
pub fn sample_taxonomy(seed: u64, sizes: TaxonomySizes) -> Result<Taxonomy> {
    let TaxonomySizes { phases, steps, actions, instruments } = sizes;
    if phases == 0 || steps == 0 || actions == 0 || instruments == 0 {
        return Err(HctError::Config(format!("taxonomy sizes must be >= 1, got {sizes}")));
    }
    if steps < phases {
        return Err(HctError::Config(format!("{steps} steps cannot cover {phases} phases")));
    }
    for (n, max, what) in
        [(actions, MAX_ACTIONS_PER_STEP, "actions"), (instruments, MAX_INSTRUMENTS_PER_STEP, "instruments")]
    {
        if n > max * steps {
            return Err(HctError::Config(format!(
                "{n} {what} cannot all be reachable from {steps} steps of at most {max} {what}"
            )));
        }
    }
    let mut r = rng::stream(seed, 0);
    let mut step_phase: Vec<usize> = (0..phases).chain((phases..steps).map(|_| r.random_range(0..phases))).collect();
    step_phase.sort_unstable();

    let action_probs = co_occurrence(actions, steps, MIN_ACTIONS_PER_STEP, MAX_ACTIONS_PER_STEP, &mut r);
    let instrument_probs = co_occurrence(instruments, steps, 1, MAX_INSTRUMENTS_PER_STEP, &mut r);
    let t = Taxonomy { sizes, seed, step_phase, action_probs, instrument_probs };
    t.validate()?;
    Ok(t)
}

impl Taxonomy {
    pub fn validate(&self) -> Result<()> {
        let s = self.sizes;
        let bad = |m: String| Err(HctError::Data(format!("invalid taxonomy: {m}")));
        if self.step_phase.len() != s.steps || self.step_phase.iter().any(|&p| p >= s.phases) {
            return bad("step parents do not match the phase count".into());
        }
        if (0..s.phases).any(|p| !self.step_phase.contains(&p)) {
            return bad("a phase owns no step".into());
        }
        for (rows, width, what) in
            [(&self.action_probs, s.actions, "action"), (&self.instrument_probs, s.instruments, "instrument")]
        {
            if rows.len() != s.steps || rows.iter().any(|r| r.len() != width) {
                return bad(format!("{what} co-occurrence table has the wrong shape"));
            }
            if rows.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("{what} co-occurrence entry outside [0, 1]"));
            }
            if rows.iter().any(|r| r.iter().all(|&p| p == 0.0)) {
                return bad(format!("a step permits no {what}"));
            }
            if (0..width).any(|k| rows.iter().all(|r| r[k] == 0.0)) {
                return bad(format!("an {what} is unreachable from every step"));
            }
        }
        Ok(())
    }

    pub fn steps_of(&self, phase: usize) -> Vec<usize> {
        (0..self.sizes.steps).filter(|&s| self.step_phase[s] == phase).collect()
    }
}

/// Axis-aligned box `(x1, y1, x2, y2)` in pixels.
pub type BoxCoords = [f32; 4];

/// One rendered instrument: its true box, the detector's box and confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentBox {
    pub gt: BoxCoords,
    pub detected: BoxCoords,
    pub class: u32,
    /// Action carried by this instrument's motion.
    pub action: u32,
    pub confidence: f32,
}

impl InstrumentBox {
    pub fn kept(&self) -> bool {
        self.confidence >= CONFIDENCE_THRESHOLD
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub id: u64,
    pub video: u64,
    pub seed: u64,
    pub split: Split,
    pub phase: usize,
    pub step: usize,
    /// Multi-hot clip-level labels.
    pub actions: Vec<bool>,
    pub instruments: Vec<bool>,
    pub boxes: Vec<InstrumentBox>,
    /// `[kept boxes, 256]` embeddings, row-aligned with the kept boxes.
    pub box_features: Option<(usize, Vec<f32>)>,
    /// `[T, H, W, Cin]`
    pub clip_shape: [usize; 4],
    pub clip: Vec<f32>,
}

impl ClipSample {
    pub fn clip_tensor(&self) -> Tensor {
        Tensor::new(self.clip_shape.to_vec(), self.clip.iter().map(|&v| v as f64).collect())
            .expect("clip shape matches its data")
    }

    pub fn kept_boxes(&self) -> impl Iterator<Item = &InstrumentBox> {
        self.boxes.iter().filter(|b| b.kept())
    }

    pub fn box_feature_tensor(&self) -> Option<Tensor> {
        self.box_features.as_ref().map(|(rows, data)| {
            Tensor::new(vec![*rows, BOX_FEATURE_DIM], data.iter().map(|&v| v as f64).collect())
                .expect("box features match their row count")
        })
    }

    pub fn action_targets(&self) -> Vec<f64> {
        self.actions.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateOptions {
    pub seed: u64,
    pub taxonomy_seed: u64,
    pub sizes: TaxonomySizes,
    pub train_clips: usize,
    pub test_clips: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Probability of relabelling a clip with a sibling step.
    pub label_noise: f64,
    /// Standard deviation of box-embedding noise.
    pub box_noise: f64,
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            taxonomy_seed: 0,
            sizes: TaxonomySizes::default(),
            train_clips: 512,
            test_clips: 128,
            noise: 0.5,
            label_noise: 0.0,
            box_noise: 0.5,
            clip_len: 16,
            height: 32,
            width: 32,
            channels: 3,
        }
    }
}

impl GenerateOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.box_noise >= 0.0 && self.box_noise.is_finite()) {
            return Err(HctError::Config("noise levels must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(HctError::Config(format!("label noise {} outside [0, 1]", self.label_noise)));
        }
        if self.clip_len == 0 || self.height < 8 || self.width < 8 || self.channels == 0 {
            return Err(HctError::Config(format!(
                "clip geometry {}×{}×{}×{} too small",
                self.clip_len, self.height, self.width, self.channels
            )));
        }
        Ok(())
    }

    pub fn clips_per_video(&self) -> usize {
        2 * self.sizes.steps
    }
}

/// Fixed appearance parameters derived from the taxonomy seed.
#[derive(Clone, Debug)]
pub struct Renderer {
    height: usize,
    width: usize,
    channels: usize,
    clip_len: usize,
    phase_patterns: Vec<Vec<f64>>,
    step_patterns: Vec<Vec<f64>>,
    instrument_colors: Vec<Vec<f64>>,
    instrument_embeddings: Vec<Vec<f64>>,
    action_angles: Vec<f64>,
}

fn sinusoid<R: rand::Rng + ?Sized>(h: usize, w: usize, c: usize, rng: &mut R) -> Vec<f64> {
    let (fx, fy) = loop {
        let f = (rng.random_range(0..=3) as f64, rng.random_range(0..=3) as f64);
        if f != (0.0, 0.0) {
            break f;
        }
    };
    let offsets: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let arg = std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64);
            out.extend(offsets.iter().map(|o| PATTERN_AMPLITUDE * (arg + o).sin()));
        }
    }
    out
}

impl Renderer {
    pub fn new(tax: &Taxonomy, opts: &GenerateOptions) -> Self {
        let mut r = rng::stream(tax.seed, 1);
        let (h, w, c) = (opts.height, opts.width, opts.channels);
        let phase_patterns = (0..tax.sizes.phases).map(|_| sinusoid(h, w, c, &mut r)).collect();
        let step_patterns = (0..tax.sizes.steps).map(|_| sinusoid(h, w, c, &mut r)).collect();
        let instrument_colors = (0..tax.sizes.instruments)
            .map(|_| {
                let v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut r)).collect();
                let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt().max(1e-6);
                v.iter().map(|x| 1.5 * x / n * (c as f64).sqrt()).collect()
            })
            .collect();
        let instrument_embeddings = (0..tax.sizes.instruments)
            .map(|_| (0..BOX_FEATURE_DIM).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let spin = r.random_range(0.0..std::f64::consts::TAU);
        let action_angles = (0..tax.sizes.actions)
            .map(|a| spin + std::f64::consts::TAU * a as f64 / tax.sizes.actions as f64)
            .collect();
        Self {
            height: h,
            width: w,
            channels: c,
            clip_len: opts.clip_len,
            phase_patterns,
            step_patterns,
            instrument_colors,
            instrument_embeddings,
            action_angles,
        }
    }
}

/// Bernoulli draws over a co-occurrence row; at least one entry is forced
/// (the most probable) when none fires.
fn draw_row(row: &[f64], r: &mut Rng) -> Vec<bool> {
    let mut out: Vec<bool> = row.iter().map(|&p| p > 0.0 && r.random::<f64>() < p).collect();
    if !out.contains(&true) {
        let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        out[best] = true;
    }
    out
}

fn clamp_box(b: [f64; 4], w: usize, h: usize) -> BoxCoords {
    let x1 = b[0].clamp(0.0, w as f64 - 1.0);
    let y1 = b[1].clamp(0.0, h as f64 - 1.0);
    let x2 = b[2].clamp(x1 + 1.0, w as f64);
    let y2 = b[3].clamp(y1 + 1.0, h as f64);
    [x1 as f32, y1 as f32, x2 as f32, y2 as f32]
}

/// Identity and placement of one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipRequest {
    pub id: u64,
    pub video: u64,
    pub split: Split,
    /// Step whose appearance is rendered.
    pub step: usize,
    pub seed: u64,
}

/// Renders one clip. Labels follow the rendered step unless label noise
/// relabels it with a sibling step, in which case actions and instruments
/// are drawn for the new label.
pub fn generate_clip(tax: &Taxonomy, renderer: &Renderer, req: ClipRequest, opts: &GenerateOptions) -> ClipSample {
    let mut r = rng::rng(req.seed);
    let mut step = req.step;
    let phase = tax.step_phase[step];
    if opts.label_noise > 0.0 && r.random::<f64>() < opts.label_noise {
        let siblings: Vec<usize> = tax.steps_of(phase).into_iter().filter(|&s| s != req.step).collect();
        if !siblings.is_empty() {
            step = siblings[r.random_range(0..siblings.len())];
        }
    }
    let actions = draw_row(&tax.action_probs[step], &mut r);
    let instruments = draw_row(&tax.instrument_probs[step], &mut r);
    let act_ids: Vec<usize> = (0..actions.len()).filter(|&a| actions[a]).collect();
    let inst_ids: Vec<usize> = (0..instruments.len()).filter(|&i| instruments[i]).collect();
    let blobs = act_ids.len().max(inst_ids.len());

    let (t_len, h, w, c) = (renderer.clip_len, renderer.height, renderer.width, renderer.channels);
    let mut clip = vec![0.0f64; t_len * h * w * c];
    let base: Vec<f64> =
        renderer.phase_patterns[phase].iter().zip(&renderer.step_patterns[req.step]).map(|(a, b)| a + b).collect();
    for frame in clip.chunks_mut(h * w * c) {
        frame.copy_from_slice(&base);
    }

    let mut boxes = Vec::with_capacity(blobs);
    let margin = 2.0 * BLOB_SIGMA + BLOB_SPEED * t_len as f64 / 2.0;
    for k in 0..blobs {
        let class = inst_ids[k % inst_ids.len()];
        let action = act_ids[k % act_ids.len()];
        let centre = (
            r.random_range(margin..(w as f64 - margin).max(margin + 1e-9)),
            r.random_range(margin..(h as f64 - margin).max(margin + 1e-9)),
        );
        let angle = renderer.action_angles[action];
        let vel = (BLOB_SPEED * angle.cos(), BLOB_SPEED * angle.sin());
        let colour = &renderer.instrument_colors[class];
        let mut last = centre;
        for t in 0..t_len {
            let dt = t as f64 - (t_len as f64 - 1.0) / 2.0;
            let (cx, cy) = (centre.0 + vel.0 * dt, centre.1 + vel.1 * dt);
            last = (cx, cy);
            let reach = (3.0 * BLOB_SIGMA).ceil() as isize;
            for y in (cy as isize - reach).max(0)..=(cy as isize + reach).min(h as isize - 1) {
                for x in (cx as isize - reach).max(0)..=(cx as isize + reach).min(w as isize - 1) {
                    let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                    let g = (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                    let px = ((t * h + y as usize) * w + x as usize) * c;
                    for ch in 0..c {
                        clip[px + ch] += g * colour[ch];
                    }
                }
            }
        }
        let half = 2.0 * BLOB_SIGMA;
        let gt = clamp_box([last.0 - half, last.1 - half, last.0 + half, last.1 + half], w, h);
        let jitter = |r: &mut Rng| BOX_JITTER * Distribution::<f64>::sample(&StandardNormal, r);
        let detected = clamp_box(
            [
                gt[0] as f64 + jitter(&mut r),
                gt[1] as f64 + jitter(&mut r),
                gt[2] as f64 + jitter(&mut r),
                gt[3] as f64 + jitter(&mut r),
            ],
            w,
            h,
        );
        let confidence = r.random_range(0.6f32..=1.0f32);
        boxes.push(InstrumentBox { gt, detected, class: class as u32, action: action as u32, confidence });
    }
    if opts.noise > 0.0 {
        for v in clip.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v += opts.noise * z;
        }
    }

    let kept: Vec<&InstrumentBox> = boxes.iter().filter(|b| b.kept()).collect();
    let box_features = if kept.is_empty() {
        None
    } else {
        let mut data = Vec::with_capacity(kept.len() * BOX_FEATURE_DIM);
        for b in &kept {
            for &e in &renderer.instrument_embeddings[b.class as usize] {
                let z: f64 = StandardNormal.sample(&mut r);
                data.push((e + opts.box_noise * z) as f32);
            }
        }
        Some((kept.len(), data))
    };
    ClipSample {
        id: req.id,
        video: req.video,
        seed: req.seed,
        split: req.split,
        phase,
        step,
        actions,
        instruments,
        boxes,
        box_features,
        clip_shape: [t_len, h, w, c],
        clip: clip.into_iter().map(|v| v as f32).collect(),
    }
}

/// Class frequencies of one split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frequencies {
    pub clips: usize,
    pub phase: Vec<usize>,
    pub step: Vec<usize>,
    pub action: Vec<usize>,
    /// Clip-level instrument presence.
    pub instrument: Vec<usize>,
    /// Kept (detected) boxes per true class.
    pub instrument_boxes: Vec<usize>,
}

impl Frequencies {
    pub fn count<'a>(sizes: TaxonomySizes, samples: impl IntoIterator<Item = &'a ClipSample>) -> Self {
        let mut f = Frequencies {
            clips: 0,
            phase: vec![0; sizes.phases],
            step: vec![0; sizes.steps],
            action: vec![0; sizes.actions],
            instrument: vec![0; sizes.instruments],
            instrument_boxes: vec![0; sizes.instruments],
        };
        for s in samples {
            f.clips += 1;
            f.phase[s.phase] += 1;
            f.step[s.step] += 1;
            for (a, &on) in s.actions.iter().enumerate() {
                f.action[a] += on as usize;
            }
            for (i, &on) in s.instruments.iter().enumerate() {
                f.instrument[i] += on as usize;
            }
            for b in s.kept_boxes() {
                f.instrument_boxes[b.class as usize] += 1;
            }
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub videos: Vec<u64>,
    pub frequencies: Frequencies,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub options: GenerateOptions,
    pub taxonomy: Taxonomy,
    pub train: SplitManifest,
    pub test: SplitManifest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub samples: Vec<ClipSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn train(&self) -> Vec<&ClipSample> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&ClipSample> {
        self.split(Split::Test).collect()
    }

    pub fn manifest(&self, options: &GenerateOptions) -> DatasetManifest {
        let split_manifest = |split| {
            let mut videos: Vec<u64> = self.split(split).map(|s| s.video).collect();
            videos.dedup();
            SplitManifest { videos, frequencies: Frequencies::count(self.taxonomy.sizes, self.split(split)) }
        };
        DatasetManifest {
            format_version: DATASET_VERSION,
            options: options.clone(),
            taxonomy: self.taxonomy.clone(),
            train: split_manifest(Split::Train),
            test: split_manifest(Split::Test),
        }
    }
}

/// Whole dataset as a pure function of the options.
pub fn generate_dataset(opts: &GenerateOptions) -> Result<Dataset> {
    opts.validate()?;
    let taxonomy = sample_taxonomy(opts.taxonomy_seed, opts.sizes)?;
    let renderer = Renderer::new(&taxonomy, opts);
    let per_video = opts.clips_per_video();
    let mut samples = Vec::with_capacity(opts.train_clips + opts.test_clips);
    let mut video = 0u64;
    let mut id = 0u64;
    for (split, n) in [(Split::Train, opts.train_clips), (Split::Test, opts.test_clips)] {
        let mut made = 0;
        while made < n {
            let take = per_video.min(n - made);
            for k in 0..take {
                let req = ClipRequest {
                    id,
                    video,
                    split,
                    step: k / 2 % opts.sizes.steps,
                    seed: rng::derive_seed(opts.seed, id),
                };
                samples.push(generate_clip(&taxonomy, &renderer, req, opts));
                id += 1;
            }
            made += take;
            video += 1;
        }
    }
    Ok(Dataset { taxonomy, samples })
}
