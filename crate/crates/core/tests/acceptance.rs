//! Acceptance suite: one test per criterion, each reporting a single
//! PASS/FAIL line on the terminal (bypassing output capture) before it
//! asserts. Criteria run one at a time so their wall-clock budgets are
//! measured without contention.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use hct_core::adapters::{FreezePreset, SpatialAdapter, TemporalAdapter};
use hct_core::attention::{scaled_attention, AttentionConfig, AttentionWeights, Grid};
use hct_core::harness::{self, evaluate, gradcheck_cmd, paramcount_cmd, AdamW, Checkpoint, RunConfig};
use hct_core::hram::{correlation_attention, Hram, HramConfig, TaskFeatures, TaskId};
use hct_core::metrics::{average_precision, balanced_accuracy, iou};
use hct_core::model::{HctModel, ModelConfig};
use hct_core::objectives::{icl_pair_loss, ClassWeights, TaxonomySizes};
use hct_core::rng;
use hct_core::synthdata::{generate_dataset, read_dataset, write_dataset, ClipSample, Dataset, GenerateOptions};
use hct_core::tensor::{grad_check, GradCheckReport};
use hct_core::{Graph, PoolKind, Result, Tensor, Var};
use rand::Rng as _;

const DESK: &str = include_str!("../../../configs/desk.toml");
const BASELINE: &str = include_str!("../../../configs/baseline.toml");

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Collects failed checks of one criterion and reports them on one line.
struct Criterion {
    id: u32,
    name: &'static str,
    start: Instant,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Criterion {
    fn new(id: u32, name: &'static str) -> Self {
        Self { id, name, start: Instant::now(), failures: Vec::new(), notes: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn finish(self) {
        let pass = self.failures.is_empty();
        let mut detail = self.notes.join("; ");
        if !pass {
            detail = format!("{detail}; failed: {}", self.failures.join(" | "));
        }
        let line = format!(
            "criterion {} {}: {} [{:.1}s] {}\n",
            self.id,
            self.name,
            if pass { "PASS" } else { "FAIL" },
            self.start.elapsed().as_secs_f64(),
            detail
        );
        let _ = std::io::stderr().write_all(line.as_bytes());
        assert!(pass, "{line}");
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng::rng(seed))
}

fn desk() -> RunConfig {
    RunConfig::from_toml_str(DESK).unwrap()
}

fn baseline() -> RunConfig {
    RunConfig::from_toml_str(BASELINE).unwrap()
}

// 1 ---------------------------------------------------------------------------

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(y), seed);
    let y = g.mul_const(y, w.data())?;
    Ok(g.sum(y))
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    vec![
        (
            "matmul",
            vec![randn(&[3, 4], 1), randn(&[4, 2], 2)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 100)
            }),
        ),
        (
            "batched matmul",
            vec![randn(&[2, 3, 4], 3), randn(&[2, 4, 2], 4)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 101)
            }),
        ),
        (
            "transpose",
            vec![randn(&[3, 4], 5)],
            Box::new(|g, v| {
                let y = g.transpose(v[0])?;
                weighted_sum(g, y, 102)
            }),
        ),
        (
            "add sub mul",
            vec![randn(&[3, 2], 6), randn(&[3, 2], 7)],
            Box::new(|g, v| {
                let a = g.add(v[0], v[1])?;
                let s = g.sub(v[0], v[1])?;
                let y = g.mul(a, s)?;
                weighted_sum(g, y, 103)
            }),
        ),
        (
            "bias and scale",
            vec![randn(&[3, 2], 8), randn(&[2], 9)],
            Box::new(|g, v| {
                let y = g.add_bias(v[0], v[1])?;
                let y = g.scale(y, -1.3);
                weighted_sum(g, y, 104)
            }),
        ),
        (
            "masked softmax",
            vec![randn(&[3, 4], 10)],
            Box::new(|g, v| {
                let y = g.softmax_rows(v[0], Some(&[true, true, false, true]))?;
                weighted_sum(g, y, 105)
            }),
        ),
        (
            "log softmax",
            vec![randn(&[3, 4], 11)],
            Box::new(|g, v| {
                let y = g.log_softmax_rows(v[0]);
                weighted_sum(g, y, 106)
            }),
        ),
        (
            "gelu",
            vec![randn(&[4, 3], 12)],
            Box::new(|g, v| {
                let y = g.gelu(v[0]);
                weighted_sum(g, y, 107)
            }),
        ),
        (
            "layer norm",
            vec![randn(&[3, 6], 13), randn(&[6], 14), randn(&[6], 15)],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, 108)
            }),
        ),
        (
            "depthwise conv3d",
            vec![randn(&[4, 2, 3, 2], 16), randn(&[3, 1, 3, 2], 17)],
            Box::new(|g, v| {
                let y = g.depthwise_conv3d(v[0], v[1])?;
                weighted_sum(g, y, 109)
            }),
        ),
        (
            "avg pool",
            vec![randn(&[4, 4, 2, 3], 18)],
            Box::new(|g, v| {
                let y = g.pool_st(v[0], [2, 2, 1], PoolKind::Avg)?;
                weighted_sum(g, y, 110)
            }),
        ),
        (
            "max pool",
            vec![randn(&[2, 4, 2, 2], 19)],
            Box::new(|g, v| {
                let y = g.pool_st(v[0], [1, 2, 2], PoolKind::Max)?;
                weighted_sum(g, y, 111)
            }),
        ),
        (
            "channel concat and slice",
            vec![randn(&[3, 2], 20), randn(&[3, 3], 21)],
            Box::new(|g, v| {
                let c = g.concat_channels(&[v[0], v[1]])?;
                let y = g.slice_channels(c, 1, 4)?;
                weighted_sum(g, y, 112)
            }),
        ),
        (
            "row concat, slice and pad",
            vec![randn(&[3, 2], 22), randn(&[2, 2], 23)],
            Box::new(|g, v| {
                let c = g.concat_rows(&[v[0], v[1]])?;
                let r = g.rows(c, 1, 4)?;
                let y = g.pad_rows(r, 6)?;
                weighted_sum(g, y, 113)
            }),
        ),
        (
            "l2 normalize",
            vec![randn(&[3, 4], 24)],
            Box::new(|g, v| {
                let y = g.l2_normalize(v[0]);
                weighted_sum(g, y, 114)
            }),
        ),
        (
            "reshape and row mean",
            vec![randn(&[2, 3, 4], 25)],
            Box::new(|g, v| {
                let r = g.reshape(v[0], &[6, 4])?;
                let y = g.mean_rows(r);
                weighted_sum(g, y, 115)
            }),
        ),
        (
            "row pick",
            vec![randn(&[3, 4], 26)],
            Box::new(|g, v| {
                let y = g.pick_rows(v[0], &[2, 0, 3])?;
                weighted_sum(g, y, 116)
            }),
        ),
        (
            "cosine similarity",
            vec![randn(&[12], 27), randn(&[12], 28)],
            Box::new(|g, v| {
                let y = hct_core::tensor::cosine_sim(g, v[0], v[1])?;
                weighted_sum(g, y, 117)
            }),
        ),
        (
            "binary cross-entropy",
            vec![randn(&[2, 3], 29)],
            Box::new(|g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], &[0.5, 1.0, 2.0, 1.0, 1.5, 0.7])),
        ),
    ]
}

#[test]
fn criterion_1_gradient_suite() {
    let _guard = serial();
    let mut c = Criterion::new(1, "gradient suite");
    let mut worst = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    for (name, inputs, f) in op_cases() {
        let r = grad_check(|g, v| f(g, v), &inputs, 1e-4).unwrap();
        c.check(r.max_rel_error < harness::GRADCHECK_TOLERANCE, || format!("{name}: {:.2e}", r.max_rel_error));
        worst = worst.merge(r);
    }
    c.note(format!("ops max rel {:.2e} over {} coords", worst.max_rel_error, worst.coords_checked));

    // the full model is checked on every coordinate; the variants share its
    // code paths, so a per-tensor sample covers what they add
    let mut adapted = desk();
    adapted.model.adapters = FreezePreset::SpatialTemporal.adapters(0.25, [3, 1, 1]);
    let variants = [("hct", desk(), None), ("baseline", baseline(), Some(8)), ("hct+st-ada", adapted, Some(8))];
    for (name, cfg, coords) in variants {
        let s = gradcheck_cmd(&cfg, coords).unwrap();
        c.check(s.tokens <= 16 && s.channels <= 12, || format!("{name}: L = {}, C = {}", s.tokens, s.channels));
        c.check(s.passed, || format!("{name}: {:?}", s.report));
        c.note(format!(
            "{name} L={} C={} max rel {:.2e} over {} coords",
            s.tokens, s.channels, s.report.max_rel_error, s.report.coords_checked
        ));
    }
    let secs = c.start.elapsed().as_secs_f64();
    c.check(secs < 120.0, || format!("runtime {secs:.1}s"));
    c.finish();
}

// 2 ---------------------------------------------------------------------------

/// Per-head double loop: scores, a stable softmax and the weighted values.
fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let c = q[0].len();
    let d = c / heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| (0..d).map(|t| qi[h * d + t] * kj[h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for (j, vj) in v.iter().enumerate() {
                let p = (s[j] - m).exp() / z;
                for t in 0..d {
                    out[i][h * d + t] += p * vj[h * d + t];
                }
            }
        }
    }
    out
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn affine(x: &[Vec<f64>], w: &Tensor, b: Option<&Tensor>) -> Vec<Vec<f64>> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| {
            (0..n_out)
                .map(|o| (0..n_in).map(|i| r[i] * w.get(&[i, o])).sum::<f64>() + b.map_or(0.0, |b| b.data()[o]))
                .collect()
        })
        .collect()
}

/// Mean over non-overlapping windows of a row-major `l×h×m` token grid.
fn naive_avg_pool(x: &[Vec<f64>], grid: Grid, s: [usize; 3]) -> Vec<Vec<f64>> {
    let c = x[0].len();
    let (ol, oh, om) = (grid.l.div_ceil(s[0]), grid.h.div_ceil(s[1]), grid.m.div_ceil(s[2]));
    let mut out = Vec::new();
    for a in 0..ol {
        for b in 0..oh {
            for e in 0..om {
                let mut acc = vec![0.0; c];
                let mut n = 0.0;
                for t in a * s[0]..((a + 1) * s[0]).min(grid.l) {
                    for y in b * s[1]..((b + 1) * s[1]).min(grid.h) {
                        for z in e * s[2]..((e + 1) * s[2]).min(grid.m) {
                            let r = &x[(t * grid.h + y) * grid.m + z];
                            acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                            n += 1.0;
                        }
                    }
                }
                out.push(acc.into_iter().map(|v| v / n).collect());
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_2_attention_oracles() {
    let _guard = serial();
    let mut c = Criterion::new(2, "attention oracles");
    let mut r = rng::rng(2024);
    let (mut worst_scaled, mut worst_corr) = (0.0f64, 0.0f64);
    for inst in 0..100u64 {
        let heads = [1, 2, 3][r.random_range(0..3)];
        let channels = heads * r.random_range(1..=3);
        let (l1, l2) = (r.random_range(1..=6), r.random_range(1..=6));
        let (q, k, v) = (
            randn(&[l1, channels], 3 * inst),
            randn(&[l2, channels], 3 * inst + 1),
            randn(&[l2, channels], 3 * inst + 2),
        );
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = scaled_attention(&mut g, qv, kv, vv, heads, None).unwrap();
        let want = naive_attention(&rows_of(&q), &rows_of(&k), &rows_of(&v), heads);
        worst_scaled = worst_scaled.max(max_diff(g.value(out), &want));

        // correlation attention: query grid 1×l1×1, key grid 1×l2'×1 pooled by two
        let mut store = hct_core::ParamStore::new();
        let w = AttentionWeights::new(&mut store, "a", channels, false, &mut r).unwrap();
        let bias_q = randn(&[channels], 9000 + inst);
        let bias_v = randn(&[channels], 9500 + inst);
        *store.tensor_mut(w.q.bias.unwrap()) = bias_q.clone();
        *store.tensor_mut(w.v.bias.unwrap()) = bias_v.clone();
        let kv_rows = r.random_range(1..=6);
        let (gi, gj) = (Grid::new(1, l1, 1), Grid::new(1, kv_rows, 1));
        let kv_stride = [1, if kv_rows > 1 { 2 } else { 1 }, 1];
        let cfg =
            AttentionConfig { pool: PoolKind::Avg, ..AttentionConfig::new(channels, heads, [1, 1, 1], kv_stride) };
        let fi = randn(&[l1, channels], 7000 + inst);
        let fj = randn(&[kv_rows, channels], 8000 + inst);
        let mut g = Graph::new();
        let (a, b) = (g.constant(fi.clone()), g.constant(fj.clone()));
        let out = correlation_attention(&mut g, &store, a, gi, b, gj, &cfg, &w, None).unwrap();
        let wq = store.tensor(w.q.weight);
        let wk = store.tensor(w.k.weight);
        let wv = store.tensor(w.v.weight);
        let qn = affine(&rows_of(&fi), wq, Some(&bias_q));
        let kn = naive_avg_pool(&affine(&rows_of(&fj), wk, None), gj, kv_stride);
        let vn = naive_avg_pool(&affine(&rows_of(&fj), wv, Some(&bias_v)), gj, kv_stride);
        let want = naive_attention(&qn, &kn, &vn, heads);
        worst_corr = worst_corr.max(max_diff(g.value(out), &want));
    }
    c.check(worst_scaled < 1e-10, || format!("scaled attention max diff {worst_scaled:.2e}"));
    c.check(worst_corr < 1e-10, || format!("correlation attention max diff {worst_corr:.2e}"));
    c.note(format!("100 instances; scaled {worst_scaled:.1e}, correlation {worst_corr:.1e}"));
    c.finish();
}

// 3 ---------------------------------------------------------------------------

const HRAM_GRID: Grid = Grid { l: 2, h: 2, m: 2 };

fn hram_fixture(tasks: Vec<TaskId>, channels: usize, seed: u64) -> (hct_core::ParamStore, Hram) {
    let mut store = hct_core::ParamStore::new();
    let cfg = HramConfig { tasks, heads: 2, kv_stride: [1, 2, 1], mlp_ratio: 2, ..HramConfig::default() };
    let hram = Hram::new(&mut store, "hram", cfg, channels, None, None, &mut rng::rng(seed)).unwrap();
    (store, hram)
}

/// Box rows `0..3` of the instrument map are valid; the rest are padding.
fn instrument_keep() -> Vec<bool> {
    (0..HRAM_GRID.len()).map(|r| r < 3).collect()
}

fn hram_inputs(channels: usize, seed: u64) -> BTreeMap<TaskId, Tensor> {
    TaskId::ALL
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut m = randn(&[HRAM_GRID.len(), channels], seed + i as u64);
            if t == TaskId::Instrument {
                m.data_mut()[3 * channels..].fill(0.0);
            }
            (t, m)
        })
        .collect()
}

fn hram_outputs(
    store: &hct_core::ParamStore,
    hram: &Hram,
    maps: &BTreeMap<TaskId, Tensor>,
) -> BTreeMap<TaskId, (Vec<usize>, Vec<f64>)> {
    let mut g = Graph::new();
    let mut feats = TaskFeatures::new(HRAM_GRID);
    for &t in &hram.cfg.tasks {
        let v = g.constant(maps[&t].clone());
        let keep = (t == TaskId::Instrument).then(instrument_keep);
        feats = feats.with(t, v, keep);
    }
    hram.forward(&mut g, store, &feats)
        .unwrap()
        .into_iter()
        .map(|(t, v)| (t, (g.shape(v).to_vec(), g.value(v).to_vec())))
        .collect()
}

#[test]
fn criterion_3_hram_laws() {
    let _guard = serial();
    let mut c = Criterion::new(3, "relation aggregation laws");
    let channels = 12;
    let (mut store, hram) = hram_fixture(TaskId::ALL.to_vec(), channels, 31);
    let maps = hram_inputs(channels, 300);
    let out = hram_outputs(&store, &hram, &maps);
    for t in TaskId::ALL {
        c.check(out[&t].0 == maps[&t].shape(), || {
            format!("{t}: output {:?} vs input {:?}", out[&t].0, maps[&t].shape())
        });
    }

    // zero every secondary path, then perturb everything but the primary
    for b in &hram.blocks {
        for p in &b.pairs {
            store.tensor_mut(p.mlp_j.weight).data_mut().fill(0.0);
            store.tensor_mut(p.mlp_j.bias.unwrap()).data_mut().fill(0.0);
        }
    }
    let base = hram_outputs(&store, &hram, &maps);
    for primary in TaskId::ALL {
        let mut perturbed = maps.clone();
        for (t, m) in perturbed.iter_mut() {
            if *t != primary {
                let rows = if *t == TaskId::Instrument { 3 } else { HRAM_GRID.len() };
                m.data_mut()[..rows * channels].iter_mut().for_each(|v| *v = 2.0 * -*v + 0.3);
            }
        }
        let after = hram_outputs(&store, &hram, &perturbed);
        let same = after[&primary].1.iter().zip(&base[&primary].1).all(|(a, b)| a.to_bits() == b.to_bits());
        c.check(same, || format!("{primary} depends on secondary inputs with the secondary path zeroed"));
    }
    // and the same perturbation does reach a primary through live weights
    let (live_store, live) = hram_fixture(TaskId::ALL.to_vec(), channels, 31);
    let mut perturbed = maps.clone();
    perturbed.get_mut(&TaskId::Step).unwrap().data_mut().iter_mut().for_each(|v| *v += 1.0);
    let a = hram_outputs(&live_store, &live, &maps);
    let b = hram_outputs(&live_store, &live, &perturbed);
    c.check(a[&TaskId::Phase].1 != b[&TaskId::Phase].1, || "live secondary path has no effect".into());

    for n in [2usize, 3, 4] {
        let channels = 48;
        let (store, hram) = hram_fixture(TaskId::ALL[..n].to_vec(), channels, 40 + n as u64);
        let want = channels / (n - 1);
        c.check(hram.cfg.slice_width(channels).unwrap() == want, || format!("n = {n}: slice width"));
        for b in &hram.blocks {
            c.check(b.pairs.len() == n - 1, || format!("n = {n}: {} pairs", b.pairs.len()));
            let widths: usize = b.pairs.iter().map(|p| store.tensor(p.mlp_j.weight).shape()[1]).sum();
            c.check(widths == channels, || format!("n = {n}: slices sum to {widths}"));
            for p in &b.pairs {
                c.check(store.tensor(p.mlp_j.weight).shape() == [channels, want], || format!("n = {n}: slice shape"));
            }
        }
        let out = hram_outputs(&store, &hram, &hram_inputs(channels, 500));
        c.check(out.values().all(|(s, _)| s == &[HRAM_GRID.len(), channels]), || format!("n = {n}: output width"));
        c.note(format!("n={n} slice {want}"));
    }
    c.finish();
}

// 4 ---------------------------------------------------------------------------

fn pair_loss(zi: &Tensor, zj: &Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(zi.clone()), g.constant(zj.clone()));
    let l = icl_pair_loss(&mut g, a, b, tau).unwrap();
    g.scalar(l)
}

/// One direction: `−Σ_b log(exp(s_bb/τ) / Σ_k exp(s_bk/τ))` over cosine similarities.
fn naive_direction(zi: &Tensor, zj: &Tensor, tau: f64) -> f64 {
    let (a, b) = (rows_of(zi), rows_of(zj));
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        dot / (x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt())
    };
    (0..a.len())
        .map(|r| {
            let z: f64 = b.iter().map(|y| (cos(&a[r], y) / tau).exp()).sum();
            -((cos(&a[r], &b[r]) / tau).exp() / z).ln()
        })
        .sum()
}

/// Random orthogonal matrix by Gram–Schmidt.
fn orthogonal(p: usize, seed: u64) -> Tensor {
    let raw = rows_of(&randn(&[p, p], seed));
    let mut q: Vec<Vec<f64>> = Vec::new();
    for mut v in raw {
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    Tensor::new(vec![p, p], q.concat()).unwrap()
}

fn times(x: &Tensor, w: &Tensor) -> Tensor {
    let rows = affine(&rows_of(x), w, None);
    Tensor::new(vec![rows.len(), w.shape()[1]], rows.concat()).unwrap()
}

#[test]
fn criterion_4_contrastive_analytics() {
    let _guard = serial();
    let mut c = Criterion::new(4, "contrastive analytics");
    for b in [2usize, 3, 4, 8, 20] {
        let z = Tensor::from_fn(&[b, 4], |i| [0.5, -1.0, 2.0, 0.25][i % 4]);
        let want = b as f64 * (b as f64).ln();
        let dir = naive_direction(&z, &z, 0.07);
        let got = pair_loss(&z, &z, 0.07);
        c.check((dir - want).abs() < 1e-9, || format!("B = {b}: oracle direction {dir} vs {want}"));
        c.check((got - 2.0 * want).abs() < 1e-9, || format!("B = {b}: pair loss {got} vs 2·{want}"));
    }
    let mut worst_rot = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for s in 0..20u64 {
        let (b, p) = (2 + (s as usize % 5), 3 + (s as usize % 4));
        let zi = randn(&[b, p], 40 + s);
        let zj = randn(&[b, p], 80 + s);
        let q = orthogonal(p, 120 + s);
        let l = pair_loss(&zi, &zj, 0.07);
        worst_rot = worst_rot.max((pair_loss(&times(&zi, &q), &times(&zj, &q), 0.07) - l).abs() / l.abs().max(1.0));
        worst_sym = worst_sym.max((pair_loss(&zj, &zi, 0.07) - l).abs());
        let oracle = naive_direction(&zi, &zj, 0.07) + naive_direction(&zj, &zi, 0.07);
        worst_oracle = worst_oracle.max((oracle - l).abs() / l.abs().max(1.0));
    }
    c.check(worst_rot < 1e-12, || format!("rotation {worst_rot:.2e}"));
    c.check(worst_sym < 1e-12, || format!("symmetry {worst_sym:.2e}"));
    c.check(worst_oracle < 1e-9, || format!("direct formula {worst_oracle:.2e}"));

    // positives strictly more similar than every negative: colder is lower
    for s in 0..10u64 {
        let b = 3 + s as usize % 4;
        let zi = Tensor::from_fn(&[b, b], |i| if i / b == i % b { 1.0 } else { 0.0 });
        let noise = randn(&[b, b], 200 + s);
        let zj = Tensor::from_fn(&[b, b], |i| zi.data()[i] + 0.1 * noise.data()[i]);
        let losses: Vec<f64> = [2.0, 1.0, 0.5, 0.2, 0.1, 0.07, 0.05].iter().map(|&t| pair_loss(&zi, &zj, t)).collect();
        c.check(losses.windows(2).all(|w| w[1] < w[0]), || format!("fixture {s}: {losses:?}"));
    }
    c.note(format!("rotation {worst_rot:.1e}, symmetry {worst_sym:.1e}"));
    c.finish();
}

// 5 ---------------------------------------------------------------------------

fn tiny_training_data() -> Dataset {
    let m = harness::tiny_model(&ModelConfig::default());
    generate_dataset(&GenerateOptions {
        train_clips: 12,
        test_clips: 0,
        clip_len: m.trunk.clip_len,
        height: m.trunk.frame_height,
        width: m.trunk.frame_width,
        ..GenerateOptions::default()
    })
    .unwrap()
}

#[test]
fn criterion_5_adapter_contracts() {
    let _guard = serial();
    let mut c = Criterion::new(5, "adapter contracts");
    let mut r = rng::rng(5);
    let mut store = hct_core::ParamStore::new();
    let s_ada = SpatialAdapter::new(&mut store, "s", 12, 3, &mut r).unwrap();
    let t_ada = TemporalAdapter::new(&mut store, "t", 12, 3, [3, 1, 1], &mut r).unwrap();
    let grid = Grid::new(4, 2, 2);
    let x = randn(&[grid.len(), 12], 55);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ys = s_ada.forward(&mut g, &store, xv).unwrap();
    let yt = t_ada.forward(&mut g, &store, xv, grid).unwrap();
    c.check(g.value(ys) == x.data(), || "spatial adapter is not the identity at init".into());
    c.check(g.value(yt) == x.data(), || "temporal adapter is not the identity at init".into());

    // ten updates with only the adapters tunable
    let mut cfg = harness::tiny_model(&desk().model);
    cfg.adapters = FreezePreset::AdaptersOnly.adapters(0.25, [3, 1, 1]);
    cfg.freeze = FreezePreset::AdaptersOnly.plan();
    let mut model = HctModel::new(cfg, TaxonomySizes::default(), 5).unwrap();
    let before = model.store.clone();
    let data = tiny_training_data();
    let batch: Vec<&ClipSample> = data.samples.iter().collect();
    let weights = ClassWeights::uniform(model.sizes);
    let run = desk();
    let mut opt = AdamW::new(run.optim, &model.store);
    for _ in 0..10 {
        let mut g = Graph::new();
        let loss = model.batch_loss(&mut g, &batch, &weights, &run.loss, run.stage).unwrap();
        g.backward(loss.total).unwrap();
        model.store.zero_grads();
        model.store.absorb_grads(&g).unwrap();
        opt.step(&mut model.store, 1e-2).unwrap();
    }
    let (mut frozen, mut moved) = (0, 0);
    for id in model.store.ids() {
        let same =
            model.store.tensor(id).data().iter().zip(before.tensor(id).data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if model.store.is_frozen(id) {
            frozen += 1;
            c.check(same, || format!("frozen `{}` changed", model.store.name(id)));
        } else {
            moved += !same as usize;
            let name = model.store.name(id);
            c.check(name.contains("s_ada") || name.starts_with("t_ada"), || format!("`{name}` is tunable"));
        }
    }
    c.check(moved > 0, || "no adapter moved".into());
    c.note(format!("{frozen} frozen tensors bit-identical, {moved} adapter tensors moved"));

    // closed-form count on the desk model
    let base = HctModel::new(desk().model, TaxonomySizes::default(), 0).unwrap().param_count();
    let ch = desk().model.trunk.channels;
    let blocks = desk().model.trunk.blocks.len() + desk().model.hram.tasks.len();
    for (r, hat) in [(0.125, ch / 8), (0.25, ch / 4), (0.5, ch / 2)] {
        let mut m = desk().model;
        m.adapters = FreezePreset::AdaptersOnly.adapters(r, [3, 1, 1]);
        m.freeze = FreezePreset::AdaptersOnly.plan();
        let got = HctModel::new(m, TaxonomySizes::default(), 0).unwrap().param_count();
        // every block's spatial adapter and the shared temporal adapter: two
        // bias-free projections each, plus the depth-wise 3×1×1 kernel
        let closed = blocks * 2 * ch * hat + 2 * ch * hat + 3 * hat;
        let total = base.total + closed;
        c.check(got.tunable == closed, || format!("r = {r}: tunable {} vs {closed}", got.tunable));
        c.check(got.total == total, || format!("r = {r}: total {} vs {total}", got.total));
        c.check(got.fraction == closed as f64 / total as f64, || format!("r = {r}: fraction {}", got.fraction));
        c.note(format!("r={r}: {closed}/{total}"));
    }

    // containment of tunable sets across the reported presets
    let rows = paramcount_cmd(&desk(), TaxonomySizes::default()).unwrap();
    let tunable_names = |preset: FreezePreset| -> BTreeSet<String> {
        let mut m = desk().model;
        m.adapters = preset.adapters(0.25, [3, 1, 1]);
        m.freeze = preset.plan();
        let model = HctModel::new(m, TaxonomySizes::default(), 0).unwrap();
        model.store.ids().filter(|&id| !model.store.is_frozen(id)).map(|id| model.store.name(id).to_string()).collect()
    };
    let sets: BTreeMap<_, _> = FreezePreset::TABLE.iter().map(|&p| (p.label(), tunable_names(p))).collect();
    use FreezePreset::*;
    for (small, big) in [
        (WithoutAdapters, Spatial),
        (WithoutAdapters, Temporal),
        (Spatial, SpatialTemporal),
        (Temporal, SpatialTemporal),
    ] {
        c.check(sets[small.label()].is_subset(&sets[big.label()]), || format!("{small} ⊄ {big}"));
    }
    let count = |p: FreezePreset| rows.iter().find(|r| r.preset == p).unwrap().count;
    c.check(count(Full).fraction == 1.0, || "full preset is not fully tunable".into());
    c.check(count(SpatialTemporal).tunable < count(Full).tunable, || "adapters tune more than the full model".into());
    c.check(
        count(WithoutAdapters).tunable < count(Spatial).tunable.min(count(Temporal).tunable)
            && count(Spatial).tunable.max(count(Temporal).tunable) < count(SpatialTemporal).tunable,
        || "tunable counts are not ordered".into(),
    );
    c.finish();
}

// 6 ---------------------------------------------------------------------------

/// Sweeps a threshold down through every distinct score, collecting
/// (recall, precision) points, then integrates the interpolated curve.
fn brute_force_ap(scores: &[f64], pos: &[bool]) -> f64 {
    let npos = pos.iter().filter(|&&p| p).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
            let tp = sel.iter().filter(|&&i| pos[i]).count() as f64;
            (tp / npos, tp / sel.len() as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(rec, _) in &points {
        if rec > prev {
            let p = points.iter().filter(|(r2, _)| *r2 >= rec).map(|(_, p)| *p).fold(0.0, f64::max);
            ap += (rec - prev) * p;
            prev = rec;
        }
    }
    ap
}

#[test]
fn criterion_6_metric_oracles() {
    let _guard = serial();
    let mut c = Criterion::new(6, "metric oracles");
    let mut r = rng::rng(6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        pos[r.random_range(0..n)] = true;
        let got = average_precision(&scores, &pos).unwrap();
        worst = worst.max((got - brute_force_ap(&scores, &pos)).abs());
    }
    c.check(worst < 1e-9, || format!("AP max diff {worst:.2e}"));
    let v = iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]).unwrap();
    c.check((v - 1.0 / 7.0).abs() < 1e-15, || format!("IoU {v}"));
    for _ in 0..50 {
        let (n, k) = (r.random_range(1..=40), r.random_range(2..=6));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let mut rates = Vec::new();
        for cls in 0..k {
            let support = labels.iter().filter(|&&l| l == cls).count();
            if support > 0 {
                let hit = labels.iter().zip(&preds).filter(|(&l, &p)| l == cls && p == cls).count();
                rates.push(hit as f64 / support as f64);
            }
        }
        let want = rates.iter().sum::<f64>() / rates.len() as f64;
        let got = balanced_accuracy(&preds, &labels).unwrap();
        c.check(got == want, || format!("B-Acc {got} vs recount {want}"));
    }
    c.note(format!("AP max diff {worst:.1e} over 200 instances; IoU {v:.15}"));
    c.finish();
}

// 7 ---------------------------------------------------------------------------

fn ablation_data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| generate_dataset(&GenerateOptions::default()).unwrap())
}

#[test]
fn criterion_7_synthetic_ablation() {
    let _guard = serial();
    let mut c = Criterion::new(7, "synthetic ablation");
    let data = ablation_data();
    let (train, test) = (data.train(), data.test());
    c.check(train.len() == 512 && test.len() == 128, || format!("{}/{} clips", train.len(), test.len()));
    c.check(data.taxonomy.sizes == TaxonomySizes { phases: 4, steps: 10, actions: 49, instruments: 13 }, || {
        "taxonomy".into()
    });
    let mut sums: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..3u64 {
        for (name, base) in [("baseline", baseline()), ("hct", desk())] {
            let cfg = RunConfig { seed, ..base };
            c.check(cfg.model.trunk.channels == 48 && cfg.model.trunk.blocks.len() == 2, || "desk model shape".into());
            c.check(cfg.schedule.epochs == 5 && cfg.schedule.batch_size == 20 && cfg.model.icl.tau == 0.07, || {
                "schedule".into()
            });
            let t0 = Instant::now();
            let out = harness::train(&cfg, data.taxonomy.sizes, &train, None).unwrap();
            let rep = evaluate(&out.checkpoint.model, &test).unwrap();
            let secs = t0.elapsed().as_secs_f64();
            c.check(secs < 600.0, || format!("{name} seed {seed}: {secs:.0}s"));
            let (pa, sa) = (rep.phase.acc.unwrap(), rep.step.acc.unwrap());
            c.check(pa > 0.35, || format!("{name} seed {seed}: phase Acc {pa:.3}"));
            c.check(sa > 0.15, || format!("{name} seed {seed}: step Acc {sa:.3}"));
            let s = rep.phase.map.unwrap() + rep.step.map.unwrap() + rep.action.map.unwrap();
            sums.entry(name).or_default().push(s);
            let _ = std::io::stderr().write_all(
                format!("  {name} seed {seed}: phase Acc {pa:.3}, step Acc {sa:.3}, mAP sum {s:.4} ({secs:.0}s)\n")
                    .as_bytes(),
            );
        }
    }
    let mean = |k: &str| sums[k].iter().sum::<f64>() / sums[k].len() as f64;
    let (b, h) = (mean("baseline"), mean("hct"));
    c.check(h >= b, || format!("HCT mean mAP sum {h:.4} < baseline {b:.4}"));
    c.note(format!("mean mAP sum: baseline {b:.4}, HCT {h:.4}"));
    c.finish();
}

// 8 ---------------------------------------------------------------------------

#[test]
fn criterion_8_determinism_and_persistence() {
    let _guard = serial();
    let mut c = Criterion::new(8, "determinism and persistence");
    let dir = tempfile::tempdir().unwrap();
    let data =
        generate_dataset(&GenerateOptions { train_clips: 40, test_clips: 20, ..GenerateOptions::default() }).unwrap();
    let (train, test) = (data.train(), data.test());
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = desk();
        cfg.seed = 8;
        cfg.schedule.epochs = 2;
        cfg.out_dir = Some(dir.path().join(run));
        let out = harness::train(&cfg, data.taxonomy.sizes, &train, None).unwrap();
        files.push((out.saved.last().unwrap().clone(), out.checkpoint));
    }
    let bytes_a = fs::read(&files[0].0).unwrap();
    let bytes_b = fs::read(&files[1].0).unwrap();
    c.check(bytes_a == bytes_b, || "identical runs wrote different checkpoints".into());

    let live = evaluate(&files[0].1.model, &test).unwrap();
    let loaded = Checkpoint::load(&files[0].0, Some(&files[0].1.config), false).unwrap();
    let reloaded = evaluate(&loaded.model, &test).unwrap();
    c.check(live == reloaded && live.to_json().unwrap() == reloaded.to_json().unwrap(), || {
        "eval differs after reload".into()
    });
    c.check(loaded.model.store == files[0].1.model.store, || "parameters differ after reload".into());

    let path = dir.path().join("data.hctd");
    write_dataset(
        &path,
        &data,
        &data.manifest(&GenerateOptions { train_clips: 40, test_clips: 20, ..GenerateOptions::default() }),
    )
    .unwrap();
    let back = read_dataset(&path).unwrap();
    c.check(back == data, || "dataset changed in a round trip".into());
    let again = dir.path().join("again.hctd");
    write_dataset(
        &again,
        &back,
        &back.manifest(&GenerateOptions { train_clips: 40, test_clips: 20, ..GenerateOptions::default() }),
    )
    .unwrap();
    c.check(fs::read(&path).unwrap() == fs::read(&again).unwrap(), || "dataset bytes differ on rewrite".into());
    c.note(format!("checkpoint {} bytes", bytes_a.len()));
    c.finish();
}
