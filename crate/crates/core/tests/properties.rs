//! Property tests over the public mechanisms: attention, relation
//! aggregation, contrastive and supervised losses, adapters and metrics.

use hct_core::adapters::{SpatialAdapter, TemporalAdapter};
use hct_core::attention::{pool_tokens, scaled_attention, AttentionConfig, AttentionWeights, Grid};
use hct_core::hram::correlation_attention;
use hct_core::metrics::{map_classification, map_detection, one_hot, Detection, GroundTruth, TaskMetrics};
use hct_core::objectives::{icl_pair_loss, weighted_bce, weighted_cross_entropy};
use hct_core::{rng, Graph, ParamStore, PoolKind, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |r| prop::collection::vec(-3.0f64..3.0, r * cols).prop_map(move |d| tensor(&[r, cols], &d)))
}

fn pair_loss(zi: &Tensor, zj: &Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(zi.clone()), g.constant(zj.clone()));
    let l = icl_pair_loss(&mut g, a, b, tau).unwrap();
    g.scalar(l)
}

fn nonzero_rows(t: &Tensor) -> bool {
    t.data().chunks(t.shape()[1]).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_weights_sum_to_one(q in matrix(1..=6, 4), k in matrix(1..=6, 4)) {
        // one-hot values expose the attention weights themselves
        let l2 = k.shape()[0];
        let v = Tensor::from_fn(&[l2, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let out = scaled_attention(&mut g, qv, kv, vv, 1, None).unwrap();
        for row in g.value(out).chunks(4) {
            prop_assert!((row[0] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_invariant_to_joint_key_value_permutation(
        q in matrix(1..=5, 6),
        kv in matrix(2..=6, 12),
        seed in any::<u64>(),
    ) {
        let l2 = kv.shape()[0];
        let k = Tensor::from_fn(&[l2, 6], |i| kv.data()[(i / 6) * 12 + i % 6]);
        let v = Tensor::from_fn(&[l2, 6], |i| kv.data()[(i / 6) * 12 + 6 + i % 6]);
        let mut perm: Vec<usize> = (0..l2).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng::rng(seed));
        let permute = |t: &Tensor| Tensor::from_fn(&[l2, 6], |i| t.data()[perm[i / 6] * 6 + i % 6]);
        let mut g = Graph::new();
        let (qv, a, b) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let base = scaled_attention(&mut g, qv, a, b, 2, None).unwrap();
        let (c, d) = (g.constant(permute(&k)), g.constant(permute(&v)));
        let moved = scaled_attention(&mut g, qv, c, d, 2, None).unwrap();
        for (x, y) in g.value(base).iter().zip(g.value(moved)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_length_is_product_of_ceilings(
        l in 1usize..5, h in 1usize..6, m in 1usize..6,
        s in (1usize..3, 1usize..4, 1usize..4),
    ) {
        let grid = Grid::new(l, h, m);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[grid.len(), 2]));
        let stride = [s.0, s.1, s.2];
        let (y, out) = pool_tokens(&mut g, x, grid, stride, PoolKind::Avg).unwrap();
        let want = l.div_ceil(s.0) * h.div_ceil(s.1) * m.div_ceil(s.2);
        prop_assert_eq!(out.len(), want);
        prop_assert_eq!(g.shape(y)[0], want);
    }

    #[test]
    fn correlation_rows_lie_in_value_envelope(fi in matrix(4..=4, 4), fj in matrix(6..=6, 4), seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let w = AttentionWeights::new(&mut store, "a", 4, false, &mut rng::rng(seed)).unwrap();
        let cfg = AttentionConfig::new(4, 2, [1, 1, 1], [1, 1, 1]);
        let mut g = Graph::new();
        let (a, b) = (g.constant(fi), g.constant(fj.clone()));
        let out = correlation_attention(&mut g, &store, a, Grid::new(1, 2, 2), b, Grid::new(1, 3, 2), &cfg, &w, None).unwrap();
        // values are f_j·W_v (+ zero bias)
        let wv = store.tensor(w.v.weight).clone();
        let v: Vec<Vec<f64>> = fj
            .data()
            .chunks(4)
            .map(|r| (0..4).map(|o| (0..4).map(|i| r[i] * wv.get(&[i, o])).sum()).collect())
            .collect();
        for row in g.value(out).chunks(4) {
            for (c, &x) in row.iter().enumerate() {
                let lo = v.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                let hi = v.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn contrastive_loss_nonnegative_symmetric(zi in matrix(2..=6, 3), seed in any::<u64>(), tau in 0.05f64..2.0) {
        let b = zi.shape()[0];
        let zj = Tensor::randn(&[b, 3], 1.0, &mut rng::rng(seed));
        prop_assume!(nonzero_rows(&zi) && nonzero_rows(&zj));
        let l = pair_loss(&zi, &zj, tau);
        prop_assert!(l >= 0.0);
        prop_assert!((l - pair_loss(&zj, &zi, tau)).abs() < 1e-12 * l.max(1.0));
    }

    #[test]
    fn contrastive_loss_ignores_row_scale(zi in matrix(2..=5, 3), scale in prop::collection::vec(0.1f64..10.0, 5)) {
        prop_assume!(nonzero_rows(&zi));
        let b = zi.shape()[0];
        let scaled = Tensor::from_fn(&[b, 3], |i| zi.data()[i] * scale[i / 3]);
        let a = pair_loss(&zi, &zi, 0.07);
        prop_assert!((a - pair_loss(&scaled, &zi, 0.07)).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn unit_weights_match_unweighted_cross_entropy(logits in matrix(1..=5, 4), seed in any::<u64>()) {
        let n = logits.shape()[0];
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize).wrapping_add(i * 7) % 4).collect();
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let l = weighted_cross_entropy(&mut g, x, &labels, &[1.0; 4]).unwrap();
        let want: f64 = logits
            .data()
            .chunks(4)
            .zip(&labels)
            .map(|(r, &y)| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - r[y]
            })
            .sum::<f64>()
            / n as f64;
        prop_assert!((g.scalar(l) - want).abs() < 1e-12);
    }

    #[test]
    fn even_odds_bce_is_k_ln_2(k in 1usize..60, targets in prop::collection::vec(any::<bool>(), 60)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, k]));
        let t: Vec<f64> = targets[..k].iter().map(|&b| b as u8 as f64).collect();
        let l = weighted_bce(&mut g, x, &t, &vec![1.0; k]).unwrap();
        prop_assert!((g.scalar(l) - k as f64 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adapters_are_identities_at_init(x in matrix(8..=8, 6), seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let mut r = rng::rng(seed);
        let s = SpatialAdapter::new(&mut store, "s", 6, 2, &mut r).unwrap();
        let t = TemporalAdapter::new(&mut store, "t", 6, 3, [3, 1, 1], &mut r).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let a = s.forward(&mut g, &store, v).unwrap();
        let b = t.forward(&mut g, &store, v, Grid::new(2, 2, 2)).unwrap();
        prop_assert_eq!(g.value(a), x.data());
        prop_assert_eq!(g.value(b), x.data());
    }

    #[test]
    fn metrics_invariant_under_monotone_transforms(
        scores in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..20),
        seed in any::<u64>(),
    ) {
        let n = scores.len();
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize >> (i % 32)) % 3).collect();
        let multi: Vec<Vec<bool>> = (0..n).map(|i| (0..3).map(|c| (seed >> ((i * 3 + c) % 64)) & 1 == 1).collect()).collect();
        let probs: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()).collect();
        let base_single = TaskMetrics::single_label(&scores, &labels).unwrap();
        let base_multi = map_classification(&probs, &multi).unwrap();
        for f in [|x: f64| 2.0 * x + 1.0, f64::exp] {
            let moved: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect();
            let single = TaskMetrics::single_label(&moved, &labels).unwrap();
            prop_assert_eq!(&single, &base_single);
            let moved_probs: Vec<Vec<f64>> = probs.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect();
            prop_assert_eq!(&map_classification(&moved_probs, &multi).unwrap(), &base_multi);
        }
        let hot = map_classification(&scores, &one_hot(&labels, 3)).unwrap();
        prop_assert_eq!(hot.map, base_single.map);
    }

    #[test]
    fn detection_map_ignores_list_order(
        raw in prop::collection::vec((0usize..2, 0usize..3, 0.0f64..6.0, 0.0f64..6.0), 1..12),
        gts in prop::collection::vec((0usize..2, 0usize..3, 0.0f64..6.0, 0.0f64..6.0), 1..8),
        seed in any::<u64>(),
    ) {
        let dets: Vec<Detection> = raw
            .iter()
            .enumerate()
            .map(|(i, &(image, class, x, y))| Detection { image, class, bbox: [x, y, x + 2.0, y + 2.0], score: 1.0 - i as f64 / 64.0 })
            .collect();
        let gts: Vec<GroundTruth> = gts
            .iter()
            .map(|&(image, class, x, y)| GroundTruth { image, class, bbox: [x, y, x + 2.0, y + 2.0] })
            .collect();
        let mut shuffled = dets.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng::rng(seed));
        prop_assert_eq!(map_detection(&dets, &gts, 3, 0.5).unwrap(), map_detection(&shuffled, &gts, 3, 0.5).unwrap());
    }
}
