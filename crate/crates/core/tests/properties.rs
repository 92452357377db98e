use proptest::prelude::*;
use std::collections::HashSet;
use vsda::discriminators::{init_disc_params, DiscConfig};
use vsda::evalkit::{feature_variance, miou, temporal_consistency, ConfusionMatrix};
use vsda::flowwarp::{backward_warp, backward_warp_adjoint, FlowDirection, FlowField, ValidityMask};
use vsda::losses::{entropy_map, loss_itcr, loss_wd};
use vsda::segnet::ProbMap;
use vsda::tensor::Tensor;

fn prob_map(c: usize, h: usize, w: usize) -> impl Strategy<Value = ProbMap> {
    prop::collection::vec(-4.0f64..4.0, c * h * w)
        .prop_map(move |v| ProbMap::from_logits(&Tensor::from_vec(c, h, w, v).unwrap()))
}

/// IoU per class from explicit pixel sets.
fn set_oracle(truth: &[u8], pred: &[u8], c: u8) -> Option<f64> {
    let mut ious = Vec::new();
    for k in 0..c {
        let t: HashSet<usize> = (0..truth.len()).filter(|&i| truth[i] == k).collect();
        let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == k).collect();
        let union = t.union(&p).count();
        if union > 0 {
            ious.push(t.intersection(&p).count() as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn entropy_is_bounded(p in prob_map(4, 3, 3)) {
        for e in entropy_map(&p) {
            prop_assert!((-1e-12..=4f64.ln() + 1e-12).contains(&e));
        }
    }

    #[test]
    fn itcr_is_bounded_and_self_consistent(a in prob_map(3, 4, 4), b in prob_map(3, 4, 4), bits in prop::collection::vec(any::<bool>(), 16)) {
        let mask = ValidityMask { height: 4, width: 4, data: bits };
        if mask.count_valid() > 0 {
            let v = loss_itcr(&a, &b, &mask).unwrap();
            prop_assert!((0.0..=2.0).contains(&v.loss));
            prop_assert!((0.0..=1.0).contains(&v.gate_fraction));
            let s = loss_itcr(&a, &a, &mask).unwrap();
            prop_assert_eq!(s.loss, 0.0);
        }
    }

    #[test]
    fn sharpening_the_target_never_closes_gates(a in prob_map(3, 4, 4), b in prob_map(3, 4, 4), t in 0.0f64..1.0) {
        let mask = ValidityMask::all(4, 4, true);
        // Move p̂ toward its own one-hot argmax; entropy can only fall.
        let bt = b.tensor();
        let am = bt.argmax_channels();
        let n = bt.plane_len();
        let mut sharp = bt.clone();
        for i in 0..n {
            for ch in 0..3 {
                let one = if am[i] == ch { 1.0 } else { 0.0 };
                sharp.data[ch * n + i] = (1.0 - t) * bt.data[ch * n + i] + t * one;
            }
        }
        let sharp = ProbMap::new(sharp).unwrap();
        let g0 = loss_itcr(&a, &b, &mask).unwrap().gate_fraction;
        let g1 = loss_itcr(&a, &sharp, &mask).unwrap().gate_fraction;
        prop_assert!(g1 >= g0);
    }

    #[test]
    fn weight_discrepancy_is_a_cosine(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = init_disc_params(&DiscConfig::spatial(3, 2), s1).unwrap();
        let b = init_disc_params(&DiscConfig::spatial_temporal(3, 2), s2).unwrap();
        let v = loss_wd(&b, &a, 2..=4).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
        prop_assert_eq!(loss_wd(&a, &a, 1..=4).unwrap(), 1.0);
    }

    #[test]
    fn miou_matches_the_set_oracle(truth in prop::collection::vec(0u8..4, 64), pred in prop::collection::vec(0u8..4, 64)) {
        let mut cm = ConfusionMatrix::new(4);
        let p: Vec<usize> = pred.iter().map(|&v| v as usize).collect();
        cm.add(&truth, &p).unwrap();
        prop_assert_eq!(cm.total(), 64);
        let (_, m) = miou(&cm).unwrap();
        prop_assert_eq!(Some(m), set_oracle(&truth, &pred, 4));
    }

    #[test]
    fn temporal_consistency_ignores_class_order(a in prob_map(3, 5, 6), b in prob_map(3, 5, 6), dx in -1.5f64..1.5, dy in -1.5f64..1.5) {
        let flow = FlowField::constant(5, 6, FlowDirection::Backward, dx, dy);
        let mask = ValidityMask::all(5, 6, true);
        let permute = |p: &ProbMap| {
            let t = p.tensor();
            let (x, y) = t.split_channels(1);
            ProbMap::new(Tensor::concat_channels(&y, &x).unwrap()).unwrap()
        };
        if let Ok(v) = temporal_consistency(&a, &b, &flow, &mask) {
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, temporal_consistency(&permute(&a), &permute(&b), &flow, &mask).unwrap());
        }
    }

    #[test]
    fn feature_variance_is_translation_invariant(
        feats in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 12),
        shift in prop::collection::vec(-50.0f64..50.0, 3),
    ) {
        let labels: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
        let (e, a) = feature_variance(&feats, &labels).unwrap();
        let moved: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        let (e2, a2) = feature_variance(&moved, &labels).unwrap();
        prop_assert!((e - e2).abs() < 1e-9 && (a - a2).abs() < 1e-9);
        prop_assert!(e >= 0.0 && a >= 0.0);
    }

    #[test]
    fn integer_flow_warp_is_an_index_shift(dx in -3i32..=3, dy in -3i32..=3, vals in prop::collection::vec(-1.0f64..1.0, 2 * 7 * 9)) {
        let map = Tensor::from_vec(2, 7, 9, vals).unwrap();
        let flow = FlowField::constant(7, 9, FlowDirection::Backward, dx as f64, dy as f64);
        let (out, mask) = backward_warp(&map, &flow).unwrap();
        for y in 0..7i32 {
            for x in 0..9i32 {
                let (sx, sy) = (x + dx, y + dy);
                let inside = (0..9).contains(&sx) && (0..7).contains(&sy);
                prop_assert_eq!(mask.data[(y * 9 + x) as usize], inside);
                for c in 0..2 {
                    let got = out.at(c, y as usize, x as usize);
                    let want = if inside { map.at(c, sy as usize, sx as usize) } else { 0.5 };
                    prop_assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn warp_adjoint_identity(vals in prop::collection::vec(-1.0f64..1.0, 6 * 7), grads in prop::collection::vec(-1.0f64..1.0, 6 * 7), fl in prop::collection::vec(-2.5f64..2.5, 6 * 7 * 2)) {
        let x = Tensor::from_vec(1, 6, 7, vals).unwrap();
        let g = Tensor::from_vec(1, 6, 7, grads).unwrap();
        let flow = FlowField::from_vec(6, 7, FlowDirection::Backward, fl).unwrap();
        let (wx, _) = vsda::flowwarp::backward_warp_with_fill(&x, &flow, 0.0).unwrap();
        let adj = backward_warp_adjoint(&g, &flow).unwrap();
        let lhs: f64 = wx.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&adj.data).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }
}
