mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use sscbm::alignment::{concept_heatmaps, harden, pool_scores, render_saliency, soften, HeatmapStack};
use sscbm::dataset::{ConceptSchema, Dataset, Example, Image};
use sscbm::encoder::{mix_embedding, Model, ModelConfig, SpatialFeatureMap, Variant};
use sscbm::pseudolabel::{build_pseudo_labels, knn_pseudo_label, ReferenceFeature};
use sscbm::training::{intervene_output, metrics_from_predictions, Prediction};

fn feature_map(h: usize, w: usize, m: usize, data: Vec<f64>) -> SpatialFeatureMap {
    SpatialFeatureMap {
        height: h,
        width: w,
        raw_channels: 0,
        raw: vec![],
        channels: m,
        projected: data,
    }
}

fn nonzero_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

/// (labeled features + concepts, unlabeled features, k_nn)
fn knn_instance() -> impl Strategy<Value = (Vec<(ReferenceFeature, Vec<u8>)>, Vec<ReferenceFeature>, usize)> {
    (2usize..6, 2usize..12, 1usize..6, 1usize..4).prop_flat_map(|(d, n_l, n_u, k)| {
        (
            prop::collection::vec((nonzero_vec(d), prop::collection::vec(0u8..2, k)), n_l),
            prop::collection::vec(nonzero_vec(d), n_u),
            1..=n_l.min(5),
        )
            .prop_map(|(lab, unl, k_nn)| {
                let labeled = lab
                    .into_iter()
                    .enumerate()
                    .map(|(i, (v, c))| (ReferenceFeature { id: format!("l{i:02}"), vec: v }, c))
                    .collect();
                let unlabeled = unl
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| ReferenceFeature { id: format!("u{i:02}"), vec: v })
                    .collect();
                (labeled, unlabeled, k_nn)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pseudo_label_is_a_convex_combination((labeled, unlabeled, k_nn) in knn_instance()) {
        for u in &unlabeled {
            let pl = knn_pseudo_label(u, &labeled, k_nn).unwrap();
            prop_assert_eq!(pl.weights.len(), k_nn);
            prop_assert!((pl.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(pl.weights.iter().all(|&w| w > 0.0));
            for (i, &c) in pl.c_img.iter().enumerate() {
                let vals: Vec<f64> = pl
                    .neighbor_ids
                    .iter()
                    .map(|id| f64::from(labeled.iter().find(|(f, _)| &f.id == id).unwrap().1[i]))
                    .collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c >= lo - 1e-12 && c <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn pseudo_labels_ignore_feature_scale(
        (labeled, unlabeled, k_nn) in knn_instance(),
        scale in 0.01f64..100.0,
    ) {
        let scaled: Vec<ReferenceFeature> = unlabeled
            .iter()
            .map(|f| ReferenceFeature { id: f.id.clone(), vec: f.vec.iter().map(|x| x * scale).collect() })
            .collect();
        let a = build_pseudo_labels(&labeled, &unlabeled, k_nn).unwrap();
        let b = build_pseudo_labels(&labeled, &scaled, k_nn).unwrap();
        for (x, y) in a.values().zip(b.values()) {
            prop_assert_eq!(&x.neighbor_ids, &y.neighbor_ids);
            for (p, q) in x.c_img.iter().zip(&y.c_img) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pseudo_labels_ignore_labeled_order((labeled, unlabeled, k_nn) in knn_instance(), rot in 0usize..12) {
        let mut shuffled = labeled.clone();
        shuffled.reverse();
        let r = rot % shuffled.len();
        shuffled.rotate_left(r);
        let a = build_pseudo_labels(&labeled, &unlabeled, k_nn).unwrap();
        let b = build_pseudo_labels(&shuffled, &unlabeled, k_nn).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn batch_labels_equal_single_labels((labeled, unlabeled, k_nn) in knn_instance()) {
        let batch = build_pseudo_labels(&labeled, &unlabeled, k_nn).unwrap();
        for u in &unlabeled {
            prop_assert_eq!(&batch[&u.id], &knn_pseudo_label(u, &labeled, k_nn).unwrap());
        }
    }

    #[test]
    fn heatmaps_ignore_embedding_scale(
        map in prop::collection::vec(-1.0f64..1.0, 3 * 4 * 5),
        emb in prop::collection::vec(nonzero_vec(5), 3),
        lambda in 0.01f64..50.0,
        tau in -0.5f64..0.9,
    ) {
        let fm = feature_map(3, 4, 5, map);
        let scaled: Vec<Vec<f64>> = emb.iter().map(|e| e.iter().map(|x| x * lambda).collect()).collect();
        let a = concept_heatmaps(&fm, &emb).unwrap();
        let b = concept_heatmaps(&fm, &scaled).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let (sa, sb) = (pool_scores(&a), pool_scores(&b));
        // away from the threshold, hard labels agree too
        for (x, y) in sa.iter().zip(&sb) {
            if (x - tau).abs() > 1e-9 {
                prop_assert_eq!(harden(&[*x], tau), harden(&[*y], tau));
            }
        }
    }

    #[test]
    fn negated_embedding_negates_slice(
        map in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 4),
        emb in prop::collection::vec(nonzero_vec(4), 2),
    ) {
        let fm = feature_map(2, 3, 4, map);
        let mut neg = emb.clone();
        neg[1] = neg[1].iter().map(|x| -x).collect();
        let a = concept_heatmaps(&fm, &emb).unwrap();
        let b = concept_heatmaps(&fm, &neg).unwrap();
        prop_assert_eq!(a.slice(0), b.slice(0));
        for (x, y) in a.slice(1).iter().zip(b.slice(1)) {
            prop_assert_eq!(*x, -y);
        }
    }

    #[test]
    fn soft_and_hard_labels_agree(s in prop::collection::vec(-1.0f64..1.0, 1..20), tau in -0.9f64..0.9, beta in 0.1f64..50.0) {
        let soft = soften(&s, tau, beta);
        let hard = harden(&s, tau);
        for i in 0..s.len() {
            if s[i] != tau && (soft[i] - 0.5).abs() > 1e-15 {
                prop_assert_eq!(soft[i] > 0.5, hard[i] == 1);
            }
        }
    }

    #[test]
    fn pooled_scores_match_loops(
        (h, w, m) in (1usize..5, 1usize..5, 1usize..6),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = common::oracle::uniform_vec(&mut rng, h * w * m);
        let emb: Vec<Vec<f64>> = (0..3).map(|_| common::oracle::uniform_vec(&mut rng, m)).collect();
        let stack = concept_heatmaps(&feature_map(h, w, m, v.clone()), &emb).unwrap();
        let (heat, s) = common::oracle::heatmap_and_pool(&v, h, w, m, &emb);
        for (a, b) in stack.values.iter().zip(&heat) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in pool_scores(&stack).iter().zip(&s) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mixture_endpoints_and_convexity(
        pos in prop::collection::vec(-5.0f64..5.0, 1..10),
        p in 0.0f64..1.0,
    ) {
        let neg: Vec<f64> = pos.iter().map(|x| 1.0 - 2.0 * x).collect();
        prop_assert_eq!(mix_embedding(&pos, &neg, 1.0), pos.clone());
        prop_assert_eq!(mix_embedding(&pos, &neg, 0.0), neg.clone());
        for ((m, a), b) in mix_embedding(&pos, &neg, p).iter().zip(&pos).zip(&neg) {
            prop_assert!(*m >= a.min(*b) - 1e-12 && *m <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn hot_cell_saliency_peaks_in_that_cell((h, w) in (1usize..6, 1usize..6), cell in any::<prop::sample::Index>(), up in 1usize..5) {
        let c = cell.index(h * w);
        let mut values = vec![0.0; h * w];
        values[c] = 1.0;
        let stack = HeatmapStack { height: h, width: w, k: 1, values };
        let (oh, ow) = (h * up, w * up);
        let (y, x) = render_saliency(&stack, 0, oh, ow).unwrap().argmax();
        prop_assert_eq!((y / up, x / up), (c / w, c % w));
    }

    #[test]
    fn metrics_ignore_prediction_order(
        rows in prop::collection::vec((prop::collection::vec(0u8..2, 4), 0usize..3, prop::collection::vec(0.0f64..1.0, 4), prop::collection::vec(-2.0f64..2.0, 3)), 1..12),
        rot in 0usize..12,
    ) {
        let schema = ConceptSchema::ungrouped((0..4).map(|i| format!("c{i}")).collect()).unwrap();
        let examples = rows
            .iter()
            .enumerate()
            .map(|(i, (c, y, _, _))| Example { id: format!("e{i}"), input: Image::zeros(1, 1, 1), class_label: *y, concepts: Some(c.clone()) })
            .collect();
        let ds = Dataset::new(schema, 3, examples).unwrap();
        let preds: Vec<Prediction> = rows
            .iter()
            .enumerate()
            .map(|(i, (_, _, p, z))| {
                let mut best = 0;
                for j in 1..z.len() {
                    if z[j] > z[best] { best = j; }
                }
                Prediction { id: format!("e{i}"), p_hat: p.clone(), logits: z.clone(), predicted_class: best }
            })
            .collect();
        let mut moved = preds.clone();
        let r = rot % moved.len();
        moved.rotate_left(r);
        moved.reverse();
        prop_assert_eq!(metrics_from_predictions(&preds, &ds).unwrap(), metrics_from_predictions(&moved, &ds).unwrap());
    }
}

fn small_model(seed: u64) -> Model {
    let mut cfg = ModelConfig::new([3, 8, 8], 6, 4, Variant::Sscbm);
    cfg.conv_channels = [3, 4, 4];
    cfg.n_h = 6;
    cfg.m = 4;
    Model::new(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn empty_intervention_is_identity(seed in any::<u64>(), pix in prop::collection::vec(0.0f32..1.0, 3 * 8 * 8)) {
        let model = small_model(seed);
        let out = model.forward(&Image::from_vec([3, 8, 8], pix).unwrap()).unwrap();
        let o = intervene_output(&model, &out, &BTreeMap::new()).unwrap();
        prop_assert_eq!(&o.p_hat, &out.p_hat);
        for (a, b) in o.logits.iter().zip(&out.logits) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_ground_truth_intervention_fixes_concepts(
        seed in any::<u64>(),
        pix in prop::collection::vec(0.0f32..1.0, 3 * 8 * 8),
        truth in prop::collection::vec(0u8..2, 6),
    ) {
        let model = small_model(seed);
        let out = model.forward(&Image::from_vec([3, 8, 8], pix).unwrap()).unwrap();
        let all: BTreeMap<usize, f64> = truth.iter().enumerate().map(|(i, &t)| (i, f64::from(t))).collect();
        let o = intervene_output(&model, &out, &all).unwrap();
        let predicted: Vec<u8> = o.p_hat.iter().map(|&p| u8::from(p >= 0.5)).collect();
        prop_assert_eq!(predicted, truth);
    }
}
