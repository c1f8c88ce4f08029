//! Property-based invariants.

#![allow(clippy::needless_range_loop)]

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

use t2d_core::engine::{finalize_mask, SimilarityVolume};
use t2d_core::eval::ConfusionMatrix;
use t2d_core::math::{self, Grid2D, Matrix};
use t2d_core::projection::ProjectionParams;
use t2d_core::sample::{AttentionStack, DenseFeatureMap};
use t2d_core::tensor_store::{self, DType, TensorRecord};
use t2d_core::trainer;

fn record_strategy() -> impl Strategy<Value = TensorRecord> {
    let shape = vec(1usize..4, 0..3);
    (0u8..4, shape, "[a-z/_0-9]{1,12}").prop_flat_map(|(code, shape, name)| {
        let dtype = DType::from_code(code).unwrap();
        let bytes = shape.iter().product::<usize>() * dtype.size();
        vec(any::<u8>(), bytes).prop_map(move |payload| {
            TensorRecord::new(name.clone(), dtype, shape.clone(), payload).unwrap()
        })
    })
}

fn grid_strategy(max: usize) -> impl Strategy<Value = Grid2D> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        vec(-20.0f32..20.0, h * w).prop_map(move |v| Grid2D::new(h, w, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 256,
        rng_seed: RngSeed::Fixed(0x7a1c),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn container_round_trips(records in vec(record_strategy(), 0..6)) {
        let mut seen = std::collections::HashSet::new();
        let records: Vec<TensorRecord> = records.into_iter().filter(|r| seen.insert(r.name.clone())).collect();
        let bytes = tensor_store::encode(&records).unwrap();
        let back = tensor_store::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(tensor_store::encode(&back).unwrap(), bytes);
    }

    #[test]
    fn spatial_softmax_sums_to_one_and_ignores_shift(g in grid_strategy(8), shift in -50.0f32..50.0) {
        let s = math::spatial_softmax(&g);
        let total: f32 = s.values().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6 * (g.len() as f32).max(1.0));
        let shifted = math::spatial_softmax(&g.map(|v| v + shift));
        for (a, b) in s.values().iter().zip(shifted.values()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_upsample_is_linear(
        a in grid_strategy(5),
        alpha in -3.0f32..3.0,
        beta in -3.0f32..3.0,
        scale in 1usize..4,
    ) {
        let b = a.map(|v| (v * 0.37).sin() * 5.0);
        let (h, w) = (a.height() * scale + 1, a.width() * scale + 2);
        let combo = Grid2D::new(
            a.height(),
            a.width(),
            a.values().iter().zip(b.values()).map(|(x, y)| alpha * x + beta * y).collect(),
        )
        .unwrap();
        let up_combo = math::bilinear_upsample(&combo, h, w).unwrap();
        let up_a = math::bilinear_upsample(&a, h, w).unwrap();
        let up_b = math::bilinear_upsample(&b, h, w).unwrap();
        for i in 0..h * w {
            let want = alpha * up_a.values()[i] + beta * up_b.values()[i];
            prop_assert!((up_combo.values()[i] - want).abs() < 1e-3);
        }
    }

    #[test]
    fn argmax_invariant_under_monotone_maps(v in vec(-5.0f64..5.0, 1..30)) {
        let base = math::argmax_with_tiebreak(&v).unwrap();
        let affine: Vec<f64> = v.iter().map(|x| 2.0 * x + 1.0).collect();
        let cubic: Vec<f64> = v.iter().map(|x| x * x * x + x).collect();
        prop_assert_eq!(math::argmax_with_tiebreak(&affine).unwrap(), base);
        prop_assert_eq!(math::argmax_with_tiebreak(&cubic).unwrap(), base);
    }

    #[test]
    fn projection_output_is_bounded(seed in any::<u64>(), t in vec(-1e3f32..1e3, 6)) {
        // Each output is b_b plus a sum of |W_b| entries times values in [-1, 1].
        let mut p = ProjectionParams::<f32>::init(6, 5, seed).unwrap();
        p.b_b = vec![0.25, -0.5, 0.0, 1.0, -1.0];
        let out = p.forward(&t).unwrap();
        for (o, &out_v) in out.iter().enumerate() {
            let bound: f32 = (0..5).map(|i| p.w_b.get(i, o).abs()).sum::<f32>() + p.b_b[o].abs();
            prop_assert!(out_v.is_finite() && out_v.abs() <= bound * (1.0 + 1e-6));
        }
    }

    #[test]
    fn info_nce_is_invariant_to_joint_permutation(
        s in (1usize..6).prop_flat_map(|b| vec(-1.0f64..1.0, b * b).prop_map(move |v| (b, v))),
        seed in any::<u64>(),
    ) {
        let (b, data) = s;
        let m = Matrix::new(b, b, data).unwrap();
        let mut perm: Vec<usize> = (0..b).collect();
        let mut state = seed;
        for i in (1..b).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let mut permuted = Matrix::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                permuted.set(i, j, m.get(perm[i], perm[j]));
            }
        }
        let l1 = trainer::info_nce(&m).unwrap();
        let l2 = trainer::info_nce(&permuted).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn best_head_follows_head_order(
        feats in vec(-1.0f32..1.0, 2 * 3 * 4),
        logits in vec(-3.0f32..3.0, 3 * 2 * 3),
        t in vec(-1.0f32..1.0, 5),
        seed in any::<u64>(),
    ) {
        let f = DenseFeatureMap::new(2, 3, 4, feats).unwrap();
        let attn = AttentionStack::from_flat(3, 2, 3, logits).unwrap();
        let params = ProjectionParams::<f32>::init(5, 4, seed).unwrap();
        let sims = trainer::head_similarities(&f, &attn, &params, &t).unwrap();
        let best = trainer::select_best_head(&sims).unwrap();
        // Reverse the head order; the winning head is the same one, moved.
        let reversed = AttentionStack::new(attn.heads().iter().rev().cloned().collect()).unwrap();
        let rsims = trainer::head_similarities(&f, &reversed, &params, &t).unwrap();
        let rbest = trainer::select_best_head(&rsims).unwrap();
        prop_assert_eq!(sims[best], rsims[rbest]);
    }

    #[test]
    fn confusion_matrix_ignores_update_order(
        pairs in vec((0u32..4, prop_oneof![0u32..4, Just(255u32)]), 1..200),
        split in any::<prop::sample::Index>(),
    ) {
        let (pred, gt): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
        let mut whole = ConfusionMatrix::new(4, Some(255));
        whole.update(&pred, &gt).unwrap();
        let k = split.index(pred.len());
        let mut a = ConfusionMatrix::new(4, Some(255));
        a.update(&pred[k..], &gt[k..]).unwrap();
        let mut b = ConfusionMatrix::new(4, Some(255));
        b.update(&pred[..k], &gt[..k]).unwrap();
        b.merge(&a).unwrap();
        prop_assert_eq!(whole.counts(), b.counts());
    }

    #[test]
    fn mask_is_invariant_under_increasing_maps(
        maps in (1usize..4, 1usize..4, 2usize..4).prop_flat_map(|(h, w, m)| {
            vec(vec(-1.0f32..1.0, h * w), m).prop_map(move |v| (h, w, v))
        }),
        a in 0.5f32..3.0,
        b in -1.0f32..1.0,
    ) {
        let (h, w, data) = maps;
        let vol = SimilarityVolume::new(data.iter().map(|v| Grid2D::new(h, w, v.clone()).unwrap()).collect()).unwrap();
        let transformed = SimilarityVolume::new(
            data.iter().map(|v| Grid2D::new(h, w, v.iter().map(|x| a * x + b).collect()).unwrap()).collect(),
        )
        .unwrap();
        let (oh, ow) = (h * 3, w * 2);
        let base = finalize_mask(&vol, oh, ow, None).unwrap();
        prop_assert_eq!(&finalize_mask(&transformed, oh, ow, None).unwrap().labels, &base.labels);
        let cubed = SimilarityVolume::new(
            data.iter().map(|v| Grid2D::new(h, w, v.iter().map(|x| x * x * x + x).collect()).unwrap()).collect(),
        )
        .unwrap();
        // Cubic maps commute with argmax only at patch resolution, before interpolation.
        let patch_base = finalize_mask(&vol, h, w, None).unwrap();
        prop_assert_eq!(&finalize_mask(&cubed, h, w, None).unwrap().labels, &patch_base.labels);
        // With thresholding, co-transform the threshold.
        let t = 0.1f32;
        let with_t = finalize_mask(&vol, h, w, Some(t)).unwrap();
        prop_assert_eq!(&finalize_mask(&transformed, h, w, Some(a * t + b)).unwrap().labels, &with_t.labels);
    }
}
