use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use embodied_mae::geometry::{farthest_point_sampling, knn_group, GroupNorm, PointCloud};
use embodied_mae::masking::{counts_from_lambda, sample_plan};
use embodied_mae::optim::Schedule;
use embodied_mae::tensor::Tensor;
use embodied_mae::tokenizer::sincos_pos_2d;

proptest! {
    #[test]
    fn plans_spend_the_whole_budget(
        seed in any::<u64>(),
        alpha in 0.05f64..5.0,
        sizes in prop::array::uniform3(1usize..64),
        frac in 0.0f64..1.0,
    ) {
        let budget = ((sizes.iter().sum::<usize>() as f64) * frac) as usize;
        let plan = sample_plan(alpha, budget, sizes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(plan.counts.iter().sum::<usize>(), budget);
        for i in 0..3 {
            prop_assert_eq!(plan.masks[i].len(), sizes[i]);
            prop_assert_eq!(plan.masks[i].iter().filter(|&&v| v).count(), plan.counts[i]);
        }
        prop_assert!((plan.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rounded_counts_stay_within_one_of_target(a in 0.0f64..1.0, b in 0.0f64..1.0, budget in 0usize..200) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let lambda = [lo, hi - lo, 1.0 - hi];
        let c = counts_from_lambda(lambda, budget, [1000; 3]).unwrap();
        prop_assert_eq!(c.iter().sum::<usize>(), budget);
        for i in 0..3 {
            prop_assert!((c[i] as f64 - lambda[i] * budget as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn fps_is_distinct_and_spreads(
        pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 2..80),
        frac in 0.0f64..1.0,
    ) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let n = 1 + ((pts.len() - 1) as f64 * frac) as usize;
        let idx = farthest_point_sampling(&cloud, n, 0).unwrap();
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n);
        prop_assert_eq!(idx[0], 0);
    }

    #[test]
    fn knn_groups_hold_k_plus_one_members(
        pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 12..40),
        k in 1usize..8,
    ) {
        let cloud = PointCloud::new(pts).unwrap();
        let centers = farthest_point_sampling(&cloud, 4, 0).unwrap();
        let groups = knn_group(&cloud, &centers, k, GroupNorm::MaxNorm).unwrap();
        prop_assert_eq!(groups.len(), 4);
        for g in &groups {
            prop_assert_eq!(g.members.len(), k + 1);
            for m in &g.members {
                prop_assert!(m.iter().all(|v| v.abs() <= 1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn schedule_is_bounded(step in 1u64..10_000) {
        let s = Schedule { peak_lr: 1e-3, min_lr: 1e-5, warmup_steps: 100, total_steps: 10_000 };
        let lr = s.lr_at(step);
        prop_assert!(lr > 0.0 && lr <= 1e-3 + 1e-15);
        if step > 100 {
            prop_assert!(lr >= 1e-5 - 1e-15);
        }
    }
}

#[test]
fn sincos_rows_have_unit_half_norms() {
    let t: Tensor<f64> = sincos_pos_2d(5, 7, 16).unwrap();
    assert_eq!((t.rows(), t.cols()), (35, 16));
    for r in 0..t.rows() {
        let row = t.row(r);
        for half in [&row[..8], &row[8..]] {
            let sq: f64 = half.iter().map(|v| v * v).sum();
            assert!((sq - 4.0).abs() < 1e-12);
        }
    }
    // Row index 0 has sin 0 and cos 1 in the first half.
    assert_eq!(t.row(0)[0], 0.0);
    assert_eq!(t.row(0)[4], 1.0);
}
