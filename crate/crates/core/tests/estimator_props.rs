use advlab_core::advantage::{
    adv_gae, adv_grpo_local, adv_rloo, adv_rpp_baseline, group_centered, normalize_global,
};
use advlab_core::klpen::{kl_k2, kl_k3};
use advlab_core::stats::mean_std;
use advlab_core::{GroupLayout, KLRecord, StdConvention};
use proptest::prelude::*;

fn groups(k: usize) -> impl Strategy<Value = Vec<f64>> {
    (1usize..6).prop_flat_map(move |g| prop::collection::vec(-10.0f64..10.0, g * k))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn grpo_invariant_to_shift_and_positive_scale(
        r in prop::collection::vec(-5.0f64..5.0, 2..9),
        shift in -100.0f64..100.0,
        scale in 0.1f64..50.0,
    ) {
        prop_assume!(mean_std(&r, StdConvention::Population).1 > 1e-3);
        let a = adv_grpo_local(&r, 0.0).unwrap();
        let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
        let b = adv_grpo_local(&moved, 0.0).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-9);
    }

    #[test]
    fn rloo_is_scaled_group_centering(r in prop::collection::vec(-5.0f64..5.0, 2..12)) {
        let k = r.len();
        let rloo = adv_rloo(&r).unwrap();
        let centered = group_centered(&r, k);
        let scale = k as f64 / (k as f64 - 1.0);
        let expected: Vec<f64> = centered.iter().map(|c| scale * c).collect();
        prop_assert!(max_abs_diff(&rloo, &expected) < 1e-10);
        prop_assert!(rloo.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn global_normalization_is_standardized(batch in prop::collection::vec(-50.0f64..50.0, 2..64)) {
        prop_assume!(mean_std(&batch, StdConvention::Population).1 > 1e-6);
        let z = normalize_global(&batch, 0.0).unwrap();
        let (m, s) = mean_std(&z, StdConvention::Population);
        prop_assert!(m.abs() < 1e-10);
        prop_assert!((s - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rpp_baseline_affine_invariant(r in groups(4), shift in -20.0f64..20.0, scale in 0.05f64..20.0) {
        prop_assume!(mean_std(&group_centered(&r, 4), StdConvention::Population).1 > 1e-6);
        let layout = GroupLayout::uniform(r.len(), 4).unwrap();
        let a = adv_rpp_baseline(&r, &layout, 0.0).unwrap();
        let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
        let b = adv_rpp_baseline(&moved, &layout, 0.0).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-9);
    }

    #[test]
    fn gae_monte_carlo_limit(rewards in prop::collection::vec(-3.0f64..3.0, 1..10)) {
        let adv = adv_gae(&rewards, &vec![0.0; rewards.len()], 1.0, 1.0).unwrap();
        for (t, a) in adv.iter().enumerate() {
            let to_go: f64 = rewards[t..].iter().sum();
            prop_assert!((a - to_go).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_estimators_nonnegative(
        theta in prop::collection::vec(-30.0f64..0.0, 1..8),
        reference in prop::collection::vec(-30.0f64..0.0, 8),
    ) {
        let record = KLRecord::new(theta.clone(), reference[..theta.len()].to_vec()).unwrap();
        prop_assert!(kl_k2(&record).iter().all(|v| *v >= 0.0));
        prop_assert!(kl_k3(&record).values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn k2_k3_agree_to_third_order(rho in prop::collection::vec(-1.0f64..1.0, 1..8)) {
        let theta: Vec<f64> = rho.iter().map(|r| r - 1.0).collect();
        let record = KLRecord::new(theta, vec![-1.0; rho.len()]).unwrap();
        let k2 = kl_k2(&record);
        let k3 = kl_k3(&record).values;
        for ((a, b), r) in k2.iter().zip(&k3).zip(&rho) {
            prop_assert!((a - b).abs() <= r.abs().powi(3) + 1e-12);
        }
    }
}
