use advlab_core::oracle::{finite_difference_gradient, max_relative_error};
use advlab_core::rng::{rng_for, Stream};
use advlab_core::trainer::{ppo_surrogate, ppo_surrogate_gradient};
use advlab_core::verify::{random_instance, SuiteOptions, FD_STEP};
use advlab_core::PolicyParameters;

#[test]
fn log_prob_gradient_matches_finite_differences() {
    let mut rng = rng_for(21, Stream::Probe, 0);
    for _ in 0..10 {
        let params = random_instance(&mut rng).unwrap();
        let traj = params.sample_trajectory(0, &mut rng, None).unwrap();
        let analytic = params.log_prob_gradient(&traj).unwrap();
        let fd = finite_difference_gradient(
            |p: &PolicyParameters| p.token_log_probs(0, &traj.tokens).unwrap().iter().sum(),
            &params,
            FD_STEP,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &fd) < 1e-6);
    }
}

#[test]
fn gradient_suite_runs_clean_on_small_instance_count() {
    let opts = SuiteOptions {
        instances: 10,
        seed: 3,
        ..SuiteOptions::default()
    };
    let reports = advlab_core::verify::gradient_suite(&opts).unwrap();
    assert!(reports.iter().all(|r| r.passed()), "{reports:?}");
}

#[test]
fn ppo_surrogate_gradient_matches_finite_differences_at_old_policy() {
    let mut rng = rng_for(22, Stream::Probe, 0);
    let params = random_instance(&mut rng).unwrap();
    let batch: Vec<_> = (0..6).map(|_| params.sample_trajectory(0, &mut rng, None).unwrap()).collect();
    let adv: Vec<Vec<f64>> = batch
        .iter()
        .enumerate()
        .map(|(i, t)| vec![i as f64 - 2.5; t.len()])
        .collect();
    let (analytic, clipped) = ppo_surrogate_gradient(&params, &batch, &adv, 0.2).unwrap();
    let fd = finite_difference_gradient(|p| ppo_surrogate(p, &batch, &adv, 0.2).unwrap(), &params, FD_STEP).unwrap();
    assert!(max_relative_error(&analytic, &fd) < 1e-6);
    assert_eq!(clipped.clipped, 0);
}
