//! Deterministic fixtures shared by the criterion benches.

use advlab_core::rng::{rng_for, Stream};
use advlab_core::{GroupLayout, PolicyParameters, PolicyShape, PromptSet, Trajectory};
use rand::Rng;

/// Binary rewards for `groups` groups of `k`.
pub fn binary_rewards(groups: usize, k: usize, seed: u64) -> (Vec<f64>, GroupLayout) {
    let mut rng = rng_for(seed, Stream::Probe, 0);
    let rewards = (0..groups * k).map(|_| f64::from(rng.random_bool(0.4))).collect();
    (rewards, GroupLayout::uniform(groups * k, k).expect("valid layout"))
}

pub fn policy(prompts: usize, max_len: usize, vocab: usize) -> PolicyParameters {
    PolicyParameters::init(PolicyShape::new(prompts, max_len, vocab).with_shared(true), 1.0, 3).expect("valid shape")
}

/// `n` trajectories on prompt 0 with references attached.
pub fn batch(params: &PolicyParameters, reference: &PolicyParameters, n: usize) -> Vec<Trajectory> {
    let mut rng = rng_for(5, Stream::Probe, 1);
    (0..n)
        .map(|_| {
            let mut t = params.sample_trajectory(0, &mut rng, None).expect("prompt 0 exists");
            t.attach_reference(reference).expect("same shape");
            t
        })
        .collect()
}

pub fn prompts(train: usize, heldout: usize) -> PromptSet {
    PromptSet::exact_match(train, heldout, 4, 4, 0.7, 0).expect("enough distinct targets")
}
