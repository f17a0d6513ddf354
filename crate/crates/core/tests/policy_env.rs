use advlab_core::env::{estimate_pass_at_n, pass_at_n_unbiased};
use advlab_core::policy::enumerate_sequences;
use advlab_core::rng::{rng_for, Stream};
use advlab_core::stats::Moments;
use advlab_core::{Conditioning, PolicyParameters, PolicyShape, Prompt, PromptSet, RewardScheme, Split, Task};

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for shape in [
        PolicyShape::new(3, 4, 5),
        PolicyShape::new(2, 3, 3).with_conditioning(Conditioning::PrevToken).with_shared(true),
    ] {
        let params = PolicyParameters::init(shape, 2.0, 17).unwrap();
        let path = dir.path().join("p.ckpt");
        params.save(&path).unwrap();
        let back = PolicyParameters::load(&path).unwrap();
        assert_eq!(back.shape(), params.shape());
        assert!(back.logits().iter().zip(params.logits()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn truncated_checkpoint_rejected() {
    let params = PolicyParameters::init(PolicyShape::new(2, 2, 2), 1.0, 1).unwrap();
    let bytes = params.to_bytes();
    assert!(PolicyParameters::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(PolicyParameters::from_bytes(b"NOTAPLCY").is_err());
}

#[test]
fn sampling_frequencies_match_enumeration() {
    let params = PolicyParameters::init(PolicyShape::new(1, 2, 3), 1.5, 4).unwrap();
    let exact = enumerate_sequences(&params, 0).unwrap();
    let mut rng = rng_for(2, Stream::Probe, 0);
    let draws = 200_000;
    let mut counts = vec![0usize; exact.len()];
    for _ in 0..draws {
        let t = params.sample_trajectory(0, &mut rng, None).unwrap();
        let idx = exact.iter().position(|(seq, _)| *seq == t.tokens).unwrap();
        counts[idx] += 1;
    }
    for ((_, p), c) in exact.iter().zip(&counts) {
        let freq = *c as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((freq - p).abs() < 5.0 * se + 1e-12, "freq {freq} vs {p}");
    }
}

#[test]
fn gaussian_reward_moments() {
    let prompt = Prompt {
        id: 0,
        task: Task::Gaussian { mean: 0.7, sigma: 2.0 },
        split: Split::Train,
    };
    let mut rng = rng_for(9, Stream::Probe, 0);
    let mut m = Moments::default();
    for _ in 0..200_000 {
        m.push(prompt.reward(&[], RewardScheme::Continuous, &mut rng).unwrap());
    }
    assert!((m.mean - 0.7).abs() < 5.0 * m.std_error());
    assert!((m.variance() - 4.0).abs() < 0.05);
}

#[test]
fn pass_at_n_unbiased_reference_value() {
    // Fewer misses than draws means a guaranteed hit.
    assert_eq!(pass_at_n_unbiased(4, 2, 4).unwrap(), 1.0);
    let v = pass_at_n_unbiased(8, 4, 4).unwrap();
    assert!((v - (1.0 - 1.0 / 70.0)).abs() < 1e-15);
    let half = pass_at_n_unbiased(4, 1, 2).unwrap();
    assert!((half - 0.5).abs() < 1e-15);
}

#[test]
fn pass_at_n_of_half_solved_policy() {
    // Two-token vocabulary, one position, uniform policy: success prob 1/2.
    let prompts = PromptSet::new(vec![Prompt {
        id: 0,
        task: Task::ExactMatch { target: vec![1] },
        split: Split::HeldOut,
    }])
    .unwrap();
    let params = PolicyParameters::init(PolicyShape::new(1, 1, 2), 0.0, 0).unwrap();
    let mut rng = rng_for(3, Stream::Eval, 0);
    let held = prompts.split(Split::HeldOut);
    let mut total = 0.0;
    let reps = 400;
    for _ in 0..reps {
        total += estimate_pass_at_n(&params, &held, 4, 16, &mut rng, None).unwrap();
    }
    let mean = total / reps as f64;
    assert!((mean - 0.9375).abs() < 0.01, "pass@4 {mean}");
}

#[test]
fn prompt_file_round_trip() {
    let set = PromptSet::exact_match(3, 2, 4, 3, 0.6, 5).unwrap();
    let back = PromptSet::parse(&set.to_text()).unwrap();
    assert_eq!(back, set);
    assert_eq!(back.split(Split::HeldOut).len(), 2);
}
