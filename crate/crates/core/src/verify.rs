//! Executable probe suites: `bias`, `kl` and `gradients`.
//!
//! Every probe returns a [`ProbeReport`]; a suite passes when every report
//! has verdict `Pass`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::klpen::{k1_loss_gradient_probe, k2_loss_gradient, k2_loss_gradient_weighted, rkl_gradient_reference};
use crate::oracle::{
    cond_d2_monte_carlo, exact_rkl_gradient, finite_difference_gradient, k3_variance_sweep, max_relative_error,
    mc_conditional_advantage, unbiasedness_contradiction_check, BiasProbeConfig, ProbeReport, Verdict,
};
use crate::policy::{enumerate_sequences, Conditioning, GradAccumulator, PolicyParameters, PolicyShape, Trajectory};
use crate::rng::{derive_seed, rng_for, LabRng, Stream};
use crate::trainer::{ppo_surrogate, ppo_surrogate_gradient};

pub const DEFAULT_TRIALS: u64 = 1_000_000;
pub const GRADIENT_INSTANCES: usize = 100;
pub const FD_STEP: f64 = 1e-5;
pub const GRADIENT_TOL: f64 = 1e-6;

pub const D2_GRID_N: [usize; 4] = [2, 4, 8, 64];
pub const D2_GRID_SIGMA: [f64; 3] = [0.5, 1.0, 2.0];
pub const D2_GRID_EPS: [f64; 3] = [0.0, 1.0, 2.0];
pub const RATIO_GRID: [f64; 2] = [0.5, 2.0];
pub const K3_SWEEP: [f64; 3] = [1e-1, 1e-2, 1e-3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Bias,
    Kl,
    Gradients,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Bias => "bias",
            Suite::Kl => "kl",
            Suite::Gradients => "gradients",
            Suite::All => "all",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bias" => Ok(Suite::Bias),
            "kl" => Ok(Suite::Kl),
            "gradients" => Ok(Suite::Gradients),
            "all" => Ok(Suite::All),
            other => Err(Error::InvalidParameter(format!(
                "unknown suite `{other}` (expected bias, kl, gradients or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    /// Monte Carlo trials per probe.
    pub trials: u64,
    pub seed: u64,
    /// Random instances per analytic-gradient probe.
    pub instances: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            trials: DEFAULT_TRIALS,
            seed: 0,
            instances: GRADIENT_INSTANCES,
        }
    }
}

pub fn run_suite(suite: Suite, opts: &SuiteOptions) -> Result<Vec<ProbeReport>> {
    Ok(match suite {
        Suite::Bias => bias_suite(opts)?,
        Suite::Kl => kl_suite(opts)?,
        Suite::Gradients => gradient_suite(opts)?,
        Suite::All => {
            let mut all = bias_suite(opts)?;
            all.extend(kl_suite(opts)?);
            all.extend(gradient_suite(opts)?);
            all
        }
    })
}

fn probe_seed(opts: &SuiteOptions, index: u64) -> u64 {
    derive_seed(opts.seed, Stream::Probe, index)
}

/// Exact N = 2 value plus its distance from the unbiased prediction.
pub fn n2_bias_probes(opts: &SuiteOptions) -> Result<Vec<ProbeReport>> {
    let cfg = BiasProbeConfig {
        n: 2,
        sigma: 1.0,
        eps_i: 1.0,
        trials: opts.trials,
        seed: probe_seed(opts, 1),
    };
    let exact = mc_conditional_advantage(&cfg)?.renamed("n2_closed_form");
    let unbiased = cfg.eps_i / cfg.sigma;
    let z = exact.z_from(unbiased);
    let away = ProbeReport {
        probe: "n2_bias_vs_unbiased".into(),
        reference: Some(unbiased),
        verdict: if z > 5.0 {
            Verdict::Pass
        } else if exact.stderr * 5.0 > 0.05 {
            Verdict::Inconclusive
        } else {
            Verdict::Fail
        },
        ..exact.clone()
    };
    Ok(vec![exact, away])
}

pub fn d2_grid_probes(opts: &SuiteOptions) -> Result<Vec<ProbeReport>> {
    let mut out = Vec::new();
    let mut idx = 100;
    for &n in &D2_GRID_N {
        for &sigma in &D2_GRID_SIGMA {
            for &eps_i in &D2_GRID_EPS {
                idx += 1;
                out.push(cond_d2_monte_carlo(&BiasProbeConfig {
                    n,
                    sigma,
                    eps_i,
                    trials: opts.trials,
                    seed: probe_seed(opts, idx),
                })?);
            }
        }
    }
    Ok(out)
}

pub fn contradiction_probe(opts: &SuiteOptions) -> Result<ProbeReport> {
    let r = unbiasedness_contradiction_check(4, 1.0, &RATIO_GRID, opts.trials, probe_seed(opts, 2))?;
    let mut report = r.significance_report();
    if report.verdict == Verdict::Fail && report.stderr * 5.0 > 0.05 {
        report.verdict = Verdict::Inconclusive;
    }
    Ok(report)
}

pub fn large_n_probes(opts: &SuiteOptions) -> Result<Vec<ProbeReport>> {
    let mut out = Vec::new();
    for (i, eps_i) in [1.0, 2.0].into_iter().enumerate() {
        let cfg = BiasProbeConfig {
            n: 1024,
            sigma: 1.0,
            eps_i,
            trials: opts.trials,
            seed: probe_seed(opts, 10 + i as u64),
        };
        out.push(mc_conditional_advantage(&cfg)?.renamed("large_n_convergence"));
    }
    let r = unbiasedness_contradiction_check(1024, 1.0, &RATIO_GRID, opts.trials, probe_seed(opts, 3))?;
    out.push(r.agreement_report(0.01));
    Ok(out)
}

pub fn symmetry_probe(opts: &SuiteOptions) -> Result<ProbeReport> {
    let cfg = BiasProbeConfig {
        n: 4,
        sigma: 1.0,
        eps_i: 0.0,
        trials: opts.trials,
        seed: probe_seed(opts, 4),
    };
    Ok(mc_conditional_advantage(&cfg)?.renamed("zero_eps_symmetry"))
}

pub fn bias_suite(opts: &SuiteOptions) -> Result<Vec<ProbeReport>> {
    let mut out = n2_bias_probes(opts)?;
    out.push(symmetry_probe(opts)?);
    out.extend(d2_grid_probes(opts)?);
    out.push(contradiction_probe(opts)?);
    out.extend(large_n_probes(opts)?);
    Ok(out)
}

/// Every sequence of prompt 0 with its probability and reference log-probs.
fn enumerated_batch(params: &PolicyParameters, reference: &PolicyParameters) -> Result<(Vec<Trajectory>, Vec<f64>)> {
    let mut trajs = Vec::new();
    let mut weights = Vec::new();
    for (tokens, p) in enumerate_sequences(params, 0)? {
        let mut t = Trajectory {
            prompt_id: 0,
            logp_sample: params.token_log_probs(0, &tokens)?,
            logp_ref: Vec::new(),
            tokens,
        };
        t.attach_reference(reference)?;
        trajs.push(t);
        weights.push(p);
    }
    Ok((trajs, weights))
}

fn gradient_report(probe: &str, params: String, worst: f64, tol: f64) -> ProbeReport {
    ProbeReport {
        probe: probe.into(),
        params,
        estimate: worst,
        stderr: 0.0,
        reference: Some(0.0),
        verdict: Verdict::from_bool(worst < tol),
    }
}

/// `k2_loss_gradient` over the full enumeration against the symbolic
/// reverse-KL gradient and against finite differences of the frozen-weight
/// k2 loss, on `V = 2, T = 2` policies.
pub fn k2_identity_probes(opts: &SuiteOptions) -> Result<Vec<ProbeReport>> {
    let shape = PolicyShape::new(1, 2, 2);
    let mut worst_symbolic: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    let cases = opts.instances.max(1);
    for i in 0..cases as u64 {
        let params = PolicyParameters::init(shape, 1.0, probe_seed(opts, 200 + 2 * i))?;
        let reference = PolicyParameters::init(shape, 1.0, probe_seed(opts, 201 + 2 * i))?;
        let (batch, weights) = enumerated_batch(&params, &reference)?;
        let analytic = k2_loss_gradient_weighted(&params, &batch, &weights)?;
        let symbolic = exact_rkl_gradient(&params, &reference, 0)?;
        worst_symbolic = worst_symbolic.max(max_relative_error(&analytic, &symbolic));

        let frozen_loss = |q: &PolicyParameters| -> f64 {
            let mut total = 0.0;
            let mut denom = 0.0;
            for (t, w) in batch.iter().zip(&weights) {
                let lp = q.sequence_log_probs(t).expect("enumerated sequence is valid");
                let s: f64 = lp.iter().zip(&t.logp_ref).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum();
                total += w * s;
                denom += w * t.len() as f64;
            }
            total / denom
        };
        let fd = finite_difference_gradient(frozen_loss, &params, FD_STEP)?;
        worst_fd = worst_fd.max(max_relative_error(&analytic, &fd));
    }
    let params = format!("{{\"V\":2,\"T\":2,\"instances\":{cases}}}");
    Ok(vec![
        gradient_report("k2_equals_rkl_gradient", params.clone(), worst_symbolic, GRADIENT_TOL),
        gradient_report("k2_fd_enumerated", params, worst_fd, GRADIENT_TOL),
    ])
}

/// On sampled batches the k2 loss gradient and the Monte Carlo reverse-KL
/// gradient coincide, and the k1 loss gradient ignores the reference.
pub fn sampled_kl_probes(opts: &SuiteOptions) -> Result<Vec<ProbeReport>> {
    let shape = PolicyShape::new(3, 4, 3);
    let params = PolicyParameters::init(shape, 1.0, probe_seed(opts, 300))?;
    let ref_a = PolicyParameters::init(shape, 1.0, probe_seed(opts, 301))?;
    let ref_b = PolicyParameters::init(shape, 2.0, probe_seed(opts, 302))?;
    let mut rng = rng_for(opts.seed, Stream::Probe, 303);
    let mut batch_a = Vec::new();
    for i in 0..64 {
        let mut t = params.sample_trajectory(i % 3, &mut rng, None)?;
        t.attach_reference(&ref_a)?;
        batch_a.push(t);
    }
    let mut batch_b = batch_a.clone();
    for t in &mut batch_b {
        t.attach_reference(&ref_b)?;
    }
    let k2 = k2_loss_gradient(&params, &batch_a)?;
    let rkl = rkl_gradient_reference(&params, &batch_a)?;
    let gap = max_relative_error(&k2, &rkl);
    let k1_a = k1_loss_gradient_probe(&params, &batch_a)?;
    let k1_b = k1_loss_gradient_probe(&params, &batch_b)?;
    let identical = k1_a.values().iter().zip(k1_b.values()).all(|(a, b)| a.to_bits() == b.to_bits());
    let differing_refs = ref_a.logits() != ref_b.logits();
    Ok(vec![
        gradient_report(
            "k2_matches_rkl_sampled",
            "{\"P\":3,\"T\":4,\"V\":3,\"batch\":64}".into(),
            gap,
            1e-12,
        ),
        ProbeReport {
            probe: "k1_reference_exclusion".into(),
            params: "{\"P\":3,\"T\":4,\"V\":3,\"batch\":64}".into(),
            estimate: if identical { 0.0 } else { 1.0 },
            stderr: 0.0,
            reference: Some(0.0),
            verdict: Verdict::from_bool(identical && differing_refs),
        },
    ])
}

/// Weight-variance sweep with `π_ref(y*) = 0.5`.
pub fn k3_variance_probes(opts: &SuiteOptions) -> Result<Vec<ProbeReport>> {
    let rows = k3_variance_sweep(&K3_SWEEP, 0.5, opts.trials, probe_seed(opts, 400))?;
    // Too few draws of the rare token make the sample variance meaningless.
    let underpowered = (opts.trials as f64) * K3_SWEEP[K3_SWEEP.len() - 1] < 100.0;
    let increasing = rows.windows(2).all(|w| w[1].k3_weight_var > w[0].k3_weight_var);
    let k2_max = rows.iter().map(|r| r.k2_weight_var).fold(f64::NEG_INFINITY, f64::max);
    let k2_min = rows.iter().map(|r| r.k2_weight_var).fold(f64::INFINITY, f64::min);
    let k2_growth = k2_max / k2_min;
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("[{},{:.4},{:.4}]", r.p_theta_star, r.k3_weight_var, r.k2_weight_var))
        .collect();
    let params = format!(
        "{{\"p_ref\":0.5,\"trials\":{},\"rows\":[{}]}}",
        opts.trials,
        table.join(",")
    );
    let verdict = |ok: bool| {
        if underpowered {
            Verdict::Inconclusive
        } else {
            Verdict::from_bool(ok)
        }
    };
    let last = rows[rows.len() - 1];
    Ok(vec![
        ProbeReport {
            probe: "k3_variance_increasing".into(),
            params: params.clone(),
            estimate: last.k3_weight_var,
            stderr: 0.0,
            reference: Some(last.k3_weight_var_exact),
            verdict: verdict(increasing),
        },
        ProbeReport {
            probe: "k2_variance_growth".into(),
            params,
            estimate: k2_growth,
            stderr: 0.0,
            reference: Some(10.0),
            verdict: verdict(k2_growth < 10.0),
        },
    ])
}

pub fn kl_suite(opts: &SuiteOptions) -> Result<Vec<ProbeReport>> {
    let mut out = k2_identity_probes(opts)?;
    out.extend(sampled_kl_probes(opts)?);
    out.extend(k3_variance_probes(opts)?);
    Ok(out)
}

/// A random small policy: `P ∈ 1..=3`, `T ∈ 1..=4`, `V ∈ 2..=4`, either
/// conditioning, optionally with a shared table.
pub fn random_instance(rng: &mut LabRng) -> Result<PolicyParameters> {
    let conditioning = if rng.random_bool(0.5) {
        Conditioning::Position
    } else {
        Conditioning::PrevToken
    };
    let shape = PolicyShape::new(rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(2..=4))
        .with_conditioning(conditioning)
        .with_shared(rng.random_bool(0.5));
    let mut params = PolicyParameters::init(shape, 1.0, rng.random())?;
    if shape.shared {
        for x in &mut params.logits_mut()[shape.local_rows() * shape.vocab..] {
            *x = rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(params)
}

fn random_batch(params: &PolicyParameters, rng: &mut LabRng) -> Result<Vec<Trajectory>> {
    let n = rng.random_range(1..=6);
    (0..n)
        .map(|_| {
            let prompt = rng.random_range(0..params.shape().prompts);
            params.sample_trajectory(prompt, rng, None)
        })
        .collect()
}

/// Sum of sequence log-probabilities against its score gradient.
pub fn log_prob_gradient_probe(opts: &SuiteOptions) -> Result<ProbeReport> {
    let mut worst: f64 = 0.0;
    for i in 0..opts.instances {
        let mut rng = rng_for(opts.seed, Stream::Probe, 500 + i as u64);
        let params = random_instance(&mut rng)?;
        let traj = random_batch(&params, &mut rng)?.swap_remove(0);
        let analytic = params.log_prob_gradient(&traj)?;
        let f = |q: &PolicyParameters| q.sequence_log_probs(&traj).expect("valid trajectory").iter().sum::<f64>();
        let fd = finite_difference_gradient(f, &params, FD_STEP)?;
        worst = worst.max(max_relative_error(&analytic, &fd));
    }
    Ok(gradient_report(
        "log_prob_gradient_fd",
        format!("{{\"instances\":{},\"step\":{FD_STEP}}}", opts.instances),
        worst,
        GRADIENT_TOL,
    ))
}

/// The clipped surrogate at `θ = θ_old` against finite differences, plus the
/// identity with the plain score-function gradient at that point.
pub fn ppo_gradient_probes(opts: &SuiteOptions) -> Result<Vec<ProbeReport>> {
    let mut worst_fd: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for i in 0..opts.instances {
        let mut rng = rng_for(opts.seed, Stream::Probe, 700 + i as u64);
        let params = random_instance(&mut rng)?;
        let batch = random_batch(&params, &mut rng)?;
        let adv: Vec<Vec<f64>> = batch
            .iter()
            .map(|t| (0..t.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let (analytic, _) = ppo_surrogate_gradient(&params, &batch, &adv, 0.2)?;
        let f = |q: &PolicyParameters| ppo_surrogate(q, &batch, &adv, 0.2).expect("valid batch");
        let fd = finite_difference_gradient(f, &params, FD_STEP)?;
        worst_fd = worst_fd.max(max_relative_error(&analytic, &fd));

        let mut plain = GradAccumulator::zeros(*params.shape());
        for (t, a) in batch.iter().zip(&adv) {
            let w = 1.0 / (t.len() as f64 * batch.len() as f64);
            params.accumulate_score(t.prompt_id, &t.tokens, |k| a[k] * w, &mut plain)?;
        }
        worst_identity = worst_identity.max(max_relative_error(&analytic, &plain));
    }
    let params = format!("{{\"instances\":{},\"clip_eps\":0.2,\"step\":{FD_STEP}}}", opts.instances);
    Ok(vec![
        gradient_report("ppo_first_step_fd", params.clone(), worst_fd, GRADIENT_TOL),
        gradient_report("ppo_first_step_score_identity", params, worst_identity, 1e-12),
    ])
}

pub fn gradient_suite(opts: &SuiteOptions) -> Result<Vec<ProbeReport>> {
    let mut out = vec![log_prob_gradient_probe(opts)?];
    out.extend(ppo_gradient_probes(opts)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in [Suite::Bias, Suite::Kl, Suite::Gradients, Suite::All] {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn gradient_suite_passes_on_few_instances() {
        let opts = SuiteOptions {
            instances: 10,
            ..SuiteOptions::default()
        };
        for r in gradient_suite(&opts).unwrap() {
            assert!(r.passed(), "{}", r.text_line());
        }
    }

    #[test]
    fn underpowered_k3_sweep_is_inconclusive() {
        let opts = SuiteOptions {
            trials: 100,
            ..SuiteOptions::default()
        };
        for r in k3_variance_probes(&opts).unwrap() {
            assert_eq!(r.verdict, Verdict::Inconclusive);
        }
    }
}
