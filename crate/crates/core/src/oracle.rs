//! Independent numerical oracles.
//!
//! The Monte Carlo probes work on the Gaussian reward model
//! `r_j = θ + ε_j`, `ε_j ~ N(0, σ²)`, and condition on `ε_1 = ε_i`. The
//! group statistics use the population convention:
//!
//! ```text
//! ε̄ = (1/N) Σ ε_j      D = sqrt((1/N) Σ (ε_j − ε̄)²)      A_1 = (ε_1 − ε̄) / D
//! ```
//!
//! Trials are split into fixed-size chunks, each with its own derived seed,
//! and chunk moments are merged in chunk order, so results depend only on
//! `(seed, trials)` and never on the worker count.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};
use crate::policy::{enumerate_sequences, Conditioning, GradAccumulator, PolicyParameters};
use crate::rng::{derive_seed, rng_for, rng_from_seed, Stream};
use crate::stats::Moments;

const CHUNK: u64 = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        }
    }

    /// Tolerance check that refuses to call a result when `3·SE` cannot
    /// resolve the tolerance.
    pub fn within(estimate: f64, stderr: f64, reference: f64, tol: f64) -> Verdict {
        let diff = (estimate - reference).abs();
        if !diff.is_finite() {
            return Verdict::Fail;
        }
        if 3.0 * stderr > tol {
            if diff > tol + 3.0 * stderr {
                Verdict::Fail
            } else {
                Verdict::Inconclusive
            }
        } else if diff <= tol {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn from_bool(ok: bool) -> Verdict {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub probe: String,
    /// Parameters as a compact JSON object.
    pub params: String,
    pub estimate: f64,
    pub stderr: f64,
    pub reference: Option<f64>,
    pub verdict: Verdict,
}

pub const PROBE_CSV_HEADER: &str = "probe,param_json,estimate,stderr,reference,verdict";

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// Distance of the estimate from `target` in standard errors.
    pub fn z_from(&self, target: f64) -> f64 {
        (self.estimate - target).abs() / self.stderr
    }

    pub fn with_verdict(mut self, verdict: Verdict) -> Self {
        self.verdict = verdict;
        self
    }

    pub fn renamed(mut self, probe: impl Into<String>) -> Self {
        self.probe = probe.into();
        self
    }

    pub fn csv_row(&self) -> String {
        // The JSON field is quoted with inner quotes doubled.
        format!(
            "{},\"{}\",{:.8e},{:.8e},{},{}",
            self.probe,
            self.params.replace('"', "\"\""),
            self.estimate,
            self.stderr,
            self.reference.map(|r| format!("{r:.8e}")).unwrap_or_default(),
            self.verdict.name()
        )
    }

    pub fn text_line(&self) -> String {
        let reference = self
            .reference
            .map(|r| format!("{r:.6}"))
            .unwrap_or_else(|| "-".into());
        let estimate = if self.estimate != 0.0 && self.estimate.abs() < 1e-3 {
            format!("{:.4e}", self.estimate)
        } else {
            format!("{:.6}", self.estimate)
        };
        format!(
            "[{:<12}] {:<34} est={:<12} se={:<10.3e} ref={:<10} {}",
            self.verdict.name(),
            self.probe,
            estimate,
            self.stderr,
            reference,
            self.params
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasProbeConfig {
    /// Group size N.
    pub n: usize,
    pub sigma: f64,
    /// Value the first noise term is held at.
    pub eps_i: f64,
    pub trials: u64,
    pub seed: u64,
}

impl BiasProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidParameter(format!("N must be >= 2, got {}", self.n)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be >= 1".into()));
        }
        if !self.eps_i.is_finite() {
            return Err(Error::InvalidParameter("eps_i must be finite".into()));
        }
        Ok(())
    }

    fn json(&self) -> String {
        format!(
            "{{\"N\":{},\"sigma\":{},\"eps_i\":{},\"trials\":{},\"seed\":{}}}",
            self.n, self.sigma, self.eps_i, self.trials, self.seed
        )
    }
}

/// Monte Carlo over groups with `ε_1` pinned. `f(ε_1, ε̄, D)` returns the
/// per-trial statistic, or `None` to skip a degenerate trial.
fn conditional_mc(cfg: &BiasProbeConfig, f: impl Fn(f64, f64, f64) -> Option<f64> + Sync) -> (Moments, u64) {
    let chunks = cfg.trials.div_ceil(CHUNK);
    let normal = Normal::new(0.0, cfg.sigma).expect("sigma validated");
    let parts: Vec<(Moments, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(cfg.seed, Stream::Probe, c);
            let count = CHUNK.min(cfg.trials - c * CHUNK);
            let mut buf = vec![0.0; cfg.n];
            buf[0] = cfg.eps_i;
            let mut m = Moments::default();
            let mut skipped = 0;
            for _ in 0..count {
                for x in &mut buf[1..] {
                    *x = normal.sample(&mut rng);
                }
                let mean = buf.iter().sum::<f64>() / cfg.n as f64;
                let d2 = buf.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cfg.n as f64;
                match f(cfg.eps_i, mean, d2.sqrt()) {
                    Some(v) => m.push(v),
                    None => skipped += 1,
                }
            }
            (m, skipped)
        })
        .collect();
    parts.iter().fold((Moments::default(), 0), |(mut acc, s), (m, k)| {
        acc.merge(m);
        (acc, s + k)
    })
}

/// `Φ(x)` for the standard normal.
pub fn std_normal_cdf(x: f64) -> f64 {
    StatNormal::new(0.0, 1.0).expect("standard normal").cdf(x)
}

/// For N = 2, `A_1 = sign(ε_1 − ε_2)`, so `E[A_1 | ε_1] = 2Φ(ε_1/σ) − 1`.
pub fn conditional_advantage_n2(sigma: f64, eps_i: f64) -> f64 {
    2.0 * std_normal_cdf(eps_i / sigma) - 1.0
}

/// Estimate of `E[A_i | ε_i]`.
///
/// For N = 2 the reference is the exact value `2Φ(ε_i/σ) − 1` (tolerance
/// 0.01). Otherwise the reference is the unbiased prediction `ε_i/σ` and the
/// verdict asks whether the estimate is within 1% of it (or within 3 SE of
/// zero when `ε_i = 0`).
pub fn mc_conditional_advantage(cfg: &BiasProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    let (m, skipped) = conditional_mc(cfg, |e1, mean, d| (d > 0.0).then(|| (e1 - mean) / d));
    let (reference, verdict) = if cfg.n == 2 {
        let r = conditional_advantage_n2(cfg.sigma, cfg.eps_i);
        (r, Verdict::within(m.mean, m.std_error(), r, 0.01))
    } else {
        let r = cfg.eps_i / cfg.sigma;
        let v = if r == 0.0 {
            Verdict::from_bool(m.mean.abs() <= 3.0 * m.std_error())
        } else {
            Verdict::within(m.mean, m.std_error(), r, 0.01 * r.abs())
        };
        (r, v)
    };
    let mut params = cfg.json();
    if skipped > 0 {
        params.pop();
        params.push_str(&format!(",\"skipped\":{skipped}}}"));
    }
    Ok(ProbeReport {
        probe: "conditional_advantage".into(),
        params,
        estimate: m.mean,
        stderr: m.std_error(),
        reference: Some(reference),
        verdict,
    })
}

/// `E[D² | ε_i] = α + β ε_i²` with `α = ((N−1)/N)² σ²`, `β = (N−1)/N²`.
pub fn cond_d2_closed_form(n: usize, sigma: f64, eps_i: f64) -> Result<f64> {
    if n < 2 || !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need N >= 2 and sigma > 0 (got N={n}, sigma={sigma})"
        )));
    }
    let nf = n as f64;
    let alpha = ((nf - 1.0) / nf).powi(2) * sigma * sigma;
    let beta = (nf - 1.0) / (nf * nf);
    Ok(alpha + beta * eps_i * eps_i)
}

/// Monte Carlo `E[D² | ε_i]`, judged against the closed form at 1% relative.
pub fn cond_d2_monte_carlo(cfg: &BiasProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    let reference = cond_d2_closed_form(cfg.n, cfg.sigma, cfg.eps_i)?;
    let (m, _) = conditional_mc(cfg, |_, _, d| Some(d * d));
    Ok(ProbeReport {
        probe: "cond_d2".into(),
        params: cfg.json(),
        estimate: m.mean,
        stderr: m.std_error(),
        reference: Some(reference),
        verdict: Verdict::within(m.mean, m.std_error(), reference, 0.01 * reference),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioPoint {
    pub eps_i: f64,
    /// Estimate of `E[A_i | ε_i] / ε_i = (1 − 1/N) g(ε_i)`.
    pub ratio: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContradictionReport {
    pub n: usize,
    pub sigma: f64,
    pub points: Vec<RatioPoint>,
    /// Largest pairwise gap in combined standard errors.
    pub max_z: f64,
    /// Largest pairwise gap relative to the smaller ratio.
    pub max_rel_spread: f64,
}

impl ContradictionReport {
    /// Unbiasedness needs the ratio to be constant; a gap beyond 5 combined
    /// SE contradicts it.
    pub fn contradicts_unbiasedness(&self) -> bool {
        self.max_z > 5.0
    }

    /// The pair with the largest z-gap, as a probe report whose verdict is
    /// `Pass` when the contradiction is confirmed.
    pub fn significance_report(&self) -> ProbeReport {
        let (a, b) = self.widest_pair();
        ProbeReport {
            probe: "g_nonconstant".into(),
            params: self.json(),
            estimate: a.ratio - b.ratio,
            stderr: a.stderr.hypot(b.stderr),
            reference: Some(0.0),
            verdict: Verdict::from_bool(self.contradicts_unbiasedness()),
        }
    }

    /// Verdict `Pass` when every ratio agrees within `rel_tol`, resolved to
    /// 3 SE.
    pub fn agreement_report(&self, rel_tol: f64) -> ProbeReport {
        let (a, b) = self.widest_pair();
        let stderr = a.stderr.hypot(b.stderr) / a.ratio.abs().min(b.ratio.abs());
        ProbeReport {
            probe: "g_effectively_constant".into(),
            params: self.json(),
            estimate: self.max_rel_spread,
            stderr,
            reference: Some(0.0),
            verdict: Verdict::within(self.max_rel_spread, stderr, 0.0, rel_tol),
        }
    }

    fn widest_pair(&self) -> (RatioPoint, RatioPoint) {
        let mut best = (self.points[0], self.points[1], f64::NEG_INFINITY);
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                let z = (a.ratio - b.ratio).abs() / a.stderr.hypot(b.stderr);
                if z > best.2 {
                    best = (*a, *b, z);
                }
            }
        }
        (best.0, best.1)
    }

    fn json(&self) -> String {
        let pts: Vec<String> = self
            .points
            .iter()
            .map(|p| format!("[{},{:.6},{:.2e}]", p.eps_i, p.ratio, p.stderr))
            .collect();
        format!(
            "{{\"N\":{},\"sigma\":{},\"points\":[{}]}}",
            self.n,
            self.sigma,
            pts.join(",")
        )
    }
}

/// Estimates `(1 − 1/N) g(ε_i)` at each non-zero grid point with independent
/// streams and reports how far apart the estimates are.
pub fn unbiasedness_contradiction_check(
    n: usize,
    sigma: f64,
    eps_grid: &[f64],
    trials: u64,
    seed: u64,
) -> Result<ContradictionReport> {
    let usable: Vec<f64> = eps_grid.iter().copied().filter(|&e| e != 0.0).collect();
    let mut mags: Vec<f64> = usable.iter().map(|e| e.abs()).collect();
    mags.sort_by(f64::total_cmp);
    mags.dedup();
    if mags.len() < 2 {
        return Err(Error::InvalidParameter(
            "grid needs at least two distinct non-zero |eps_i| values".into(),
        ));
    }
    let mut points = Vec::with_capacity(usable.len());
    for (i, &eps_i) in usable.iter().enumerate() {
        let cfg = BiasProbeConfig {
            n,
            sigma,
            eps_i,
            trials,
            seed: derive_seed(seed, Stream::Probe, i as u64),
        };
        let r = mc_conditional_advantage(&cfg)?;
        points.push(RatioPoint {
            eps_i,
            ratio: r.estimate / eps_i,
            stderr: r.stderr / eps_i.abs(),
        });
    }
    let mut max_z: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let gap = (a.ratio - b.ratio).abs();
            max_z = max_z.max(gap / a.stderr.hypot(b.stderr));
            max_rel = max_rel.max(gap / a.ratio.abs().min(b.ratio.abs()));
        }
    }
    Ok(ContradictionReport {
        n,
        sigma,
        points,
        max_z,
        max_rel_spread: max_rel,
    })
}

/// Central differences over every logit: `(f(θ+h e_j) − f(θ−h e_j)) / 2h`.
pub fn finite_difference_gradient(
    objective: impl Fn(&PolicyParameters) -> f64,
    params: &PolicyParameters,
    step: f64,
) -> Result<GradAccumulator> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.logits().len());
    for j in 0..params.logits().len() {
        let x = params.logits()[j];
        probe.logits_mut()[j] = x + step;
        let up = objective(&probe);
        probe.logits_mut()[j] = x - step;
        let down = objective(&probe);
        probe.logits_mut()[j] = x;
        out.push((up - down) / (2.0 * step));
    }
    GradAccumulator::from_values(*params.shape(), out)
}

/// `‖a − b‖_∞ / ‖b‖_∞`, or the absolute gap when `b` is zero.
pub fn max_relative_error(actual: &GradAccumulator, expected: &GradAccumulator) -> f64 {
    let gap = actual
        .values()
        .iter()
        .zip(expected.values())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = expected.max_abs();
    if scale == 0.0 {
        gap
    } else {
        gap / scale
    }
}

fn check_same_shape(params: &PolicyParameters, reference: &PolicyParameters) -> Result<()> {
    if params.shape() != reference.shape() {
        return Err(Error::InvalidDimension("policy and reference shapes differ".into()));
    }
    Ok(())
}

/// Sequence-level `D_KL(π_θ ‖ π_ref)` for one prompt by exhaustive enumeration.
pub fn exact_reverse_kl(params: &PolicyParameters, reference: &PolicyParameters, prompt: usize) -> Result<f64> {
    check_same_shape(params, reference)?;
    let mut kl = 0.0;
    for (tokens, p) in enumerate_sequences(params, prompt)? {
        let lp: f64 = params.token_log_probs(prompt, &tokens)?.iter().sum();
        let lr: f64 = reference.token_log_probs(prompt, &tokens)?.iter().sum();
        kl += p * (lp - lr);
    }
    Ok(kl)
}

/// Symbolic gradient of the per-token reverse KL for a position-conditioned
/// policy: the token mean `(1/T) Σ_t ∇ KL_t`, where at every position
/// `∂KL_t/∂z_b = π(b) (ρ(b) − KL_t)`.
///
/// Positions are independent under position conditioning, so this equals
/// `(1/T) ∇ D_KL` over whole sequences.
pub fn exact_rkl_gradient(params: &PolicyParameters, reference: &PolicyParameters, prompt: usize) -> Result<GradAccumulator> {
    check_same_shape(params, reference)?;
    let shape = *params.shape();
    if shape.conditioning != Conditioning::Position {
        return Err(Error::InvalidParameter(
            "the symbolic reverse-KL gradient needs position conditioning".into(),
        ));
    }
    let v = shape.vocab;
    let mut grad = GradAccumulator::zeros(shape);
    for t in 0..shape.max_len {
        let lp = params.log_probs_at(prompt, t, None);
        let lr = reference.log_probs_at(prompt, t, None);
        let rho: Vec<f64> = lp.iter().zip(&lr).map(|(a, b)| a - b).collect();
        let kl_t: f64 = lp.iter().zip(&rho).map(|(l, r)| l.exp() * r).sum();
        let row_grad: Vec<f64> = lp
            .iter()
            .zip(&rho)
            .map(|(l, r)| l.exp() * (r - kl_t) / shape.max_len as f64)
            .collect();
        let mut rows = vec![shape.local_row(prompt, t, None)];
        if shape.shared {
            rows.push(shape.local_rows() + shape.prompt_state(t, None));
        }
        for r in rows {
            grad.values_mut()[r * v..(r + 1) * v]
                .iter_mut()
                .zip(&row_grad)
                .for_each(|(g, x)| *g += x);
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct K3VarianceRow {
    pub p_theta_star: f64,
    pub p_ref_star: f64,
    /// Variance of the k3 gradient weight `1 − δ(y)` (equal to Var δ).
    pub k3_weight_var: f64,
    /// Variance of the k2 gradient weight `ρ(y)`.
    pub k2_weight_var: f64,
    /// Closed-form `Var δ = Σ π_ref²/π_θ − 1`.
    pub k3_weight_var_exact: f64,
    pub trials: u64,
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("{name} is not a probability distribution")));
    }
    Ok(())
}

/// Per-sample variance of the k3 weight and the k2 weight with `y ~ π_θ` at
/// a single state.
pub fn k3_variance_probe(p_theta: &[f64], p_ref: &[f64], trials: u64, seed: u64) -> Result<K3VarianceRow> {
    check_distribution(p_theta, "p_theta")?;
    check_distribution(p_ref, "p_ref")?;
    if p_theta.len() != p_ref.len() {
        return Err(Error::InvalidDimension("distributions differ in support size".into()));
    }
    if trials < 2 {
        return Err(Error::InvalidParameter("trials must be >= 2".into()));
    }
    let chunks = trials.div_ceil(CHUNK);
    let parts: Vec<(Moments, Moments)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_from_seed(derive_seed(seed, Stream::Probe, c));
            let count = CHUNK.min(trials - c * CHUNK);
            let mut k3 = Moments::default();
            let mut k2 = Moments::default();
            for _ in 0..count {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut y = p_theta.len() - 1;
                for (i, p) in p_theta.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        y = i;
                        break;
                    }
                }
                let delta = p_ref[y] / p_theta[y];
                k3.push(1.0 - delta);
                k2.push(-delta.ln());
            }
            (k3, k2)
        })
        .collect();
    let (mut k3, mut k2) = (Moments::default(), Moments::default());
    for (a, b) in &parts {
        k3.merge(a);
        k2.merge(b);
    }
    let exact: f64 = p_theta
        .iter()
        .zip(p_ref)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, r)| r * r / t)
        .sum::<f64>()
        - 1.0;
    Ok(K3VarianceRow {
        p_theta_star: p_theta[0],
        p_ref_star: p_ref[0],
        k3_weight_var: k3.variance(),
        k2_weight_var: k2.variance(),
        k3_weight_var_exact: exact,
        trials,
    })
}

/// Two-outcome sweep: `π_θ = [p, 1−p]`, `π_ref = [p_ref, 1−p_ref]`.
pub fn k3_variance_sweep(p_theta_stars: &[f64], p_ref_star: f64, trials: u64, seed: u64) -> Result<Vec<K3VarianceRow>> {
    p_theta_stars
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            k3_variance_probe(
                &[p, 1.0 - p],
                &[p_ref_star, 1.0 - p_ref_star],
                trials,
                derive_seed(seed, Stream::Probe, 1000 + i as u64),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(cond_d2_closed_form(4, 1.0, 0.0).unwrap(), 0.5625);
        assert_eq!(cond_d2_closed_form(2, 1.0, 2.0).unwrap(), 1.25);
        let big = cond_d2_closed_form(1 << 20, 1.5, 0.0).unwrap();
        assert!((big - 2.25).abs() < 1e-5);
        assert!(cond_d2_closed_form(1, 1.0, 0.0).is_err());
    }

    #[test]
    fn n2_reference() {
        assert!((conditional_advantage_n2(1.0, 1.0) - 0.682_689_492).abs() < 1e-8);
        assert_eq!(conditional_advantage_n2(1.0, 0.0), 0.0);
    }

    #[test]
    fn verdict_rules() {
        assert_eq!(Verdict::within(1.001, 1e-4, 1.0, 0.01), Verdict::Pass);
        assert_eq!(Verdict::within(1.1, 1e-4, 1.0, 0.01), Verdict::Fail);
        assert_eq!(Verdict::within(1.001, 0.1, 1.0, 0.01), Verdict::Inconclusive);
        assert_eq!(Verdict::within(5.0, 0.1, 1.0, 0.01), Verdict::Fail);
    }

    #[test]
    fn small_probe_is_inconclusive() {
        let cfg = BiasProbeConfig {
            n: 4,
            sigma: 1.0,
            eps_i: 0.0,
            trials: 100,
            seed: 1,
        };
        let r = cond_d2_monte_carlo(&cfg).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert!(r.stderr > 0.01);
    }

    #[test]
    fn probes_are_deterministic() {
        let cfg = BiasProbeConfig {
            n: 3,
            sigma: 1.0,
            eps_i: 0.5,
            trials: 40_000,
            seed: 9,
        };
        let a = mc_conditional_advantage(&cfg).unwrap();
        let b = crate::rng::with_threads(1, || mc_conditional_advantage(&cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_probe_configs() {
        let base = BiasProbeConfig {
            n: 2,
            sigma: 1.0,
            eps_i: 0.0,
            trials: 10,
            seed: 0,
        };
        assert!(mc_conditional_advantage(&BiasProbeConfig { n: 1, ..base }).is_err());
        assert!(mc_conditional_advantage(&BiasProbeConfig { sigma: 0.0, ..base }).is_err());
        assert!(mc_conditional_advantage(&BiasProbeConfig { trials: 0, ..base }).is_err());
    }

    #[test]
    fn grid_needs_distinct_values() {
        assert!(unbiasedness_contradiction_check(2, 1.0, &[1.0, 1.0], 100, 0).is_err());
        assert!(unbiasedness_contradiction_check(2, 1.0, &[1.0, -1.0, 0.0], 100, 0).is_err());
    }

    #[test]
    fn fd_recovers_linear_coefficients() {
        let p = crate::policy::init_policy(2, 2, 3, 0.5, 2).unwrap();
        let coeffs: Vec<f64> = (0..p.logits().len()).map(|j| j as f64 * 0.25 - 1.0).collect();
        let f = |q: &PolicyParameters| q.logits().iter().zip(&coeffs).map(|(x, c)| x * c).sum::<f64>();
        let g = finite_difference_gradient(f, &p, 1e-3).unwrap();
        for (a, c) in g.values().iter().zip(&coeffs) {
            assert!((a - c).abs() < 1e-10);
        }
        assert!(finite_difference_gradient(f, &p, 0.0).is_err());
    }

    #[test]
    fn k3_probe_identical_policies() {
        let row = k3_variance_probe(&[0.3, 0.7], &[0.3, 0.7], 1000, 0).unwrap();
        assert_eq!(row.k3_weight_var, 0.0);
        assert_eq!(row.k2_weight_var, 0.0);
        assert!(k3_variance_probe(&[0.3, 0.6], &[0.3, 0.7], 1000, 0).is_err());
    }
}
