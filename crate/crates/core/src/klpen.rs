//! KL estimators k1/k2/k3 and the gradients of KL loss terms.
//!
//! With `δ = π_ref / π_θ` and `ρ = log π_θ − log π_ref = −log δ`:
//!
//! ```text
//! k1 = ρ
//! k2 = ρ² / 2
//! k3 = δ − 1 + ρ
//! ```
//!
//! Loss gradients treat `log π_ref` as a constant and average over every
//! token of the batch.

use crate::error::{Error, Result};
use crate::policy::{GradAccumulator, PolicyParameters, Trajectory};

/// `k3` entries whose `log δ` exceeds this are flagged unstable.
pub const K3_OVERFLOW_LOG_RATIO: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KLEstimatorKind {
    K1,
    #[default]
    K2,
    K3,
}

impl KLEstimatorKind {
    pub fn key(self) -> &'static str {
        match self {
            KLEstimatorKind::K1 => "k1",
            KLEstimatorKind::K2 => "k2",
            KLEstimatorKind::K3 => "k3",
        }
    }
}

impl std::str::FromStr for KLEstimatorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "k1" => Ok(KLEstimatorKind::K1),
            "k2" => Ok(KLEstimatorKind::K2),
            "k3" => Ok(KLEstimatorKind::K3),
            other => Err(format!("unknown kl estimator `{other}`")),
        }
    }
}

/// Per-token log-probabilities under the trained and reference policies.
#[derive(Debug, Clone, PartialEq)]
pub struct KLRecord {
    logp_theta: Vec<f64>,
    logp_ref: Vec<f64>,
}

impl KLRecord {
    pub fn new(logp_theta: Vec<f64>, logp_ref: Vec<f64>) -> Result<Self> {
        if logp_theta.len() != logp_ref.len() {
            return Err(Error::InvalidDimension(format!(
                "{} policy log-probs vs {} reference log-probs",
                logp_theta.len(),
                logp_ref.len()
            )));
        }
        Ok(KLRecord { logp_theta, logp_ref })
    }

    /// Uses the sampling policy's log-probabilities as `log π_θ`.
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        KLRecord {
            logp_theta: traj.logp_sample.clone(),
            logp_ref: traj.logp_ref.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.logp_theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp_theta.is_empty()
    }

    pub fn log_ratios(&self) -> impl Iterator<Item = f64> + '_ {
        self.logp_theta.iter().zip(&self.logp_ref).map(|(a, b)| a - b)
    }

    pub fn swapped(&self) -> Self {
        KLRecord {
            logp_theta: self.logp_ref.clone(),
            logp_ref: self.logp_theta.clone(),
        }
    }
}

pub fn kl_k1(record: &KLRecord) -> Vec<f64> {
    record.log_ratios().collect()
}

pub fn kl_k2(record: &KLRecord) -> Vec<f64> {
    record.log_ratios().map(|r| 0.5 * r * r).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct K3Values {
    pub values: Vec<f64>,
    /// Tokens where `log δ > K3_OVERFLOW_LOG_RATIO`.
    pub unstable: Vec<usize>,
}

impl K3Values {
    pub fn is_stable(&self) -> bool {
        self.unstable.is_empty()
    }
}

pub fn kl_k3(record: &KLRecord) -> K3Values {
    let mut unstable = Vec::new();
    let values = record
        .log_ratios()
        .enumerate()
        .map(|(t, rho)| {
            if -rho > K3_OVERFLOW_LOG_RATIO {
                unstable.push(t);
            }
            (-rho).exp() - 1.0 + rho
        })
        .collect();
    K3Values { values, unstable }
}

/// Mean of `ρ²/2` over every token of the batch.
pub fn k2_loss_value(records: &[KLRecord]) -> Result<f64> {
    let tokens: usize = records.iter().map(KLRecord::len).sum();
    if tokens == 0 {
        return Err(Error::InvalidParameter("k2 loss over an empty batch".into()));
    }
    let total: f64 = records.iter().flat_map(kl_k2).sum();
    Ok(total / tokens as f64)
}

/// Accumulates `Σ_i w_i Σ_t weight(ρ_{i,t}) ∇ log π_θ(o_{i,t}) / Σ_i w_i L_i`,
/// with `ρ` evaluated under `params` against each trajectory's `logp_ref`.
fn ratio_weighted_score(
    params: &PolicyParameters,
    batch: &[Trajectory],
    row_weights: Option<&[f64]>,
    weight: impl Fn(f64) -> f64,
) -> Result<GradAccumulator> {
    if let Some(w) = row_weights {
        if w.len() != batch.len() {
            return Err(Error::InvalidDimension("one weight per trajectory required".into()));
        }
    }
    let mut grad = GradAccumulator::zeros(*params.shape());
    let mut denom = 0.0;
    for (i, traj) in batch.iter().enumerate() {
        if traj.logp_ref.len() != traj.tokens.len() {
            return Err(Error::InvalidDimension(format!(
                "trajectory {i} has {} tokens but {} reference log-probs",
                traj.tokens.len(),
                traj.logp_ref.len()
            )));
        }
        let w = row_weights.map_or(1.0, |ws| ws[i]);
        let logp = params.sequence_log_probs(traj)?;
        params.accumulate_score(
            traj.prompt_id,
            &traj.tokens,
            |t| w * weight(logp[t] - traj.logp_ref[t]),
            &mut grad,
        )?;
        denom += w * traj.len() as f64;
    }
    if denom > 0.0 {
        grad.scale(1.0 / denom);
    }
    Ok(grad)
}

/// Gradient of the k2 loss: `d(ρ²/2)/dρ · ∇ log π_θ = ρ ∇ log π_θ`, token mean.
pub fn k2_loss_gradient(params: &PolicyParameters, batch: &[Trajectory]) -> Result<GradAccumulator> {
    ratio_weighted_score(params, batch, None, |rho| rho)
}

/// As [`k2_loss_gradient`] with per-trajectory weights, e.g. exact
/// probabilities from enumerating every sequence.
pub fn k2_loss_gradient_weighted(
    params: &PolicyParameters,
    batch: &[Trajectory],
    weights: &[f64],
) -> Result<GradAccumulator> {
    ratio_weighted_score(params, batch, Some(weights), |rho| rho)
}

/// Gradient of the k3 loss: `(1 − δ) ∇ log π_θ`, token mean.
pub fn k3_loss_gradient(params: &PolicyParameters, batch: &[Trajectory]) -> Result<GradAccumulator> {
    ratio_weighted_score(params, batch, None, |rho| 1.0 - (-rho).exp())
}

/// Monte Carlo reverse-KL policy gradient `E[log(π_θ/π_ref) ∇ log π_θ]`,
/// one sample per token.
pub fn rkl_gradient_reference(params: &PolicyParameters, batch: &[Trajectory]) -> Result<GradAccumulator> {
    let mut grad = GradAccumulator::zeros(*params.shape());
    let mut tokens = 0usize;
    for traj in batch {
        let logp = params.sequence_log_probs(traj)?;
        let log_ratio: Vec<f64> = logp.iter().zip(&traj.logp_ref).map(|(a, b)| a - b).collect();
        if log_ratio.len() != traj.len() {
            return Err(Error::InvalidDimension("reference log-probs misaligned".into()));
        }
        params.accumulate_score(traj.prompt_id, &traj.tokens, |t| log_ratio[t], &mut grad)?;
        tokens += traj.len();
    }
    if tokens > 0 {
        grad.scale(1.0 / tokens as f64);
    }
    Ok(grad)
}

/// Gradient of a naive k1 loss: the token mean of score gradients. The
/// reference policy does not appear.
pub fn k1_loss_gradient_probe(params: &PolicyParameters, batch: &[Trajectory]) -> Result<GradAccumulator> {
    let mut grad = GradAccumulator::zeros(*params.shape());
    let mut tokens = 0usize;
    for traj in batch {
        params.accumulate_score(traj.prompt_id, &traj.tokens, |_| 1.0, &mut grad)?;
        tokens += traj.len();
    }
    if tokens > 0 {
        grad.scale(1.0 / tokens as f64);
    }
    Ok(grad)
}

/// Gradient of the selected loss term.
pub fn kl_loss_gradient(
    kind: KLEstimatorKind,
    params: &PolicyParameters,
    batch: &[Trajectory],
) -> Result<GradAccumulator> {
    match kind {
        KLEstimatorKind::K1 => k1_loss_gradient_probe(params, batch),
        KLEstimatorKind::K2 => k2_loss_gradient(params, batch),
        KLEstimatorKind::K3 => k3_loss_gradient(params, batch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_policy;
    use crate::rng::rng_from_seed;

    fn rec(theta: &[f64], reference: &[f64]) -> KLRecord {
        KLRecord::new(theta.to_vec(), reference.to_vec()).unwrap()
    }

    #[test]
    fn k1_examples() {
        assert_eq!(kl_k1(&rec(&[-0.3, -2.0], &[-0.3, -2.0])), vec![0.0, 0.0]);
        assert_eq!(kl_k1(&rec(&[-1.0], &[-1.5])), vec![0.5]);
        let r = rec(&[-1.0, -0.2], &[-1.5, -0.9]);
        let fwd = kl_k1(&r);
        let back = kl_k1(&r.swapped());
        assert!(fwd.iter().zip(&back).all(|(a, b)| *a == -*b));
    }

    #[test]
    fn k2_examples() {
        assert_eq!(kl_k2(&rec(&[-1.0], &[-1.0])), vec![0.0]);
        assert_eq!(kl_k2(&rec(&[0.0], &[-2.0])), vec![2.0]);
        assert_eq!(kl_k2(&rec(&[-1.0], &[-0.5])), vec![0.125]);
    }

    #[test]
    fn k3_examples() {
        assert_eq!(kl_k3(&rec(&[-0.7], &[-0.7])).values, vec![0.0]);
        // ρ = −1 means δ = e.
        let v = kl_k3(&rec(&[-2.0], &[-1.0])).values[0];
        assert!((v - (std::f64::consts::E - 2.0)).abs() < 1e-15);
        assert!((v - 0.7183).abs() < 1e-4);
        let blown = kl_k3(&rec(&[-60.0, -1.0], &[-1.0, -1.0]));
        assert_eq!(blown.unstable, vec![0]);
        assert!(!blown.is_stable());
    }

    #[test]
    fn k2_loss_examples() {
        assert_eq!(k2_loss_value(&[rec(&[-1.0, -2.0], &[-1.0, -2.0])]).unwrap(), 0.0);
        assert_eq!(k2_loss_value(&[rec(&[-1.0, -2.0], &[-2.0, -1.0])]).unwrap(), 0.5);
        let r = rec(&[-1.0, -0.1], &[-0.4, -3.0]);
        assert_eq!(k2_loss_value(std::slice::from_ref(&r)).unwrap(), k2_loss_value(&[r.swapped()]).unwrap());
        assert!(k2_loss_value(&[]).is_err());
    }

    #[test]
    fn gradients_vanish_at_reference() {
        let p = init_policy(2, 3, 3, 0.5, 1).unwrap();
        let mut rng = rng_from_seed(2);
        let batch: Vec<_> = (0..8)
            .map(|i| {
                let mut t = p.sample_trajectory(i % 2, &mut rng, None).unwrap();
                t.attach_reference(&p).unwrap();
                t
            })
            .collect();
        assert!(k2_loss_gradient(&p, &batch).unwrap().is_zero());
        assert!(rkl_gradient_reference(&p, &batch).unwrap().is_zero());
        assert!(k3_loss_gradient(&p, &batch).unwrap().is_zero());
    }

    #[test]
    fn k1_probe_single_trajectory() {
        let p = init_policy(1, 3, 2, 0.4, 5).unwrap();
        let traj = p.sample_trajectory(0, &mut rng_from_seed(3), None).unwrap();
        let probe = k1_loss_gradient_probe(&p, std::slice::from_ref(&traj)).unwrap();
        let mut expect = p.log_prob_gradient(&traj).unwrap();
        expect.scale(1.0 / traj.len() as f64);
        for (a, b) in probe.values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
