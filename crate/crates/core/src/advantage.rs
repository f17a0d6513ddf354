//! Advantage estimators.
//!
//! Every estimator is a pure function from rewards (plus critic values or
//! per-token KL where relevant) to advantages. Group estimators expect the
//! batch to be laid out group-contiguous: rows `g*k .. (g+1)*k` form group `g`.

use crate::error::{Error, Result};
use crate::stats::{mean, mean_std, StdConvention};

pub const DEFAULT_LOCAL_EPS: f64 = 1e-4;
pub const DEFAULT_GLOBAL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    /// PPO-style GAE over a tabular critic.
    Gae,
    /// Greedy-decoding baseline.
    ReMax,
    /// Leave-one-out mean baseline.
    Rloo,
    /// Group mean and group std.
    GrpoLocal,
    /// Global batch normalization, `k >= 1`.
    RPlusPlus,
    /// Group mean subtraction followed by global batch normalization.
    RPlusPlusBaseline,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Gae,
        EstimatorKind::ReMax,
        EstimatorKind::Rloo,
        EstimatorKind::GrpoLocal,
        EstimatorKind::RPlusPlus,
        EstimatorKind::RPlusPlusBaseline,
    ];

    /// Config-file spelling.
    pub fn key(self) -> &'static str {
        match self {
            EstimatorKind::Gae => "gae",
            EstimatorKind::ReMax => "remax",
            EstimatorKind::Rloo => "rloo",
            EstimatorKind::GrpoLocal => "grpo",
            EstimatorKind::RPlusPlus => "rpp",
            EstimatorKind::RPlusPlusBaseline => "rpp_baseline",
        }
    }

    pub fn min_group_size(self) -> usize {
        match self {
            EstimatorKind::Rloo | EstimatorKind::GrpoLocal | EstimatorKind::RPlusPlusBaseline => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace(['-', '+'], "_").as_str() {
            "gae" | "ppo" => Ok(EstimatorKind::Gae),
            "remax" => Ok(EstimatorKind::ReMax),
            "rloo" => Ok(EstimatorKind::Rloo),
            "grpo" | "grpolocal" | "grpo_local" => Ok(EstimatorKind::GrpoLocal),
            "rpp" | "rplusplus" | "reinforce__" => Ok(EstimatorKind::RPlusPlus),
            "rpp_baseline" | "rplusplusbaseline" | "reinforce___baseline" => {
                Ok(EstimatorKind::RPlusPlusBaseline)
            }
            _ => Err(format!("unknown estimator `{s}`")),
        }
    }
}

/// Maps batch rows to prompt groups of size `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    group_size: usize,
    prompts: Vec<usize>,
}

impl GroupLayout {
    /// One group per entry of `group_prompts`, each of `group_size` rows.
    pub fn new(group_prompts: Vec<usize>, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::InvalidGroup("group size must be >= 1".into()));
        }
        Ok(GroupLayout {
            group_size,
            prompts: group_prompts,
        })
    }

    /// Groups of `k` rows over `rows` rows, prompt ids left as group indices.
    pub fn uniform(rows: usize, group_size: usize) -> Result<Self> {
        if group_size == 0 || rows % group_size != 0 {
            return Err(Error::InvalidGroup(format!(
                "{rows} rows cannot be split into groups of {group_size}"
            )));
        }
        Self::new((0..rows / group_size).collect(), group_size)
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups(&self) -> usize {
        self.prompts.len()
    }

    pub fn rows(&self) -> usize {
        self.prompts.len() * self.group_size
    }

    /// `(prompt_id, index within group)` for a row.
    pub fn row(&self, row: usize) -> (usize, usize) {
        (self.prompts[row / self.group_size], row % self.group_size)
    }

    pub fn group_prompts(&self) -> &[usize] {
        &self.prompts
    }

    fn check(&self, rewards: &[f64], min_k: usize) -> Result<()> {
        if self.group_size < min_k {
            return Err(Error::InvalidGroup(format!(
                "group size {} < {min_k}",
                self.group_size
            )));
        }
        if rewards.len() != self.rows() {
            return Err(Error::InvalidDimension(format!(
                "{} rewards for a layout of {} rows",
                rewards.len(),
                self.rows()
            )));
        }
        Ok(())
    }
}

/// Per-trajectory lists of per-token advantages.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdvantageVector {
    rows: Vec<Vec<f64>>,
}

impl AdvantageVector {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        AdvantageVector { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.rows
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().flatten().all(|x| x.is_finite())
    }

    /// Global z-score over every token entry, preserving the row shape.
    pub fn normalized_global(&self, eps: f64, convention: StdConvention) -> Result<Self> {
        let flat = normalize_global_with(&self.flatten(), eps, convention)?;
        let mut it = flat.into_iter();
        Ok(AdvantageVector {
            rows: self
                .rows
                .iter()
                .map(|r| it.by_ref().take(r.len()).collect())
                .collect(),
        })
    }
}

/// Backward-pass GAE with terminal bootstrap `V(o_{L+1}) = 0`.
pub fn adv_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::InvalidDimension(format!(
            "{} rewards vs {} values",
            rewards.len(),
            values.len()
        )));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        let next_v = values.get(t + 1).copied().unwrap_or(0.0);
        let delta = rewards[t] + gamma * next_v - values[t];
        running = delta + gamma * lambda * running;
        out[t] = running;
    }
    Ok(out)
}

pub fn adv_remax(reward: f64, greedy_reward: f64) -> f64 {
    reward - greedy_reward
}

/// `r_i − mean_{j≠i} r_j`.
pub fn adv_rloo(group_rewards: &[f64]) -> Result<Vec<f64>> {
    let k = group_rewards.len();
    if k < 2 {
        return Err(Error::InvalidGroup(format!("RLOO needs k >= 2, got {k}")));
    }
    let total: f64 = group_rewards.iter().sum();
    Ok(group_rewards
        .iter()
        .map(|r| r - (total - r) / (k - 1) as f64)
        .collect())
}

pub fn adv_grpo_local(group_rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    adv_grpo_local_with(group_rewards, eps, StdConvention::Population)
}

/// `(r_i − mean) / (std + eps)`. A group with `std + eps == 0` maps to zeros.
pub fn adv_grpo_local_with(group_rewards: &[f64], eps: f64, convention: StdConvention) -> Result<Vec<f64>> {
    let k = group_rewards.len();
    if k < 2 {
        return Err(Error::InvalidGroup(format!("GRPO needs k >= 2, got {k}")));
    }
    check_eps(eps)?;
    Ok(zscore(group_rewards, eps, convention))
}

/// KL-in-reward per-token advantage: `r − β · Σ_{i≥t} KL(i)`.
pub fn adv_rpp_token(terminal_reward: f64, per_token_kl: &[f64], beta: f64) -> Vec<f64> {
    let mut out = vec![0.0; per_token_kl.len()];
    let mut suffix = 0.0;
    for t in (0..per_token_kl.len()).rev() {
        suffix += per_token_kl[t];
        out[t] = terminal_reward - beta * suffix;
    }
    out
}

pub fn normalize_global(batch: &[f64], eps: f64) -> Result<Vec<f64>> {
    normalize_global_with(batch, eps, StdConvention::Population)
}

/// Z-score over the whole batch, reduced left to right.
pub fn normalize_global_with(batch: &[f64], eps: f64, convention: StdConvention) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("cannot normalize an empty batch".into()));
    }
    check_eps(eps)?;
    Ok(zscore(batch, eps, convention))
}

pub fn adv_rpp_baseline(rewards: &[f64], layout: &GroupLayout, eps: f64) -> Result<Vec<f64>> {
    adv_rpp_baseline_with(rewards, layout, eps, StdConvention::Population)
}

/// Group-mean subtraction, then a global z-score of the centered values.
pub fn adv_rpp_baseline_with(
    rewards: &[f64],
    layout: &GroupLayout,
    eps: f64,
    convention: StdConvention,
) -> Result<Vec<f64>> {
    layout.check(rewards, 2)?;
    let centered = group_centered(rewards, layout.group_size());
    normalize_global_with(&centered, eps, convention)
}

/// `r_i − mean(group)` for each contiguous group of `k`.
pub fn group_centered(rewards: &[f64], k: usize) -> Vec<f64> {
    rewards
        .chunks(k)
        .flat_map(|g| {
            let m = mean(g);
            g.iter().map(move |r| r - m)
        })
        .collect()
}

/// GRPO over every group of a layout.
pub fn adv_grpo_batch(rewards: &[f64], layout: &GroupLayout, eps: f64, convention: StdConvention) -> Result<Vec<f64>> {
    layout.check(rewards, 2)?;
    let mut out = Vec::with_capacity(rewards.len());
    for g in rewards.chunks(layout.group_size()) {
        out.extend(adv_grpo_local_with(g, eps, convention)?);
    }
    Ok(out)
}

/// RLOO over every group of a layout.
pub fn adv_rloo_batch(rewards: &[f64], layout: &GroupLayout) -> Result<Vec<f64>> {
    layout.check(rewards, 2)?;
    let mut out = Vec::with_capacity(rewards.len());
    for g in rewards.chunks(layout.group_size()) {
        out.extend(adv_rloo(g)?);
    }
    Ok(out)
}

/// Zeros except the final position.
pub fn broadcast_terminal(advantage: f64, length: usize) -> Vec<f64> {
    let mut out = vec![0.0; length];
    if let Some(last) = out.last_mut() {
        *last = advantage;
    }
    out
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("eps must be finite and >= 0, got {eps}")));
    }
    Ok(())
}

fn zscore(values: &[f64], eps: f64, convention: StdConvention) -> Vec<f64> {
    let (m, s) = mean_std(values, convention);
    let denom = s + eps;
    if denom == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - m) / denom).collect()
}
