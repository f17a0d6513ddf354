//! Outer training loop: sample, score, estimate advantages, then run
//! clipped-surrogate mini-batch ascent.
//!
//! Each iteration snapshots `π_old`, samples `N = groups × k` trajectories
//! (group-contiguous), computes advantages with the configured estimator and
//! runs `inner_epochs` passes of mini-batch updates. `π_ref` is frozen at
//! construction.
//!
//! KL handling depends on the estimator. `kl_beta` enters the reward as a
//! per-token k1 penalty for `rpp`, `rloo`, `remax` and `gae`. `kl_lambda`
//! adds a separate KL loss term (estimator chosen by `kl_estimator`) for
//! `rpp_baseline` and `grpo`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::advantage::{
    adv_gae, adv_grpo_batch, adv_remax, adv_rloo_batch, adv_rpp_baseline_with, adv_rpp_token,
    broadcast_terminal, group_centered, normalize_global_with, AdvantageVector, EstimatorKind,
    GroupLayout, DEFAULT_GLOBAL_EPS, DEFAULT_LOCAL_EPS,
};
use crate::env::{
    draw_prompts, estimate_pass_at_n, evaluate_mean_reward, evaluate_pass_at_n, Prompt, PromptSet, RewardScheme, Split,
};
use crate::error::{Error, Result};
use crate::klpen::{kl_k1, kl_loss_gradient, KLEstimatorKind, KLRecord};
use crate::policy::{GradAccumulator, PolicyParameters, PolicyShape, Trajectory};
use crate::rng::{derive_seed, rng_for, with_threads, LabRng, Stream};
use crate::stats::{mean, mean_std, StdConvention};

/// How a per-trajectory advantage is laid onto tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenAdvantage {
    /// Every token carries its reward-to-go advantage (suffix KL adjusted
    /// where a reward penalty applies).
    #[default]
    SuffixKl,
    /// Only the final token carries the advantage.
    TerminalOnly,
}

impl TokenAdvantage {
    pub fn key(self) -> &'static str {
        match self {
            TokenAdvantage::SuffixKl => "suffix_kl",
            TokenAdvantage::TerminalOnly => "terminal_only",
        }
    }
}

impl std::str::FromStr for TokenAdvantage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "suffix_kl" => Ok(TokenAdvantage::SuffixKl),
            "terminal_only" => Ok(TokenAdvantage::TerminalOnly),
            other => Err(format!("unknown token_advantage `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub estimator: EstimatorKind,
    pub group_size: usize,
    /// Trajectories per iteration; must be divisible by `group_size`.
    pub batch_size: usize,
    pub steps: usize,
    pub inner_epochs: usize,
    pub minibatch_size: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub kl_lambda: f64,
    pub kl_estimator: KLEstimatorKind,
    pub reward_clip_lo: f64,
    pub reward_clip_hi: f64,
    pub reward_scale: f64,
    pub reward_scheme: RewardScheme,
    pub token_advantage: TokenAdvantage,
    pub local_eps: f64,
    pub global_eps: f64,
    pub std_convention: StdConvention,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub critic_lr: f64,
    pub stop_token: Option<usize>,
    /// Samples per held-out prompt for `eval_reward` and `pass_at_n`.
    pub eval_n: usize,
    pub seed: u64,
    /// Worker cap for sampling; 0 lets rayon decide. Never changes results.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            estimator: EstimatorKind::RPlusPlus,
            group_size: 4,
            batch_size: 64,
            steps: 300,
            inner_epochs: 1,
            minibatch_size: 16,
            step_size: 16.0,
            momentum: 0.0,
            clip_eps: 0.2,
            kl_beta: 0.01,
            kl_lambda: 0.01,
            kl_estimator: KLEstimatorKind::K2,
            reward_clip_lo: -10.0,
            reward_clip_hi: 10.0,
            reward_scale: 1.0,
            reward_scheme: RewardScheme::ZeroOne,
            token_advantage: TokenAdvantage::SuffixKl,
            local_eps: DEFAULT_LOCAL_EPS,
            global_eps: DEFAULT_GLOBAL_EPS,
            std_convention: StdConvention::Population,
            gamma: 1.0,
            gae_lambda: 1.0,
            critic_lr: 0.5,
            stop_token: None,
            eval_n: 4,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.group_size == 0 || self.batch_size == 0 {
            return bad("group_size and batch_size must be >= 1".into());
        }
        if self.batch_size % self.group_size != 0 {
            return bad(format!(
                "batch_size {} is not divisible by group_size {}",
                self.batch_size, self.group_size
            ));
        }
        if self.group_size < self.estimator.min_group_size() {
            return Err(Error::InvalidGroup(format!(
                "estimator {} needs group_size >= {}",
                self.estimator,
                self.estimator.min_group_size()
            )));
        }
        if self.minibatch_size == 0 || self.minibatch_size > self.batch_size {
            return bad(format!(
                "minibatch_size must lie in 1..={} (got {})",
                self.batch_size, self.minibatch_size
            ));
        }
        if self.inner_epochs == 0 {
            return bad("inner_epochs must be >= 1".into());
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if self.reward_clip_lo > self.reward_clip_hi {
            return bad("reward_clip_lo exceeds reward_clip_hi".into());
        }
        if self.eval_n == 0 {
            return bad("eval_n must be >= 1".into());
        }
        for (name, v) in [
            ("step_size", self.step_size),
            ("momentum", self.momentum),
            ("kl_beta", self.kl_beta),
            ("kl_lambda", self.kl_lambda),
            ("reward_scale", self.reward_scale),
            ("local_eps", self.local_eps),
            ("global_eps", self.global_eps),
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
            ("critic_lr", self.critic_lr),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.kl_beta < 0.0 || self.kl_lambda < 0.0 || self.local_eps < 0.0 || self.global_eps < 0.0 {
            return bad("kl_beta, kl_lambda and eps values must be >= 0".into());
        }
        Ok(())
    }

    fn reward_kl_penalty(&self) -> bool {
        self.kl_beta > 0.0
            && matches!(
                self.estimator,
                EstimatorKind::RPlusPlus | EstimatorKind::Rloo | EstimatorKind::ReMax | EstimatorKind::Gae
            )
    }

    fn kl_loss_active(&self) -> bool {
        self.kl_lambda > 0.0
            && matches!(
                self.estimator,
                EstimatorKind::RPlusPlusBaseline | EstimatorKind::GrpoLocal
            )
    }
}

/// Tabular value estimates over the policy's per-prompt states.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTable {
    shape: PolicyShape,
    values: Vec<f64>,
    pub lr: f64,
}

impl CriticTable {
    pub fn new(shape: PolicyShape, lr: f64) -> Self {
        CriticTable {
            shape,
            values: vec![0.0; shape.local_rows()],
            lr,
        }
    }

    pub fn value(&self, prompt: usize, position: usize, prev: Option<usize>) -> f64 {
        self.values[self.shape.local_row(prompt, position, prev)]
    }

    pub fn trajectory_values(&self, traj: &Trajectory) -> Vec<f64> {
        let mut prev = None;
        traj.tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                let v = self.value(traj.prompt_id, t, prev);
                prev = Some(tok);
                v
            })
            .collect()
    }

    /// One step `V[s] ← V[s] + lr · (mean target at s − V[s])` per visited state.
    pub fn train_critic_step(&mut self, batch: &[Trajectory], targets: &[Vec<f64>]) -> Result<()> {
        if batch.len() != targets.len() {
            return Err(Error::InvalidDimension("one target list per trajectory required".into()));
        }
        let mut sums = vec![0.0; self.values.len()];
        let mut counts = vec![0usize; self.values.len()];
        for (traj, tgt) in batch.iter().zip(targets) {
            if tgt.len() != traj.len() {
                return Err(Error::InvalidDimension("targets misaligned with trajectory".into()));
            }
            let mut prev = None;
            for (t, &tok) in traj.tokens.iter().enumerate() {
                let s = self.shape.local_row(traj.prompt_id, t, prev);
                sums[s] += tgt[t];
                counts[s] += 1;
                prev = Some(tok);
            }
        }
        for ((v, s), c) in self.values.iter_mut().zip(&sums).zip(&counts) {
            if *c > 0 {
                *v += self.lr * (s / *c as f64 - *v);
            }
        }
        Ok(())
    }
}

/// Per-iteration telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub step: usize,
    pub reward_mean: f64,
    pub kl_ref: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
    pub clip_frac: f64,
    pub eval_reward: f64,
    pub pass_at_n: f64,
}

pub const METRICS_HEADER: &str = "step,reward_mean,kl_ref,adv_mean,adv_std,clip_frac,eval_reward,pass_at_n";

/// Nine significant digits, scientific notation, `.` decimal point.
pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            fmt_sig9(self.reward_mean),
            fmt_sig9(self.kl_ref),
            fmt_sig9(self.adv_mean),
            fmt_sig9(self.adv_std),
            fmt_sig9(self.clip_frac),
            fmt_sig9(self.eval_reward),
            fmt_sig9(self.pass_at_n),
        )
    }
}

/// One token term of the clipped surrogate: `min(s·A, clip(s, 1−ε, 1+ε)·A)`.
pub fn ppo_clip_token(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the clipped branch is the active (gradient-blocking) one.
fn is_clipped(ratio: f64, advantage: f64, clip_eps: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + clip_eps) || (advantage < 0.0 && ratio < 1.0 - clip_eps)
}

/// Clipped surrogate averaged per sequence (1/|o|), then over sequences.
pub fn ppo_clip_objective(ratios: &[Vec<f64>], advantages: &[Vec<f64>], clip_eps: f64) -> Result<f64> {
    if ratios.len() != advantages.len() || ratios.is_empty() {
        return Err(Error::InvalidDimension("ratios and advantages must align and be non-empty".into()));
    }
    let mut total = 0.0;
    for (rs, adv) in ratios.iter().zip(advantages) {
        if rs.len() != adv.len() {
            return Err(Error::InvalidDimension("per-token lists misaligned".into()));
        }
        if let Some(&bad) = rs.iter().find(|&&r| !(r > 0.0)) {
            return Err(Error::InvalidRatio(bad));
        }
        if rs.is_empty() {
            continue;
        }
        let seq: f64 = rs.iter().zip(adv).map(|(&s, &a)| ppo_clip_token(s, a, clip_eps)).sum();
        total += seq / rs.len() as f64;
    }
    Ok(total / ratios.len() as f64)
}

fn ratios_for(params: &PolicyParameters, traj: &Trajectory) -> Result<Vec<f64>> {
    Ok(params
        .sequence_log_probs(traj)?
        .iter()
        .zip(&traj.logp_sample)
        .map(|(new, old)| (new - old).exp())
        .collect())
}

/// The surrogate as a function of `params`, with ratios taken against each
/// trajectory's `logp_sample`.
pub fn ppo_surrogate(
    params: &PolicyParameters,
    batch: &[Trajectory],
    advantages: &[Vec<f64>],
    clip_eps: f64,
) -> Result<f64> {
    let ratios = batch
        .iter()
        .map(|t| ratios_for(params, t))
        .collect::<Result<Vec<_>>>()?;
    ppo_clip_objective(&ratios, advantages, clip_eps)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClipCount {
    pub clipped: usize,
    pub tokens: usize,
}

/// Analytic gradient of [`ppo_surrogate`].
pub fn ppo_surrogate_gradient(
    params: &PolicyParameters,
    batch: &[Trajectory],
    advantages: &[Vec<f64>],
    clip_eps: f64,
) -> Result<(GradAccumulator, ClipCount)> {
    if batch.len() != advantages.len() || batch.is_empty() {
        return Err(Error::InvalidDimension("batch and advantages must align and be non-empty".into()));
    }
    let mut grad = GradAccumulator::zeros(*params.shape());
    let mut count = ClipCount::default();
    let n = batch.len() as f64;
    for (traj, adv) in batch.iter().zip(advantages) {
        if adv.len() != traj.len() {
            return Err(Error::InvalidDimension("advantages misaligned with trajectory".into()));
        }
        if traj.is_empty() {
            continue;
        }
        let ratios = ratios_for(params, traj)?;
        let len = traj.len() as f64;
        let mut weights = vec![0.0; traj.len()];
        for (t, (&s, &a)) in ratios.iter().zip(adv).enumerate() {
            count.tokens += 1;
            if is_clipped(s, a, clip_eps) {
                count.clipped += 1;
            } else {
                weights[t] = s * a / (len * n);
            }
        }
        params.accumulate_score(traj.prompt_id, &traj.tokens, |t| weights[t], &mut grad)?;
    }
    Ok((grad, count))
}

/// `scale · clamp(raw, lo, hi)`.
pub fn reward_clip_scale(raw: f64, clip_lo: f64, clip_hi: f64, scale: f64) -> Result<f64> {
    if clip_lo > clip_hi {
        return Err(Error::InvalidParameter(format!(
            "reward clip bounds inverted: [{clip_lo}, {clip_hi}]"
        )));
    }
    Ok(scale * raw.clamp(clip_lo, clip_hi))
}

/// Seeded shuffle cut into contiguous chunks of `minibatch_size`.
pub fn minibatch_partition(batch_indices: &[usize], minibatch_size: usize, rng: &mut LabRng) -> Result<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    if minibatch_size == 0 {
        return Err(Error::InvalidParameter("minibatch_size must be >= 1".into()));
    }
    let mut idx = batch_indices.to_vec();
    idx.shuffle(rng);
    Ok(idx.chunks(minibatch_size).map(<[usize]>::to_vec).collect())
}

/// Discounted reward-to-go.
fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Owns the trained policy, the frozen reference, and optional critic.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    prompts: PromptSet,
    policy: PolicyParameters,
    reference: PolicyParameters,
    critic: Option<CriticTable>,
    velocity: Option<GradAccumulator>,
    step: usize,
}

struct Sampled {
    traj: Trajectory,
    raw_reward: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig, prompts: PromptSet, policy: PolicyParameters) -> Result<Self> {
        config.validate()?;
        if policy.shape().prompts < prompts.len() {
            return Err(Error::InvalidDimension(format!(
                "policy covers {} prompts but the prompt set has {}",
                policy.shape().prompts,
                prompts.len()
            )));
        }
        if prompts.split(Split::Train).is_empty() {
            return Err(Error::InvalidParameter("prompt set has no train prompts".into()));
        }
        if let Some(stop) = config.stop_token {
            if stop >= policy.shape().vocab {
                return Err(Error::InvalidToken {
                    token: stop,
                    vocab: policy.shape().vocab,
                });
            }
        }
        let critic = (config.estimator == EstimatorKind::Gae)
            .then(|| CriticTable::new(*policy.shape(), config.critic_lr));
        Ok(Trainer {
            reference: policy.clone(),
            config,
            prompts,
            policy,
            critic,
            velocity: None,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &PolicyParameters {
        &self.policy
    }

    pub fn reference(&self) -> &PolicyParameters {
        &self.reference
    }

    pub fn critic(&self) -> Option<&CriticTable> {
        self.critic.as_ref()
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn eval_split(&self) -> Vec<&Prompt> {
        let held = self.prompts.split(Split::HeldOut);
        if held.is_empty() {
            self.prompts.split(Split::Train)
        } else {
            held
        }
    }

    fn sample_batch(&self, old: &PolicyParameters, layout: &GroupLayout, iter_seed: u64) -> Result<Vec<Sampled>> {
        let cfg = &self.config;
        let reference = &self.reference;
        let prompts = &self.prompts;
        with_threads(cfg.threads, || {
            (0..layout.rows())
                .into_par_iter()
                .map(|row| {
                    let (pid, _) = layout.row(row);
                    let mut rng = rng_for(iter_seed, Stream::Trajectory, row as u64);
                    let mut traj = old.sample_trajectory(pid, &mut rng, cfg.stop_token)?;
                    traj.attach_reference(reference)?;
                    let prompt = prompts.get(pid).expect("layout prompt ids come from the prompt set");
                    let raw_reward = prompt.reward(&traj.tokens, cfg.reward_scheme, &mut rng)?;
                    Ok(Sampled { traj, raw_reward })
                })
                .collect()
        })
    }

    fn spread(&self, advantage: f64, len: usize) -> Vec<f64> {
        match self.config.token_advantage {
            TokenAdvantage::SuffixKl => vec![advantage; len],
            TokenAdvantage::TerminalOnly => broadcast_terminal(advantage, len),
        }
    }

    /// Token-level advantages plus the pre-normalization values used for
    /// `adv_mean` / `adv_std`.
    fn advantages(
        &mut self,
        old: &PolicyParameters,
        layout: &GroupLayout,
        trajs: &[Trajectory],
        rewards: &[f64],
        kls: &[Vec<f64>],
        iter_seed: u64,
    ) -> Result<(AdvantageVector, Vec<f64>)> {
        let cfg = self.config.clone();
        let beta = if cfg.reward_kl_penalty() { cfg.kl_beta } else { 0.0 };
        let penalized: Vec<f64> = rewards
            .iter()
            .zip(kls)
            .map(|(r, kl)| r - beta * kl.iter().sum::<f64>())
            .collect();
        let spread_all = |this: &Self, scalars: &[f64]| -> AdvantageVector {
            AdvantageVector::new(
                scalars
                    .iter()
                    .zip(trajs)
                    .map(|(&a, t)| this.spread(a, t.len()))
                    .collect(),
            )
        };
        Ok(match cfg.estimator {
            EstimatorKind::RPlusPlus => match cfg.token_advantage {
                TokenAdvantage::SuffixKl => {
                    let raw = AdvantageVector::new(
                        rewards
                            .iter()
                            .zip(kls)
                            .map(|(&r, kl)| adv_rpp_token(r, kl, beta))
                            .collect(),
                    );
                    let pre = raw.flatten();
                    (raw.normalized_global(cfg.global_eps, cfg.std_convention)?, pre)
                }
                TokenAdvantage::TerminalOnly => {
                    let norm = normalize_global_with(&penalized, cfg.global_eps, cfg.std_convention)?;
                    (spread_all(self, &norm), penalized)
                }
            },
            EstimatorKind::RPlusPlusBaseline => {
                let pre = group_centered(rewards, layout.group_size());
                let norm = adv_rpp_baseline_with(rewards, layout, cfg.global_eps, cfg.std_convention)?;
                (spread_all(self, &norm), pre)
            }
            EstimatorKind::GrpoLocal => {
                let pre = group_centered(rewards, layout.group_size());
                let adv = adv_grpo_batch(rewards, layout, cfg.local_eps, cfg.std_convention)?;
                (spread_all(self, &adv), pre)
            }
            EstimatorKind::Rloo => {
                let adv = adv_rloo_batch(&penalized, layout)?;
                (spread_all(self, &adv), adv)
            }
            EstimatorKind::ReMax => {
                let k = layout.group_size();
                let mut baselines = Vec::with_capacity(layout.groups());
                for (g, &pid) in layout.group_prompts().iter().enumerate() {
                    let mut greedy = old.greedy_trajectory(pid, cfg.stop_token)?;
                    greedy.attach_reference(&self.reference)?;
                    let mut rng = rng_for(iter_seed, Stream::Greedy, g as u64);
                    let prompt = self.prompts.get(pid).expect("prompt id from layout");
                    let raw = prompt.reward(&greedy.tokens, cfg.reward_scheme, &mut rng)?;
                    let r = reward_clip_scale(raw, cfg.reward_clip_lo, cfg.reward_clip_hi, cfg.reward_scale)?;
                    let kl: f64 = kl_k1(&KLRecord::from_trajectory(&greedy)).iter().sum();
                    baselines.push(r - beta * kl);
                }
                let adv: Vec<f64> = penalized
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| adv_remax(p, baselines[i / k]))
                    .collect();
                (spread_all(self, &adv), adv)
            }
            EstimatorKind::Gae => {
                let critic = self.critic.as_mut().expect("critic exists for the gae estimator");
                let mut rows = Vec::with_capacity(trajs.len());
                let mut targets = Vec::with_capacity(trajs.len());
                for ((traj, &r), kl) in trajs.iter().zip(rewards).zip(kls) {
                    let mut token_rewards: Vec<f64> = kl.iter().map(|k| -beta * k).collect();
                    if let Some(last) = token_rewards.last_mut() {
                        *last += r;
                    }
                    let values = critic.trajectory_values(traj);
                    rows.push(adv_gae(&token_rewards, &values, cfg.gamma, cfg.gae_lambda)?);
                    targets.push(returns(&token_rewards, cfg.gamma));
                }
                critic.train_critic_step(trajs, &targets)?;
                let adv = AdvantageVector::new(rows);
                let pre = adv.flatten();
                (adv, pre)
            }
        })
    }

    /// One outer iteration.
    pub fn run_iteration(&mut self) -> Result<IterationMetrics> {
        let cfg = self.config.clone();
        let step = self.step;
        let iter_seed = derive_seed(cfg.seed, Stream::Iteration, step as u64);
        let old = self.policy.clone();

        let groups = cfg.batch_size / cfg.group_size;
        let train_ids = self.prompts.split_ids(Split::Train);
        let mut prng = rng_for(iter_seed, Stream::Prompts, 0);
        let layout = GroupLayout::new(draw_prompts(&train_ids, groups, &mut prng), cfg.group_size)?;

        let sampled = self.sample_batch(&old, &layout, iter_seed)?;
        let raw_rewards: Vec<f64> = sampled.iter().map(|s| s.raw_reward).collect();
        let trajs: Vec<Trajectory> = sampled.into_iter().map(|s| s.traj).collect();
        let rewards = raw_rewards
            .iter()
            .map(|&r| reward_clip_scale(r, cfg.reward_clip_lo, cfg.reward_clip_hi, cfg.reward_scale))
            .collect::<Result<Vec<_>>>()?;
        let kls: Vec<Vec<f64>> = trajs.iter().map(|t| kl_k1(&KLRecord::from_trajectory(t))).collect();

        let (advantages, pre) = self.advantages(&old, &layout, &trajs, &rewards, &kls, iter_seed)?;
        if !advantages.all_finite() {
            return Err(Error::NonFinite(format!(
                "advantage from estimator {} at step {step}",
                cfg.estimator
            )));
        }
        let adv_rows = advantages.into_rows();

        let mut clip = ClipCount::default();
        let indices: Vec<usize> = (0..trajs.len()).collect();
        for epoch in 0..cfg.inner_epochs {
            let mut mrng = rng_for(iter_seed, Stream::Minibatch, epoch as u64);
            for chunk in minibatch_partition(&indices, cfg.minibatch_size, &mut mrng)? {
                let mb: Vec<Trajectory> = chunk.iter().map(|&i| trajs[i].clone()).collect();
                let mb_adv: Vec<Vec<f64>> = chunk.iter().map(|&i| adv_rows[i].clone()).collect();
                let (mut direction, count) = ppo_surrogate_gradient(&self.policy, &mb, &mb_adv, cfg.clip_eps)?;
                clip.clipped += count.clipped;
                clip.tokens += count.tokens;
                if cfg.kl_loss_active() {
                    let kl_grad = kl_loss_gradient(cfg.kl_estimator, &self.policy, &mb)?;
                    direction.add_scaled(&kl_grad, -cfg.kl_lambda)?;
                }
                if cfg.momentum != 0.0 {
                    let v = self
                        .velocity
                        .get_or_insert_with(|| GradAccumulator::zeros(*self.policy.shape()));
                    v.scale(cfg.momentum);
                    v.add_scaled(&direction, 1.0)?;
                    direction = v.clone();
                }
                self.policy.apply_update_in_place(&direction, cfg.step_size)?;
            }
        }

        let all_kl: Vec<f64> = kls.iter().flatten().copied().collect();
        let (adv_mean, adv_std) = mean_std(&pre, StdConvention::Population);
        let eval_split = self.eval_split();
        let mut erng = rng_for(cfg.seed, Stream::Eval, step as u64);
        let eval_reward = evaluate_mean_reward(
            &self.policy,
            &eval_split,
            cfg.eval_n,
            cfg.reward_scheme,
            &mut erng,
            cfg.stop_token,
        )?;
        let pass_at_n = if eval_split.iter().all(|p| p.task.has_rule()) {
            evaluate_pass_at_n(&self.policy, &eval_split, cfg.eval_n, &mut erng, cfg.stop_token)?
        } else {
            0.0
        };
        let metrics = IterationMetrics {
            step,
            reward_mean: mean(&raw_rewards),
            kl_ref: if all_kl.is_empty() { 0.0 } else { mean(&all_kl) },
            adv_mean,
            adv_std,
            clip_frac: if clip.tokens == 0 {
                0.0
            } else {
                clip.clipped as f64 / clip.tokens as f64
            },
            eval_reward,
            pass_at_n,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs `steps` iterations, handing each metrics row to `sink`.
    pub fn run(
        &mut self,
        steps: usize,
        mut sink: impl FnMut(&IterationMetrics) -> Result<()>,
    ) -> Result<Vec<IterationMetrics>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let m = self.run_iteration()?;
            sink(&m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Samples per prompt for [`final_evaluation`].
pub const FINAL_EVAL_SAMPLES: usize = 64;

/// End-of-run scores of a policy on both splits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalEvaluation {
    pub train_reward: f64,
    /// `NaN` when the prompt set has no held-out split.
    pub heldout_reward: f64,
    /// Unbiased pass@`eval_n` on held-out prompts; `NaN` without a held-out
    /// split or a success rule.
    pub heldout_pass_at_n: f64,
}

/// Mean reward on each split and held-out pass@`eval_n`, from
/// [`FINAL_EVAL_SAMPLES`] draws per prompt on a dedicated stream.
pub fn final_evaluation(policy: &PolicyParameters, prompts: &PromptSet, config: &TrainConfig) -> Result<FinalEvaluation> {
    let mut rng = rng_for(config.seed, Stream::Eval, u64::MAX);
    let samples = FINAL_EVAL_SAMPLES.max(config.eval_n);
    let train = prompts.split(Split::Train);
    let held = prompts.split(Split::HeldOut);
    let train_reward = evaluate_mean_reward(policy, &train, samples, config.reward_scheme, &mut rng, config.stop_token)?;
    if held.is_empty() {
        return Ok(FinalEvaluation {
            train_reward,
            heldout_reward: f64::NAN,
            heldout_pass_at_n: f64::NAN,
        });
    }
    let heldout_reward = evaluate_mean_reward(policy, &held, samples, config.reward_scheme, &mut rng, config.stop_token)?;
    let heldout_pass_at_n = if held.iter().all(|p| p.task.has_rule()) {
        estimate_pass_at_n(policy, &held, config.eval_n, samples, &mut rng, config.stop_token)?
    } else {
        f64::NAN
    };
    Ok(FinalEvaluation {
        train_reward,
        heldout_reward,
        heldout_pass_at_n,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub metrics: Vec<IterationMetrics>,
    pub policy: PolicyParameters,
}

impl ExperimentOutcome {
    pub fn evaluate(&self, prompts: &PromptSet, config: &TrainConfig) -> Result<FinalEvaluation> {
        final_evaluation(&self.policy, prompts, config)
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";

/// Runs `config.steps` iterations. With `out_dir`, streams `metrics.csv`
/// row by row and writes the final `policy.ckpt`.
pub fn run_experiment(
    config: &TrainConfig,
    prompts: &PromptSet,
    initial: &PolicyParameters,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    let mut trainer = Trainer::new(config.clone(), prompts.clone(), initial.clone())?;
    let metrics = match out_dir {
        None => trainer.run(config.steps, |_| Ok(()))?,
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path: PathBuf = dir.join(METRICS_FILE);
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            let metrics = trainer.run(config.steps, |m| {
                writeln!(w, "{}", m.csv_row()).map_err(|e| Error::io(&path, e))?;
                w.flush().map_err(|e| Error::io(&path, e))
            })?;
            trainer.policy().save(dir.join(CHECKPOINT_FILE))?;
            metrics
        }
    };
    Ok(ExperimentOutcome {
        metrics,
        policy: trainer.policy().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Task;
    use crate::policy::init_policy;
    use crate::rng::rng_from_seed;

    #[test]
    fn clip_token_examples() {
        assert!((ppo_clip_token(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((ppo_clip_token(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        let adv = vec![vec![0.3, -1.0], vec![2.0]];
        let ones = vec![vec![1.0, 1.0], vec![1.0]];
        let obj = ppo_clip_objective(&ones, &adv, 0.2).unwrap();
        assert!((obj - ((0.3 - 1.0) / 2.0 + 2.0) / 2.0).abs() < 1e-15);
        assert!(matches!(
            ppo_clip_objective(&[vec![0.0]], &[vec![1.0]], 0.2),
            Err(Error::InvalidRatio(_))
        ));
    }

    #[test]
    fn reward_clip_examples() {
        assert_eq!(reward_clip_scale(3.0, -10.0, 10.0, 1.0).unwrap(), 3.0);
        assert_eq!(reward_clip_scale(5.0, -1.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(reward_clip_scale(-5.0, -1.0, 1.0, 0.5).unwrap(), -0.5);
        assert!(reward_clip_scale(0.0, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn critic_examples() {
        let shape = PolicyShape::new(1, 1, 2);
        let traj = Trajectory {
            prompt_id: 0,
            tokens: vec![1],
            logp_sample: vec![-0.7],
            logp_ref: vec![-0.7],
        };
        let mut c = CriticTable::new(shape, 0.5);
        c.train_critic_step(std::slice::from_ref(&traj), &[vec![0.0]]).unwrap();
        assert_eq!(c.value(0, 0, None), 0.0);
        c.train_critic_step(std::slice::from_ref(&traj), &[vec![1.0]]).unwrap();
        assert_eq!(c.value(0, 0, None), 0.5);
        let mut steps = 1;
        while (c.value(0, 0, None) - 1.0).abs() >= 1e-6 {
            c.train_critic_step(std::slice::from_ref(&traj), &[vec![1.0]]).unwrap();
            steps += 1;
        }
        assert!(steps <= 50, "took {steps} steps");
    }

    #[test]
    fn partition_examples() {
        let idx: Vec<usize> = (0..4).collect();
        let parts = minibatch_partition(&idx, 2, &mut rng_from_seed(1)).unwrap();
        assert_eq!(parts.len(), 2);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, idx);
        let single = minibatch_partition(&idx, 4, &mut rng_from_seed(1)).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single, minibatch_partition(&idx, 4, &mut rng_from_seed(1)).unwrap());
        assert!(minibatch_partition(&idx, 0, &mut rng_from_seed(1)).is_err());
    }

    fn bandit_prompts() -> PromptSet {
        PromptSet::new(vec![
            Prompt {
                id: 0,
                task: Task::ExactMatch { target: vec![1] },
                split: Split::Train,
            },
            Prompt {
                id: 1,
                task: Task::ExactMatch { target: vec![0] },
                split: Split::Train,
            },
        ])
        .unwrap()
    }

    #[test]
    fn zero_step_leaves_policy_unchanged() {
        let policy = init_policy(2, 1, 2, 0.3, 4).unwrap();
        let cfg = TrainConfig {
            step_size: 0.0,
            batch_size: 8,
            minibatch_size: 4,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(cfg, bandit_prompts(), policy.clone()).unwrap();
        let m = tr.run_iteration().unwrap();
        assert_eq!(tr.policy(), &policy);
        assert_eq!(m.step, 0);
        assert_eq!(m.clip_frac, 0.0);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        let bad = TrainConfig {
            batch_size: 10,
            group_size: 4,
            ..ok.clone()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            estimator: EstimatorKind::GrpoLocal,
            group_size: 1,
            ..ok.clone()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidGroup(_))));
        let bad = TrainConfig { clip_eps: 1.0, ..ok.clone() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            minibatch_size: 65,
            ..ok
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn returns_are_reward_to_go() {
        assert_eq!(returns(&[0.0, -0.1, 1.0], 1.0), vec![0.9, 0.9, 1.0]);
    }
}
