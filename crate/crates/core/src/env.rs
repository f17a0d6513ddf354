//! Synthetic prompt sets and terminal reward functions.
//!
//! # Prompt-set file grammar
//!
//! One prompt per line; blank lines and lines starting with `#` are ignored.
//!
//! ```text
//! line    := id "," family "," params "," split
//! id      := decimal integer, equal to the line's position among prompts (0, 1, 2, ...)
//! family  := "exact" | "parity" | "gaussian" | "length"
//! params  := whitespace-separated values (commas are also accepted between values)
//!   exact     target tokens, e.g. "1 2 3"
//!   parity    "even" | "odd"
//!   gaussian  mean sigma
//!   length    base per_token_bonus cap
//! split   := "train" | "heldout"
//! ```
//!
//! Example:
//!
//! ```text
//! 0, exact, 1 2, train
//! 1, parity, even, heldout
//! 2, gaussian, 0.5 1.0, train
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::policy::PolicyParameters;
use crate::rng::{rng_for, LabRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldOut => "heldout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardScheme {
    #[default]
    ZeroOne,
    PlusMinusOne,
    /// Rule tasks give partial credit; unbounded tasks pass their value through.
    Continuous,
}

impl RewardScheme {
    pub fn name(self) -> &'static str {
        match self {
            RewardScheme::ZeroOne => "zero_one",
            RewardScheme::PlusMinusOne => "plus_minus_one",
            RewardScheme::Continuous => "continuous",
        }
    }

    fn map_success(self, success: bool) -> f64 {
        match (self, success) {
            (RewardScheme::PlusMinusOne, false) => -1.0,
            (_, false) => 0.0,
            (_, true) => 1.0,
        }
    }
}

impl std::str::FromStr for RewardScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero_one" => Ok(RewardScheme::ZeroOne),
            "plus_minus_one" => Ok(RewardScheme::PlusMinusOne),
            "continuous" => Ok(RewardScheme::Continuous),
            other => Err(format!("unknown reward scheme `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    /// Success iff the sequence begins with `target`.
    ExactMatch { target: Vec<usize> },
    /// Success iff the token sum has the requested parity.
    Parity { even: bool },
    /// Reward `mean + N(0, sigma²)`, independent of the tokens.
    Gaussian { mean: f64, sigma: f64 },
    LengthBiased { base: f64, bonus: f64, cap: usize },
}

impl Task {
    pub fn family(&self) -> &'static str {
        match self {
            Task::ExactMatch { .. } => "exact",
            Task::Parity { .. } => "parity",
            Task::Gaussian { .. } => "gaussian",
            Task::LengthBiased { .. } => "length",
        }
    }

    /// Whether the task defines success (and so pass@n).
    pub fn has_rule(&self) -> bool {
        matches!(self, Task::ExactMatch { .. } | Task::Parity { .. })
    }

    /// `None` for tasks without a success criterion.
    pub fn success(&self, tokens: &[usize]) -> Option<bool> {
        match self {
            Task::ExactMatch { target } => Some(tokens.len() >= target.len() && tokens[..target.len()] == target[..]),
            Task::Parity { even } => Some((tokens.iter().sum::<usize>() % 2 == 0) == *even),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub id: usize,
    pub task: Task,
    pub split: Split,
}

impl Prompt {
    /// Terminal reward for a sampled sequence. `rng` is only consumed by
    /// the Gaussian family.
    pub fn reward(&self, tokens: &[usize], scheme: RewardScheme, rng: &mut LabRng) -> Result<f64> {
        match &self.task {
            Task::Gaussian { sigma, .. } => gaussian_reward(self, *sigma, rng),
            Task::LengthBiased { base, bonus, cap } => Ok(length_biased_reward(tokens, *base, *bonus, *cap)),
            _ => rule_reward(self, tokens, scheme),
        }
    }
}

/// `θ_true + ε`, `ε ~ N(0, sigma²)`.
pub fn gaussian_reward(prompt: &Prompt, sigma: f64, rng: &mut LabRng) -> Result<f64> {
    let Task::Gaussian { mean, .. } = prompt.task else {
        return Err(Error::InvalidParameter(format!(
            "prompt {} is not a gaussian prompt",
            prompt.id
        )));
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    let normal = Normal::new(mean, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(normal.sample(rng))
}

pub fn rule_reward(prompt: &Prompt, tokens: &[usize], scheme: RewardScheme) -> Result<f64> {
    match (&prompt.task, scheme) {
        (Task::ExactMatch { target }, RewardScheme::Continuous) => {
            let hits = target.iter().zip(tokens).filter(|(a, b)| a == b).count();
            Ok(hits as f64 / target.len().max(1) as f64)
        }
        (task, scheme) => task
            .success(tokens)
            .map(|s| scheme.map_success(s))
            .ok_or_else(|| {
                Error::InvalidParameter(format!("prompt {} has no rule", prompt.id))
            }),
    }
}

/// `base + per_token_bonus · min(len, cap)`.
pub fn length_biased_reward(tokens: &[usize], base: f64, per_token_bonus: f64, cap: usize) -> f64 {
    base + per_token_bonus * tokens.len().min(cap) as f64
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidParameter("prompt set is empty".into()));
        }
        for (i, p) in prompts.iter().enumerate() {
            if p.id != i {
                return Err(Error::InvalidParameter(format!(
                    "prompt ids must be 0..P in order; found {} at position {i}",
                    p.id
                )));
            }
        }
        Ok(PromptSet { prompts })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Prompt> {
        self.prompts.get(id)
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn split(&self, split: Split) -> Vec<&Prompt> {
        self.prompts.iter().filter(|p| p.split == split).collect()
    }

    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        self.split(split).iter().map(|p| p.id).collect()
    }

    /// Exact-match prompts with distinct targets across both splits.
    ///
    /// Targets share structure: each position prefers one token (drawn from
    /// `seed`) and a target uses it with probability `bias`, otherwise a
    /// uniform other token. `bias = 1/vocab` gives unstructured targets.
    pub fn exact_match(
        train: usize,
        heldout: usize,
        vocab: usize,
        target_len: usize,
        bias: f64,
        seed: u64,
    ) -> Result<Self> {
        let total = train + heldout;
        if vocab < 2 || target_len == 0 {
            return Err(Error::InvalidParameter(
                "exact-match prompts need vocab >= 2 and target_len >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&bias) {
            return Err(Error::InvalidParameter(format!("bias must lie in [0, 1], got {bias}")));
        }
        let space = (vocab as f64).powi(target_len as i32);
        if (total as f64) > space {
            return Err(Error::InvalidParameter(format!(
                "cannot draw {total} distinct targets from {space} sequences"
            )));
        }
        let mut rng = rng_for(seed, Stream::Prompts, 0);
        let preferred: Vec<usize> = (0..target_len).map(|_| rng.random_range(0..vocab)).collect();
        let mut seen = HashSet::new();
        let mut targets = Vec::with_capacity(total);
        let mut attempts = 0usize;
        while targets.len() < total {
            attempts += 1;
            let target: Vec<usize> = preferred
                .iter()
                .map(|&pref| {
                    if rng.random::<f64>() < bias {
                        pref
                    } else {
                        let other = rng.random_range(0..vocab - 1);
                        if other >= pref {
                            other + 1
                        } else {
                            other
                        }
                    }
                })
                .collect();
            if seen.insert(target.clone()) {
                targets.push(target);
            } else if attempts > 1_000_000 {
                return Err(Error::InvalidParameter(
                    "could not draw enough distinct targets; lower bias or grow the space".into(),
                ));
            }
        }
        Self::from_tasks(
            targets.into_iter().map(|target| Task::ExactMatch { target }),
            train,
        )
    }

    /// Parity prompts alternating even/odd.
    pub fn parity(train: usize, heldout: usize) -> Result<Self> {
        Self::from_tasks((0..train + heldout).map(|i| Task::Parity { even: i % 2 == 0 }), train)
    }

    /// Gaussian prompts with means drawn from `N(0, 1)`.
    pub fn gaussian(train: usize, heldout: usize, sigma: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, Stream::Prompts, 1);
        let tasks: Vec<_> = (0..train + heldout)
            .map(|_| Task::Gaussian {
                mean: rng.sample(rand_distr::StandardNormal),
                sigma,
            })
            .collect();
        Self::from_tasks(tasks, train)
    }

    pub fn length_biased(train: usize, heldout: usize, base: f64, bonus: f64, cap: usize) -> Result<Self> {
        Self::from_tasks(
            (0..train + heldout).map(|_| Task::LengthBiased { base, bonus, cap }),
            train,
        )
    }

    fn from_tasks(tasks: impl IntoIterator<Item = Task>, train: usize) -> Result<Self> {
        Self::new(
            tasks
                .into_iter()
                .enumerate()
                .map(|(id, task)| Prompt {
                    id,
                    task,
                    split: if id < train { Split::Train } else { Split::HeldOut },
                })
                .collect(),
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.prompts {
            let params = match &p.task {
                Task::ExactMatch { target } => target
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
                Task::Parity { even } => if *even { "even" } else { "odd" }.to_string(),
                Task::Gaussian { mean, sigma } => format!("{mean:?} {sigma:?}"),
                Task::LengthBiased { base, bonus, cap } => format!("{base:?} {bonus:?} {cap}"),
            };
            let _ = writeln!(out, "{}, {}, {}, {}", p.id, p.task.family(), params, p.split.name());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut prompts = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ctx = format!("prompt set line {}", lineno + 1);
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() < 4 {
                return Err(Error::parse(ctx, "expected `id, family, params..., split`"));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(&ctx, format!("bad id `{}`", fields[0])))?;
            let split = match fields[fields.len() - 1] {
                "train" => Split::Train,
                "heldout" => Split::HeldOut,
                other => return Err(Error::parse(&ctx, format!("bad split `{other}`"))),
            };
            let params: Vec<&str> = fields[2..fields.len() - 1]
                .iter()
                .flat_map(|f| f.split_whitespace())
                .collect();
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::parse(&ctx, format!("bad number `{s}`")))
            };
            let task = match (fields[1], params.as_slice()) {
                ("exact", toks) if !toks.is_empty() => Task::ExactMatch {
                    target: toks
                        .iter()
                        .map(|t| t.parse().map_err(|_| Error::parse(&ctx, format!("bad token `{t}`"))))
                        .collect::<Result<_>>()?,
                },
                ("parity", ["even"]) => Task::Parity { even: true },
                ("parity", ["odd"]) => Task::Parity { even: false },
                ("gaussian", [m, s]) => {
                    let sigma = num(s)?;
                    if sigma <= 0.0 {
                        return Err(Error::parse(&ctx, "sigma must be > 0"));
                    }
                    Task::Gaussian { mean: num(m)?, sigma }
                }
                ("length", [b, bonus, cap]) => Task::LengthBiased {
                    base: num(b)?,
                    bonus: num(bonus)?,
                    cap: cap
                        .parse()
                        .map_err(|_| Error::parse(&ctx, format!("bad cap `{cap}`")))?,
                },
                (family, _) => {
                    return Err(Error::parse(&ctx, format!("bad family or parameters for `{family}`")))
                }
            };
            prompts.push(Prompt { id, task, split });
        }
        Self::new(prompts)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Fraction of prompts where at least one of `n` samples succeeds.
///
/// Each prompt draws its samples from its own stream seeded from one draw of
/// `rng`, so for a fixed `rng` state the first `n` samples do not depend on
/// `n` and the result is non-decreasing in `n`.
pub fn evaluate_pass_at_n(
    params: &PolicyParameters,
    prompts: &[&Prompt],
    n: usize,
    rng: &mut LabRng,
    stop_token: Option<usize>,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidParameter("pass@n over an empty split".into()));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("pass@n needs n >= 1".into()));
    }
    let base: u64 = rng.random();
    let mut solved = 0usize;
    for p in prompts {
        let mut prng = rng_for(base, Stream::Eval, p.id as u64);
        for _ in 0..n {
            let traj = params.sample_trajectory(p.id, &mut prng, stop_token)?;
            let ok = p.task.success(&traj.tokens).ok_or_else(|| {
                Error::InvalidParameter(format!("prompt {} has no success rule", p.id))
            })?;
            if ok {
                solved += 1;
                break;
            }
        }
    }
    Ok(solved as f64 / prompts.len() as f64)
}

/// Unbiased pass@n from `c` successes among `m ≥ n` samples:
/// `1 − C(m−c, n) / C(m, n)`.
pub fn pass_at_n_unbiased(m: usize, c: usize, n: usize) -> Result<f64> {
    if n == 0 || n > m || c > m {
        return Err(Error::InvalidParameter(format!(
            "pass@n needs 1 <= n <= m and c <= m (m={m}, c={c}, n={n})"
        )));
    }
    if m - c < n {
        return Ok(1.0);
    }
    let miss: f64 = (0..n).map(|i| (m - c - i) as f64 / (m - i) as f64).product();
    Ok(1.0 - miss)
}

/// Mean over prompts of [`pass_at_n_unbiased`] from `samples` draws each.
pub fn estimate_pass_at_n(
    params: &PolicyParameters,
    prompts: &[&Prompt],
    n: usize,
    samples: usize,
    rng: &mut LabRng,
    stop_token: Option<usize>,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidParameter("pass@n over an empty split".into()));
    }
    let base: u64 = rng.random();
    let mut total = 0.0;
    for p in prompts {
        let mut prng = rng_for(base, Stream::Eval, p.id as u64);
        let mut successes = 0;
        for _ in 0..samples {
            let traj = params.sample_trajectory(p.id, &mut prng, stop_token)?;
            let ok = p.task.success(&traj.tokens).ok_or_else(|| {
                Error::InvalidParameter(format!("prompt {} has no success rule", p.id))
            })?;
            successes += usize::from(ok);
        }
        total += pass_at_n_unbiased(samples, successes, n)?;
    }
    Ok(total / prompts.len() as f64)
}

/// Mean reward over `samples` draws per prompt.
pub fn evaluate_mean_reward(
    params: &PolicyParameters,
    prompts: &[&Prompt],
    samples: usize,
    scheme: RewardScheme,
    rng: &mut LabRng,
    stop_token: Option<usize>,
) -> Result<f64> {
    if prompts.is_empty() || samples == 0 {
        return Err(Error::InvalidParameter("mean reward over an empty split".into()));
    }
    let base: u64 = rng.random();
    let mut total = 0.0;
    for p in prompts {
        let mut prng = rng_for(base, Stream::Eval, p.id as u64);
        for _ in 0..samples {
            let traj = params.sample_trajectory(p.id, &mut prng, stop_token)?;
            total += p.reward(&traj.tokens, scheme, &mut prng)?;
        }
    }
    Ok(total / (prompts.len() * samples) as f64)
}

/// Seeded shuffle of `ids`, cycled until `count` entries are produced.
pub(crate) fn draw_prompts(ids: &[usize], count: usize, rng: &mut LabRng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut pool = ids.to_vec();
    while out.len() < count {
        pool.shuffle(rng);
        out.extend(pool.iter().take(count - out.len()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unbiased_pass_at_n_examples() {
        assert_eq!(pass_at_n_unbiased(4, 0, 4).unwrap(), 0.0);
        assert_eq!(pass_at_n_unbiased(4, 1, 4).unwrap(), 1.0);
        assert!((pass_at_n_unbiased(10, 5, 1).unwrap() - 0.5).abs() < 1e-15);
        // 1 − C(2,2)/C(4,2) = 5/6
        assert!((pass_at_n_unbiased(4, 2, 2).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!(pass_at_n_unbiased(2, 0, 3).is_err());
    }
    use crate::policy::init_policy;
    use crate::rng::rng_from_seed;

    fn exact(target: Vec<usize>) -> Prompt {
        Prompt {
            id: 0,
            task: Task::ExactMatch { target },
            split: Split::Train,
        }
    }

    #[test]
    fn rule_rewards() {
        assert_eq!(rule_reward(&exact(vec![1, 2]), &[1, 2], RewardScheme::ZeroOne).unwrap(), 1.0);
        assert_eq!(rule_reward(&exact(vec![1, 2]), &[2, 1], RewardScheme::PlusMinusOne).unwrap(), -1.0);
        let parity = Prompt {
            id: 0,
            task: Task::Parity { even: true },
            split: Split::Train,
        };
        assert_eq!(rule_reward(&parity, &[1, 3], RewardScheme::ZeroOne).unwrap(), 1.0);
        assert_eq!(rule_reward(&parity, &[1, 2], RewardScheme::ZeroOne).unwrap(), 0.0);
        assert_eq!(rule_reward(&exact(vec![1, 2]), &[1, 0], RewardScheme::Continuous).unwrap(), 0.5);
    }

    #[test]
    fn length_bias() {
        assert_eq!(length_biased_reward(&[0; 7], 0.3, 0.0, 5), 0.3);
        assert!((length_biased_reward(&[0; 8], 0.0, 0.1, 5) - 0.5).abs() < 1e-15);
        assert!((length_biased_reward(&[0; 3], 0.0, 0.1, 5) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn gaussian_reward_limits() {
        let p = Prompt {
            id: 0,
            task: Task::Gaussian { mean: 0.7, sigma: 1.0 },
            split: Split::Train,
        };
        let r = gaussian_reward(&p, 1e-12, &mut rng_from_seed(1)).unwrap();
        assert!((r - 0.7).abs() < 1e-9);
        assert!(gaussian_reward(&p, 0.0, &mut rng_from_seed(1)).is_err());
        assert!(gaussian_reward(&p, -1.0, &mut rng_from_seed(1)).is_err());
        let a = gaussian_reward(&p, 1.0, &mut rng_from_seed(5)).unwrap();
        let b = gaussian_reward(&p, 1.0, &mut rng_from_seed(5)).unwrap();
        assert_eq!(a, b);
        assert!(gaussian_reward(&exact(vec![1]), 1.0, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn pass_at_n_extremes() {
        let mut right = init_policy(1, 2, 3, 0.0, 0).unwrap();
        right.row_mut(0)[1] = 1e6;
        right.row_mut(1)[2] = 1e6;
        let prompt = exact(vec![1, 2]);
        let split = vec![&prompt];
        for n in [1, 3] {
            assert_eq!(evaluate_pass_at_n(&right, &split, n, &mut rng_from_seed(0), None).unwrap(), 1.0);
        }
        let mut wrong = right.clone();
        wrong.row_mut(0)[0] = 2e6;
        for n in [1, 3] {
            assert_eq!(evaluate_pass_at_n(&wrong, &split, n, &mut rng_from_seed(0), None).unwrap(), 0.0);
        }
        assert!(evaluate_pass_at_n(&right, &[], 1, &mut rng_from_seed(0), None).is_err());
    }

    #[test]
    fn generated_targets_are_distinct() {
        let set = PromptSet::exact_match(8, 8, 4, 3, 0.5, 11).unwrap();
        assert_eq!(set.split(Split::Train).len(), 8);
        assert_eq!(set.split(Split::HeldOut).len(), 8);
        let targets: HashSet<_> = set
            .prompts()
            .iter()
            .map(|p| match &p.task {
                Task::ExactMatch { target } => target.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(targets.len(), 16);
        assert!(PromptSet::exact_match(10, 10, 2, 2, 0.5, 0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let text = "# demo\n0, exact, 1 2, train\n1, parity, odd, heldout\n2, gaussian, 0.5 1.0, train\n3, length, 0 0.1 5, heldout\n";
        let set = PromptSet::parse(text).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(PromptSet::parse(&set.to_text()).unwrap(), set);
    }

    #[test]
    fn parse_errors() {
        assert!(PromptSet::parse("").is_err());
        assert!(PromptSet::parse("0, exact, 1 2, test").is_err());
        assert!(PromptSet::parse("1, exact, 1 2, train").is_err());
        assert!(PromptSet::parse("0, parity, maybe, train").is_err());
        assert!(PromptSet::parse("0, gaussian, 0 -1, train").is_err());
    }
}
