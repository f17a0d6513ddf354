//! Experiment configuration.
//!
//! Plain text, one `key = value` per line, grouped under `[section]` headers.
//! `#` at the start of a line or after whitespace begins a comment. Unknown
//! sections and keys are rejected.
//!
//! ```text
//! [run]
//! out = runs
//!
//! [train]
//! estimator = grpo
//! group_size = 4
//!
//! [env]
//! family = exact
//! ```
//!
//! Overrides use `key=value` with either the bare key (when it is unique
//! across sections) or `section.key`. [`ExperimentConfig::to_text`] writes
//! every key, and re-parsing that text yields an identical config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use advlab_core::env::PromptSet;
use advlab_core::{Conditioning, EstimatorKind, PolicyParameters, PolicyShape, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` exists in several sections; write it as section.key")]
    AmbiguousKey(String),
    #[error("invalid value `{value}` for `{key}`: {message}")]
    InvalidValue {
        key: String,
        value: String,
        message: String,
    },
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvFamily {
    Exact,
    Parity,
    Gaussian,
    Length,
    /// Prompts read from `prompts_file`.
    File,
}

impl EnvFamily {
    pub fn name(self) -> &'static str {
        match self {
            EnvFamily::Exact => "exact",
            EnvFamily::Parity => "parity",
            EnvFamily::Gaussian => "gaussian",
            EnvFamily::Length => "length",
            EnvFamily::File => "file",
        }
    }
}

impl std::str::FromStr for EnvFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exact" => Ok(EnvFamily::Exact),
            "parity" => Ok(EnvFamily::Parity),
            "gaussian" => Ok(EnvFamily::Gaussian),
            "length" => Ok(EnvFamily::Length),
            "file" => Ok(EnvFamily::File),
            other => Err(format!("unknown env family `{other}`")),
        }
    }
}

/// Prompt set and policy table layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub family: EnvFamily,
    pub train: usize,
    pub heldout: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Exact-match target length.
    pub target_len: usize,
    /// Exact-match structure strength.
    pub bias: f64,
    /// Gaussian reward noise.
    pub sigma: f64,
    pub base: f64,
    pub bonus: f64,
    pub cap: usize,
    pub prompts_file: Option<PathBuf>,
    /// Seed for generated prompt sets, independent of the training seed.
    pub env_seed: u64,
    pub conditioning: Conditioning,
    pub shared: bool,
    pub init_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            family: EnvFamily::Exact,
            train: 8,
            heldout: 8,
            vocab: 4,
            max_len: 4,
            target_len: 4,
            bias: 0.7,
            sigma: 1.0,
            base: 0.0,
            bonus: 0.25,
            cap: 4,
            prompts_file: None,
            env_seed: 0,
            conditioning: Conditioning::Position,
            shared: true,
            init_scale: 0.0,
        }
    }
}

impl EnvConfig {
    pub fn build_prompts(&self) -> advlab_core::Result<PromptSet> {
        match self.family {
            EnvFamily::Exact => PromptSet::exact_match(
                self.train,
                self.heldout,
                self.vocab,
                self.target_len,
                self.bias,
                self.env_seed,
            ),
            EnvFamily::Parity => PromptSet::parity(self.train, self.heldout),
            EnvFamily::Gaussian => PromptSet::gaussian(self.train, self.heldout, self.sigma, self.env_seed),
            EnvFamily::Length => PromptSet::length_biased(self.train, self.heldout, self.base, self.bonus, self.cap),
            EnvFamily::File => {
                let path = self.prompts_file.as_ref().ok_or_else(|| {
                    advlab_core::Error::InvalidParameter("family = file needs prompts_file".into())
                })?;
                PromptSet::load(path)
            }
        }
    }

    pub fn build_policy(&self, prompts: usize, seed: u64) -> advlab_core::Result<PolicyParameters> {
        let shape = PolicyShape::new(prompts, self.max_len, self.vocab)
            .with_conditioning(self.conditioning)
            .with_shared(self.shared);
        PolicyParameters::init(shape, self.init_scale, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub trials: u64,
    pub instances: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            trials: advlab_core::verify::DEFAULT_TRIALS,
            instances: advlab_core::verify::GRADIENT_INSTANCES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub estimators: Vec<EstimatorKind>,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            estimators: vec![EstimatorKind::GrpoLocal, EstimatorKind::RPlusPlusBaseline],
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub verify: VerifyConfig,
    pub compare: CompareConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out: PathBuf::from("runs"),
            train: TrainConfig::default(),
            env: EnvConfig::default(),
            verify: VerifyConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

/// Every `(section, key)` pair, in snapshot order.
pub const KEYS: &[(&str, &str)] = &[
    ("run", "out"),
    ("train", "estimator"),
    ("train", "group_size"),
    ("train", "batch_size"),
    ("train", "steps"),
    ("train", "inner_epochs"),
    ("train", "minibatch_size"),
    ("train", "step_size"),
    ("train", "momentum"),
    ("train", "clip_eps"),
    ("train", "kl_beta"),
    ("train", "kl_lambda"),
    ("train", "kl_estimator"),
    ("train", "reward_clip_lo"),
    ("train", "reward_clip_hi"),
    ("train", "reward_scale"),
    ("train", "reward_scheme"),
    ("train", "token_advantage"),
    ("train", "local_eps"),
    ("train", "global_eps"),
    ("train", "std_convention"),
    ("train", "gamma"),
    ("train", "gae_lambda"),
    ("train", "critic_lr"),
    ("train", "stop_token"),
    ("train", "eval_n"),
    ("train", "seed"),
    ("train", "threads"),
    ("env", "family"),
    ("env", "train"),
    ("env", "heldout"),
    ("env", "vocab"),
    ("env", "max_len"),
    ("env", "target_len"),
    ("env", "bias"),
    ("env", "sigma"),
    ("env", "base"),
    ("env", "bonus"),
    ("env", "cap"),
    ("env", "prompts_file"),
    ("env", "env_seed"),
    ("env", "conditioning"),
    ("env", "shared"),
    ("env", "init_scale"),
    ("verify", "trials"),
    ("verify", "instances"),
    ("compare", "estimators"),
    ("compare", "seeds"),
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}

fn parse_finite(key: &str, value: &str) -> Result<f64, ConfigError> {
    let x: f64 = parse_value(key, value)?;
    if !x.is_finite() {
        return Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            message: "must be finite".into(),
        });
    }
    Ok(x)
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

/// Drops a `#` comment that starts the line or follows whitespace.
fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    match (0..bytes.len()).find(|&i| bytes[i] == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace())) {
        Some(i) => &line[..i],
        None => line,
    }
}

impl ExperimentConfig {
    /// Resolves a bare or `section.key` name to its canonical pair.
    pub fn resolve_key(name: &str) -> Result<(&'static str, &'static str), ConfigError> {
        if let Some((section, key)) = name.split_once('.') {
            if !KEYS.iter().any(|(s, _)| *s == section) {
                return Err(ConfigError::UnknownSection(section.into()));
            }
            return KEYS
                .iter()
                .find(|(s, k)| *s == section && *k == key)
                .copied()
                .ok_or_else(|| ConfigError::UnknownKey(name.into()));
        }
        let mut hits = KEYS.iter().filter(|(_, k)| *k == name);
        match (hits.next(), hits.next()) {
            (Some(hit), None) => Ok(*hit),
            (Some(_), Some(_)) => Err(ConfigError::AmbiguousKey(name.into())),
            _ => Err(ConfigError::UnknownKey(name.into())),
        }
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let e = &mut self.env;
        let v = value;
        match (section, key) {
            ("run", "out") => self.out = PathBuf::from(v),
            ("train", "estimator") => t.estimator = parse_value(key, v)?,
            ("train", "group_size") => t.group_size = parse_value(key, v)?,
            ("train", "batch_size") => t.batch_size = parse_value(key, v)?,
            ("train", "steps") => t.steps = parse_value(key, v)?,
            ("train", "inner_epochs") => t.inner_epochs = parse_value(key, v)?,
            ("train", "minibatch_size") => t.minibatch_size = parse_value(key, v)?,
            ("train", "step_size") => t.step_size = parse_finite(key, v)?,
            ("train", "momentum") => t.momentum = parse_finite(key, v)?,
            ("train", "clip_eps") => t.clip_eps = parse_finite(key, v)?,
            ("train", "kl_beta") => t.kl_beta = parse_finite(key, v)?,
            ("train", "kl_lambda") => t.kl_lambda = parse_finite(key, v)?,
            ("train", "kl_estimator") => t.kl_estimator = parse_value(key, v)?,
            ("train", "reward_clip_lo") => t.reward_clip_lo = parse_finite(key, v)?,
            ("train", "reward_clip_hi") => t.reward_clip_hi = parse_finite(key, v)?,
            ("train", "reward_scale") => t.reward_scale = parse_finite(key, v)?,
            ("train", "reward_scheme") => t.reward_scheme = parse_value(key, v)?,
            ("train", "token_advantage") => t.token_advantage = parse_value(key, v)?,
            ("train", "local_eps") => t.local_eps = parse_finite(key, v)?,
            ("train", "global_eps") => t.global_eps = parse_finite(key, v)?,
            ("train", "std_convention") => t.std_convention = parse_value(key, v)?,
            ("train", "gamma") => t.gamma = parse_finite(key, v)?,
            ("train", "gae_lambda") => t.gae_lambda = parse_finite(key, v)?,
            ("train", "critic_lr") => t.critic_lr = parse_finite(key, v)?,
            ("train", "stop_token") => {
                t.stop_token = if v == "none" { None } else { Some(parse_value(key, v)?) }
            }
            ("train", "eval_n") => t.eval_n = parse_value(key, v)?,
            ("train", "seed") => t.seed = parse_value(key, v)?,
            ("train", "threads") => t.threads = parse_value(key, v)?,
            ("env", "family") => e.family = parse_value(key, v)?,
            ("env", "train") => e.train = parse_value(key, v)?,
            ("env", "heldout") => e.heldout = parse_value(key, v)?,
            ("env", "vocab") => e.vocab = parse_value(key, v)?,
            ("env", "max_len") => e.max_len = parse_value(key, v)?,
            ("env", "target_len") => e.target_len = parse_value(key, v)?,
            ("env", "bias") => e.bias = parse_finite(key, v)?,
            ("env", "sigma") => e.sigma = parse_finite(key, v)?,
            ("env", "base") => e.base = parse_finite(key, v)?,
            ("env", "bonus") => e.bonus = parse_finite(key, v)?,
            ("env", "cap") => e.cap = parse_value(key, v)?,
            ("env", "prompts_file") => {
                e.prompts_file = if v == "none" { None } else { Some(PathBuf::from(v)) }
            }
            ("env", "env_seed") => e.env_seed = parse_value(key, v)?,
            ("env", "conditioning") => e.conditioning = parse_value(key, v)?,
            ("env", "shared") => e.shared = parse_value(key, v)?,
            ("env", "init_scale") => e.init_scale = parse_finite(key, v)?,
            ("verify", "trials") => self.verify.trials = parse_value(key, v)?,
            ("verify", "instances") => self.verify.instances = parse_value(key, v)?,
            ("compare", "estimators") => self.compare.estimators = parse_list(key, v)?,
            ("compare", "seeds") => self.compare.seeds = parse_list(key, v)?,
            _ => return Err(ConfigError::UnknownKey(format!("{section}.{key}"))),
        }
        Ok(())
    }

    fn get(&self, section: &str, key: &str) -> String {
        let t = &self.train;
        let e = &self.env;
        match (section, key) {
            ("run", "out") => self.out.display().to_string(),
            ("train", "estimator") => t.estimator.key().into(),
            ("train", "group_size") => t.group_size.to_string(),
            ("train", "batch_size") => t.batch_size.to_string(),
            ("train", "steps") => t.steps.to_string(),
            ("train", "inner_epochs") => t.inner_epochs.to_string(),
            ("train", "minibatch_size") => t.minibatch_size.to_string(),
            ("train", "step_size") => t.step_size.to_string(),
            ("train", "momentum") => t.momentum.to_string(),
            ("train", "clip_eps") => t.clip_eps.to_string(),
            ("train", "kl_beta") => t.kl_beta.to_string(),
            ("train", "kl_lambda") => t.kl_lambda.to_string(),
            ("train", "kl_estimator") => t.kl_estimator.key().into(),
            ("train", "reward_clip_lo") => t.reward_clip_lo.to_string(),
            ("train", "reward_clip_hi") => t.reward_clip_hi.to_string(),
            ("train", "reward_scale") => t.reward_scale.to_string(),
            ("train", "reward_scheme") => t.reward_scheme.name().into(),
            ("train", "token_advantage") => t.token_advantage.key().into(),
            ("train", "local_eps") => t.local_eps.to_string(),
            ("train", "global_eps") => t.global_eps.to_string(),
            ("train", "std_convention") => t.std_convention.name().into(),
            ("train", "gamma") => t.gamma.to_string(),
            ("train", "gae_lambda") => t.gae_lambda.to_string(),
            ("train", "critic_lr") => t.critic_lr.to_string(),
            ("train", "stop_token") => t.stop_token.map_or("none".into(), |s| s.to_string()),
            ("train", "eval_n") => t.eval_n.to_string(),
            ("train", "seed") => t.seed.to_string(),
            ("train", "threads") => t.threads.to_string(),
            ("env", "family") => e.family.name().into(),
            ("env", "train") => e.train.to_string(),
            ("env", "heldout") => e.heldout.to_string(),
            ("env", "vocab") => e.vocab.to_string(),
            ("env", "max_len") => e.max_len.to_string(),
            ("env", "target_len") => e.target_len.to_string(),
            ("env", "bias") => e.bias.to_string(),
            ("env", "sigma") => e.sigma.to_string(),
            ("env", "base") => e.base.to_string(),
            ("env", "bonus") => e.bonus.to_string(),
            ("env", "cap") => e.cap.to_string(),
            ("env", "prompts_file") => e
                .prompts_file
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
            ("env", "env_seed") => e.env_seed.to_string(),
            ("env", "conditioning") => e.conditioning.name().into(),
            ("env", "shared") => e.shared.to_string(),
            ("env", "init_scale") => e.init_scale.to_string(),
            ("verify", "trials") => self.verify.trials.to_string(),
            ("verify", "instances") => self.verify.instances.to_string(),
            ("compare", "estimators") => join(&self.compare.estimators, |k| k.key().to_string()),
            ("compare", "seeds") => join(&self.compare.seeds, u64::to_string),
            _ => unreachable!("KEYS lists only handled keys"),
        }
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<(), ConfigError> {
        let (name, value) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(item.into()))?;
        let (section, key) = Self::resolve_key(name.trim())?;
        self.set(section, key, value.trim())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: i + 1,
                    message: format!("unterminated section header `{line}`"),
                })?;
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError::UnknownSection(name.into()));
                }
                section = Some(name.into());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let (s, k) = match &section {
                Some(s) => Self::resolve_key(&format!("{s}.{key}"))?,
                None => Self::resolve_key(key)?,
            };
            cfg.set(s, k, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Every key, grouped by section.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key) in KEYS {
            if *section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{key} = {}", self.get(section, key));
        }
        out
    }

    /// Checks everything that can be checked before computation starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.env.family == EnvFamily::File {
            match &self.env.prompts_file {
                None => return Err(ConfigError::Invalid("family = file needs prompts_file".into())),
                Some(p) if !p.is_file() => {
                    return Err(ConfigError::Invalid(format!("prompts_file {} does not exist", p.display())))
                }
                Some(_) => {}
            }
        }
        if self.verify.trials == 0 || self.verify.instances == 0 {
            return Err(ConfigError::Invalid("verify trials and instances must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inline_comments_are_ignored() {
        let cfg = ExperimentConfig::parse("[train]\nestimator = rloo   # or grpo\n# whole line\nsteps = 7#not a comment\n");
        assert!(cfg.is_err());
        let cfg = ExperimentConfig::parse("[train]\nestimator = rloo   # or grpo\nsteps = 7 # count\n").unwrap();
        assert_eq!(cfg.train.estimator, EstimatorKind::Rloo);
        assert_eq!(cfg.train.steps, 7);
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn edited_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        for item in [
            "estimator=rloo",
            "step_size=0.1",
            "stop_token=3",
            "env.prompts_file=/tmp/p.txt",
            "estimators=gae,remax,rpp",
            "seeds=7,9",
            "kl_lambda=1e-3",
            "init_scale=0.30000000000000004",
        ] {
            cfg.apply_override(item).unwrap();
        }
        let text = cfg.to_text();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        assert!(text.contains("estimators = gae,remax,rpp"));
    }

    #[test]
    fn sections_and_comments() {
        let cfg = ExperimentConfig::parse("# demo\n[train]\nsteps = 5\n\n[env]\nvocab=3\n").unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.env.vocab, 3);
    }

    #[test]
    fn rejects_unknown_and_ambiguous() {
        assert!(matches!(
            ExperimentConfig::parse("[train]\nlearning_rate = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("[model]\n"),
            Err(ConfigError::UnknownSection(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("[train]\nsteps"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(cfg.apply_override("train=3"), Ok(())));
        assert!(matches!(cfg.apply_override("steps"), Err(ConfigError::BadOverride(_))));
        assert!(matches!(
            cfg.apply_override("step_size=nan"),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(
            cfg.apply_override("estimator=sac"),
            Err(ConfigError::InvalidValue { .. })
        ));
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = ExperimentConfig::default();
        for (s, k) in KEYS {
            let mut c = cfg.clone();
            c.set(s, k, &cfg.get(s, k)).unwrap();
            assert_eq!(c, cfg, "{s}.{k}");
        }
    }
}
