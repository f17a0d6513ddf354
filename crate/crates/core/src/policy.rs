//! Tabular softmax sequence policy.
//!
//! A policy is a table of logits indexed by context-state and token. The
//! context-state is `(prompt, position)` by default, or
//! `(prompt, position, previous token)` under [`Conditioning::PrevToken`].
//! An optional shared table, indexed by the same state without the prompt,
//! is added to every prompt's logits so that learning on one prompt can move
//! the policy on prompts it never trained on.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"ADVLABPL"
//! 8       8     u64    prompts P
//! 16      8     u64    max_len T
//! 24      8     u64    vocab V
//! 32      8     u64    flags (bit 0: previous-token conditioning, bit 1: shared table)
//! 40      8*n   f64    logits, row-major [state][token]; per-prompt rows first,
//!                      ordered (prompt, position, bucket), then shared rows
//!                      ordered (position, bucket)
//! ```
//!
//! `bucket` is always 0 for position conditioning. With previous-token
//! conditioning bucket 0 is the start of the sequence and bucket `1 + v` means
//! the previous token was `v`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_for, LabRng, Stream};

const MAGIC: &[u8; 8] = b"ADVLABPL";
const FLAG_PREV_TOKEN: u64 = 1;
const FLAG_SHARED: u64 = 2;

/// What the context-state remembers about the generated prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Conditioning {
    #[default]
    Position,
    PrevToken,
}

impl Conditioning {
    pub fn name(self) -> &'static str {
        match self {
            Conditioning::Position => "position",
            Conditioning::PrevToken => "prev_token",
        }
    }
}

impl std::str::FromStr for Conditioning {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "position" => Ok(Conditioning::Position),
            "prev_token" => Ok(Conditioning::PrevToken),
            other => Err(format!("unknown conditioning `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyShape {
    pub prompts: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub conditioning: Conditioning,
    pub shared: bool,
}

impl PolicyShape {
    pub fn new(prompts: usize, max_len: usize, vocab: usize) -> Self {
        PolicyShape {
            prompts,
            max_len,
            vocab,
            conditioning: Conditioning::Position,
            shared: false,
        }
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning) -> Self {
        self.conditioning = conditioning;
        self
    }

    pub fn with_shared(mut self, shared: bool) -> Self {
        self.shared = shared;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.prompts == 0 || self.max_len == 0 || self.vocab == 0 {
            return Err(Error::InvalidDimension(format!(
                "prompts, max_len and vocab must be >= 1 (got P={}, T={}, V={})",
                self.prompts, self.max_len, self.vocab
            )));
        }
        Ok(())
    }

    pub fn buckets(&self) -> usize {
        match self.conditioning {
            Conditioning::Position => 1,
            Conditioning::PrevToken => self.vocab + 1,
        }
    }

    pub fn states_per_prompt(&self) -> usize {
        self.max_len * self.buckets()
    }

    pub fn local_rows(&self) -> usize {
        self.prompts * self.states_per_prompt()
    }

    pub fn rows(&self) -> usize {
        self.local_rows() + if self.shared { self.states_per_prompt() } else { 0 }
    }

    pub fn param_count(&self) -> usize {
        self.rows() * self.vocab
    }

    /// Index of the state within one prompt's block of rows.
    pub fn prompt_state(&self, position: usize, prev: Option<usize>) -> usize {
        let bucket = match self.conditioning {
            Conditioning::Position => 0,
            Conditioning::PrevToken => prev.map_or(0, |p| p + 1),
        };
        position * self.buckets() + bucket
    }

    /// Row index of a per-prompt state.
    pub fn local_row(&self, prompt: usize, position: usize, prev: Option<usize>) -> usize {
        prompt * self.states_per_prompt() + self.prompt_state(position, prev)
    }

    fn shared_row(&self, position: usize, prev: Option<usize>) -> Option<usize> {
        self.shared
            .then(|| self.local_rows() + self.prompt_state(position, prev))
    }

    fn flags(&self) -> u64 {
        let mut f = 0;
        if self.conditioning == Conditioning::PrevToken {
            f |= FLAG_PREV_TOKEN;
        }
        if self.shared {
            f |= FLAG_SHARED;
        }
        f
    }
}

/// Logit table defining a softmax policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    shape: PolicyShape,
    logits: Vec<f64>,
}

/// A sampled token sequence and its per-token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_id: usize,
    pub tokens: Vec<usize>,
    /// Log-probabilities under the policy that generated the tokens.
    pub logp_sample: Vec<f64>,
    /// Log-probabilities under the reference policy. Equal to `logp_sample`
    /// until [`Trajectory::attach_reference`] is called.
    pub logp_ref: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn attach_reference(&mut self, reference: &PolicyParameters) -> Result<()> {
        self.logp_ref = reference.sequence_log_probs(self)?;
        Ok(())
    }
}

/// Gradient-shaped buffer, laid out exactly like the policy's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    shape: PolicyShape,
    values: Vec<f64>,
}

impl GradAccumulator {
    pub fn zeros(shape: PolicyShape) -> Self {
        GradAccumulator {
            shape,
            values: vec![0.0; shape.param_count()],
        }
    }

    pub fn from_values(shape: PolicyShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.param_count() {
            return Err(Error::InvalidDimension(format!(
                "expected {} gradient entries, got {}",
                shape.param_count(),
                values.len()
            )));
        }
        Ok(GradAccumulator { shape, values })
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let v = self.shape.vocab;
        &self.values[row * v..(row + 1) * v]
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_scaled(&mut self, other: &GradAccumulator, s: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::InvalidDimension(
                "gradient shapes do not match".into(),
            ));
        }
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += s * b);
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&x| x == 0.0)
    }
}

/// In-place log-softmax.
pub(crate) fn log_softmax(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|x| *x -= lse);
}

/// `init_policy` with position conditioning and no shared table.
pub fn init_policy(
    prompts: usize,
    max_len: usize,
    vocab: usize,
    init_scale: f64,
    seed: u64,
) -> Result<PolicyParameters> {
    PolicyParameters::init(PolicyShape::new(prompts, max_len, vocab), init_scale, seed)
}

impl PolicyParameters {
    /// Per-prompt logits are drawn uniformly from `[-init_scale, init_scale]`.
    /// The shared table, when present, starts at zero.
    pub fn init(shape: PolicyShape, init_scale: f64, seed: u64) -> Result<Self> {
        shape.validate()?;
        if !(init_scale >= 0.0 && init_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "init_scale must be finite and >= 0, got {init_scale}"
            )));
        }
        let mut rng = rng_for(seed, Stream::Init, 0);
        let local = shape.local_rows() * shape.vocab;
        let mut logits = vec![0.0; shape.param_count()];
        if init_scale > 0.0 {
            for x in &mut logits[..local] {
                *x = rng.random_range(-init_scale..=init_scale);
            }
        }
        Ok(PolicyParameters { shape, logits })
    }

    pub fn from_logits(shape: PolicyShape, logits: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if logits.len() != shape.param_count() {
            return Err(Error::InvalidDimension(format!(
                "expected {} logits, got {}",
                shape.param_count(),
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("logit {bad}")));
        }
        Ok(PolicyParameters { shape, logits })
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let v = self.shape.vocab;
        &mut self.logits[row * v..(row + 1) * v]
    }

    fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt >= self.shape.prompts {
            return Err(Error::InvalidParameter(format!(
                "prompt id {prompt} out of range (P = {})",
                self.shape.prompts
            )));
        }
        Ok(())
    }

    /// Effective logits at a state (per-prompt row plus shared row).
    pub fn state_logits(&self, prompt: usize, position: usize, prev: Option<usize>, out: &mut [f64]) {
        let v = self.shape.vocab;
        let lr = self.shape.local_row(prompt, position, prev);
        out.copy_from_slice(&self.logits[lr * v..(lr + 1) * v]);
        if let Some(sr) = self.shape.shared_row(position, prev) {
            out.iter_mut()
                .zip(&self.logits[sr * v..(sr + 1) * v])
                .for_each(|(o, s)| *o += s);
        }
    }

    pub fn log_probs_at(&self, prompt: usize, position: usize, prev: Option<usize>) -> Vec<f64> {
        let mut row = vec![0.0; self.shape.vocab];
        self.state_logits(prompt, position, prev, &mut row);
        log_softmax(&mut row);
        row
    }

    pub fn probs_at(&self, prompt: usize, position: usize, prev: Option<usize>) -> Vec<f64> {
        let mut row = self.log_probs_at(prompt, position, prev);
        row.iter_mut().for_each(|x| *x = x.exp());
        row
    }

    /// Autoregressive sampling until `stop_token` (inclusive) or `max_len`.
    pub fn sample_trajectory(
        &self,
        prompt_id: usize,
        rng: &mut LabRng,
        stop_token: Option<usize>,
    ) -> Result<Trajectory> {
        self.check_prompt(prompt_id)?;
        let mut tokens = Vec::with_capacity(self.shape.max_len);
        let mut logp = Vec::with_capacity(self.shape.max_len);
        let mut row = vec![0.0; self.shape.vocab];
        let mut prev = None;
        for t in 0..self.shape.max_len {
            self.state_logits(prompt_id, t, prev, &mut row);
            log_softmax(&mut row);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = self.shape.vocab - 1;
            for (a, lp) in row.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    tok = a;
                    break;
                }
            }
            // Guard against landing on a zero-probability tail token from rounding.
            if row[tok] == f64::NEG_INFINITY {
                tok = argmax(&row);
            }
            tokens.push(tok);
            logp.push(row[tok]);
            prev = Some(tok);
            if stop_token == Some(tok) {
                break;
            }
        }
        Ok(Trajectory {
            prompt_id,
            tokens,
            logp_ref: logp.clone(),
            logp_sample: logp,
        })
    }

    /// Argmax decoding, ties broken toward the lowest token id.
    pub fn greedy_trajectory(&self, prompt_id: usize, stop_token: Option<usize>) -> Result<Trajectory> {
        self.check_prompt(prompt_id)?;
        let mut tokens = Vec::new();
        let mut logp = Vec::new();
        let mut prev = None;
        for t in 0..self.shape.max_len {
            let row = self.log_probs_at(prompt_id, t, prev);
            let tok = argmax(&row);
            tokens.push(tok);
            logp.push(row[tok]);
            prev = Some(tok);
            if stop_token == Some(tok) {
                break;
            }
        }
        Ok(Trajectory {
            prompt_id,
            tokens,
            logp_ref: logp.clone(),
            logp_sample: logp,
        })
    }

    fn check_tokens(&self, prompt: usize, tokens: &[usize]) -> Result<()> {
        self.check_prompt(prompt)?;
        if tokens.len() > self.shape.max_len {
            return Err(Error::InvalidDimension(format!(
                "trajectory length {} exceeds max_len {}",
                tokens.len(),
                self.shape.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.shape.vocab) {
            return Err(Error::InvalidToken {
                token: bad,
                vocab: self.shape.vocab,
            });
        }
        Ok(())
    }

    pub fn sequence_log_probs(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        self.token_log_probs(traj.prompt_id, &traj.tokens)
    }

    pub fn token_log_probs(&self, prompt: usize, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(prompt, tokens)?;
        let mut row = vec![0.0; self.shape.vocab];
        let mut prev = None;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                self.state_logits(prompt, t, prev, &mut row);
                log_softmax(&mut row);
                prev = Some(tok);
                row[tok]
            })
            .collect())
    }

    /// Adds `Σ_t weight(t) · ∇ log π(tokens[t])` into `grad`.
    ///
    /// Each visited row receives `weight · (onehot(token) − softmax(row))`.
    pub fn accumulate_score(
        &self,
        prompt: usize,
        tokens: &[usize],
        mut weight: impl FnMut(usize) -> f64,
        grad: &mut GradAccumulator,
    ) -> Result<()> {
        self.check_tokens(prompt, tokens)?;
        if grad.shape != self.shape {
            return Err(Error::InvalidDimension(
                "gradient buffer does not match policy shape".into(),
            ));
        }
        let v = self.shape.vocab;
        let mut row = vec![0.0; v];
        let mut prev = None;
        for (t, &tok) in tokens.iter().enumerate() {
            let w = weight(t);
            if w != 0.0 {
                self.state_logits(prompt, t, prev, &mut row);
                log_softmax(&mut row);
                let rows = [
                    Some(self.shape.local_row(prompt, t, prev)),
                    self.shape.shared_row(t, prev),
                ];
                for r in rows.into_iter().flatten() {
                    let g = &mut grad.values[r * v..(r + 1) * v];
                    for (a, (gi, lp)) in g.iter_mut().zip(&row).enumerate() {
                        let onehot = if a == tok { 1.0 } else { 0.0 };
                        *gi += w * (onehot - lp.exp());
                    }
                }
            }
            prev = Some(tok);
        }
        Ok(())
    }

    /// `∇_θ Σ_t log π_θ(o_t | state_t)` for one trajectory.
    pub fn log_prob_gradient(&self, traj: &Trajectory) -> Result<GradAccumulator> {
        let mut grad = GradAccumulator::zeros(self.shape);
        self.accumulate_score(traj.prompt_id, &traj.tokens, |_| 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Ascent step: `logits + step_size · direction`.
    pub fn apply_update(&self, direction: &GradAccumulator, step_size: f64) -> Result<PolicyParameters> {
        let mut next = self.clone();
        next.apply_update_in_place(direction, step_size)?;
        Ok(next)
    }

    pub fn apply_update_in_place(&mut self, direction: &GradAccumulator, step_size: f64) -> Result<()> {
        if direction.shape != self.shape {
            return Err(Error::InvalidDimension(
                "update direction does not match policy shape".into(),
            ));
        }
        if !step_size.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "step size must be finite, got {step_size}"
            )));
        }
        self.logits
            .iter_mut()
            .zip(&direction.values)
            .for_each(|(x, d)| *x += step_size * d);
        if self.logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logit after update".into()));
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for field in [
            self.shape.prompts as u64,
            self.shape.max_len as u64,
            self.shape.vocab as u64,
            self.shape.flags(),
        ] {
            w.write_all(&field.to_le_bytes())?;
        }
        for x in &self.logits {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(40 + 8 * self.logits.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::parse("policy checkpoint", m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut header = [0u64; 4];
        for h in &mut header {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            *h = u64::from_le_bytes(b);
        }
        let [p, t, v, flags] = header;
        if flags & !(FLAG_PREV_TOKEN | FLAG_SHARED) != 0 {
            return Err(bad("unknown flag bits"));
        }
        let shape = PolicyShape {
            prompts: p as usize,
            max_len: t as usize,
            vocab: v as usize,
            conditioning: if flags & FLAG_PREV_TOKEN != 0 {
                Conditioning::PrevToken
            } else {
                Conditioning::Position
            },
            shared: flags & FLAG_SHARED != 0,
        };
        shape.validate()?;
        let n = shape.param_count();
        let mut bytes = Vec::with_capacity(n * 8);
        r.read_to_end(&mut bytes).map_err(|_| bad("unreadable body"))?;
        if bytes.len() != n * 8 {
            return Err(bad(&format!(
                "expected {} logit bytes, found {}",
                n * 8,
                bytes.len()
            )));
        }
        let logits = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_logits(shape, logits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Every sequence of exactly `max_len` tokens for one prompt, with its
/// probability. No stop token. Intended for tiny `V^T`.
pub fn enumerate_sequences(params: &PolicyParameters, prompt: usize) -> Result<Vec<(Vec<usize>, f64)>> {
    let s = params.shape();
    let total = s.vocab.checked_pow(s.max_len as u32).filter(|&n| n <= 1 << 20).ok_or_else(|| {
        Error::InvalidDimension(format!("V^T too large to enumerate (V={}, T={})", s.vocab, s.max_len))
    })?;
    (0..total)
        .map(|mut code| {
            let mut tokens = vec![0; s.max_len];
            for slot in tokens.iter_mut().rev() {
                *slot = code % s.vocab;
                code /= s.vocab;
            }
            let lp: f64 = params.token_log_probs(prompt, &tokens)?.iter().sum();
            Ok((tokens, lp.exp()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn zero_logits_are_uniform() {
        let p = init_policy(1, 1, 2, 0.0, 0).unwrap();
        assert_eq!(p.probs_at(0, 0, None), vec![0.5, 0.5]);
        let p = init_policy(1, 1, 3, 0.0, 0).unwrap();
        for lp in p.log_probs_at(0, 0, None) {
            assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-15);
            assert!((lp + 1.0986).abs() < 1e-4);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_policy(2, 3, 4, 0.1, 7).unwrap();
        let b = init_policy(2, 3, 4, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.logits().iter().all(|x| x.abs() <= 0.1));
        assert_ne!(a, init_policy(2, 3, 4, 0.1, 8).unwrap());
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(matches!(init_policy(1, 1, 0, 0.0, 0), Err(Error::InvalidDimension(_))));
        assert!(matches!(init_policy(1, 0, 2, 0.0, 0), Err(Error::InvalidDimension(_))));
        assert!(matches!(init_policy(0, 1, 2, 0.0, 0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn sampling_without_stop_fills_max_len() {
        let p = init_policy(1, 4, 2, 0.0, 0).unwrap();
        let mut rng = rng_from_seed(1);
        let traj = p.sample_trajectory(0, &mut rng, None).unwrap();
        assert_eq!(traj.len(), 4);
        assert_eq!(traj.logp_sample, vec![0.5f64.ln(); 4]);
    }

    #[test]
    fn stop_token_ends_generation() {
        let mut p = init_policy(1, 6, 3, 0.0, 0).unwrap();
        p.row_mut(0).copy_from_slice(&[0.0, 0.0, -1e6]);
        p.row_mut(1).copy_from_slice(&[0.0, 0.0, -1e6]);
        p.row_mut(2).copy_from_slice(&[0.0, 0.0, 1e6]);
        let traj = p
            .sample_trajectory(0, &mut rng_from_seed(4), Some(2))
            .unwrap();
        assert_eq!(traj.len(), 3);
        assert_eq!(*traj.tokens.last().unwrap(), 2);
    }

    #[test]
    fn saturated_policy_picks_argmax() {
        let mut p = init_policy(1, 3, 3, 0.0, 0).unwrap();
        for (t, best) in [2usize, 0, 1].into_iter().enumerate() {
            p.row_mut(t)[best] = 1e6;
        }
        let traj = p.sample_trajectory(0, &mut rng_from_seed(9), None).unwrap();
        assert_eq!(traj.tokens, vec![2, 0, 1]);
        assert_eq!(p.greedy_trajectory(0, None).unwrap().tokens, vec![2, 0, 1]);
    }

    #[test]
    fn two_class_log_prob() {
        let mut p = init_policy(1, 1, 2, 0.0, 0).unwrap();
        p.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        let lp = p.token_log_probs(0, &[0]).unwrap()[0];
        let e = std::f64::consts::E;
        assert!((lp - (e / (e + 1.0)).ln()).abs() < 1e-15);
        assert!((lp + 0.3133).abs() < 1e-4);
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let p = init_policy(1, 3, 4, 0.0, 0).unwrap();
        assert!(matches!(
            p.token_log_probs(0, &[0, 4]),
            Err(Error::InvalidToken { token: 4, vocab: 4 })
        ));
    }

    #[test]
    fn score_on_uniform_two_class() {
        let p = init_policy(1, 2, 2, 0.0, 0).unwrap();
        let traj = Trajectory {
            prompt_id: 0,
            tokens: vec![0],
            logp_sample: vec![0.5f64.ln()],
            logp_ref: vec![0.5f64.ln()],
        };
        let g = p.log_prob_gradient(&traj).unwrap();
        assert_eq!(g.row(0), &[0.5, -0.5]);
        assert_eq!(g.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn update_arithmetic() {
        let p = init_policy(1, 1, 2, 0.0, 0).unwrap();
        let dir = GradAccumulator::from_values(*p.shape(), vec![0.5, -0.5]).unwrap();
        let q = p.apply_update(&dir, 0.1).unwrap();
        assert!((q.logits()[0] - 0.05).abs() < 1e-15);
        assert!((q.logits()[1] + 0.05).abs() < 1e-15);
        assert_eq!(p.apply_update(&dir, 0.0).unwrap(), p);
        let zero = GradAccumulator::zeros(*p.shape());
        assert_eq!(p.apply_update(&zero, 3.0).unwrap(), p);
        let other = GradAccumulator::zeros(PolicyShape::new(2, 1, 2));
        assert!(matches!(p.apply_update(&other, 1.0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn shared_table_moves_every_prompt() {
        let shape = PolicyShape::new(3, 2, 2).with_shared(true);
        let p = PolicyParameters::init(shape, 0.0, 0).unwrap();
        let traj = Trajectory {
            prompt_id: 0,
            tokens: vec![0, 0],
            logp_sample: vec![0.5f64.ln(); 2],
            logp_ref: vec![0.5f64.ln(); 2],
        };
        let g = p.log_prob_gradient(&traj).unwrap();
        let q = p.apply_update(&g, 1.0).unwrap();
        assert!(q.probs_at(2, 0, None)[0] > 0.5);
    }

    #[test]
    fn prev_token_states_are_distinct() {
        let shape = PolicyShape::new(1, 3, 2).with_conditioning(Conditioning::PrevToken);
        assert_eq!(shape.buckets(), 3);
        assert_ne!(shape.local_row(0, 1, Some(0)), shape.local_row(0, 1, Some(1)));
        assert_eq!(shape.param_count(), 3 * 3 * 2);
    }

    #[test]
    fn enumeration_sums_to_one() {
        let shape = PolicyShape::new(1, 3, 2).with_conditioning(Conditioning::PrevToken);
        let p = PolicyParameters::init(shape, 1.0, 3).unwrap();
        let seqs = enumerate_sequences(&p, 0).unwrap();
        assert_eq!(seqs.len(), 8);
        let total: f64 = seqs.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(PolicyParameters::from_bytes(b"nope").is_err());
        let mut bytes = init_policy(1, 1, 2, 0.3, 1).unwrap().to_bytes();
        bytes.pop();
        assert!(PolicyParameters::from_bytes(&bytes).is_err());
    }
}
