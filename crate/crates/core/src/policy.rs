//! Desk-scale autoregressive token policy.
//!
//! The policy is a linear softmax over sparse context features: one-hot
//! encodings of the last `m` tokens (a reserved BOS slot fills positions
//! before the start of the context) and a one-hot position bucket. Because
//! the model is linear in its weights, log-probabilities and their gradients
//! are exact and cheap, which keeps every objective and gradient in the
//! optimizers directly checkable against finite differences.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::reward::RewardBreakdown;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("incompatible checkpoint version {found}; this build reads version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch (file corrupted)")]
    ChecksumMismatch,
    #[error("checkpoint shape inconsistent: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
    Newline,
    End,
    Value(u16),
}

const N_SPECIAL: usize = 6;

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::ThinkOpen => f.write_str("<think>"),
            Token::ThinkClose => f.write_str("</think>"),
            Token::AnswerOpen => f.write_str("<answer>"),
            Token::AnswerClose => f.write_str("</answer>"),
            Token::Newline => f.write_str("\\n"),
            Token::End => f.write_str("<end>"),
            Token::Value(b) => write!(f, "v{b}"),
        }
    }
}

/// Token inventory: six structural tokens followed by `n_bins` value bins.
/// Bin edges are expressed on the unit interval; a task-specific scale maps
/// them onto data units.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    n_bins: usize,
    bin_edges: Vec<f64>,
}

impl Vocab {
    /// Evenly spaced bins over `[0, 1]`.
    pub fn uniform(n_bins: usize) -> Self {
        assert!(n_bins >= 1, "need at least one bin");
        let bin_edges = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
        Self { n_bins, bin_edges }
    }

    pub fn with_edges(bin_edges: Vec<f64>) -> Result<Self, String> {
        if bin_edges.len() < 2 {
            return Err("need at least two bin edges".into());
        }
        if bin_edges.windows(2).any(|w| !(w[0] < w[1])) || bin_edges.iter().any(|e| !e.is_finite()) {
            return Err("bin edges must be finite and strictly increasing".into());
        }
        Ok(Self {
            n_bins: bin_edges.len() - 1,
            bin_edges,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn len(&self) -> usize {
        self.n_bins + N_SPECIAL
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, token: Token) -> usize {
        match token {
            Token::ThinkOpen => 0,
            Token::ThinkClose => 1,
            Token::AnswerOpen => 2,
            Token::AnswerClose => 3,
            Token::Newline => 4,
            Token::End => 5,
            Token::Value(b) => {
                debug_assert!((b as usize) < self.n_bins);
                N_SPECIAL + b as usize
            }
        }
    }

    pub fn token(&self, index: usize) -> Token {
        match index {
            0 => Token::ThinkOpen,
            1 => Token::ThinkClose,
            2 => Token::AnswerOpen,
            3 => Token::AnswerClose,
            4 => Token::Newline,
            5 => Token::End,
            i => {
                assert!(i < self.len(), "token index {i} out of range");
                Token::Value((i - N_SPECIAL) as u16)
            }
        }
    }

    /// Bin containing the unit-interval coordinate `u` (clamped to the ends).
    pub fn bin_of_unit(&self, u: f64) -> u16 {
        let e = &self.bin_edges;
        if !(u > e[0]) {
            return 0;
        }
        if u >= e[self.n_bins] {
            return (self.n_bins - 1) as u16;
        }
        // first edge strictly greater than u, minus one
        let upper = e.partition_point(|&x| x <= u);
        (upper - 1).min(self.n_bins - 1) as u16
    }

    /// Unit-interval midpoint of a bin.
    pub fn unit_center(&self, bin: u16) -> f64 {
        let b = bin as usize;
        0.5 * (self.bin_edges[b] + self.bin_edges[b + 1])
    }
}

/// Architecture of the policy: vocabulary, context order, position buckets
/// and optional seasonal lags.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyShape {
    pub vocab: Vocab,
    pub context_order: usize,
    pub position_buckets: usize,
    /// Lags into the value stream (history tokens followed by the answer
    /// emitted so far). Lag `P` lets a value token see the observation one
    /// period earlier.
    pub value_lags: Vec<usize>,
}

impl PolicyShape {
    pub fn new(vocab: Vocab, context_order: usize, position_buckets: usize) -> Self {
        assert!(position_buckets >= 1, "need at least one position bucket");
        Self {
            vocab,
            context_order,
            position_buckets,
            value_lags: Vec::new(),
        }
    }

    pub fn with_value_lags(mut self, lags: Vec<usize>) -> Self {
        assert!(lags.iter().all(|&l| l >= 1), "lags start at 1");
        self.value_lags = lags;
        self
    }

    fn slot_width(&self) -> usize {
        self.vocab.len() + 1
    }

    fn bos(&self) -> usize {
        self.vocab.len()
    }

    pub fn feature_dim(&self) -> usize {
        (self.context_order + self.value_lags.len()) * self.slot_width() + self.position_buckets
    }

    pub fn position_bucket(&self, position: usize) -> usize {
        position.min(self.position_buckets - 1)
    }

    /// Active feature indices for predicting completion token `position`,
    /// given the prompt and the completion tokens emitted so far. Slot 0
    /// holds the most recent token.
    pub fn features(&self, prompt: &[Token], emitted: &[Token], position: usize) -> Features {
        let mut active = Vec::with_capacity(self.context_order + 1 + self.value_lags.len());
        let emitted = &emitted[..position.min(emitted.len())];
        for slot in 0..self.context_order {
            let tok = if slot < emitted.len() {
                Some(emitted[emitted.len() - 1 - slot])
            } else {
                let back = slot - emitted.len();
                (back < prompt.len()).then(|| prompt[prompt.len() - 1 - back])
            };
            let idx = tok.map_or(self.bos(), |t| self.vocab.index(t));
            active.push(slot * self.slot_width() + idx);
        }
        let pos_base = self.context_order * self.slot_width();
        active.push(pos_base + self.position_bucket(position));
        if !self.value_lags.is_empty() {
            let answer: &[Token] = match emitted.iter().rposition(|t| *t == Token::AnswerOpen) {
                Some(i) => &emitted[i + 1..],
                None => &[],
            };
            let lag_base = pos_base + self.position_buckets;
            for (j, &lag) in self.value_lags.iter().enumerate() {
                let tok = if lag <= answer.len() {
                    Some(answer[answer.len() - lag])
                } else {
                    let back = lag - answer.len();
                    (back <= prompt.len()).then(|| prompt[prompt.len() - back])
                };
                let idx = tok.map_or(self.bos(), |t| self.vocab.index(t));
                active.push(lag_base + j * self.slot_width() + idx);
            }
        }
        Features(active)
    }
}

/// Sparse binary feature vector, stored as the indices of its ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Features(pub Vec<usize>);

impl Features {
    pub fn dense(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        for &j in &self.0 {
            v[j] += 1.0;
        }
        v
    }
}

/// Row-major `rows × cols` matrix of weights or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Live policy parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub shape: PolicyShape,
    pub weights: Matrix,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_at(z: &[f64], idx: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    z[idx] - lse
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        let weights = Matrix::zeros(shape.vocab.len(), shape.feature_dim());
        Self { shape, weights }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.shape.vocab
    }

    /// An untrained-but-instructed starting point: position-bucket biases that
    /// favour the structural layout `<think> v^think_len </think> <answer>
    /// v^horizon </answer> <end>` while leaving value choice uniform. Mirrors a
    /// base model that already follows formatting instructions but cannot
    /// forecast.
    pub fn format_prior(shape: PolicyShape, think_len: usize, horizon: usize, strength: f64) -> Self {
        let mut p = Self::zeros(shape);
        let layout = completion_layout(think_len, horizon);
        let vocab = p.shape.vocab.clone();
        let pos_base = p.shape.context_order * p.shape.slot_width();
        for (pos, slot) in layout.iter().enumerate() {
            if pos >= p.shape.position_buckets {
                break;
            }
            let col = pos_base + p.shape.position_bucket(pos);
            match slot {
                LayoutSlot::Structural(tok) => {
                    *p.weights.get_mut(vocab.index(*tok), col) += strength;
                }
                LayoutSlot::Value => {
                    for b in 0..vocab.n_bins() {
                        *p.weights.get_mut(vocab.index(Token::Value(b as u16)), col) += strength / 3.0;
                    }
                }
            }
        }
        p
    }

    pub fn logits(&self, features: &Features) -> Vec<f64> {
        let w = &self.weights;
        (0..w.rows())
            .map(|v| features.0.iter().map(|&j| w.get(v, j)).sum())
            .collect()
    }

    /// `softmax(W·x / temperature)`.
    pub fn token_distribution(&self, features: &Features, temperature: f64) -> Result<Vec<f64>, PolicyError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(PolicyError::InvalidTemperature(temperature));
        }
        let mut z = self.logits(features);
        z.iter_mut().for_each(|v| *v /= temperature);
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Zero-temperature limit: one-hot on the argmax (lowest index on ties).
    pub fn greedy_distribution(&self, features: &Features) -> Vec<f64> {
        let z = self.logits(features);
        let mut out = vec![0.0; z.len()];
        out[argmax(&z)] = 1.0;
        out
    }

    /// Per-token `log π(tokens[t] | prompt ⊕ tokens[..t])`.
    pub fn logprob_sequence(
        &self,
        prompt: &[Token],
        tokens: &[Token],
        temperature: f64,
    ) -> Result<Vec<f64>, PolicyError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(PolicyError::InvalidTemperature(temperature));
        }
        Ok((0..tokens.len())
            .map(|t| {
                let f = self.shape.features(prompt, tokens, t);
                let mut z = self.logits(&f);
                z.iter_mut().for_each(|v| *v /= temperature);
                log_softmax_at(&z, self.vocab().index(tokens[t]))
            })
            .collect())
    }

    /// Temperature-1 log-probabilities, the quantity every objective uses.
    pub fn logprobs(&self, prompt: &[Token], tokens: &[Token]) -> Vec<f64> {
        self.logprob_sequence(prompt, tokens, 1.0).expect("unit temperature")
    }

    /// `out += Σ_t coeffs[t] · ∇_W log π(tokens[t] | context_t)` at temperature 1.
    pub fn accumulate_logprob_grad(&self, prompt: &[Token], tokens: &[Token], coeffs: &[f64], out: &mut Matrix) {
        assert_eq!(coeffs.len(), tokens.len());
        for (t, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let f = self.shape.features(prompt, tokens, t);
            let mut p = self.logits(&f);
            softmax_in_place(&mut p);
            let chosen = self.vocab().index(tokens[t]);
            for (v, pv) in p.iter().enumerate() {
                let g = c * (if v == chosen { 1.0 } else { 0.0 } - pv);
                if g != 0.0 {
                    for &j in &f.0 {
                        *out.get_mut(v, j) += g;
                    }
                }
            }
        }
    }

    /// `∇_W Σ_t log π(tokens[t] | context_t)`.
    pub fn grad_logprob_sequence(&self, prompt: &[Token], tokens: &[Token]) -> Matrix {
        let mut g = Matrix::zeros(self.weights.rows(), self.weights.cols());
        self.accumulate_logprob_grad(prompt, tokens, &vec![1.0; tokens.len()], &mut g);
        g
    }

    /// Samples until `End` or `max_len` tokens. Returns the tokens and their
    /// log-probabilities under the sampling distribution.
    pub fn sample_completion(
        &self,
        prompt: &[Token],
        temperature: f64,
        max_len: usize,
        seed: u64,
    ) -> Result<(Vec<Token>, Vec<f64>), PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = Vec::with_capacity(max_len);
        let mut logps = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let f = self.shape.features(prompt, &tokens, tokens.len());
            let mut z = self.logits(&f);
            z.iter_mut().for_each(|v| *v /= temperature);
            let p = self.token_distribution(&f, temperature)?;
            let idx = sample_index(&p, rng.random::<f64>());
            let tok = self.vocab().token(idx);
            tokens.push(tok);
            // same arithmetic as logprob_sequence, so recorded values match bit for bit
            logps.push(log_softmax_at(&z, idx));
            if tok == Token::End {
                break;
            }
        }
        Ok((tokens, logps))
    }

    /// Greedy decoding (zero-temperature limit).
    pub fn greedy_completion(&self, prompt: &[Token], max_len: usize) -> Vec<Token> {
        let mut tokens = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let f = self.shape.features(prompt, &tokens, tokens.len());
            let tok = self.vocab().token(argmax(&self.logits(&f)));
            tokens.push(tok);
            if tok == Token::End {
                break;
            }
        }
        tokens
    }

    pub fn snapshot(&self) -> FrozenPolicy {
        FrozenPolicy(Arc::new(self.clone()))
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
fn sample_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left acc slightly below 1: fall back to the last nonzero entry
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Immutable copy of the parameters, used for π_old and π_ref.
#[derive(Debug, Clone)]
pub struct FrozenPolicy(Arc<PolicyParams>);

impl FrozenPolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.0
    }

    pub fn snapshot(&self) -> FrozenPolicy {
        self.clone()
    }

    pub fn logprobs(&self, prompt: &[Token], tokens: &[Token]) -> Vec<f64> {
        self.0.logprobs(prompt, tokens)
    }

    pub fn to_params(&self) -> PolicyParams {
        (*self.0).clone()
    }
}

impl PartialEq for FrozenPolicy {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

/// One sampled completion with the per-token log-probabilities recorded at
/// rollout time and its scored reward.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub prompt_id: String,
    pub prompt: Arc<[Token]>,
    pub tokens: Vec<Token>,
    pub logp_current: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub reward: f64,
    pub breakdown: RewardBreakdown,
}

impl TrajectoryRecord {
    /// Scores log-probabilities under `old` and `reference`; the current
    /// policy is `old` at rollout time.
    pub fn new(
        prompt_id: impl Into<String>,
        prompt: Arc<[Token]>,
        tokens: Vec<Token>,
        old: &PolicyParams,
        reference: &PolicyParams,
        breakdown: RewardBreakdown,
    ) -> Self {
        let logp_old = old.logprobs(&prompt, &tokens);
        let logp_ref = reference.logprobs(&prompt, &tokens);
        Self {
            prompt_id: prompt_id.into(),
            prompt,
            tokens,
            logp_current: logp_old.clone(),
            logp_old,
            logp_ref,
            reward: breakdown.total,
            breakdown,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutSlot {
    Structural(Token),
    Value,
}

/// Token layout of a well-formed compact completion.
pub fn completion_layout(think_len: usize, horizon: usize) -> Vec<LayoutSlot> {
    let mut l = vec![LayoutSlot::Structural(Token::ThinkOpen)];
    l.extend(std::iter::repeat_n(LayoutSlot::Value, think_len));
    l.push(LayoutSlot::Structural(Token::ThinkClose));
    l.push(LayoutSlot::Structural(Token::AnswerOpen));
    l.extend(std::iter::repeat_n(LayoutSlot::Value, horizon));
    l.push(LayoutSlot::Structural(Token::AnswerClose));
    l.push(LayoutSlot::Structural(Token::End));
    l
}

// ---------------------------------------------------------------------------
// Checkpoint format (all integers and floats little-endian):
//
//   magic            8 bytes   b"RFTCKPT\0"
//   format_version   u32       CHECKPOINT_VERSION
//   n_bins           u32
//   bin_edges        f64 × (n_bins + 1)
//   context_order    u32
//   position_buckets u32
//   n_lags           u32
//   value_lags       u32 × n_lags
//   rows             u32       = n_bins + 6
//   cols             u32       = (context_order + n_lags)·(rows + 1) + position_buckets
//   weights          f64 × rows·cols, row-major
//   rng_seed         u64
//   checksum         u64       FNV-1a over every preceding byte
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RFTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 2;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(p.vocab().n_bins() as u32).to_le_bytes());
        for e in p.vocab().bin_edges() {
            b.extend_from_slice(&e.to_le_bytes());
        }
        b.extend_from_slice(&(p.shape.context_order as u32).to_le_bytes());
        b.extend_from_slice(&(p.shape.position_buckets as u32).to_le_bytes());
        b.extend_from_slice(&(p.shape.value_lags.len() as u32).to_le_bytes());
        for &l in &p.shape.value_lags {
            b.extend_from_slice(&(l as u32).to_le_bytes());
        }
        b.extend_from_slice(&(p.weights.rows() as u32).to_le_bytes());
        b.extend_from_slice(&(p.weights.cols() as u32).to_le_bytes());
        for w in p.weights.as_slice() {
            b.extend_from_slice(&w.to_le_bytes());
        }
        b.extend_from_slice(&self.rng_seed.to_le_bytes());
        let sum = fnv1a(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(PolicyError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(PolicyError::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 8 {
            return Err(PolicyError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(PolicyError::ChecksumMismatch);
        }
        let n_bins = r.u32()? as usize;
        if n_bins == 0 || n_bins > 1 << 16 {
            return Err(PolicyError::Shape(format!("n_bins {n_bins}")));
        }
        let edges = (0..=n_bins).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let vocab = Vocab::with_edges(edges).map_err(PolicyError::Shape)?;
        let context_order = r.u32()? as usize;
        let position_buckets = r.u32()? as usize;
        let n_lags = r.u32()? as usize;
        if n_lags > 1 << 10 {
            return Err(PolicyError::Shape(format!("{n_lags} lags")));
        }
        let value_lags = (0..n_lags)
            .map(|_| r.u32().map(|l| l as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if value_lags.contains(&0) {
            return Err(PolicyError::Shape("lag 0".into()));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if position_buckets == 0 {
            return Err(PolicyError::Shape("zero position buckets".into()));
        }
        let shape = PolicyShape::new(vocab, context_order, position_buckets).with_value_lags(value_lags);
        if rows != shape.vocab.len() || cols != shape.feature_dim() {
            return Err(PolicyError::Shape(format!(
                "weights {rows}x{cols} do not match vocab {} / feature dim {}",
                shape.vocab.len(),
                shape.feature_dim()
            )));
        }
        let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let rng_seed = r.u64()?;
        if r.pos != body.len() {
            return Err(PolicyError::Shape("trailing bytes".into()));
        }
        Ok(Self {
            params: PolicyParams {
                shape,
                weights: Matrix::from_vec(rows, cols, data),
            },
            rng_seed,
        })
    }

    pub fn save(&self, mut w: impl Write) -> Result<(), PolicyError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(mut r: impl Read) -> Result<Self, PolicyError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        let end = self.pos.checked_add(n).ok_or(PolicyError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(PolicyError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PolicyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, PolicyError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
