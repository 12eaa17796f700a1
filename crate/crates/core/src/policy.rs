//! Per-position softmax sequence policy.
//!
//! Each of the `L` output positions has its own linear map from question
//! features to `V` vocabulary logits. Positions are emitted independently, so
//! sequence log-probabilities, their gradients and the KL divergence between
//! two parameter settings all have closed forms.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Question, NUM_DIGITS};

/// Output sequence length.
pub const SEQ_LEN: usize = 5;
/// Vocabulary: ten digits, four control tokens and two distractors.
pub const VOCAB_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("expected a token sequence of length {expected}, got {actual}")]
    SequenceLength { expected: usize, actual: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u8),
    #[error("feature vector has length {actual}, parameters expect {expected}")]
    FeatureLength { expected: usize, actual: usize },
    #[error("parameter shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("question does not fit the feature layout: {0}")]
    MalformedQuestion(String),
    #[error("checkpoint holds {actual} bytes, header {header:?} needs {expected}")]
    CheckpointSize {
        header: CheckpointHeader,
        expected: usize,
        actual: usize,
    },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Token(pub u8);

impl Token {
    pub const THINK: Token = Token(10);
    pub const ANSWER: Token = Token(11);
    pub const END: Token = Token(12);
    pub const PAD: Token = Token(13);
    pub const DISTRACTOR_A: Token = Token(14);
    pub const DISTRACTOR_B: Token = Token(15);

    pub fn digit(d: u8) -> Token {
        assert!((d as usize) < NUM_DIGITS, "digit out of range: {d}");
        Token(d)
    }

    pub fn as_digit(self) -> Option<u8> {
        ((self.0 as usize) < NUM_DIGITS).then_some(self.0)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Token::THINK => f.write_str("THINK"),
            Token::ANSWER => f.write_str("ANSWER"),
            Token::END => f.write_str("END"),
            Token::PAD => f.write_str("PAD"),
            Token::DISTRACTOR_A => f.write_str("DX_A"),
            Token::DISTRACTOR_B => f.write_str("DX_B"),
            Token(d) => write!(f, "{d}"),
        }
    }
}

/// Activation of the single hot entry in the line-sum block. Larger than the
/// other one-hot blocks so that, under plain gradient ascent, the block that
/// determines the answer moves faster than the nuisance blocks.
pub const LINE_SUM_VALUE: f64 = 2.0;

/// Offsets of the feature blocks for a given task geometry.
///
/// Blocks, in order: one-hot template id, one-hot target index, one-hot grid
/// digits, multi-hot repair tags, one-hot (target index, target-line sum mod
/// 10), constant bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub grid_dim: usize,
    pub bank_size: usize,
    pub registry_size: usize,
}

impl FeatureLayout {
    pub fn new(grid_dim: usize, bank_size: usize, registry_size: usize) -> Self {
        Self {
            grid_dim,
            bank_size,
            registry_size,
        }
    }

    pub fn template_offset(&self) -> usize {
        0
    }

    pub fn target_offset(&self) -> usize {
        self.bank_size
    }

    pub fn grid_offset(&self) -> usize {
        self.target_offset() + self.grid_dim
    }

    pub fn tau_offset(&self) -> usize {
        self.grid_offset() + self.grid_dim * self.grid_dim * NUM_DIGITS
    }

    pub fn line_sum_offset(&self) -> usize {
        self.tau_offset() + self.registry_size
    }

    pub fn bias_index(&self) -> usize {
        self.line_sum_offset() + self.grid_dim * NUM_DIGITS
    }

    pub fn dim(&self) -> usize {
        self.bias_index() + 1
    }

    pub fn featurize(&self, q: &Question) -> Result<Vec<f64>, PolicyError> {
        let d = self.grid_dim;
        if q.grid.len() != d || q.grid.iter().any(|r| r.len() != d) {
            return Err(PolicyError::MalformedQuestion(format!(
                "grid is not {d}x{d}"
            )));
        }
        if q.template_id >= self.bank_size {
            return Err(PolicyError::MalformedQuestion(format!(
                "template id {} >= bank size {}",
                q.template_id, self.bank_size
            )));
        }
        if q.target_row >= d {
            return Err(PolicyError::MalformedQuestion(format!(
                "target index {} >= {d}",
                q.target_row
            )));
        }
        let mut x = vec![0.0; self.dim()];
        x[self.template_offset() + q.template_id] = 1.0;
        x[self.target_offset() + q.target_row] = 1.0;
        for (r, row) in q.grid.iter().enumerate() {
            for (c, &digit) in row.iter().enumerate() {
                if digit as usize >= NUM_DIGITS {
                    return Err(PolicyError::MalformedQuestion(format!(
                        "cell ({r}, {c}) holds {digit}"
                    )));
                }
                x[self.grid_offset() + (r * d + c) * NUM_DIGITS + digit as usize] = 1.0;
            }
        }
        for tag in &q.tau_tags {
            if tag.id >= self.registry_size {
                return Err(PolicyError::MalformedQuestion(format!(
                    "tag id {} >= registry size {}",
                    tag.id, self.registry_size
                )));
            }
            x[self.tau_offset() + tag.id] = 1.0;
        }
        let line_sum = q.recompute_answer() as usize;
        x[self.line_sum_offset() + q.target_row * NUM_DIGITS + line_sum] = LINE_SUM_VALUE;
        x[self.bias_index()] = 1.0;
        Ok(x)
    }
}

/// Logit scales used to build the starting policy.
///
/// The start point mimics a pretrained model that already follows the output
/// format most of the time but has no idea which digit to answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyInit {
    /// Bias-feature logit on the grammatical token at positions 0, 1, 2 and 4.
    pub format_logit: f64,
    /// Bias-feature logit on every digit at the answer slot (position 3).
    pub digit_logit: f64,
    /// Half-width of the uniform noise added to every weight.
    pub noise: f64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        Self {
            format_logit: 3.0,
            digit_logit: 1.5,
            noise: 0.01,
        }
    }
}

/// Weight stack of shape `L × V × F`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    seq_len: usize,
    vocab: usize,
    features: usize,
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(seq_len: usize, vocab: usize, features: usize) -> Self {
        Self {
            seq_len,
            vocab,
            features,
            weights: vec![0.0; seq_len * vocab * features],
        }
    }

    pub fn from_weights(
        seq_len: usize,
        vocab: usize,
        features: usize,
        weights: Vec<f64>,
    ) -> Option<Self> {
        (weights.len() == seq_len * vocab * features).then_some(Self {
            seq_len,
            vocab,
            features,
            weights,
        })
    }

    /// The starting policy for a layout: format prior on the bias feature plus
    /// seeded uniform noise.
    pub fn initial(layout: &FeatureLayout, init: &PolicyInit, rng_seed: u64) -> Self {
        let mut params = Self::zeros(SEQ_LEN, VOCAB_SIZE, layout.dim());
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        if init.noise > 0.0 {
            for w in params.weights.iter_mut() {
                *w = rng.gen_range(-init.noise..init.noise);
            }
        }
        let bias = layout.bias_index();
        for (pos, tok) in [
            (0, Token::THINK),
            (1, Token::THINK),
            (2, Token::ANSWER),
            (4, Token::END),
        ] {
            *params.weight_mut(pos, tok.index(), bias) += init.format_logit;
        }
        for d in 0..NUM_DIGITS {
            *params.weight_mut(3, d, bias) += init.digit_logit;
        }
        params
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.seq_len, self.vocab, self.features)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn offset(&self, pos: usize, tok: usize, feat: usize) -> usize {
        (pos * self.vocab + tok) * self.features + feat
    }

    pub fn weight(&self, pos: usize, tok: usize, feat: usize) -> f64 {
        self.weights[self.offset(pos, tok, feat)]
    }

    pub fn weight_mut(&mut self, pos: usize, tok: usize, feat: usize) -> &mut f64 {
        let i = self.offset(pos, tok, feat);
        &mut self.weights[i]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// `self += scale * direction`.
    pub fn add_scaled(&mut self, direction: &[f64], scale: f64) {
        assert_eq!(direction.len(), self.weights.len());
        for (w, g) in self.weights.iter_mut().zip(direction) {
            *w += scale * g;
        }
    }

    /// Fingerprint of the exact weight bits; used to tie cached log-probs to
    /// the snapshot that produced them.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.shape().hash(&mut h);
        for w in &self.weights {
            w.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn check_features(&self, x: &[f64]) -> Result<(), PolicyError> {
        if x.len() != self.features {
            return Err(PolicyError::FeatureLength {
                expected: self.features,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<(), PolicyError> {
        if tokens.len() != self.seq_len {
            return Err(PolicyError::SequenceLength {
                expected: self.seq_len,
                actual: tokens.len(),
            });
        }
        if let Some(t) = tokens.iter().find(|t| t.index() >= self.vocab) {
            return Err(PolicyError::UnknownToken(t.0));
        }
        Ok(())
    }

    /// Raw logits `W_l · x` for every position, shape `L × V`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, PolicyError> {
        self.check_features(x)?;
        Ok((0..self.seq_len)
            .map(|pos| {
                (0..self.vocab)
                    .map(|tok| {
                        let start = self.offset(pos, tok, 0);
                        self.weights[start..start + self.features]
                            .iter()
                            .zip(x)
                            .map(|(w, xi)| w * xi)
                            .sum()
                    })
                    .collect()
            })
            .collect())
    }
}

fn check_temperature(temperature: f64) -> Result<(), PolicyError> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::InvalidTemperature(temperature))
    }
}

fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + scaled.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|z| z - log_norm).collect()
}

/// Per-position log-probabilities under the temperature-scaled softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDistributions {
    temperature: f64,
    log_probs: Vec<Vec<f64>>,
}

impl PositionDistributions {
    pub fn new(params: &PolicyParams, x: &[f64], temperature: f64) -> Result<Self, PolicyError> {
        check_temperature(temperature)?;
        let log_probs = params
            .logits(x)?
            .iter()
            .map(|row| log_softmax(row, temperature))
            .collect();
        Ok(Self {
            temperature,
            log_probs,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn log_probs(&self) -> &[Vec<f64>] {
        &self.log_probs
    }

    pub fn probs(&self, pos: usize) -> Vec<f64> {
        self.log_probs[pos].iter().map(|lp| lp.exp()).collect()
    }

    /// Sequence log-probability by table lookup; tokens must already be valid.
    pub fn sequence_logprob(&self, tokens: &[Token]) -> f64 {
        tokens
            .iter()
            .zip(&self.log_probs)
            .map(|(t, row)| row[t.index()])
            .sum()
    }

    /// Lowest-index argmax at every position.
    pub fn greedy(&self) -> Vec<Token> {
        self.log_probs
            .iter()
            .map(|row| {
                let mut best = 0;
                for (i, &lp) in row.iter().enumerate() {
                    if lp > row[best] {
                        best = i;
                    }
                }
                Token(best as u8)
            })
            .collect()
    }
}

/// `Σ_l log softmax(W_l·x / T)[tokens_l]`.
pub fn logprob(
    params: &PolicyParams,
    x: &[f64],
    tokens: &[Token],
    temperature: f64,
) -> Result<f64, PolicyError> {
    params.check_tokens(tokens)?;
    Ok(PositionDistributions::new(params, x, temperature)?.sequence_logprob(tokens))
}

/// A sampled token sequence with its log-probability at sampling time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSequence {
    pub tokens: Vec<Token>,
    pub logprob: f64,
}

/// Draws one token per position from an explicit RNG.
pub fn sample_from<R: Rng + ?Sized>(dists: &PositionDistributions, rng: &mut R) -> SampledSequence {
    let mut tokens = Vec::with_capacity(dists.log_probs.len());
    let mut total = 0.0;
    for row in &dists.log_probs {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = row.len() - 1;
        for (i, lp) in row.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                chosen = i;
                break;
            }
        }
        // Round-off can leave `acc` a hair below 1; never pick a zero-mass tail.
        while row[chosen] == f64::NEG_INFINITY && chosen > 0 {
            chosen -= 1;
        }
        total += row[chosen];
        tokens.push(Token(chosen as u8));
    }
    SampledSequence {
        tokens,
        logprob: total,
    }
}

pub fn sample(
    params: &PolicyParams,
    x: &[f64],
    temperature: f64,
    rng_seed: u64,
) -> Result<SampledSequence, PolicyError> {
    let dists = PositionDistributions::new(params, x, temperature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(sample_from(&dists, &mut rng))
}

/// `∂ logprob / ∂ W`, same layout as the weights.
pub fn grad_logprob(
    params: &PolicyParams,
    x: &[f64],
    tokens: &[Token],
    temperature: f64,
) -> Result<Vec<f64>, PolicyError> {
    params.check_tokens(tokens)?;
    let dists = PositionDistributions::new(params, x, temperature)?;
    let mut grad = vec![0.0; params.weights.len()];
    let mut dlogits = vec![vec![0.0; params.vocab]; params.seq_len];
    for (pos, row) in dlogits.iter_mut().enumerate() {
        for (tok, d) in row.iter_mut().enumerate() {
            *d = -dists.log_probs[pos][tok].exp();
        }
        row[tokens[pos].index()] += 1.0;
    }
    accumulate_outer(params, &mut grad, &dlogits, x, 1.0 / temperature);
    Ok(grad)
}

/// `grad[l][v][f] += scale * dlogits[l][v] * x[f]`.
pub fn accumulate_outer(
    params: &PolicyParams,
    grad: &mut [f64],
    dlogits: &[Vec<f64>],
    x: &[f64],
    scale: f64,
) {
    let f = params.features;
    for (pos, row) in dlogits.iter().enumerate() {
        for (tok, &d) in row.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let start = params.offset(pos, tok, 0);
            let coeff = scale * d;
            for (g, xi) in grad[start..start + f].iter_mut().zip(x) {
                *g += coeff * xi;
            }
        }
    }
}

fn check_same_shape(a: &PolicyParams, b: &PolicyParams) -> Result<(), PolicyError> {
    if a.shape() != b.shape() {
        return Err(PolicyError::ShapeMismatch {
            a: a.shape(),
            b: b.shape(),
        });
    }
    Ok(())
}

fn position_kls(a: &PositionDistributions, b: &PositionDistributions) -> Vec<f64> {
    a.log_probs
        .iter()
        .zip(&b.log_probs)
        .map(|(la, lb)| {
            la.iter()
                .zip(lb)
                .map(|(&pa, &pb)| {
                    let p = pa.exp();
                    if p == 0.0 {
                        0.0
                    } else {
                        p * (pa - pb)
                    }
                })
                .sum::<f64>()
                .max(0.0)
        })
        .collect()
}

/// `Σ_l KL(π_a(·|x)_l ‖ π_b(·|x)_l)`.
pub fn kl_exact(
    params_a: &PolicyParams,
    params_b: &PolicyParams,
    x: &[f64],
    temperature: f64,
) -> Result<f64, PolicyError> {
    check_same_shape(params_a, params_b)?;
    let a = PositionDistributions::new(params_a, x, temperature)?;
    let b = PositionDistributions::new(params_b, x, temperature)?;
    Ok(position_kls(&a, &b).iter().sum())
}

/// KL value and its gradient with respect to `params_a`.
///
/// Per position, `∂KL/∂z_v = p_v (log p_v − log q_v − KL) / T`.
pub fn kl_with_grad(
    params_a: &PolicyParams,
    params_b: &PolicyParams,
    x: &[f64],
    temperature: f64,
) -> Result<(f64, Vec<f64>), PolicyError> {
    check_same_shape(params_a, params_b)?;
    let a = PositionDistributions::new(params_a, x, temperature)?;
    let b = PositionDistributions::new(params_b, x, temperature)?;
    let kls = position_kls(&a, &b);
    let dlogits: Vec<Vec<f64>> = a
        .log_probs
        .iter()
        .zip(&b.log_probs)
        .zip(&kls)
        .map(|((la, lb), kl)| {
            la.iter()
                .zip(lb)
                .map(|(&pa, &pb)| {
                    let p = pa.exp();
                    if p == 0.0 {
                        0.0
                    } else {
                        p * (pa - pb - kl)
                    }
                })
                .collect()
        })
        .collect();
    let mut grad = vec![0.0; params_a.weights.len()];
    accumulate_outer(params_a, &mut grad, &dlogits, x, 1.0 / temperature);
    Ok((kls.iter().sum(), grad))
}

/// Identifies the variant a trajectory was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuestionRef {
    pub seed_id: u64,
    pub variant: usize,
}

/// One sampled response `o_i` for variant `Q_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_ref: QuestionRef,
    pub tokens: Vec<Token>,
    /// `log π_old(o | Q_j)` at the generating temperature.
    pub logprob_old: f64,
    pub sample_index: usize,
    /// Digest of the parameter snapshot that produced `logprob_old`.
    pub snapshot: u64,
}

/// Shape header stored next to a flat little-endian `f64` checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    #[serde(rename = "L")]
    pub seq_len: usize,
    #[serde(rename = "V")]
    pub vocab: usize,
    #[serde(rename = "F")]
    pub features: usize,
}

impl PolicyParams {
    pub fn checkpoint_header(&self) -> CheckpointHeader {
        CheckpointHeader {
            seq_len: self.seq_len,
            vocab: self.vocab,
            features: self.features,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.weights.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn from_bytes(header: CheckpointHeader, bytes: &[u8]) -> Result<Self, PolicyError> {
        let count = header.seq_len * header.vocab * header.features;
        if bytes.len() != count * 8 {
            return Err(PolicyError::CheckpointSize {
                header,
                expected: count * 8,
                actual: bytes.len(),
            });
        }
        let weights = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self {
            seq_len: header.seq_len,
            vocab: header.vocab,
            features: header.features,
            weights,
        })
    }

    pub fn save_checkpoint(
        &self,
        bin_path: impl AsRef<Path>,
        meta_path: impl AsRef<Path>,
    ) -> Result<(), PolicyError> {
        std::fs::write(bin_path, self.to_bytes())?;
        std::fs::write(
            meta_path,
            serde_json::to_string_pretty(&self.checkpoint_header())? + "\n",
        )?;
        Ok(())
    }

    pub fn load_checkpoint(
        bin_path: impl AsRef<Path>,
        meta_path: impl AsRef<Path>,
    ) -> Result<Self, PolicyError> {
        let header: CheckpointHeader = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        Self::from_bytes(header, &std::fs::read(bin_path)?)
    }
}
