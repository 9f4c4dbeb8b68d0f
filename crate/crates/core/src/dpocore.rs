//! A small, fully checkable preference-optimization core.
//!
//! [`ToyPolicy`] is a context-conditioned unigram model: the context is mapped
//! to a feature vector `φ(c)` and every token of a response is scored by
//! `log softmax(Wᵀ φ(c))`. Sequence log-probabilities are sums over tokens, so
//! the HQ-conditioned DPO objective
//!
//! ```text
//! Δ(c, o) = log π_θ(o | c) − log π_ref(o | c)
//! L       = −mean_i log σ(β · (Δ(c_i, chosen_i) − Δ(c_i, rejected_i)))
//! ```
//!
//! and its gradient can be evaluated exactly. The model is not autoregressive;
//! the objective only ever sees whole-sequence log-probabilities.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pairs::PreferencePair;

pub const UNK: &str = "<unk>";
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum DpoError {
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("beta must be > 0, got {0}")]
    Beta(f64),
    #[error("policy and reference differ in vocabulary or feature dimension")]
    Mismatch,
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("policy file: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Digit,
    Space,
    Other,
}

fn char_class(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_numeric() {
        CharClass::Digit
    } else if c.is_alphabetic() {
        CharClass::Letter
    } else {
        CharClass::Other
    }
}

/// Lowercases and splits at letter/digit/punctuation boundaries.
///
/// Letter runs and digit runs become single tokens, whitespace is dropped and
/// every other character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut current_class = CharClass::Space;
    for c in text.chars().flat_map(char::to_lowercase) {
        let class = char_class(c);
        let joins = class == current_class && matches!(class, CharClass::Letter | CharClass::Digit);
        if !joins && !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
        if class != CharClass::Space {
            current.push(c);
        }
        current_class = class;
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Token count under [`tokenize`].
pub fn token_count(text: &str) -> usize {
    tokenize(text).len()
}

/// Ordered vocabulary; index 0 is always [`UNK`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = tokens.into_iter().filter(|t| t != UNK).collect();
        let tokens: Vec<String> = std::iter::once(UNK.to_string()).chain(set).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_tokens(texts.into_iter().flat_map(tokenize))
    }

    /// Vocabulary of `size` synthetic tokens `t1..` (plus UNK at 0).
    pub fn synthetic(size: usize) -> Self {
        assert!(size >= 1, "vocabulary needs at least the UNK slot");
        Self::from_tokens((1..size).map(|i| format!("t{i:04}")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Hashed bag-of-tokens features.
///
/// Slot 0 is a constant bias; remaining slots hold token counts bucketed by
/// FNV-1a, divided by the number of context tokens.
pub fn featurize(context: &str, feature_dim: usize) -> Vec<f64> {
    let mut phi = vec![0.0; feature_dim];
    if feature_dim == 0 {
        return phi;
    }
    phi[0] = 1.0;
    if feature_dim == 1 {
        return phi;
    }
    let tokens = tokenize(context);
    if tokens.is_empty() {
        return phi;
    }
    let scale = 1.0 / tokens.len() as f64;
    for t in &tokens {
        let slot = 1 + (fnv1a(t.as_bytes()) % (feature_dim as u64 - 1)) as usize;
        phi[slot] += scale;
    }
    phi
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Context-conditioned unigram policy with an `F × V` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: Vocab,
    feature_dim: usize,
    weights: Vec<f64>,
}

impl ToyPolicy {
    pub fn zeros(vocab: Vocab, feature_dim: usize) -> Self {
        let weights = vec![0.0; feature_dim * vocab.len()];
        Self {
            vocab,
            feature_dim,
            weights,
        }
    }

    pub fn with_weights(
        vocab: Vocab,
        feature_dim: usize,
        weights: Vec<f64>,
    ) -> Result<Self, DpoError> {
        if weights.len() != feature_dim * vocab.len() {
            return Err(DpoError::Config(format!(
                "expected {} weights, got {}",
                feature_dim * vocab.len(),
                weights.len()
            )));
        }
        Ok(Self {
            vocab,
            feature_dim,
            weights,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Row-major `F × V` parameters.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn features(&self, context: &str) -> Vec<f64> {
        featurize(context, self.feature_dim)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.vocab.encode(text)
    }

    pub fn logits(&self, phi: &[f64]) -> Vec<f64> {
        let v = self.vocab.len();
        let mut z = vec![0.0; v];
        for (f, &x) in phi.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.weights[f * v..(f + 1) * v];
            for (zj, w) in z.iter_mut().zip(row) {
                *zj += x * w;
            }
        }
        z
    }

    pub fn log_probs(&self, phi: &[f64]) -> Vec<f64> {
        log_softmax(&self.logits(phi))
    }

    pub fn seq_logprob_features(&self, phi: &[f64], tokens: &[usize]) -> Result<f64, DpoError> {
        if tokens.is_empty() {
            return Err(DpoError::EmptySequence);
        }
        let lp = self.log_probs(phi);
        Ok(tokens.iter().map(|&t| lp[t]).sum())
    }

    /// `Σ_t log softmax(Wᵀ φ(context))[tokens_t]`.
    pub fn seq_logprob(&self, context: &str, tokens: &[usize]) -> Result<f64, DpoError> {
        self.seq_logprob_features(&self.features(context), tokens)
    }

    fn compatible(&self, other: &ToyPolicy) -> bool {
        self.feature_dim == other.feature_dim && self.vocab.tokens == other.vocab.tokens
    }

    pub fn save(&self, path: &Path) -> Result<(), DpoError> {
        let file = PolicyFile {
            vocab: self.vocab.tokens.clone(),
            feature_dim: self.feature_dim,
            weights: self.weights.clone(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|source| DpoError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DpoError> {
        let text = std::fs::read_to_string(path).map_err(|source| DpoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: PolicyFile = serde_json::from_str(&text)?;
        if file.vocab.first().map(String::as_str) != Some(UNK) {
            return Err(DpoError::Config("vocabulary must start with <unk>".into()));
        }
        let vocab = Vocab::from_tokens(file.vocab.iter().skip(1).cloned());
        if vocab.tokens != file.vocab {
            return Err(DpoError::Config(
                "vocabulary must be sorted and unique".into(),
            ));
        }
        Self::with_weights(vocab, file.feature_dim, file.weights)
    }
}

/// On-disk form of a trained policy.
#[derive(Debug, Serialize, Deserialize)]
struct PolicyFile {
    vocab: Vec<String>,
    feature_dim: usize,
    weights: Vec<f64>,
}

/// `log π_θ(o | c) − log π_ref(o | c)`.
pub fn delta(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    context: &str,
    tokens: &[usize],
) -> Result<f64, DpoError> {
    if !policy.compatible(reference) {
        return Err(DpoError::Mismatch);
    }
    let phi = policy.features(context);
    Ok(
        policy.seq_logprob_features(&phi, tokens)?
            - reference.seq_logprob_features(&phi, tokens)?,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoItem {
    pub context: String,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoBatch {
    pub items: Vec<DpoItem>,
    pub beta: f64,
    /// Divide each sequence log-probability by its length.
    pub length_normalize: bool,
}

impl DpoBatch {
    pub fn new(items: Vec<DpoItem>, beta: f64) -> Self {
        Self {
            items,
            beta,
            length_normalize: false,
        }
    }

    fn validate(&self) -> Result<(), DpoError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(DpoError::Beta(self.beta));
        }
        if self.items.is_empty() {
            return Err(DpoError::EmptyBatch);
        }
        if self
            .items
            .iter()
            .any(|it| it.chosen.is_empty() || it.rejected.is_empty())
        {
            return Err(DpoError::EmptySequence);
        }
        Ok(())
    }
}

fn scaled_seq_logprob(lp: &[f64], tokens: &[usize], normalize: bool) -> f64 {
    let s: f64 = tokens.iter().map(|&t| lp[t]).sum();
    if normalize {
        s / tokens.len() as f64
    } else {
        s
    }
}

/// Per-item margin `Δ(c, chosen) − Δ(c, rejected)`.
fn item_margin(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    item: &DpoItem,
    phi: &[f64],
    normalize: bool,
) -> (f64, Vec<f64>) {
    let lp = policy.log_probs(phi);
    let lr = reference.log_probs(phi);
    let d_chosen = scaled_seq_logprob(&lp, &item.chosen, normalize)
        - scaled_seq_logprob(&lr, &item.chosen, normalize);
    let d_rejected = scaled_seq_logprob(&lp, &item.rejected, normalize)
        - scaled_seq_logprob(&lr, &item.rejected, normalize);
    (d_chosen - d_rejected, lp)
}

/// Margins of every item, in order.
pub fn margins(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &DpoBatch,
) -> Result<Vec<f64>, DpoError> {
    if !policy.compatible(reference) {
        return Err(DpoError::Mismatch);
    }
    batch.validate()?;
    Ok(batch
        .items
        .iter()
        .map(|it| {
            item_margin(
                policy,
                reference,
                it,
                &policy.features(&it.context),
                batch.length_normalize,
            )
            .0
        })
        .collect())
}

/// Mean preference margin over the batch.
pub fn preference_margin(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &DpoBatch,
) -> Result<f64, DpoError> {
    let m = margins(policy, reference, batch)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// `mean_i −log σ(β m_i)`.
pub fn dpo_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &DpoBatch,
) -> Result<f64, DpoError> {
    let m = margins(policy, reference, batch)?;
    Ok(m.iter().map(|&mi| softplus(-batch.beta * mi)).sum::<f64>() / m.len() as f64)
}

/// Adds `scale · ∇_W log π(tokens)` (optionally length-normalized) to `grad`.
fn accumulate_seq_grad(
    grad: &mut [f64],
    phi: &[f64],
    probs: &[f64],
    tokens: &[usize],
    scale: f64,
    normalize: bool,
) {
    let v = probs.len();
    let n = tokens.len() as f64;
    let scale = if normalize { scale / n } else { scale };
    let mut g = vec![0.0; v];
    for &t in tokens {
        g[t] += 1.0;
    }
    for (gj, p) in g.iter_mut().zip(probs) {
        *gj -= n * p;
    }
    for (f, &x) in phi.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &mut grad[f * v..(f + 1) * v];
        for (r, gj) in row.iter_mut().zip(&g) {
            *r += scale * x * gj;
        }
    }
}

/// Loss and analytic gradient (row-major `F × V`) in one pass.
pub fn dpo_loss_and_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &DpoBatch,
) -> Result<(f64, Vec<f64>), DpoError> {
    if !policy.compatible(reference) {
        return Err(DpoError::Mismatch);
    }
    batch.validate()?;
    let n = batch.items.len() as f64;
    let mut grad = vec![0.0; policy.weights.len()];
    let mut loss = 0.0;
    for item in &batch.items {
        let phi = policy.features(&item.context);
        let (m, lp) = item_margin(policy, reference, item, &phi, batch.length_normalize);
        loss += softplus(-batch.beta * m);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let coef = -batch.beta * sigmoid(-batch.beta * m) / n;
        accumulate_seq_grad(
            &mut grad,
            &phi,
            &probs,
            &item.chosen,
            coef,
            batch.length_normalize,
        );
        accumulate_seq_grad(
            &mut grad,
            &phi,
            &probs,
            &item.rejected,
            -coef,
            batch.length_normalize,
        );
    }
    Ok((loss / n, grad))
}

pub fn dpo_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &DpoBatch,
) -> Result<Vec<f64>, DpoError> {
    dpo_loss_and_grad(policy, reference, batch).map(|(_, g)| g)
}

/// A chosen-only example for the SFT baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SftItem {
    pub context: String,
    pub tokens: Vec<usize>,
}

/// Mean per-token negative log-likelihood and its gradient.
pub fn sft_loss_and_grad(
    policy: &ToyPolicy,
    items: &[SftItem],
) -> Result<(f64, Vec<f64>), DpoError> {
    if items.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let n = items.len() as f64;
    let mut grad = vec![0.0; policy.weights.len()];
    let mut loss = 0.0;
    for item in items {
        if item.tokens.is_empty() {
            return Err(DpoError::EmptySequence);
        }
        let phi = policy.features(&item.context);
        let lp = policy.log_probs(&phi);
        loss -= scaled_seq_logprob(&lp, &item.tokens, true);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        accumulate_seq_grad(&mut grad, &phi, &probs, &item.tokens, -1.0 / n, true);
    }
    Ok((loss / n, grad))
}

pub fn sft_loss(policy: &ToyPolicy, items: &[SftItem]) -> Result<f64, DpoError> {
    sft_loss_and_grad(policy, items).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Dpo,
    Sft,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dpo" => Ok(Objective::Dpo),
            "sft" => Ok(Objective::Sft),
            other => Err(format!("unknown objective `{other}` (expected dpo or sft)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub length_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dpo,
            beta: DEFAULT_BETA,
            lr: 1e-2,
            steps: 500,
            batch_size: 0,
            seed: 0,
            feature_dim: 32,
            length_normalize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(DpoError::Config(format!(
                "lr {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.objective == Objective::Dpo && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(DpoError::Beta(self.beta));
        }
        if self.feature_dim == 0 {
            return Err(DpoError::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    pub reference: ToyPolicy,
    /// Objective value on the step's batch, before that step's update.
    pub history: Vec<f64>,
}

/// Builds the vocabulary from chosen and rejected texts.
pub fn vocab_for_pairs(pairs: &[PreferencePair]) -> Vocab {
    Vocab::from_texts(
        pairs
            .iter()
            .flat_map(|p| [p.chosen.as_str(), p.rejected.as_str()]),
    )
}

/// Encodes pairs against `policy`'s vocabulary, skipping pairs with an empty side.
pub fn encode_pairs(policy: &ToyPolicy, pairs: &[PreferencePair]) -> Vec<DpoItem> {
    pairs
        .iter()
        .map(|p| DpoItem {
            context: p.prompt.clone(),
            chosen: policy.encode(&p.chosen),
            rejected: policy.encode(&p.rejected),
        })
        .filter(|it| !it.chosen.is_empty() && !it.rejected.is_empty())
        .collect()
}

/// Plain gradient descent from `W = 0` with a frozen copy as reference.
pub fn train(pairs: &[PreferencePair], config: &TrainConfig) -> Result<TrainOutcome, DpoError> {
    config.validate()?;
    let init = ToyPolicy::zeros(vocab_for_pairs(pairs), config.feature_dim);
    train_from(init, pairs, config)
}

/// Like [`train`] but starting from (and referencing) `init`.
pub fn train_from(
    init: ToyPolicy,
    pairs: &[PreferencePair],
    config: &TrainConfig,
) -> Result<TrainOutcome, DpoError> {
    config.validate()?;
    let reference = init.clone();
    let mut policy = init;
    let items = encode_pairs(&policy, pairs);
    if items.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let sft_items: Vec<SftItem> = items
        .iter()
        .map(|it| SftItem {
            context: it.context.clone(),
            tokens: it.chosen.clone(),
        })
        .collect();

    let n = items.len();
    let batch_size = if config.batch_size == 0 || config.batch_size >= n {
        n
    } else {
        config.batch_size
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let picked: Vec<usize> = if batch_size == n {
            (0..n).collect()
        } else {
            if cursor + batch_size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch_size;
            order[cursor - batch_size..cursor].to_vec()
        };
        let (loss, grad) = match config.objective {
            Objective::Dpo => {
                let batch = DpoBatch {
                    items: picked.iter().map(|&i| items[i].clone()).collect(),
                    beta: config.beta,
                    length_normalize: config.length_normalize,
                };
                dpo_loss_and_grad(&policy, &reference, &batch)?
            }
            Objective::Sft => {
                let batch: Vec<SftItem> = picked.iter().map(|&i| sft_items[i].clone()).collect();
                sft_loss_and_grad(&policy, &batch)?
            }
        };
        if !loss.is_finite() {
            return Err(DpoError::NonFinite { step });
        }
        history.push(loss);
        for (w, g) in policy.weights.iter_mut().zip(&grad) {
            *w -= config.lr * g;
        }
    }
    Ok(TrainOutcome {
        policy,
        reference,
        history,
    })
}

/// Writes `step,objective` rows.
pub fn write_history_csv(path: &Path, history: &[f64]) -> Result<(), DpoError> {
    let io = |source| DpoError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "step,objective").map_err(io)?;
    for (i, v) in history.iter().enumerate() {
        writeln!(out, "{i},{v}").map_err(io)?;
    }
    out.flush().map_err(io)
}
