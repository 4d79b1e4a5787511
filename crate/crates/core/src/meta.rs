//! Text-only training stages: in-context meta-training and the plain
//! corpus stages that produce the non-meta baseline.
//!
//! A meta episode is serialized as
//!
//! ```text
//! [instruction] <q> x_1 <a> y_1 <sep> ... <q> x_k <a> y_k <sep> <q> x_q <a> y_q <eos>
//! ```
//!
//! and the supervision mask is true on exactly the query label tokens and
//! the closing `<eos>`. The plain corpus drops every marker: it streams
//! `<eos>`-terminated sentences — task `x y` pairs and scene captions in
//! two styles — supervised at every position. Both language models share
//! this corpus (pretraining, and the baseline continuation at matched
//! compute), so both know the domain's surface language. Neither corpus
//! contains question-answer text, and only the meta-trained branch ever
//! sees the episode markers, so answering a formatted question is a skill
//! available exclusively through in-context examples.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, GraphError};
use crate::lm::{Lm, LmError};
use crate::optim::{Adam, OptimError, ParamStore};
use crate::rng::rng_for;
use crate::scenes;
use crate::tasks::{builtin_task_suite, sample_episode, Episode, TaskError, TextTaskFamily};
use crate::tensor::Scalar;
use crate::vocab::{Vocab, VocabError, A, EOS, PAD, Q, SEP};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("loss diverged to {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("prompt of {len} tokens exceeds the model context {context}")]
    PromptTooLong { len: usize, context: usize },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// A token sequence paired with its supervision mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPrompt {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

/// Serialize an episode with its instruction. The mask is true on the query
/// label tokens and the final `<eos>`, false everywhere else.
pub fn build_meta_prompt(
    vocab: &Vocab,
    instruction: &str,
    episode: &Episode,
) -> Result<TokenPrompt, MetaError> {
    let mut tokens = vocab.tokenize(instruction)?;
    for (x, y) in &episode.supports {
        tokens.push(Q);
        tokens.extend(vocab.tokenize(x)?);
        tokens.push(A);
        tokens.extend(vocab.tokenize(y)?);
        tokens.push(SEP);
    }
    tokens.push(Q);
    tokens.extend(vocab.tokenize(&episode.query.0)?);
    tokens.push(A);
    let mut mask = vec![false; tokens.len()];
    let label = vocab.tokenize(&episode.query.1)?;
    tokens.extend(&label);
    mask.extend(std::iter::repeat(true).take(label.len()));
    tokens.push(EOS);
    mask.push(true);
    Ok(TokenPrompt { tokens, mask })
}

/// A plain-corpus sequence: `<eos>`-terminated sentences concatenated until
/// at least `seq_len` tokens, every position supervised. Sentences mix, in
/// equal proportion, `x y` pairs from the meta-train families and captions
/// of random scenes (both the enumeration and counting styles), so the
/// model learns the domain's words and caption syntax. Question-answer text
/// never appears here: that format must be picked up from in-context
/// examples at evaluation time, which is exactly the ability under test.
pub fn build_plain_sequence(
    vocab: &Vocab,
    families: &[TextTaskFamily],
    seq_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TokenPrompt, MetaError> {
    let mut tokens = Vec::with_capacity(seq_len + 8);
    while tokens.len() < seq_len {
        match rng.gen_range(0..3u32) {
            0 => {
                let f = &families[rng.gen_range(0..families.len())];
                let (x, y) = f.sample_pair(rng);
                tokens.extend(vocab.tokenize(&x)?);
                tokens.extend(vocab.tokenize(&y)?);
            }
            1 => {
                let scene = scenes::sample_scene(rng);
                tokens.extend(vocab.tokenize(&scenes::caption(&scene))?);
            }
            _ => {
                let scene = scenes::sample_scene(rng);
                tokens.extend(vocab.tokenize(&scenes::count_caption(&scene))?);
            }
        }
        tokens.push(EOS);
    }
    let mask = vec![true; tokens.len()];
    Ok(TokenPrompt { tokens, mask })
}

/// Next-token supervision: position `i` of the result is the token at
/// prompt position `i + 1` together with its mask entry, so logits row `i`
/// is graded against the token it predicts. The final row has no successor
/// and is never supervised.
pub fn shifted_targets(prompt: &TokenPrompt) -> (Vec<u32>, Vec<bool>) {
    let n = prompt.tokens.len();
    let mut targets = vec![PAD; n];
    let mut mask = vec![false; n];
    for i in 0..n.saturating_sub(1) {
        targets[i] = prompt.tokens[i + 1];
        mask[i] = prompt.mask[i + 1];
    }
    (targets, mask)
}

/// Forward, backward, and gradient accumulation for one prompt. Returns the
/// prompt's loss.
pub fn backprop_prompt<S: Scalar>(
    lm: &Lm,
    store: &mut ParamStore<S>,
    prompt: &TokenPrompt,
) -> Result<f64, MetaError> {
    if prompt.tokens.len() > lm.cfg.context {
        return Err(MetaError::PromptTooLong {
            len: prompt.tokens.len(),
            context: lm.cfg.context,
        });
    }
    let mut g: Graph<S> = Graph::new();
    let logits = lm.forward_graph(&mut g, store, None, &prompt.tokens)?;
    let (targets, mask) = shifted_targets(prompt);
    let loss = g.masked_xent(logits, &targets, &mask)?;
    g.backward(loss)?;
    g.apply_leaf_grads(store);
    Ok(g.value(loss).scalar_value().to_f64())
}

#[derive(Debug, Clone)]
pub struct TextTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Largest support count; each episode draws k uniformly from `0..=k_max`.
    pub k_max: usize,
    /// Minimum token length of a plain-corpus sequence.
    pub seq_len: usize,
}

/// Per-range training summary. `losses[i]` is the batch-mean loss at step
/// `steps.start + i`.
#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub family_counts: BTreeMap<&'static str, usize>,
}

/// Run meta-training steps `steps.start..steps.end`. Step numbering is
/// global: every source of randomness is a pure function of `(seed, step,
/// slot)`, so splitting a run into ranges with a checkpoint in between
/// reproduces the uninterrupted run bit for bit.
pub fn meta_train<S: Scalar>(
    lm: &Lm,
    store: &mut ParamStore<S>,
    opt: &mut Adam<S>,
    vocab: &Vocab,
    cfg: &TextTrainConfig,
    seed: u64,
    steps: Range<usize>,
) -> Result<TrainOutcome, MetaError> {
    let families: Vec<TextTaskFamily> = builtin_task_suite()
        .into_iter()
        .filter(|f| !f.held_out)
        .collect();
    let mut outcome = TrainOutcome::default();
    for step in steps {
        let mut batch_loss = 0.0;
        for slot in 0..cfg.batch {
            let mut rng = rng_for(seed, "meta-episode", &[step as u64, slot as u64]);
            let family = &families[rng.gen_range(0..families.len())];
            let k = rng.gen_range(0..=cfg.k_max);
            let episode = sample_episode(family, k, &mut rng)?;
            *outcome.family_counts.entry(family.id.name()).or_insert(0) += 1;
            let prompt = build_meta_prompt(vocab, family.instruction, &episode)?;
            batch_loss += backprop_prompt(lm, store, &prompt)?;
        }
        let mean = batch_loss / cfg.batch as f64;
        if !mean.is_finite() {
            return Err(MetaError::Diverged { step, loss: mean });
        }
        store.scale_grads(1.0 / cfg.batch as f64);
        opt.step(store)?;
        outcome.losses.push(mean);
    }
    Ok(outcome)
}

/// Plain next-token training on the mixed sentence corpus. Used both for
/// the shared pretraining stage (`stage = "pretrain"`) and for the baseline
/// continuation that substitutes for meta-training at matched step count
/// (`stage = "baseline"`); the stage label keeps their data streams
/// independent.
pub fn plain_train<S: Scalar>(
    lm: &Lm,
    store: &mut ParamStore<S>,
    opt: &mut Adam<S>,
    vocab: &Vocab,
    cfg: &TextTrainConfig,
    seed: u64,
    stage: &str,
    steps: Range<usize>,
) -> Result<TrainOutcome, MetaError> {
    let families: Vec<TextTaskFamily> = builtin_task_suite()
        .into_iter()
        .filter(|f| !f.held_out)
        .collect();
    let mut outcome = TrainOutcome::default();
    for step in steps {
        let mut batch_loss = 0.0;
        for slot in 0..cfg.batch {
            let mut rng = rng_for(seed, stage, &[step as u64, slot as u64]);
            let prompt = build_plain_sequence(vocab, &families, cfg.seq_len, &mut rng)?;
            batch_loss += backprop_prompt(lm, store, &prompt)?;
        }
        let mean = batch_loss / cfg.batch as f64;
        if !mean.is_finite() {
            return Err(MetaError::Diverged { step, loss: mean });
        }
        store.scale_grads(1.0 / cfg.batch as f64);
        opt.step(store)?;
        outcome.losses.push(mean);
    }
    Ok(outcome)
}
