//! k-shot in-context evaluation: prompt assembly, greedy decoding through
//! the KV cache, and answer matching against a candidate set.
//!
//! An evaluation prompt is
//!
//! ```text
//! [induction] ([image][<q>][question][<a>][answer][<sep>]) x k   [image][<q>][question][<a>]
//! ```
//!
//! so its length has the closed form `|ind| + sum(n + |q_i| + |a_i| + 3) +
//! n + |q| + 2`, which the builder checks against the assembled prompt.
//!
//! Matching prefers an exact string match against the candidates; otherwise
//! the generation is embedded as the mean of its tokens' input-embedding
//! rows (the `<eos>` row when nothing was generated) and the
//! cosine-nearest candidate wins, ties going to the lexicographically
//! smallest.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{Frontend, FrontendError};
use crate::lm::{Lm, LmError};
use crate::optim::ParamStore;
use crate::rng::rng_for;
use crate::scenes::{self, EvalSet, SceneError};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{Vocab, VocabError, A, EOS, Q, SEP};

/// Default preamble prepended to every evaluation prompt.
pub const INDUCTION: &str = "please answer the question .";

/// Decode budget per answer.
pub const MAX_NEW_TOKENS: usize = 6;

/// Words only the harness introduces.
pub fn vocab_words() -> Vec<&'static str> {
    vec!["please", "answer", "question"]
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("prompt of {len} positions exceeds the model context {context} (decode budget included)")]
    PromptTooLong { len: usize, context: usize },
    #[error("requested {want} evaluation items but the test pool has {have}")]
    NotEnoughEvalItems { want: usize, have: usize },
    #[error("requested {want} shots but the shot pool has {have}")]
    NotEnoughShots { want: usize, have: usize },
    #[error("candidate set is empty")]
    NoCandidates,
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// One contiguous run of prompt positions: either token ids or visual rows.
#[derive(Debug, Clone)]
pub enum PromptPart<S> {
    Text(Vec<u32>),
    Visual(Tensor<S>),
}

impl<S: Scalar> PromptPart<S> {
    fn len(&self) -> usize {
        match self {
            PromptPart::Text(t) => t.len(),
            PromptPart::Visual(v) => v.rows(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IclPrompt<S> {
    pub parts: Vec<PromptPart<S>>,
}

impl<S: Scalar> IclPrompt<S> {
    pub fn len(&self) -> usize {
        self.parts.iter().map(PromptPart::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Assemble a k-shot prompt. `shots` supply `(visual rows, question,
/// answer)`; the query has no answer, ending the prompt on the `<a>`
/// marker. The assembled length is checked against its closed form.
pub fn build_icl_prompt<S: Scalar>(
    vocab: &Vocab,
    induction: &str,
    shots: &[(Tensor<S>, &str, &str)],
    query: (Tensor<S>, &str),
) -> Result<IclPrompt<S>, HarnessError> {
    let ind = vocab.tokenize(induction)?;
    let mut expected = ind.len();
    let mut parts = vec![PromptPart::Text(ind)];
    for (visual, q, a) in shots {
        let qt = vocab.tokenize(q)?;
        let at = vocab.tokenize(a)?;
        expected += visual.rows() + qt.len() + at.len() + 3;
        parts.push(PromptPart::Visual(visual.clone()));
        let mut text = vec![Q];
        text.extend(qt);
        text.push(A);
        text.extend(at);
        text.push(SEP);
        parts.push(PromptPart::Text(text));
    }
    let (visual, q) = query;
    let qt = vocab.tokenize(q)?;
    expected += visual.rows() + qt.len() + 2;
    parts.push(PromptPart::Visual(visual));
    let mut text = vec![Q];
    text.extend(qt);
    text.push(A);
    parts.push(PromptPart::Text(text));

    let prompt = IclPrompt { parts };
    debug_assert_eq!(prompt.len(), expected, "closed-form length disagrees");
    Ok(prompt)
}

/// Prefill the prompt through the KV cache and greedily decode an answer.
/// Decoding stops at `<sep>` or `<eos>` and within [`MAX_NEW_TOKENS`].
pub fn predict_answer<S: Scalar>(
    lm: &Lm,
    store: &ParamStore<S>,
    prompt: &IclPrompt<S>,
) -> Result<Vec<u32>, HarnessError> {
    let len = prompt.len();
    if len + MAX_NEW_TOKENS > lm.cfg.context {
        return Err(HarnessError::PromptTooLong {
            len: len + MAX_NEW_TOKENS,
            context: lm.cfg.context,
        });
    }
    let mut cache = lm.new_cache::<S>();
    let mut logits = Vec::new();
    let mut pos = 0usize;
    for part in &prompt.parts {
        match part {
            PromptPart::Text(tokens) => {
                for &tok in tokens {
                    let row = lm.infer_embed_token(store, tok, pos)?;
                    logits = lm.advance(store, &mut cache, &row)?;
                    pos += 1;
                }
            }
            PromptPart::Visual(rows) => {
                for r in 0..rows.rows() {
                    let row = lm.infer_embed_vector(store, rows.row(r), pos)?;
                    logits = lm.advance(store, &mut cache, &row)?;
                    pos += 1;
                }
            }
        }
    }
    Ok(lm.greedy_decode(store, &mut cache, logits, MAX_NEW_TOKENS, &[SEP, EOS])?)
}

/// Candidate matcher with precomputed mean-embedding rows.
pub struct Matcher<S> {
    /// Sorted lexicographically so equal similarities resolve to the
    /// smallest candidate.
    candidates: Vec<(String, Vec<S>)>,
    eos_embed: Vec<S>,
}

impl<S: Scalar> Matcher<S> {
    pub fn new(
        lm: &Lm,
        store: &ParamStore<S>,
        vocab: &Vocab,
        candidates: &[String],
    ) -> Result<Matcher<S>, HarnessError> {
        if candidates.is_empty() {
            return Err(HarnessError::NoCandidates);
        }
        let mut sorted: Vec<String> = candidates.to_vec();
        sorted.sort();
        sorted.dedup();
        let embedded = sorted
            .into_iter()
            .map(|c| {
                let tokens = vocab.tokenize(&c)?;
                Ok((c, mean_embedding(lm, store, &tokens)))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Ok(Matcher {
            candidates: embedded,
            eos_embed: mean_embedding(lm, store, &[EOS]),
        })
    }

    /// Map a generation to a candidate: exact normalized match first, then
    /// cosine over mean input embeddings.
    pub fn match_answer(
        &self,
        vocab: &Vocab,
        lm: &Lm,
        store: &ParamStore<S>,
        generated: &[u32],
    ) -> Result<String, HarnessError> {
        let text = vocab.detokenize(generated)?;
        if let Some((c, _)) = self.candidates.iter().find(|(c, _)| *c == text) {
            return Ok(c.clone());
        }
        let probe = if generated.is_empty() {
            self.eos_embed.clone()
        } else {
            mean_embedding(lm, store, generated)
        };
        let mut best: Option<(&str, f64)> = None;
        for (c, emb) in &self.candidates {
            let sim = cosine(&probe, emb);
            // Strict improvement only: earlier (lexicographically smaller)
            // candidates win ties.
            if best.map_or(true, |(_, b)| sim > b) {
                best = Some((c, sim));
            }
        }
        Ok(best.expect("candidates are non-empty").0.to_string())
    }
}

/// Mean of the input-embedding rows (token embedding table only, no
/// positional term) of `tokens`.
fn mean_embedding<S: Scalar>(lm: &Lm, store: &ParamStore<S>, tokens: &[u32]) -> Vec<S> {
    let wte = store.value(lm.params.wte);
    let d = lm.cfg.d_model;
    let mut out = vec![S::ZERO; d];
    for &t in tokens {
        let row = wte.row(t as usize);
        for (o, &x) in out.iter_mut().zip(row) {
            *o = o.add(x);
        }
    }
    let inv = S::from_f64(1.0 / tokens.len() as f64);
    for o in &mut out {
        *o = o.mul(inv);
    }
    out
}

fn cosine<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.to_f64(), y.to_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item: usize,
    pub k: usize,
    pub question: String,
    pub gold: String,
    pub generated: String,
    pub matched: String,
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub records: Vec<EvalRecord>,
}

/// Evaluate one (dataset, k) cell: for each of the first `n_eval` test
/// items, draw k distinct shots from the train pool (fresh per item),
/// decode, match, and score.
pub fn evaluate<S: Scalar>(
    lm: &Lm,
    frontend: &Frontend,
    store: &ParamStore<S>,
    vocab: &Vocab,
    eval_set: &EvalSet,
    k: usize,
    n_eval: usize,
    seed: u64,
    induction: &str,
) -> Result<EvalResult, HarnessError> {
    if n_eval > eval_set.test.len() {
        return Err(HarnessError::NotEnoughEvalItems {
            want: n_eval,
            have: eval_set.test.len(),
        });
    }
    if k > eval_set.train.len() {
        return Err(HarnessError::NotEnoughShots {
            want: k,
            have: eval_set.train.len(),
        });
    }
    let matcher = Matcher::new(lm, store, vocab, &eval_set.candidates)?;
    let mut records = Vec::with_capacity(n_eval);
    let mut correct = 0usize;
    for (item_idx, item) in eval_set.test.iter().take(n_eval).enumerate() {
        // Shots are resampled per test item: k distinct train-pool indices.
        // Train scenes are globally unique, so distinct indices give
        // pairwise distinct shot scenes, all distinct from the query.
        let mut rng = rng_for(
            seed,
            "eval-shots",
            &[eval_set.dataset as u64, k as u64, item_idx as u64],
        );
        let order = rand::seq::index::sample(&mut rng, eval_set.train.len(), k);
        let mut shots: Vec<(Tensor<S>, &str, &str)> = Vec::with_capacity(k);
        for idx in order.iter() {
            let shot = &eval_set.train[idx];
            let img: Tensor<S> = scenes::render(&shot.scene)?;
            let visual = frontend.infer(store, &img)?;
            shots.push((visual, shot.question.as_str(), shot.answer.as_str()));
        }
        let img: Tensor<S> = scenes::render(&item.scene)?;
        let query_visual = frontend.infer(store, &img)?;
        let prompt = build_icl_prompt(vocab, induction, &shots, (query_visual, &item.question))?;
        let generated = predict_answer(lm, store, &prompt)?;
        let matched = matcher.match_answer(vocab, lm, store, &generated)?;
        let is_correct = matched == item.answer;
        correct += is_correct as usize;
        records.push(EvalRecord {
            item: item_idx,
            k,
            question: item.question.clone(),
            gold: item.answer.clone(),
            generated: vocab.detokenize(&generated)?,
            matched,
            correct: is_correct,
        });
    }
    Ok(EvalResult {
        accuracy: correct as f64 / n_eval as f64,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FrontendConfig;
    use crate::lm::LmConfig;
    use crate::scenes::{build_splits, DatasetId, WorldConfig};
    use crate::tasks;
    use rand::Rng;

    fn world_vocab() -> Vocab {
        let mut words = tasks::vocab_words();
        words.extend(scenes::vocab_words());
        words.extend(vocab_words());
        Vocab::build(&words)
    }

    struct Setup {
        store: ParamStore<f64>,
        lm: Lm,
        fe: Frontend,
        vocab: Vocab,
    }

    fn setup() -> Setup {
        let vocab = world_vocab();
        let mut store: ParamStore<f64> = ParamStore::new();
        let lm = Lm::register(
            &mut store,
            LmConfig {
                vocab_size: vocab.len(),
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                context: 256,
            },
            31,
        )
        .unwrap();
        let fe = Frontend::register(
            &mut store,
            FrontendConfig {
                img: 32,
                channels: 3,
                patch: 8,
                d_vision: 8,
                d_lm: 16,
            },
            32,
        )
        .unwrap();
        Setup {
            store,
            lm,
            fe,
            vocab,
        }
    }

    #[test]
    fn prompt_length_matches_its_closed_form_for_every_shot_count() {
        let s = setup();
        let mut rng = rng_for(1, "harness-test", &[0]);
        for k in 0..=4 {
            let mut shots = Vec::new();
            let mut expected = s.vocab.tokenize(INDUCTION).unwrap().len();
            for _ in 0..k {
                let item = scenes::generate_qa(DatasetId::Attr, &mut rng).unwrap();
                let img: Tensor<f64> = scenes::render(&item.scene).unwrap();
                let visual = s.fe.infer(&s.store, &img).unwrap();
                expected += visual.rows()
                    + s.vocab.tokenize(&item.question).unwrap().len()
                    + s.vocab.tokenize(&item.answer).unwrap().len()
                    + 3;
                shots.push((visual, item.question, item.answer));
            }
            let query = scenes::generate_qa(DatasetId::Attr, &mut rng).unwrap();
            let img: Tensor<f64> = scenes::render(&query.scene).unwrap();
            let visual = s.fe.infer(&s.store, &img).unwrap();
            expected += visual.rows() + s.vocab.tokenize(&query.question).unwrap().len() + 2;

            let shot_refs: Vec<(Tensor<f64>, &str, &str)> = shots
                .iter()
                .map(|(v, q, a)| (v.clone(), q.as_str(), a.as_str()))
                .collect();
            let prompt =
                build_icl_prompt(&s.vocab, INDUCTION, &shot_refs, (visual, &query.question))
                    .unwrap();
            assert_eq!(prompt.len(), expected, "k={k}");
            // Structure: each shot ends in <sep>, the query ends on <a>.
            let flat: Vec<u32> = prompt
                .parts
                .iter()
                .filter_map(|p| match p {
                    PromptPart::Text(t) => Some(t.clone()),
                    PromptPart::Visual(_) => None,
                })
                .flatten()
                .collect();
            assert_eq!(flat.iter().filter(|&&t| t == SEP).count(), k);
            assert_eq!(flat.iter().filter(|&&t| t == Q).count(), k + 1);
            assert_eq!(flat.iter().filter(|&&t| t == A).count(), k + 1);
            assert_eq!(*flat.last().unwrap(), A);
        }
    }

    #[test]
    fn oversized_prompts_are_rejected_with_the_decode_budget() {
        let s = setup();
        let mut rng = rng_for(2, "harness-test", &[1]);
        let mut shots = Vec::new();
        for _ in 0..8 {
            let item = scenes::generate_qa(DatasetId::Rel, &mut rng).unwrap();
            let img: Tensor<f64> = scenes::render(&item.scene).unwrap();
            let visual = s.fe.infer(&s.store, &img).unwrap();
            shots.push((visual, item.question, item.answer));
        }
        let query = scenes::generate_qa(DatasetId::Rel, &mut rng).unwrap();
        let img: Tensor<f64> = scenes::render(&query.scene).unwrap();
        let visual = s.fe.infer(&s.store, &img).unwrap();
        let shot_refs: Vec<(Tensor<f64>, &str, &str)> = shots
            .iter()
            .map(|(v, q, a)| (v.clone(), q.as_str(), a.as_str()))
            .collect();
        let prompt =
            build_icl_prompt(&s.vocab, INDUCTION, &shot_refs, (visual, &query.question)).unwrap();
        assert!(prompt.len() + MAX_NEW_TOKENS > 256);
        assert!(matches!(
            predict_answer(&s.lm, &s.store, &prompt),
            Err(HarnessError::PromptTooLong { .. })
        ));
    }

    #[test]
    fn decoding_stops_at_markers_and_respects_the_budget() {
        let s = setup();
        let mut rng = rng_for(3, "harness-test", &[2]);
        let item = scenes::generate_qa(DatasetId::Attr, &mut rng).unwrap();
        let img: Tensor<f64> = scenes::render(&item.scene).unwrap();
        let visual = s.fe.infer(&s.store, &img).unwrap();
        let prompt = build_icl_prompt(&s.vocab, INDUCTION, &[], (visual, &item.question)).unwrap();
        let out = predict_answer(&s.lm, &s.store, &prompt).unwrap();
        assert!(out.len() <= MAX_NEW_TOKENS);
        assert!(out.iter().all(|&t| t != SEP && t != EOS));
    }

    #[test]
    fn exact_match_takes_precedence_over_cosine() {
        let s = setup();
        let candidates: Vec<String> = ["red", "green", "blue", "yellow", "nothing"]
            .iter()
            .map(|c| c.to_string())
            .collect();
        let matcher = Matcher::new(&s.lm, &s.store, &s.vocab, &candidates).unwrap();
        for c in &candidates {
            let tokens = s.vocab.tokenize(c).unwrap();
            let got = matcher
                .match_answer(&s.vocab, &s.lm, &s.store, &tokens)
                .unwrap();
            assert_eq!(got, *c);
        }
    }

    #[test]
    fn empty_generation_uses_the_eos_embedding() {
        let s = setup();
        let candidates: Vec<String> = ["red", "blue"].iter().map(|c| c.to_string()).collect();
        let matcher = Matcher::new(&s.lm, &s.store, &s.vocab, &candidates).unwrap();
        let got = matcher.match_answer(&s.vocab, &s.lm, &s.store, &[]).unwrap();
        // Independent: cosine of the <eos> row against both candidates.
        let probe = mean_embedding(&s.lm, &s.store, &[EOS]);
        let mut best = ("", f64::NEG_INFINITY);
        for c in ["blue", "red"] {
            let emb = mean_embedding(&s.lm, &s.store, &s.vocab.tokenize(c).unwrap());
            let sim = cosine(&probe, &emb);
            if sim > best.1 {
                best = (c, sim);
            }
        }
        assert_eq!(got, best.0);
    }

    #[test]
    fn cosine_ties_resolve_to_the_lexicographically_smallest() {
        let s = setup();
        // "blue red" and "red blue" share a mean embedding; a probe built
        // from both words ties them exactly.
        let candidates: Vec<String> = ["red blue", "blue red"]
            .iter()
            .map(|c| c.to_string())
            .collect();
        let matcher = Matcher::new(&s.lm, &s.store, &s.vocab, &candidates).unwrap();
        let probe: Vec<u32> = s.vocab.tokenize("red red blue blue").unwrap();
        let got = matcher
            .match_answer(&s.vocab, &s.lm, &s.store, &probe)
            .unwrap();
        assert_eq!(got, "blue red");
    }

    #[test]
    fn matcher_agrees_with_a_brute_force_reimplementation() {
        let s = setup();
        let words = ["red", "green", "blue", "yellow", "circle", "square",
            "triangle", "nothing", "zero", "one", "two", "three"];
        let mut rng = rng_for(4, "harness-test", &[3]);
        for case in 0..1000 {
            // Random candidate set of 2..6 distinct single- or two-word
            // strings, and a random generated token sequence.
            let n_cand = rng.gen_range(2..=6);
            let mut candidates: Vec<String> = Vec::new();
            while candidates.len() < n_cand {
                let w = if rng.gen_bool(0.5) {
                    words[rng.gen_range(0..words.len())].to_string()
                } else {
                    format!(
                        "{} {}",
                        words[rng.gen_range(0..words.len())],
                        words[rng.gen_range(0..words.len())]
                    )
                };
                if !candidates.contains(&w) {
                    candidates.push(w);
                }
            }
            let gen_len = rng.gen_range(0..=3);
            let generated: Vec<u32> = (0..gen_len)
                .map(|_| s.vocab.tokenize(words[rng.gen_range(0..words.len())]).unwrap()[0])
                .collect();

            let matcher = Matcher::new(&s.lm, &s.store, &s.vocab, &candidates).unwrap();
            let got = matcher
                .match_answer(&s.vocab, &s.lm, &s.store, &generated)
                .unwrap();

            // Brute force, written independently of the matcher.
            let text = s.vocab.detokenize(&generated).unwrap();
            let mut sorted = candidates.clone();
            sorted.sort();
            let want = if sorted.contains(&text) {
                text
            } else {
                let probe = if generated.is_empty() {
                    mean_embedding(&s.lm, &s.store, &[EOS])
                } else {
                    mean_embedding(&s.lm, &s.store, &generated)
                };
                let mut best: Option<(String, f64)> = None;
                for c in &sorted {
                    let emb =
                        mean_embedding(&s.lm, &s.store, &s.vocab.tokenize(c).unwrap());
                    let sim = cosine(&probe, &emb);
                    match &best {
                        Some((_, b)) if sim <= *b => {}
                        _ => best = Some((c.clone(), sim)),
                    }
                }
                best.unwrap().0
            };
            assert_eq!(got, want, "case {case}");
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_fully_recorded() {
        let s = setup();
        let world = build_splits(
            &WorldConfig {
                n_vl_train: 4,
                n_pool_train: 12,
                n_pool_test: 6,
            },
            41,
        )
        .unwrap();
        let eval_set = &world.evals[0];
        let run = || {
            evaluate(
                &s.lm, &s.fe, &s.store, &s.vocab, eval_set, 2, 5, 43, INDUCTION,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.records.len(), 5);
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.generated, rb.generated);
            assert_eq!(ra.matched, rb.matched);
            assert_eq!(ra.gold, rb.gold);
        }
        let acc = a.records.iter().filter(|r| r.correct).count() as f64 / 5.0;
        assert_eq!(a.accuracy, acc);
        assert!(matches!(
            evaluate(
                &s.lm, &s.fe, &s.store, &s.vocab, eval_set, 2, 7, 43, INDUCTION
            ),
            Err(HarnessError::NotEnoughEvalItems { want: 7, have: 6 })
        ));
    }
}
