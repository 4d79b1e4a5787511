//! Vision-language training: captioning against a frozen language model.
//!
//! A caption prompt lays out `[n visual rows][caption tokens][<eos>]`. Only
//! text positions are supervised; gradients flow through the frozen LM into
//! the visual prefix and encoder (and, in the adaptor variant, into the
//! bottleneck adaptors), never into the base LM weights. The function
//! audits that invariant bitwise on every run.
//!
//! The data-fraction ablation trains on a deterministic prefix of the
//! seeded shuffle of the caption list, and the loop reports how many
//! distinct examples it actually consumed so ablation runs can be audited.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::frontend::{Frontend, FrontendError};
use crate::graph::{Graph, GraphError};
use crate::lm::{Lm, LmError};
use crate::meta::TokenPrompt;
use crate::optim::{Adam, OptimError, ParamGroup, ParamStore};
use crate::rng::rng_for;
use crate::scenes::{self, SceneError, SceneSpec};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{Vocab, VocabError, EOS, PAD};

#[derive(Debug, Error)]
pub enum VlError {
    #[error("loss diverged to {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("prompt of {len} positions exceeds the model context {context}")]
    PromptTooLong { len: usize, context: usize },
    #[error("frozen parameter {name} changed during vision-language training")]
    FrozenDrift { name: String },
    #[error("data fraction {0} is outside (0, 1]")]
    BadFraction(f64),
    #[error("caption list is empty after applying the data fraction")]
    EmptyData,
    #[error("config wants adaptors={expected} but the model has adaptors={attached}")]
    AdaptorMismatch { expected: bool, attached: bool },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// A prompt whose first `visual.rows()` positions are embedding vectors
/// rather than tokens. The mask spans the full sequence and is false at
/// every visual position by construction.
#[derive(Debug, Clone)]
pub struct MultimodalPrompt<S> {
    pub visual: Tensor<S>,
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

impl<S: Scalar> MultimodalPrompt<S> {
    pub fn new(visual: Tensor<S>, text: TokenPrompt) -> MultimodalPrompt<S> {
        let n = visual.rows();
        let mut mask = vec![false; n];
        mask.extend(&text.mask);
        MultimodalPrompt {
            visual,
            tokens: text.tokens,
            mask,
        }
    }

    pub fn total_len(&self) -> usize {
        self.visual.rows() + self.tokens.len()
    }
}

/// Text part of a caption prompt: caption words then `<eos>`, all
/// supervised.
pub fn caption_text(vocab: &Vocab, caption: &str) -> Result<TokenPrompt, VlError> {
    let mut tokens = vocab.tokenize(caption)?;
    tokens.push(EOS);
    let mask = vec![true; tokens.len()];
    Ok(TokenPrompt { tokens, mask })
}

/// Caption prompt from already-computed visual rows.
pub fn build_caption_prompt<S: Scalar>(
    visual: Tensor<S>,
    vocab: &Vocab,
    caption: &str,
) -> Result<MultimodalPrompt<S>, VlError> {
    Ok(MultimodalPrompt::new(visual, caption_text(vocab, caption)?))
}

/// Next-token supervision for a multimodal prompt: logits row `i` is graded
/// against the sequence position `i + 1`, which is a text token only when
/// `i + 1 >= n_visual`. Rows predicting visual positions are never
/// supervised.
pub fn shifted_vl_targets(n_visual: usize, text: &TokenPrompt) -> (Vec<u32>, Vec<bool>) {
    let total = n_visual + text.tokens.len();
    let mut targets = vec![PAD; total];
    let mut mask = vec![false; total];
    for i in 0..total.saturating_sub(1) {
        let next = i + 1;
        if next >= n_visual {
            targets[i] = text.tokens[next - n_visual];
            mask[i] = text.mask[next - n_visual];
        }
    }
    (targets, mask)
}

#[derive(Debug, Clone)]
pub struct VlTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_prefix: f64,
    pub lr_encoder: f64,
    pub lr_adaptor: f64,
    /// Fraction of the caption list to train on, in (0, 1].
    pub data_fraction: f64,
    pub with_adaptors: bool,
}

/// Optimizer groups for the VL stage: prefix and encoder train with their
/// own learning rates, the base LM is a frozen group, and adaptors (when
/// attached) form a fourth trainable group.
pub fn build_vl_optimizer<S: Scalar>(
    lm: &Lm,
    frontend: &Frontend,
    cfg: &VlTrainConfig,
) -> Result<Adam<S>, VlError> {
    let attached = !lm.adaptor_param_ids().is_empty();
    if attached != cfg.with_adaptors {
        return Err(VlError::AdaptorMismatch {
            expected: cfg.with_adaptors,
            attached,
        });
    }
    let mut groups = vec![
        ParamGroup {
            name: "vision.prefix".into(),
            lr: cfg.lr_prefix,
            frozen: false,
            params: frontend.prefix_param_ids(),
        },
        ParamGroup {
            name: "vision.encoder".into(),
            lr: cfg.lr_encoder,
            frozen: false,
            params: frontend.encoder_param_ids(),
        },
        ParamGroup {
            name: "lm.base".into(),
            lr: 0.0,
            frozen: true,
            params: lm.lm_param_ids(),
        },
    ];
    if cfg.with_adaptors {
        groups.push(ParamGroup {
            name: "lm.adaptors".into(),
            lr: cfg.lr_adaptor,
            frozen: false,
            params: lm.adaptor_param_ids(),
        });
    }
    Ok(Adam::new(groups)?)
}

/// The deterministic example order for a run: a seeded shuffle of the full
/// caption list truncated to the fraction prefix.
pub fn data_order(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, VlError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(VlError::BadFraction(fraction));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "vl-data", &[]));
    let keep = ((n as f64) * fraction).floor() as usize;
    order.truncate(keep);
    if order.is_empty() {
        return Err(VlError::EmptyData);
    }
    Ok(order)
}

#[derive(Debug, Default)]
pub struct VlOutcome {
    pub losses: Vec<f64>,
    /// Indices of the distinct caption examples consumed over the executed
    /// steps. A set rather than a count so callers that split a run into
    /// resumable step ranges can union the chunks before auditing.
    pub consumed: BTreeSet<usize>,
}

impl VlOutcome {
    pub fn distinct_consumed(&self) -> usize {
        self.consumed.len()
    }
}

/// Train the visual side against the (frozen) language model for steps
/// `steps.start..steps.end`. Step numbering is global and every draw is a
/// pure function of `(seed, step, slot)`, so interrupted runs resume bit
/// exactly.
pub fn vl_train<S: Scalar>(
    lm: &Lm,
    frontend: &Frontend,
    store: &mut ParamStore<S>,
    opt: &mut Adam<S>,
    vocab: &Vocab,
    data: &[(SceneSpec, String)],
    cfg: &VlTrainConfig,
    seed: u64,
    steps: Range<usize>,
) -> Result<VlOutcome, VlError> {
    let attached = !lm.adaptor_param_ids().is_empty();
    if attached != cfg.with_adaptors {
        return Err(VlError::AdaptorMismatch {
            expected: cfg.with_adaptors,
            attached,
        });
    }
    // The base LM is data, not a trainee: marking it grad-free both keeps
    // backward from computing dead gradients and guarantees no update path.
    for id in lm.lm_param_ids() {
        store.set_requires_grad(id, false);
    }
    let frozen_before: Vec<_> = lm
        .lm_param_ids()
        .into_iter()
        .map(|id| (id, store.value(id).clone()))
        .collect();

    let order = data_order(data.len(), cfg.data_fraction, seed)?;
    let text: Vec<TokenPrompt> = data
        .iter()
        .map(|(_, caption)| caption_text(vocab, caption))
        .collect::<Result<_, _>>()?;
    let n_visual = frontend.cfg.n_patches();

    let mut outcome = VlOutcome::default();
    for step in steps {
        let mut batch_loss = 0.0;
        for slot in 0..cfg.batch {
            let idx = order[(step * cfg.batch + slot) % order.len()];
            outcome.consumed.insert(idx);
            let (scene, _) = &data[idx];
            let prompt = &text[idx];
            let total = n_visual + prompt.tokens.len();
            if total > lm.cfg.context {
                return Err(VlError::PromptTooLong {
                    len: total,
                    context: lm.cfg.context,
                });
            }
            let image: Tensor<S> = scenes::render(scene)?;
            let mut g: Graph<S> = Graph::new();
            let prefix = frontend.forward_graph(&mut g, store, &image)?;
            let logits = lm.forward_graph(&mut g, store, Some(prefix), &prompt.tokens)?;
            let (targets, mask) = shifted_vl_targets(n_visual, prompt);
            let loss = g.masked_xent(logits, &targets, &mask)?;
            g.backward(loss)?;
            g.apply_leaf_grads(store);
            batch_loss += g.value(loss).scalar_value().to_f64();
        }
        let mean = batch_loss / cfg.batch as f64;
        if !mean.is_finite() {
            return Err(VlError::Diverged { step, loss: mean });
        }
        store.scale_grads(1.0 / cfg.batch as f64);
        opt.step(store)?;
        outcome.losses.push(mean);
    }

    for (id, before) in frozen_before {
        if !store.value(id).bit_eq(&before) {
            return Err(VlError::FrozenDrift {
                name: store.name(id).to_string(),
            });
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FrontendConfig;
    use crate::lm::LmConfig;
    use crate::scenes::sample_scene;
    use crate::tasks;
    use crate::vocab;

    fn world_vocab() -> Vocab {
        let mut words = tasks::vocab_words();
        words.extend(scenes::vocab_words());
        Vocab::build(&words)
    }

    struct Setup {
        store: ParamStore<f64>,
        lm: Lm,
        fe: Frontend,
        vocab: Vocab,
        data: Vec<(SceneSpec, String)>,
    }

    fn setup(with_adaptors: bool, n_data: usize) -> Setup {
        let vocab = world_vocab();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut lm = Lm::register(
            &mut store,
            LmConfig {
                vocab_size: vocab.len(),
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                context: 128,
            },
            3,
        )
        .unwrap();
        if with_adaptors {
            lm.attach_adaptors(&mut store, 4).unwrap();
        }
        let fe = Frontend::register(
            &mut store,
            FrontendConfig {
                img: 32,
                channels: 3,
                patch: 8,
                d_vision: 12,
                d_lm: 16,
            },
            5,
        )
        .unwrap();
        let mut rng = rng_for(7, "vl-test", &[0]);
        let data: Vec<(SceneSpec, String)> = (0..n_data)
            .map(|_| {
                let s = sample_scene(&mut rng);
                let c = scenes::caption(&s);
                (s, c)
            })
            .collect();
        Setup {
            store,
            lm,
            fe,
            vocab,
            data,
        }
    }

    fn toy_cfg(with_adaptors: bool) -> VlTrainConfig {
        VlTrainConfig {
            steps: 3,
            batch: 2,
            lr_prefix: 2e-3,
            lr_encoder: 1e-3,
            lr_adaptor: 1e-3,
            data_fraction: 1.0,
            with_adaptors,
        }
    }

    #[test]
    fn caption_prompt_mask_is_false_at_every_visual_position() {
        let s = setup(false, 1);
        let mut rng = rng_for(8, "vl-test", &[1]);
        for _ in 0..20 {
            let scene = sample_scene(&mut rng);
            let img: Tensor<f64> = scenes::render(&scene).unwrap();
            let visual = s.fe.infer(&s.store, &img).unwrap();
            let p = build_caption_prompt(visual, &s.vocab, &scenes::caption(&scene)).unwrap();
            let n = p.visual.rows();
            assert_eq!(p.mask.len(), p.total_len());
            assert!(p.mask[..n].iter().all(|&m| !m), "visual positions masked in");
            assert!(p.mask[n..].iter().all(|&m| m), "text positions supervised");
            assert_eq!(*p.tokens.last().unwrap(), EOS);
        }
    }

    #[test]
    fn gradient_is_zero_at_rows_predicting_visual_positions() {
        let s = setup(false, 1);
        let (scene, caption) = &s.data[0];
        let image: Tensor<f64> = scenes::render(scene).unwrap();
        let text = caption_text(&s.vocab, caption).unwrap();
        let n = s.fe.cfg.n_patches();

        let mut g: Graph<f64> = Graph::new();
        let prefix = s.fe.forward_graph(&mut g, &s.store, &image).unwrap();
        let logits = s
            .lm
            .forward_graph(&mut g, &s.store, Some(prefix), &text.tokens)
            .unwrap();
        let (targets, mask) = shifted_vl_targets(n, &text);
        let loss = g.masked_xent(logits, &targets, &mask).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        let total = n + text.tokens.len();
        for i in 0..total {
            let row_zero = grad.row(i).iter().all(|&x| x == 0.0);
            // Supervised rows are exactly those predicting a text position:
            // n-1 (predicts the first caption token) through total-2
            // (predicts <eos>). Every row predicting a visual position and
            // the final row carry an exactly zero gradient.
            let supervised = (n - 1..total - 1).contains(&i);
            assert_eq!(row_zero, !supervised, "row {i}");
        }
    }

    #[test]
    fn optimizer_groups_carry_distinct_learning_rates() {
        let s = setup(false, 1);
        let cfg = toy_cfg(false);
        let opt = build_vl_optimizer::<f64>(&s.lm, &s.fe, &cfg).unwrap();
        let lr_of = |name: &str| {
            opt.groups()
                .iter()
                .find(|g| g.name == name)
                .map(|g| (g.lr, g.frozen))
                .unwrap()
        };
        assert_eq!(lr_of("vision.prefix"), (2e-3, false));
        assert_eq!(lr_of("vision.encoder"), (1e-3, false));
        assert_ne!(lr_of("vision.prefix").0, lr_of("vision.encoder").0);
        assert_eq!(lr_of("lm.base").1, true);
        assert!(opt.groups().iter().all(|g| g.name != "lm.adaptors"));
    }

    #[test]
    fn adaptor_mismatch_is_rejected_both_ways() {
        let s = setup(false, 1);
        let cfg = toy_cfg(true);
        assert!(matches!(
            build_vl_optimizer::<f64>(&s.lm, &s.fe, &cfg),
            Err(VlError::AdaptorMismatch { .. })
        ));
        let s = setup(true, 1);
        let cfg = toy_cfg(false);
        assert!(matches!(
            build_vl_optimizer::<f64>(&s.lm, &s.fe, &cfg),
            Err(VlError::AdaptorMismatch { .. })
        ));
    }

    #[test]
    fn training_leaves_the_base_lm_bitwise_unchanged() {
        let mut s = setup(false, 6);
        let cfg = toy_cfg(false);
        let mut opt = build_vl_optimizer(&s.lm, &s.fe, &cfg).unwrap();
        let before: Vec<_> = s
            .lm
            .lm_param_ids()
            .into_iter()
            .map(|id| s.store.value(id).clone())
            .collect();
        let prefix_before = s.store.value(s.fe.params.pre_w2).clone();

        let out = vl_train(
            &s.lm, &s.fe, &mut s.store, &mut opt, &s.vocab, &s.data, &cfg, 11, 0..3,
        )
        .unwrap();
        assert_eq!(out.losses.len(), 3);
        assert!(out.losses.iter().all(|l| l.is_finite()));

        for (id, want) in s.lm.lm_param_ids().into_iter().zip(before) {
            assert!(s.store.value(id).bit_eq(&want), "{}", s.store.name(id));
        }
        assert!(
            !s.store.value(s.fe.params.pre_w2).bit_eq(&prefix_before),
            "prefix must actually train"
        );
    }

    #[test]
    fn adaptor_variant_trains_adaptors_but_not_the_base() {
        let mut s = setup(true, 6);
        let cfg = toy_cfg(true);
        let mut opt = build_vl_optimizer(&s.lm, &s.fe, &cfg).unwrap();
        let base_before: Vec<_> = s
            .lm
            .lm_param_ids()
            .into_iter()
            .map(|id| s.store.value(id).clone())
            .collect();
        let adaptor_ids = s.lm.adaptor_param_ids();
        let adaptor_before: Vec<_> = adaptor_ids
            .iter()
            .map(|&id| s.store.value(id).clone())
            .collect();

        vl_train(
            &s.lm, &s.fe, &mut s.store, &mut opt, &s.vocab, &s.data, &cfg, 12, 0..3,
        )
        .unwrap();

        for (id, want) in s.lm.lm_param_ids().into_iter().zip(base_before) {
            assert!(s.store.value(id).bit_eq(&want), "{}", s.store.name(id));
        }
        let moved = adaptor_ids
            .iter()
            .zip(adaptor_before)
            .any(|(&id, before)| !s.store.value(id).bit_eq(&before));
        assert!(moved, "adaptors must train in the adaptor variant");
    }

    #[test]
    fn data_fraction_consumes_exactly_the_floor_prefix() {
        for (n, fraction, want) in [(10, 0.5, 5), (11, 0.5, 5), (10, 1.0, 10)] {
            let mut s = setup(false, n);
            let cfg = VlTrainConfig {
                steps: 8,
                batch: 2,
                data_fraction: fraction,
                ..toy_cfg(false)
            };
            let mut opt = build_vl_optimizer(&s.lm, &s.fe, &cfg).unwrap();
            let out = vl_train(
                &s.lm, &s.fe, &mut s.store, &mut opt, &s.vocab, &s.data, &cfg, 13, 0..8,
            )
            .unwrap();
            assert_eq!(out.distinct_consumed(), want, "n={n} fraction={fraction}");
        }
        assert!(matches!(
            data_order(10, 0.0, 1),
            Err(VlError::BadFraction(_))
        ));
        assert!(matches!(data_order(10, 1.5, 1), Err(VlError::BadFraction(_))));
    }

    #[test]
    fn interrupted_vl_training_resumes_bit_exactly() {
        let cfg = VlTrainConfig {
            steps: 4,
            ..toy_cfg(false)
        };

        let mut a = setup(false, 5);
        let mut opt_a = build_vl_optimizer(&a.lm, &a.fe, &cfg).unwrap();
        vl_train(
            &a.lm, &a.fe, &mut a.store, &mut opt_a, &a.vocab, &a.data, &cfg, 17, 0..4,
        )
        .unwrap();

        let mut b = setup(false, 5);
        let mut opt_b = build_vl_optimizer(&b.lm, &b.fe, &cfg).unwrap();
        vl_train(
            &b.lm, &b.fe, &mut b.store, &mut opt_b, &b.vocab, &b.data, &cfg, 17, 0..2,
        )
        .unwrap();
        let ckpt =
            crate::checkpoint::Checkpoint::capture(&b.store, Some(&opt_b), "vl-resume", 2);

        let mut c = setup(false, 5);
        let mut opt_c = build_vl_optimizer(&c.lm, &c.fe, &cfg).unwrap();
        ckpt.apply(&mut c.store).unwrap();
        ckpt.apply_moments(&c.store, &mut opt_c).unwrap();
        vl_train(
            &c.lm, &c.fe, &mut c.store, &mut opt_c, &c.vocab, &c.data, &cfg, 17, 2..4,
        )
        .unwrap();

        for id in a.store.ids() {
            let name = a.store.name(id).to_string();
            let cid = c.store.find(&name).unwrap();
            assert!(
                a.store.value(id).bit_eq(c.store.value(cid)),
                "parameter {name} drifted across resume"
            );
        }
    }

    #[test]
    fn vocabulary_covers_captions_and_questions() {
        let v = world_vocab();
        let mut rng = rng_for(19, "vl-test", &[2]);
        for _ in 0..50 {
            let scene = sample_scene(&mut rng);
            v.tokenize(&scenes::caption(&scene)).unwrap();
        }
        for d in scenes::DatasetId::ALL {
            for _ in 0..50 {
                let item = scenes::generate_qa(d, &mut rng).unwrap();
                v.tokenize(&item.question).unwrap();
                v.tokenize(&item.answer).unwrap();
            }
        }
        // Specials stay reserved: ordinary ids start after them.
        assert_eq!(v.ordinary_ids().start, vocab::SPECIAL_NAMES.len() as u32);
    }
}
