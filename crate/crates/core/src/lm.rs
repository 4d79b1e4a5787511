//! Decoder-only transformer with an optional embedding prefix.
//!
//! Pre-LN GPT-2 layout: learned token and absolute positional embeddings,
//! per-block causal self-attention and a gelu MLP on residual connections,
//! a final layer norm, and an untied bias-free output head. The prompt may
//! start with rows of externally produced embedding vectors (the visual
//! prefix); positions are assigned across prefix and tokens alike, so a
//! prefix built from the model's own token-embedding rows is precisely
//! equivalent to feeding those tokens.
//!
//! Two forward paths share the same kernels and accumulate in the same
//! order, so their outputs are bit-identical:
//!
//! - [`Lm::forward_graph`]: whole-prompt logits on the autodiff tape, for
//!   training.
//! - [`Lm::advance`]: one position at a time against a [`KvCache`], for
//!   generation. Prefill is just `advance` in a loop.
//!
//! Residual adaptors ([`Lm::attach_adaptors`]) are small bottleneck MLPs
//! added after each block. Their output projections start at zero, so a
//! freshly adapted model computes exactly what the frozen model computed.

use crate::graph::{Graph, GraphError, Var};
use crate::kernels;
use crate::optim::{ParamId, ParamStore};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LmError {
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    BadHeads { d_model: usize, n_heads: usize },
    #[error("prompt length {len} exceeds context {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("embedding row has width {got}, model width is {want}")]
    BadRow { got: usize, want: usize },
    #[error("adaptors are already attached")]
    AdaptorsAttached,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("parameter registration failed: {0}")]
    Register(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
}

impl LmConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(LmError::BadHeads {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct AdaptorParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct LmParams {
    pub wte: ParamId,
    pub wpe: ParamId,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub head: ParamId,
    pub adaptors: Option<Vec<AdaptorParams>>,
}

pub struct Lm {
    pub cfg: LmConfig,
    pub params: LmParams,
}

const INIT_STD: f64 = 0.02;

impl Lm {
    /// Register freshly initialized parameters under `lm.*` names. Weights
    /// are gaussian (std 0.02), biases zero, norm gains one. The init stream
    /// is derived from `seed` alone, so two builds with the same seed and
    /// config hold bitwise-identical parameters.
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: LmConfig,
        seed: u64,
    ) -> Result<Lm, LmError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let reg = |store: &mut ParamStore<S>,
                   name: String,
                   t: Tensor<S>|
         -> Result<ParamId, LmError> {
            store
                .register(&name, t)
                .map_err(|e| LmError::Register(e.to_string()))
        };
        let mut counter = 0u64;
        let mut randn = |store: &mut ParamStore<S>,
                         name: String,
                         shape: &[usize]|
         -> Result<ParamId, LmError> {
            let mut rng = rng_for(seed, "lm-init", &[counter]);
            counter += 1;
            let t = Tensor::randn(shape, INIT_STD, &mut rng);
            reg(store, name, t)
        };

        let wte = randn(store, "lm.wte".into(), &[cfg.vocab_size, d])?;
        let wpe = randn(store, "lm.wpe".into(), &[cfg.context, d])?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("lm.h{l}.{s}");
            blocks.push(BlockParams {
                ln1_g: reg(store, p("ln1.g"), Tensor::from_vec(&[d], vec![S::ONE; d]).unwrap())?,
                ln1_b: reg(store, p("ln1.b"), Tensor::zeros(&[d]))?,
                wq: randn(store, p("attn.wq"), &[d, d])?,
                bq: reg(store, p("attn.bq"), Tensor::zeros(&[d]))?,
                wk: randn(store, p("attn.wk"), &[d, d])?,
                bk: reg(store, p("attn.bk"), Tensor::zeros(&[d]))?,
                wv: randn(store, p("attn.wv"), &[d, d])?,
                bv: reg(store, p("attn.bv"), Tensor::zeros(&[d]))?,
                wo: randn(store, p("attn.wo"), &[d, d])?,
                bo: reg(store, p("attn.bo"), Tensor::zeros(&[d]))?,
                ln2_g: reg(store, p("ln2.g"), Tensor::from_vec(&[d], vec![S::ONE; d]).unwrap())?,
                ln2_b: reg(store, p("ln2.b"), Tensor::zeros(&[d]))?,
                w1: randn(store, p("mlp.w1"), &[d, 4 * d])?,
                b1: reg(store, p("mlp.b1"), Tensor::zeros(&[4 * d]))?,
                w2: randn(store, p("mlp.w2"), &[4 * d, d])?,
                b2: reg(store, p("mlp.b2"), Tensor::zeros(&[d]))?,
            });
        }
        let lnf_g = reg(
            store,
            "lm.lnf.g".into(),
            Tensor::from_vec(&[d], vec![S::ONE; d]).unwrap(),
        )?;
        let lnf_b = reg(store, "lm.lnf.b".into(), Tensor::zeros(&[d]))?;
        let head = randn(store, "lm.head".into(), &[cfg.vocab_size, d])?;

        Ok(Lm {
            cfg,
            params: LmParams {
                wte,
                wpe,
                blocks,
                lnf_g,
                lnf_b,
                head,
                adaptors: None,
            },
        })
    }

    /// Add one bottleneck adaptor (width d/4) after each block, named
    /// `adaptor.*`. The output projection and bias start at zero, so logits
    /// immediately after attachment are bit-identical to the bare model.
    pub fn attach_adaptors<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        seed: u64,
    ) -> Result<(), LmError> {
        if self.params.adaptors.is_some() {
            return Err(LmError::AdaptorsAttached);
        }
        let d = self.cfg.d_model;
        let bottleneck = (d / 4).max(1);
        let mut adaptors = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let p = |s: &str| format!("adaptor.h{l}.{s}");
            let mut rng = rng_for(seed, "adaptor-init", &[l as u64]);
            let w1 = store
                .register(&p("w1"), Tensor::randn(&[d, bottleneck], INIT_STD, &mut rng))
                .map_err(|e| LmError::Register(e.to_string()))?;
            let b1 = store
                .register(&p("b1"), Tensor::zeros(&[bottleneck]))
                .map_err(|e| LmError::Register(e.to_string()))?;
            let w2 = store
                .register(&p("w2"), Tensor::zeros(&[bottleneck, d]))
                .map_err(|e| LmError::Register(e.to_string()))?;
            let b2 = store
                .register(&p("b2"), Tensor::zeros(&[d]))
                .map_err(|e| LmError::Register(e.to_string()))?;
            adaptors.push(AdaptorParams { w1, b1, w2, b2 });
        }
        self.params.adaptors = Some(adaptors);
        Ok(())
    }

    /// Ids of the language-model parameters proper (everything but adaptors).
    pub fn lm_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.params.wte, self.params.wpe];
        for b in &self.params.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g,
                b.ln2_b, b.w1, b.b1, b.w2, b.b2,
            ]);
        }
        ids.extend([self.params.lnf_g, self.params.lnf_b, self.params.head]);
        ids
    }

    pub fn adaptor_param_ids(&self) -> Vec<ParamId> {
        match &self.params.adaptors {
            Some(ads) => ads
                .iter()
                .flat_map(|a| [a.w1, a.b1, a.w2, a.b2])
                .collect(),
            None => Vec::new(),
        }
    }

    /// Logits `[prefix_rows + tokens, vocab]` on the tape. `prefix`, when
    /// present, must be a `[n, d_model]` node of this same graph; gradients
    /// flow through it into whatever produced it.
    pub fn forward_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        prefix: Option<Var>,
        tokens: &[u32],
    ) -> Result<Var, LmError> {
        let d = self.cfg.d_model;
        let n_prefix = match prefix {
            Some(p) => {
                let shape = g.value(p).shape();
                if shape.len() != 2 || shape[1] != d {
                    return Err(LmError::BadRow {
                        got: shape.last().copied().unwrap_or(0),
                        want: d,
                    });
                }
                shape[0]
            }
            None => 0,
        };
        let total = n_prefix + tokens.len();
        if total == 0 {
            return Err(LmError::EmptyPrompt);
        }
        if total > self.cfg.context {
            return Err(LmError::ContextOverflow {
                len: total,
                context: self.cfg.context,
            });
        }

        let wte = g.param(store, self.params.wte);
        let embs = if tokens.is_empty() {
            prefix.expect("total > 0")
        } else {
            let tok = g.gather(wte, tokens)?;
            match prefix {
                Some(p) => g.concat_rows(&[p, tok])?,
                None => tok,
            }
        };
        let wpe = g.param(store, self.params.wpe);
        let pos = g.slice_rows(wpe, 0, total)?;
        let mut x = g.add(embs, pos)?;

        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let dh = self.cfg.head_dim();
        let adaptors = self.params.adaptors.as_ref();
        for (l, blk) in self.params.blocks.iter().enumerate() {
            let ln1_g = g.param(store, blk.ln1_g);
            let ln1_b = g.param(store, blk.ln1_b);
            let ln1 = g.layer_norm(x, ln1_g, ln1_b)?;
            let proj = |g: &mut Graph<S>, w, b| -> Result<Var, LmError> {
                let wv = g.param(store, w);
                let bv = g.param(store, b);
                let y = g.matmul(ln1, wv)?;
                Ok(g.add_row(y, bv)?)
            };
            let q = proj(g, blk.wq, blk.bq)?;
            let k = proj(g, blk.wk, blk.bk)?;
            let v = proj(g, blk.wv, blk.bv)?;
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for h in 0..self.cfg.n_heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale);
                let probs = g.causal_softmax(scores)?;
                heads.push(g.matmul(probs, vh)?);
            }
            let ctx = g.concat_cols(&heads)?;
            let wo = g.param(store, blk.wo);
            let bo = g.param(store, blk.bo);
            let attn = g.matmul(ctx, wo)?;
            let attn = g.add_row(attn, bo)?;
            x = g.add(x, attn)?;

            let ln2_g = g.param(store, blk.ln2_g);
            let ln2_b = g.param(store, blk.ln2_b);
            let ln2 = g.layer_norm(x, ln2_g, ln2_b)?;
            let w1 = g.param(store, blk.w1);
            let b1 = g.param(store, blk.b1);
            let h1 = g.matmul(ln2, w1)?;
            let h1 = g.add_row(h1, b1)?;
            let h1 = g.gelu(h1);
            let w2 = g.param(store, blk.w2);
            let b2 = g.param(store, blk.b2);
            let mlp = g.matmul(h1, w2)?;
            let mlp = g.add_row(mlp, b2)?;
            x = g.add(x, mlp)?;

            if let Some(ads) = adaptors {
                let ad = &ads[l];
                let w1 = g.param(store, ad.w1);
                let b1 = g.param(store, ad.b1);
                let a1 = g.matmul(x, w1)?;
                let a1 = g.add_row(a1, b1)?;
                let a1 = g.gelu(a1);
                let w2 = g.param(store, ad.w2);
                let b2 = g.param(store, ad.b2);
                let a2 = g.matmul(a1, w2)?;
                let a2 = g.add_row(a2, b2)?;
                x = g.add(x, a2)?;
            }
        }

        let lnf_g = g.param(store, self.params.lnf_g);
        let lnf_b = g.param(store, self.params.lnf_b);
        let xf = g.layer_norm(x, lnf_g, lnf_b)?;
        let head = g.param(store, self.params.head);
        Ok(g.matmul_nt(xf, head)?)
    }

    pub fn new_cache<S: Scalar>(&self) -> KvCache<S> {
        KvCache {
            k: vec![Vec::new(); self.cfg.n_layers],
            v: vec![Vec::new(); self.cfg.n_layers],
            len: 0,
        }
    }

    /// Input row for a token at a position: wte[tok] + wpe[pos].
    pub fn infer_embed_token<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        tok: u32,
        pos: usize,
    ) -> Result<Vec<S>, LmError> {
        if pos >= self.cfg.context {
            return Err(LmError::ContextOverflow {
                len: pos + 1,
                context: self.cfg.context,
            });
        }
        let wte = store.value(self.params.wte);
        let wpe = store.value(self.params.wpe);
        Ok(wte
            .row(tok as usize)
            .iter()
            .zip(wpe.row(pos))
            .map(|(&e, &p)| e.add(p))
            .collect())
    }

    /// Input row for an external embedding vector at a position.
    pub fn infer_embed_vector<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        vec_row: &[S],
        pos: usize,
    ) -> Result<Vec<S>, LmError> {
        if vec_row.len() != self.cfg.d_model {
            return Err(LmError::BadRow {
                got: vec_row.len(),
                want: self.cfg.d_model,
            });
        }
        if pos >= self.cfg.context {
            return Err(LmError::ContextOverflow {
                len: pos + 1,
                context: self.cfg.context,
            });
        }
        let wpe = store.value(self.params.wpe);
        Ok(vec_row
            .iter()
            .zip(wpe.row(pos))
            .map(|(&e, &p)| e.add(p))
            .collect())
    }

    /// Feed one input row, append its keys/values to the cache, and return
    /// the logits at this position. Bitwise identical to the corresponding
    /// row of [`Lm::forward_graph`].
    pub fn advance<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &mut KvCache<S>,
        row: &[S],
    ) -> Result<Vec<S>, LmError> {
        let d = self.cfg.d_model;
        if row.len() != d {
            return Err(LmError::BadRow {
                got: row.len(),
                want: d,
            });
        }
        let pos = cache.len;
        if pos >= self.cfg.context {
            return Err(LmError::ContextOverflow {
                len: pos + 1,
                context: self.cfg.context,
            });
        }
        let dh = self.cfg.head_dim();
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let mut x = row.to_vec();
        let mut ln = vec![S::ZERO; d];
        let t = pos + 1;
        for (l, blk) in self.params.blocks.iter().enumerate() {
            kernels::layer_norm_row(
                &x,
                store.value(blk.ln1_g).data(),
                store.value(blk.ln1_b).data(),
                kernels::LAYER_NORM_EPS,
                &mut ln,
            );
            let q = linear_row(store, &ln, blk.wq, blk.bq);
            let k_new = linear_row(store, &ln, blk.wk, blk.bk);
            let v_new = linear_row(store, &ln, blk.wv, blk.bv);
            cache.k[l].extend_from_slice(&k_new);
            cache.v[l].extend_from_slice(&v_new);

            let mut ctx = vec![S::ZERO; d];
            let mut srow = vec![S::ZERO; t];
            for h in 0..self.cfg.n_heads {
                let off = h * dh;
                let qh = &q[off..off + dh];
                for (j, s) in srow.iter_mut().enumerate() {
                    let kh = &cache.k[l][j * d + off..j * d + off + dh];
                    *s = kernels::dot(qh, kh).mul(scale);
                }
                kernels::softmax_prefix(&mut srow, t);
                for (j, &p) in srow.iter().enumerate() {
                    let vh = &cache.v[l][j * d + off..j * d + off + dh];
                    kernels::axpy(p, vh, &mut ctx[off..off + dh]);
                }
            }
            let attn = linear_row(store, &ctx, blk.wo, blk.bo);
            for (xi, ai) in x.iter_mut().zip(attn.iter()) {
                *xi = xi.add(*ai);
            }

            kernels::layer_norm_row(
                &x,
                store.value(blk.ln2_g).data(),
                store.value(blk.ln2_b).data(),
                kernels::LAYER_NORM_EPS,
                &mut ln,
            );
            let mut h1 = linear_row(store, &ln, blk.w1, blk.b1);
            for v in h1.iter_mut() {
                *v = kernels::gelu(*v);
            }
            let mlp = linear_row(store, &h1, blk.w2, blk.b2);
            for (xi, mi) in x.iter_mut().zip(mlp.iter()) {
                *xi = xi.add(*mi);
            }

            if let Some(ads) = &self.params.adaptors {
                let ad = &ads[l];
                let mut a1 = linear_row(store, &x, ad.w1, ad.b1);
                for v in a1.iter_mut() {
                    *v = kernels::gelu(*v);
                }
                let a2 = linear_row(store, &a1, ad.w2, ad.b2);
                for (xi, ai) in x.iter_mut().zip(a2.iter()) {
                    *xi = xi.add(*ai);
                }
            }
        }
        cache.len = t;

        kernels::layer_norm_row(
            &x,
            store.value(self.params.lnf_g).data(),
            store.value(self.params.lnf_b).data(),
            kernels::LAYER_NORM_EPS,
            &mut ln,
        );
        let head = store.value(self.params.head);
        let vsize = self.cfg.vocab_size;
        let mut logits = vec![S::ZERO; vsize];
        kernels::matmul_nt_acc(&ln, head.data(), &mut logits, 1, d, vsize);
        Ok(logits)
    }

    /// Greedy continuation from the logits of the last prompt position.
    /// Stop tokens end generation and are not included in the output.
    pub fn greedy_decode<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &mut KvCache<S>,
        last_logits: Vec<S>,
        max_new: usize,
        stop: &[u32],
    ) -> Result<Vec<u32>, LmError> {
        let mut out = Vec::new();
        let mut logits = last_logits;
        for i in 0..max_new {
            let tok = kernels::argmax(&logits) as u32;
            if stop.contains(&tok) {
                break;
            }
            out.push(tok);
            if i + 1 == max_new {
                break;
            }
            let row = self.infer_embed_token(store, tok, cache.len)?;
            logits = self.advance(store, cache, &row)?;
        }
        Ok(out)
    }

    /// Total parameter count implied by the config (adaptors excluded).
    pub fn n_params(cfg: &LmConfig) -> usize {
        let d = cfg.d_model;
        let per_block = 2 * d + 4 * (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        2 * cfg.vocab_size * d + cfg.context * d + cfg.n_layers * per_block + 2 * d
    }
}

/// One-row dense layer: x·W + b, reusing the batched matmul kernel with m=1
/// so the summation order matches the graph path exactly.
fn linear_row<S: Scalar>(store: &ParamStore<S>, x: &[S], w: ParamId, b: ParamId) -> Vec<S> {
    let wt = store.value(w);
    let (k, n) = (wt.rows(), wt.cols());
    debug_assert_eq!(x.len(), k);
    let mut out = vec![S::ZERO; n];
    kernels::matmul_acc(x, wt.data(), &mut out, 1, k, n);
    for (o, &bb) in out.iter_mut().zip(store.value(b).data()) {
        *o = o.add(bb);
    }
    out
}

pub struct KvCache<S> {
    k: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    len: usize,
}

impl<S> KvCache<S> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
