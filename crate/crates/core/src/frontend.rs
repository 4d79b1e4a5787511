//! Visual frontend: a per-patch encoder and the learned prefix mapper that
//! turns encoder rows into language-model input vectors.
//!
//! The image is cut into non-overlapping square patches in row-major order
//! and every patch goes through the same small MLP independently, so there
//! is no cross-patch mixing: permuting patches permutes output rows and
//! nothing else. The prefix mapper is a row-wise two-layer MLP from encoder
//! space into the language model's embedding space.
//!
//! Training builds both through the autodiff graph; evaluation uses a
//! kernel-level path that reproduces the graph values bit for bit.

use thiserror::Error;

use crate::graph::{Graph, GraphError, Var};
use crate::kernels;
use crate::optim::{ParamId, ParamStore};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("image shape {got:?} does not match [{channels}, {img}, {img}]")]
    BadImage {
        got: Vec<usize>,
        channels: usize,
        img: usize,
    },
    #[error("bad frontend config: {0}")]
    BadConfig(String),
    #[error("parameter registration failed: {0}")]
    Register(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy)]
pub struct FrontendConfig {
    /// Image side length in pixels.
    pub img: usize,
    pub channels: usize,
    /// Patch side length; must tile the image exactly.
    pub patch: usize,
    /// Encoder output width per patch.
    pub d_vision: usize,
    /// Language-model embedding width the prefix maps into.
    pub d_lm: usize,
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<(), FrontendError> {
        if self.patch == 0 || self.img % self.patch != 0 {
            return Err(FrontendError::BadConfig(format!(
                "patch {} does not tile image side {}",
                self.patch, self.img
            )));
        }
        if self.channels == 0 || self.d_vision == 0 || self.d_lm == 0 {
            return Err(FrontendError::BadConfig("zero-width layer".into()));
        }
        Ok(())
    }

    /// Patches per image.
    pub fn n_patches(&self) -> usize {
        let side = self.img / self.patch;
        side * side
    }

    /// Flattened pixel count per patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

#[derive(Debug, Clone)]
pub struct FrontendParams {
    pub enc_w0: ParamId,
    pub enc_b0: ParamId,
    pub enc_w1: ParamId,
    pub enc_b1: ParamId,
    pub pre_w1: ParamId,
    pub pre_b1: ParamId,
    pub pre_w2: ParamId,
    pub pre_b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Frontend {
    pub cfg: FrontendConfig,
    pub params: FrontendParams,
}

impl Frontend {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: FrontendConfig,
        seed: u64,
    ) -> Result<Frontend, FrontendError> {
        cfg.validate()?;
        let mut counter = 0u64;
        let mut reg = |store: &mut ParamStore<S>,
                       name: &str,
                       shape: &[usize],
                       random: bool|
         -> Result<ParamId, FrontendError> {
            let t = if random {
                counter += 1;
                Tensor::randn(
                    shape,
                    INIT_STD,
                    &mut rng_for(seed, "frontend-init", &[counter]),
                )
            } else {
                Tensor::zeros(shape)
            };
            store
                .register(name, t)
                .map_err(|e| FrontendError::Register(e.to_string()))
        };
        let (pd, dv, dl) = (cfg.patch_dim(), cfg.d_vision, cfg.d_lm);
        let params = FrontendParams {
            enc_w0: reg(store, "vision.enc.w0", &[pd, dv], true)?,
            enc_b0: reg(store, "vision.enc.b0", &[dv], false)?,
            enc_w1: reg(store, "vision.enc.w1", &[dv, dv], true)?,
            enc_b1: reg(store, "vision.enc.b1", &[dv], false)?,
            pre_w1: reg(store, "vision.prefix.w1", &[dv, dv], true)?,
            pre_b1: reg(store, "vision.prefix.b1", &[dv], false)?,
            // Zero-initialized final projection: at step 0 every prefix row
            // is the zero vector, so the frozen LM starts from its
            // unconditional text distribution instead of being driven by
            // random out-of-distribution embeddings.
            pre_w2: reg(store, "vision.prefix.w2", &[dv, dl], false)?,
            pre_b2: reg(store, "vision.prefix.b2", &[dl], false)?,
        };
        Ok(Frontend { cfg, params })
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        vec![
            self.params.enc_w0,
            self.params.enc_b0,
            self.params.enc_w1,
            self.params.enc_b1,
        ]
    }

    pub fn prefix_param_ids(&self) -> Vec<ParamId> {
        vec![
            self.params.pre_w1,
            self.params.pre_b1,
            self.params.pre_w2,
            self.params.pre_b2,
        ]
    }

    /// Flatten an image into its patch matrix `[n_patches, patch_dim]`.
    /// Patches are ordered row-major over the patch grid; within a patch,
    /// pixels are ordered channel, then row, then column.
    pub fn patches<S: Scalar>(
        cfg: &FrontendConfig,
        image: &Tensor<S>,
    ) -> Result<Tensor<S>, FrontendError> {
        if image.shape() != [cfg.channels, cfg.img, cfg.img] {
            return Err(FrontendError::BadImage {
                got: image.shape().to_vec(),
                channels: cfg.channels,
                img: cfg.img,
            });
        }
        let side = cfg.img / cfg.patch;
        let mut out = Tensor::zeros(&[cfg.n_patches(), cfg.patch_dim()]);
        for pr in 0..side {
            for pc in 0..side {
                let row = out.row_mut(pr * side + pc);
                let mut i = 0;
                for ch in 0..cfg.channels {
                    for r in 0..cfg.patch {
                        for c in 0..cfg.patch {
                            let (ir, ic) = (pr * cfg.patch + r, pc * cfg.patch + c);
                            row[i] = image.data()[(ch * cfg.img + ir) * cfg.img + ic];
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Graph path: image to prefix rows `[n_patches, d_lm]`, differentiable
    /// through both submodules.
    pub fn forward_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        image: &Tensor<S>,
    ) -> Result<Var, FrontendError> {
        let p = self.params.clone();
        let x = g.constant(Self::patches(&self.cfg, image)?);
        let e = {
            let w0 = g.param(store, p.enc_w0);
            let b0 = g.param(store, p.enc_b0);
            let h = g.matmul(x, w0)?;
            g.add_row(h, b0)?
        };
        let enc = {
            let w1 = g.param(store, p.enc_w1);
            let b1 = g.param(store, p.enc_b1);
            let h = g.gelu(e);
            let h = g.matmul(h, w1)?;
            g.add_row(h, b1)?
        };
        let hidden = {
            let w1 = g.param(store, p.pre_w1);
            let b1 = g.param(store, p.pre_b1);
            let h = g.matmul(enc, w1)?;
            let h = g.add_row(h, b1)?;
            g.gelu(h)
        };
        let w2 = g.param(store, p.pre_w2);
        let b2 = g.param(store, p.pre_b2);
        let out = g.matmul(hidden, w2)?;
        Ok(g.add_row(out, b2)?)
    }

    /// Kernel path used at evaluation time; bitwise identical to
    /// [`Frontend::forward_graph`] values.
    pub fn infer<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        image: &Tensor<S>,
    ) -> Result<Tensor<S>, FrontendError> {
        let cfg = &self.cfg;
        let x = Self::patches(cfg, image)?;
        let (n, pd, dv, dl) = (cfg.n_patches(), cfg.patch_dim(), cfg.d_vision, cfg.d_lm);
        let p = &self.params;
        let dense = |store: &ParamStore<S>,
                     input: &Tensor<S>,
                     w: ParamId,
                     b: ParamId,
                     k: usize,
                     m: usize|
         -> Tensor<S> {
            let mut out = Tensor::zeros(&[n, m]);
            kernels::matmul_acc(
                input.data(),
                store.value(w).data(),
                out.data_mut(),
                n,
                k,
                m,
            );
            let bias = store.value(b).data();
            for r in 0..n {
                let row = out.row_mut(r);
                for (o, &bv) in row.iter_mut().zip(bias.iter()) {
                    *o = o.add(bv);
                }
            }
            out
        };
        let gelu_all = |t: &mut Tensor<S>| {
            for v in t.data_mut() {
                *v = kernels::gelu(*v);
            }
        };
        let mut e = dense(store, &x, p.enc_w0, p.enc_b0, pd, dv);
        gelu_all(&mut e);
        let enc = dense(store, &e, p.enc_w1, p.enc_b1, dv, dv);
        let mut h = dense(store, &enc, p.pre_w1, p.pre_b1, dv, dv);
        gelu_all(&mut h);
        Ok(dense(store, &h, p.pre_w2, p.pre_b2, dv, dl))
    }
}
