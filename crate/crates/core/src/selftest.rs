//! Fast self-check battery for the `selftest` CLI subcommand.
//!
//! Each check exercises one subsystem against an independent oracle —
//! finite differences for the tape, hand-computed losses, geometric pixel
//! counts, bitwise agreement between the two inference paths — and reports
//! pass/fail with a short diagnostic. The whole battery runs in seconds so
//! it can gate any environment before a long run.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::frontend::{Frontend, FrontendConfig};
use crate::graph::Graph;
use crate::harness::Matcher;
use crate::lm::{Lm, LmConfig};
use crate::optim::ParamStore;
use crate::rng::rng_for;
use crate::scenes::{self, Color, SceneObject, SceneSpec, Shape};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocab;

#[derive(Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, result: Result<String, String>) -> CheckOutcome {
    match result {
        Ok(detail) => CheckOutcome {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckOutcome {
            name,
            passed: false,
            detail,
        },
    }
}

fn tiny_lm<S: Scalar>(vocab_size: usize) -> (ParamStore<S>, Lm) {
    let mut store = ParamStore::new();
    let cfg = LmConfig {
        vocab_size,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        context: 64,
    };
    let lm = Lm::register(&mut store, cfg, 41).expect("register");
    (store, lm)
}

/// Analytic gradients of a small gelu MLP with masked cross entropy vs
/// central finite differences, in double precision.
fn check_gradients() -> Result<String, String> {
    let mut rng = rng_for(77, "selftest-grad", &[0]);
    let x: Tensor<f64> = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let w1: Tensor<f64> = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let w2: Tensor<f64> = Tensor::randn(&[6, 3], 1.0, &mut rng);
    let inputs = [x, w1, w2];
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.input(t.clone(), true)).collect();
        let h = g.matmul(vars[0], vars[1]).unwrap();
        let h = g.gelu(h);
        let logits = g.matmul(h, vars[2]).unwrap();
        let loss = g.masked_xent(logits, &[2, 0], &[true, true]).unwrap();
        g.value(loss).scalar_value()
    };
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let h = g.matmul(vars[0], vars[1]).map_err(|e| e.to_string())?;
    let h = g.gelu(h);
    let logits = g.matmul(h, vars[2]).map_err(|e| e.to_string())?;
    let loss = g
        .masked_xent(logits, &[2, 0], &[true, true])
        .map_err(|e| e.to_string())?;
    g.backward(loss).map_err(|e| e.to_string())?;

    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[ti])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - fd).abs() / fd.abs().max(a.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    if worst < 1e-4 {
        Ok(format!("max rel err {worst:.2e}"))
    } else {
        Err(format!("max rel err {worst:.2e} >= 1e-4"))
    }
}

/// Hand-computed masked cross entropy on a fixed two-row case.
fn check_xent_oracle() -> Result<String, String> {
    // logits row0 = [1, 0, -1] target 0 (supervised), row1 arbitrary masked.
    let logits: Tensor<f64> = Tensor::from_vec(
        &[2, 3],
        vec![1.0, 0.0, -1.0, 5.0, -2.0, 0.5],
    )
    .map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let v = g.input(logits, false);
    let loss = g
        .masked_xent(v, &[0, 1], &[true, false])
        .map_err(|e| e.to_string())?;
    let got = g.value(loss).scalar_value();
    let z: f64 = (1.0f64).exp() + (0.0f64).exp() + (-1.0f64).exp();
    let want = -((1.0f64).exp() / z).ln();
    let diff = (got - want).abs();
    if diff < 1e-6 {
        Ok(format!("|loss - oracle| = {diff:.2e}"))
    } else {
        Err(format!("loss {got} vs oracle {want}"))
    }
}

/// The batched training forward and the incremental cached forward must
/// agree bitwise on every logit row, including through a visual prefix.
fn check_incremental_inference<S: Scalar>() -> Result<String, String> {
    let (mut store, lm) = tiny_lm::<S>(11);
    let mut rng = rng_for(77, "selftest-prefix", &[0]);
    let prefix: Tensor<S> = Tensor::randn(&[3, 16], 0.5, &mut rng);
    let tokens = [1u32, 4, 7, 2, 9];

    let mut g: Graph<S> = Graph::new();
    let pv = g.input(prefix.clone(), false);
    let logits = lm
        .forward_graph(&mut g, &store, Some(pv), &tokens)
        .map_err(|e| e.to_string())?;
    let batched = g.value(logits).clone();

    let mut cache = lm.new_cache::<S>();
    let mut rows = Vec::new();
    for p in 0..prefix.shape()[0] {
        let row = lm
            .infer_embed_vector(&store, prefix.row(p), p)
            .map_err(|e| e.to_string())?;
        rows.push(lm.advance(&store, &mut cache, &row).map_err(|e| e.to_string())?);
    }
    for (i, &t) in tokens.iter().enumerate() {
        let row = lm
            .infer_embed_token(&store, t, prefix.shape()[0] + i)
            .map_err(|e| e.to_string())?;
        rows.push(lm.advance(&store, &mut cache, &row).map_err(|e| e.to_string())?);
    }
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if batched.row(r)[c] != *v {
                return Err(format!("logit mismatch at row {r} col {c}"));
            }
        }
    }
    // Adaptors start as an exact identity: attaching them must not move a
    // single bit of the logits.
    let mut lm2 = {
        let (s2, l2) = tiny_lm::<S>(11);
        store = s2;
        l2
    };
    let mut g: Graph<S> = Graph::new();
    let before = {
        let v = lm2
            .forward_graph(&mut g, &store, None, &tokens)
            .map_err(|e| e.to_string())?;
        g.value(v).clone()
    };
    lm2.attach_adaptors(&mut store, 5).map_err(|e| e.to_string())?;
    let mut g: Graph<S> = Graph::new();
    let after = {
        let v = lm2
            .forward_graph(&mut g, &store, None, &tokens)
            .map_err(|e| e.to_string())?;
        g.value(v).clone()
    };
    if !before.bit_eq(&after) {
        return Err("adaptor attachment moved logits".into());
    }
    Ok(format!(
        "{} logit rows bitwise equal; adaptor identity holds",
        rows.len()
    ))
}

/// Rendered sprites must match their geometric pixel counts exactly.
fn check_renderer() -> Result<String, String> {
    let spec = SceneSpec {
        objects: vec![
            SceneObject {
                row: 0,
                col: 0,
                shape: Shape::Square,
                color: Color::Red,
            },
            SceneObject {
                row: 1,
                col: 2,
                shape: Shape::Circle,
                color: Color::Yellow,
            },
        ],
    };
    spec.validate().map_err(|e| e.to_string())?;
    let img: Tensor<f64> = scenes::render(&spec).map_err(|e| e.to_string())?;
    let sum = |ch: usize| -> f64 {
        let base = ch * scenes::IMG * scenes::IMG;
        img.data()[base..base + scenes::IMG * scenes::IMG].iter().sum()
    };
    // Red square lights R only (36 px); yellow circle lights R and G (32 px).
    let (r, g, b) = (sum(0), sum(1), sum(2));
    if (r, g, b) != (68.0, 32.0, 0.0) {
        return Err(format!("channel sums ({r}, {g}, {b}) != (68, 32, 0)"));
    }
    if !img.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        return Err("non-binary pixel value".into());
    }
    let caption = scenes::caption(&spec);
    if caption != "a red square and a yellow circle" {
        return Err(format!("caption {caption:?}"));
    }
    Ok("pixel counts, binary values, caption all exact".into())
}

/// Exact string match must take precedence over embedding similarity.
fn check_matcher<S: Scalar>() -> Result<String, String> {
    let vocab = Vocab::build(&["red", "green", "blue", "circle"]);
    let (store, lm) = tiny_lm::<S>(vocab.len());
    let candidates = vec!["blue circle".to_string(), "red".to_string()];
    let matcher =
        Matcher::new(&lm, &store, &vocab, &candidates).map_err(|e| e.to_string())?;
    let toks = vocab.tokenize("red").map_err(|e| e.to_string())?;
    let got = matcher
        .match_answer(&vocab, &lm, &store, &toks)
        .map_err(|e| e.to_string())?;
    if got != "red" {
        return Err(format!("exact candidate lost to {got:?}"));
    }
    Ok("exact match beats similarity".into())
}

/// Checkpoints restore every parameter bit for bit.
fn check_checkpoint<S: Scalar>() -> Result<String, String> {
    let (store, lm) = tiny_lm::<S>(11);
    let ck = Checkpoint::capture(&store, None, "selftest", 3);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("selftest.ckpt");
    ck.save(&path).map_err(|e| e.to_string())?;
    let loaded: Checkpoint<S> =
        Checkpoint::load_matching(&path, "selftest").map_err(|e| e.to_string())?;
    let (mut store2, lm2) = tiny_lm::<S>(11);
    // Scramble, then restore.
    for id in lm2.lm_param_ids() {
        let z = Tensor::zeros(store2.value(id).shape());
        store2.set_value(id, z);
    }
    loaded.apply(&mut store2).map_err(|e| e.to_string())?;
    for (a, b) in lm.lm_param_ids().iter().zip(lm2.lm_param_ids()) {
        if !store.value(*a).bit_eq(store2.value(b)) {
            return Err(format!("param {} differs after restore", store.name(*a)));
        }
    }
    Ok(format!("{} params restored bit-exactly", lm.lm_param_ids().len()))
}

/// The visual frontend's graph forward and kernel inference path agree
/// bitwise, and the whole stack is deterministic per seed.
fn check_frontend<S: Scalar>() -> Result<String, String> {
    let mut store: ParamStore<S> = ParamStore::new();
    let cfg = FrontendConfig {
        img: scenes::IMG,
        channels: scenes::CHANNELS,
        patch: 8,
        d_vision: 24,
        d_lm: 16,
    };
    let frontend = Frontend::register(&mut store, cfg, 13).map_err(|e| e.to_string())?;
    let mut rng = rng_for(77, "selftest-frontend", &[0]);
    // Overwrite every parameter (the final projection registers as zeros)
    // so the two paths are compared on non-trivial values.
    for (i, id) in store.ids().into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        let t = Tensor::randn(&shape, 0.5, &mut rng_for(77, "selftest-frontend", &[1, i as u64]));
        store.set_value(id, t);
    }
    let spec = scenes::sample_scene(&mut rng);
    let img: Tensor<S> = scenes::render(&spec).map_err(|e| e.to_string())?;
    let mut g: Graph<S> = Graph::new();
    let v = frontend
        .forward_graph(&mut g, &store, &img)
        .map_err(|e| e.to_string())?;
    let graph_out = g.value(v).clone();
    let kernel_out = frontend.infer(&store, &img).map_err(|e| e.to_string())?;
    if !graph_out.bit_eq(&kernel_out) {
        return Err("graph and kernel paths disagree".into());
    }
    Ok(format!(
        "{} prefix rows bitwise equal across paths",
        graph_out.shape()[0]
    ))
}

/// Derived RNG streams are pure functions of (seed, label, indices).
fn check_rng() -> Result<String, String> {
    let a: Vec<u64> = (0..4).map(|i| rng_for(3, "check", &[i]).gen()).collect();
    let b: Vec<u64> = (0..4).map(|i| rng_for(3, "check", &[i]).gen()).collect();
    if a != b {
        return Err("identical coordinates produced different streams".into());
    }
    let c: u64 = rng_for(3, "other", &[0]).gen();
    if c == a[0] {
        return Err("different labels produced the same stream".into());
    }
    Ok("streams are reproducible and label-separated".into())
}

/// Run every check; generic over the element type used for bitwise checks.
pub fn run_checks<S: Scalar>() -> Vec<CheckOutcome> {
    vec![
        outcome("autodiff-vs-finite-differences", check_gradients()),
        outcome("masked-xent-hand-oracle", check_xent_oracle()),
        outcome("incremental-vs-batched-forward", check_incremental_inference::<S>()),
        outcome("renderer-geometry", check_renderer()),
        outcome("matcher-precedence", check_matcher::<S>()),
        outcome("checkpoint-roundtrip", check_checkpoint::<S>()),
        outcome("frontend-paths-agree", check_frontend::<S>()),
        outcome("rng-streams", check_rng()),
    ]
}
