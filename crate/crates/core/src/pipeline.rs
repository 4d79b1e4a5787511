//! End-to-end orchestration: prepare -> train -> eval -> report.
//!
//! The run directory is the only mutable state. Every stage is resumable:
//! training checkpoints land every `checkpoint_every` steps, a finished
//! stage is a single `<stage>.ckpt`, and evaluation writes one cell file
//! per seed. Because all randomness is a pure function of (seed, stage,
//! step), re-running any stage — interrupted or not — reproduces the same
//! bytes. Timestamped lines go only to `logs/run.log`; every other
//! artifact is a pure function of the config and build.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! config.txt                   canonical config (re-parseable)
//! data/world_manifest.json     dataset sizes, candidate answers, examples
//! ckpt/seed<S>/<stage>.ckpt    finished stage (params + Adam moments)
//! ckpt/seed<S>/<stage>.step<N>.ckpt  in-progress partial
//! logs/seed<S>.<stage>.loss.csv      per-step training loss
//! logs/seed<S>.<stage>.outcome.json  stage summary (e.g. distinct examples)
//! logs/run.log                 timestamped progress (not deterministic)
//! report/cells-seed<S>.json    per-seed accuracy cells
//! report/metrics.json|csv      aggregated report
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::frontend::{Frontend, FrontendConfig, FrontendError};
use crate::harness::{self, HarnessError};
use crate::lm::{Lm, LmConfig, LmError};
use crate::meta::{self, MetaError, TextTrainConfig};
use crate::metrics::{self, EvalCell, MetricsError, TrendSpec};
use crate::optim::{Adam, OptimError, ParamGroup, ParamStore};
use crate::scenes::{self, SceneError, WorldConfig, WorldData};
use crate::tasks;
use crate::tensor::Scalar;
use crate::vl::{self, VlError, VlTrainConfig};
use crate::vocab::Vocab;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing artifact {path}; run the producing stage first")]
    MissingArtifact { path: PathBuf },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Vl(#[from] VlError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("artifact {path} is malformed: {detail}")]
    Malformed { path: PathBuf, detail: String },
}

impl PipelineError {
    /// Process exit code: 2 config error, 3 missing dependency, 4 failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingArtifact { .. } => 3,
            PipelineError::Checkpoint(CheckpointError::Io { .. }) => 3,
            _ => 4,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// All artifact locations, derived from the output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Paths {
    pub fn new(out_dir: &Path) -> Paths {
        Paths {
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn config_file(&self) -> PathBuf {
        self.out_dir.join("config.txt")
    }

    pub fn world_manifest(&self) -> PathBuf {
        self.out_dir.join("data").join("world_manifest.json")
    }

    pub fn ckpt_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join("ckpt").join(format!("seed{seed}"))
    }

    pub fn stage_final(&self, seed: u64, stage: &str) -> PathBuf {
        self.ckpt_dir(seed).join(format!("{stage}.ckpt"))
    }

    pub fn stage_partial(&self, seed: u64, stage: &str, step: usize) -> PathBuf {
        self.ckpt_dir(seed).join(format!("{stage}.step{step}.ckpt"))
    }

    pub fn loss_log(&self, seed: u64, stage: &str) -> PathBuf {
        self.out_dir
            .join("logs")
            .join(format!("seed{seed}.{stage}.loss.csv"))
    }

    pub fn outcome_log(&self, seed: u64, stage: &str) -> PathBuf {
        self.out_dir
            .join("logs")
            .join(format!("seed{seed}.{stage}.outcome.json"))
    }

    pub fn run_log(&self) -> PathBuf {
        self.out_dir.join("logs").join("run.log")
    }

    pub fn cells_file(&self, seed: u64) -> PathBuf {
        self.out_dir
            .join("report")
            .join(format!("cells-seed{seed}.json"))
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.out_dir.join("report").join("metrics.json")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.out_dir.join("report").join("metrics.csv")
    }
}

/// One arm of the run matrix: which LM the visual side trains against,
/// whether bottleneck adaptors are unfrozen, and the caption-data fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantSpec {
    pub meta_lm: bool,
    pub adaptors: bool,
    pub fraction: f64,
}

impl VariantSpec {
    /// Stable label, e.g. `meta-frozen-data1` or `plain-adapt-data0.5`.
    pub fn label(&self) -> String {
        format!(
            "{}-{}-data{}",
            if self.meta_lm { "meta" } else { "plain" },
            if self.adaptors { "adapt" } else { "frozen" },
            self.fraction
        )
    }

    /// The text-training stage whose checkpoint seeds this variant's LM.
    pub fn lm_stage(&self) -> &'static str {
        if self.meta_lm {
            "meta"
        } else {
            "baseline"
        }
    }

    pub fn vl_stage(&self) -> String {
        format!("vl-{}", self.label())
    }
}

/// The full default matrix: {meta, plain} x {frozen, adaptors} x fractions.
pub fn variants(cfg: &RunConfig) -> Vec<VariantSpec> {
    let mut out = Vec::new();
    for &meta_lm in &[true, false] {
        for &adaptors in &[false, true] {
            for &fraction in &cfg.fractions {
                out.push(VariantSpec {
                    meta_lm,
                    adaptors,
                    fraction,
                });
            }
        }
    }
    out
}

/// The comparisons the report should headline, phrased in this run's
/// variant labels: frozen LM at the first configured fraction, lowest vs
/// highest shot count.
pub fn trend_spec(cfg: &RunConfig) -> TrendSpec {
    let fraction = cfg.fractions[0];
    let k_lo = *cfg.eval.shots.iter().min().expect("validated non-empty");
    let k_hi = *cfg.eval.shots.iter().max().expect("validated non-empty");
    TrendSpec {
        meta_variant: format!("meta-frozen-data{fraction}"),
        plain_variant: format!("plain-frozen-data{fraction}"),
        k_lo,
        k_hi,
    }
}

/// Union of every word any component can emit or consume.
pub fn build_vocab() -> Vocab {
    let mut words = tasks::vocab_words();
    words.extend(scenes::vocab_words());
    words.extend(harness::vocab_words());
    Vocab::build(&words)
}

pub fn build_world(cfg: &RunConfig) -> Result<WorldData> {
    let wcfg = WorldConfig {
        n_vl_train: cfg.world.n_vl_train,
        n_pool_train: cfg.world.n_pool_train,
        n_pool_test: cfg.world.n_pool_test,
    };
    // World data depends on the base seed only: all runs in the seed matrix
    // train and evaluate on the same synthetic benchmark.
    Ok(scenes::build_splits(&wcfg, cfg.seed)?)
}

fn lm_config(cfg: &RunConfig, vocab: &Vocab) -> LmConfig {
    LmConfig {
        vocab_size: vocab.len(),
        d_model: cfg.lm.d_model,
        n_layers: cfg.lm.n_layers,
        n_heads: cfg.lm.n_heads,
        context: cfg.lm.context,
    }
}

fn frontend_config(cfg: &RunConfig) -> FrontendConfig {
    FrontendConfig {
        img: cfg.frontend.img,
        channels: cfg.frontend.channels,
        patch: cfg.frontend.patch,
        d_vision: cfg.frontend.d_vision,
        d_lm: cfg.lm.d_model,
    }
}

/// Beyond structural validation: this build renders its own images, so the
/// visual frontend must match the renderer's geometry.
pub fn validate_runnable(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.frontend.img != scenes::IMG || cfg.frontend.channels != scenes::CHANNELS {
        return Err(PipelineError::Config(ConfigError::Invalid(format!(
            "frontend expects {}x{}x{} images but the scene renderer produces {}x{}x{}; \
             only renderer-compatible profiles are executable",
            cfg.frontend.channels,
            cfg.frontend.img,
            cfg.frontend.img,
            scenes::CHANNELS,
            scenes::IMG,
            scenes::IMG,
        ))));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn log_line(paths: &Paths, msg: &str) {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let path = paths.run_log();
    if let Some(dir) = path.parent() {
        let _ = fs::create_dir_all(dir);
    }
    if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(&path) {
        let _ = writeln!(f, "[{secs}] {msg}");
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    name: String,
    train: usize,
    test: usize,
    candidates: Vec<String>,
    example_question: String,
    example_answer: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct WorldManifest {
    seed: u64,
    vocab_size: usize,
    vl_train: usize,
    example_caption: String,
    datasets: Vec<DatasetManifest>,
}

/// Write the canonical config and the world manifest. Idempotent.
pub fn prepare(cfg: &RunConfig) -> Result<()> {
    validate_runnable(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    write_file(&paths.config_file(), cfg.canonical().as_bytes())?;

    let vocab = build_vocab();
    let world = build_world(cfg)?;
    let manifest = WorldManifest {
        seed: cfg.seed,
        vocab_size: vocab.len(),
        vl_train: world.vl_train.len(),
        example_caption: world
            .vl_train
            .first()
            .map(|(_, c)| c.clone())
            .unwrap_or_default(),
        datasets: world
            .evals
            .iter()
            .map(|e| DatasetManifest {
                name: e.dataset.name().to_string(),
                train: e.train.len(),
                test: e.test.len(),
                candidates: e.candidates.clone(),
                example_question: e.test.first().map(|q| q.question.clone()).unwrap_or_default(),
                example_answer: e.test.first().map(|q| q.answer.clone()).unwrap_or_default(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(MetricsError::Json)?;
    write_file(&paths.world_manifest(), format!("{json}\n").as_bytes())?;
    log_line(&paths, "prepare: wrote config.txt and world manifest");
    Ok(())
}

fn stage_fingerprint(cfg: &RunConfig, stage: &str, seed: u64) -> String {
    format!("{}:{}:seed{}", cfg.fingerprint(), stage, seed)
}

/// Find the furthest usable partial checkpoint for a stage, if any.
fn latest_partial<S: Scalar>(
    paths: &Paths,
    seed: u64,
    stage: &str,
    fingerprint: &str,
    total: usize,
) -> Option<(usize, Checkpoint<S>)> {
    let dir = paths.ckpt_dir(seed);
    let entries = fs::read_dir(&dir).ok()?;
    let prefix = format!("{stage}.step");
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(rest) = name.strip_prefix(&prefix) else {
            continue;
        };
        let Some(step_str) = rest.strip_suffix(".ckpt") else {
            continue;
        };
        let Ok(step) = step_str.parse::<usize>() else {
            continue;
        };
        if step <= total && best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    let (step, path) = best?;
    let ck = Checkpoint::load_matching(&path, fingerprint).ok()?;
    Some((step, ck))
}

fn remove_partials(paths: &Paths, seed: u64, stage: &str) {
    let prefix = format!("{stage}.step");
    if let Ok(entries) = fs::read_dir(paths.ckpt_dir(seed)) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with(&prefix) && name.ends_with(".ckpt") {
                let _ = fs::remove_file(entry.path());
            }
        }
    }
}

/// Rewrite the per-step loss log so it holds exactly `upto` rows, then
/// return a handle positioned for appending. Keeps the log consistent with
/// the checkpoint a resumed run continues from.
fn reopen_loss_log(path: &Path, upto: usize) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut kept = String::from("step,loss\n");
    if upto > 0 {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        for line in text.lines().skip(1).take(upto) {
            kept.push_str(line);
            kept.push('\n');
        }
        let rows = kept.lines().count() - 1;
        if rows != upto {
            return Err(PipelineError::Malformed {
                path: path.to_path_buf(),
                detail: format!("expected at least {upto} loss rows, found {rows}"),
            });
        }
    }
    fs::write(path, &kept).map_err(io_err(path))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(io_err(path))
}

/// Shared chunked-training driver. `run_chunk` executes a step range and
/// returns its per-step losses; this wrapper handles skip-if-done, resume
/// from the newest partial, periodic checkpoints, and loss logging.
/// Returns true when it trained (false when the finished stage was reused).
fn resume_stage<S: Scalar>(
    paths: &Paths,
    seed: u64,
    stage: &str,
    fingerprint: &str,
    total: usize,
    every: usize,
    store: &mut ParamStore<S>,
    opt: &mut Adam<S>,
    mut run_chunk: impl FnMut(&mut ParamStore<S>, &mut Adam<S>, Range<usize>) -> Result<Vec<f64>>,
) -> Result<bool> {
    let final_path = paths.stage_final(seed, stage);
    if final_path.exists() {
        let ck: Checkpoint<S> = Checkpoint::load_matching(&final_path, fingerprint)?;
        ck.apply(store)?;
        return Ok(false);
    }
    let dir = paths.ckpt_dir(seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let mut start = 0usize;
    if let Some((step, ck)) = latest_partial::<S>(paths, seed, stage, fingerprint, total) {
        ck.apply(store)?;
        ck.apply_moments(store, opt)?;
        start = step;
    }
    let loss_path = paths.loss_log(seed, stage);
    let mut loss_log = reopen_loss_log(&loss_path, start)?;

    while start < total {
        let end = (start + every).min(total);
        let losses = run_chunk(store, opt, start..end)?;
        for (i, loss) in losses.iter().enumerate() {
            writeln!(loss_log, "{},{}", start + i, loss).map_err(io_err(&loss_path))?;
        }
        loss_log.flush().map_err(io_err(&loss_path))?;
        if end < total {
            let ck = Checkpoint::capture(store, Some(opt), fingerprint, end as u64);
            ck.save(&paths.stage_partial(seed, stage, end))?;
        }
        start = end;
    }
    let ck = Checkpoint::capture(store, Some(opt), fingerprint, total as u64);
    ck.save(&final_path)?;
    remove_partials(paths, seed, stage);
    Ok(true)
}

fn single_group(name: &str, lr: f64, params: Vec<crate::optim::ParamId>) -> Vec<ParamGroup> {
    vec![ParamGroup {
        name: name.to_string(),
        lr,
        frozen: false,
        params,
    }]
}

/// Stage summary recorded next to the loss log.
#[derive(Debug, Serialize, Deserialize)]
pub struct VlStageOutcome {
    pub variant: String,
    pub data_fraction: f64,
    pub available_examples: usize,
    pub selected_examples: usize,
    pub distinct_consumed: usize,
    pub final_loss: f64,
}

/// Train every stage for one seed: shared pretraining, the meta-trained
/// and baseline text branches, then the visual stage for each variant.
pub fn train_seed<S: Scalar>(
    cfg: &RunConfig,
    vocab: &Vocab,
    world: &WorldData,
    seed: u64,
) -> Result<()> {
    let paths = Paths::new(&cfg.out_dir);
    let lmcfg = lm_config(cfg, vocab);
    let every = cfg.checkpoint_every;

    // Shared base: plain next-token pretraining on text alone.
    let mut base_store: ParamStore<S> = ParamStore::new();
    let lm = Lm::register(&mut base_store, lmcfg.clone(), seed)?;
    let pre_cfg = TextTrainConfig {
        steps: cfg.pretrain.steps,
        batch: cfg.pretrain.batch,
        k_max: 0,
        seq_len: cfg.pretrain.seq_len,
    };
    let mut opt = Adam::new(single_group("lm", cfg.pretrain.lr, lm.lm_param_ids()))?;
    let trained = resume_stage(
        &paths,
        seed,
        "pretrain",
        &stage_fingerprint(cfg, "pretrain", seed),
        cfg.pretrain.steps,
        every,
        &mut base_store,
        &mut opt,
        |store, opt, range| {
            let out = meta::plain_train(&lm, store, opt, vocab, &pre_cfg, seed, "pretrain", range)?;
            Ok(out.losses)
        },
    )?;
    log_line(
        &paths,
        &format!("seed{seed} pretrain: {}", if trained { "trained" } else { "reused" }),
    );

    // Text branches: in-context episodes vs matched-compute plain text.
    let text_cfg = TextTrainConfig {
        steps: cfg.meta.steps,
        batch: cfg.meta.batch,
        k_max: cfg.meta.k_max,
        seq_len: cfg.pretrain.seq_len,
    };
    for branch in ["meta", "baseline"] {
        let mut store = base_store.clone();
        let mut opt = Adam::new(single_group("lm", cfg.meta.lr, lm.lm_param_ids()))?;
        let trained = resume_stage(
            &paths,
            seed,
            branch,
            &stage_fingerprint(cfg, branch, seed),
            cfg.meta.steps,
            every,
            &mut store,
            &mut opt,
            |store, opt, range| {
                let out = if branch == "meta" {
                    meta::meta_train(&lm, store, opt, vocab, &text_cfg, seed, range)?
                } else {
                    meta::plain_train(&lm, store, opt, vocab, &text_cfg, seed, "baseline", range)?
                };
                Ok(out.losses)
            },
        )?;
        log_line(
            &paths,
            &format!("seed{seed} {branch}: {}", if trained { "trained" } else { "reused" }),
        );
    }

    // Visual stages: one per variant, each against its frozen text branch.
    for variant in variants(cfg) {
        train_vl_variant::<S>(cfg, vocab, world, seed, &variant)?;
    }
    Ok(())
}

fn train_vl_variant<S: Scalar>(
    cfg: &RunConfig,
    vocab: &Vocab,
    world: &WorldData,
    seed: u64,
    variant: &VariantSpec,
) -> Result<()> {
    let paths = Paths::new(&cfg.out_dir);
    let stage = variant.vl_stage();
    let (mut store, lm, frontend) = assemble_vl_model::<S>(cfg, vocab, seed, variant)?;
    let vcfg = VlTrainConfig {
        steps: cfg.vl.steps,
        batch: cfg.vl.batch,
        lr_prefix: cfg.vl.lr_prefix,
        lr_encoder: cfg.vl.lr_encoder,
        lr_adaptor: cfg.vl.lr_adaptor,
        data_fraction: variant.fraction,
        with_adaptors: variant.adaptors,
    };
    let mut opt = vl::build_vl_optimizer(&lm, &frontend, &vcfg)?;
    let mut consumed: BTreeSet<usize> = BTreeSet::new();
    let mut last_loss = f64::NAN;
    let trained = resume_stage(
        &paths,
        seed,
        &stage,
        &stage_fingerprint(cfg, &stage, seed),
        cfg.vl.steps,
        cfg.checkpoint_every,
        &mut store,
        &mut opt,
        |store, opt, range| {
            let out = vl::vl_train(
                &lm,
                &frontend,
                store,
                opt,
                vocab,
                &world.vl_train,
                &vcfg,
                seed,
                range,
            )?;
            consumed.extend(&out.consumed);
            if let Some(&l) = out.losses.last() {
                last_loss = l;
            }
            Ok(out.losses)
        },
    )?;
    if trained {
        let selected =
            (world.vl_train.len() as f64 * variant.fraction).floor() as usize;
        let outcome = VlStageOutcome {
            variant: variant.label(),
            data_fraction: variant.fraction,
            available_examples: world.vl_train.len(),
            selected_examples: selected,
            distinct_consumed: consumed.len(),
            final_loss: last_loss,
        };
        let json = serde_json::to_string_pretty(&outcome).map_err(MetricsError::Json)?;
        write_file(&paths.outcome_log(seed, &stage), format!("{json}\n").as_bytes())?;
    }
    log_line(
        &paths,
        &format!("seed{seed} {stage}: {}", if trained { "trained" } else { "reused" }),
    );
    Ok(())
}

/// Register LM (+ optional adaptors) and frontend in a fresh store, with
/// the LM parameters loaded from the variant's finished text branch.
fn assemble_vl_model<S: Scalar>(
    cfg: &RunConfig,
    vocab: &Vocab,
    seed: u64,
    variant: &VariantSpec,
) -> Result<(ParamStore<S>, Lm, Frontend)> {
    let paths = Paths::new(&cfg.out_dir);
    let mut store: ParamStore<S> = ParamStore::new();
    let mut lm = Lm::register(&mut store, lm_config(cfg, vocab), seed)?;

    let text_ckpt = paths.stage_final(seed, variant.lm_stage());
    if !text_ckpt.exists() {
        return Err(PipelineError::MissingArtifact { path: text_ckpt });
    }
    let ck: Checkpoint<S> =
        Checkpoint::load_matching(&text_ckpt, &stage_fingerprint(cfg, variant.lm_stage(), seed))?;
    ck.apply(&mut store)?;

    if variant.adaptors {
        lm.attach_adaptors(&mut store, seed)?;
    }
    let frontend = Frontend::register(&mut store, frontend_config(cfg), seed)?;
    Ok((store, lm, frontend))
}

/// Rebuild a trained variant from its finished visual-stage checkpoint.
fn load_vl_model<S: Scalar>(
    cfg: &RunConfig,
    vocab: &Vocab,
    seed: u64,
    variant: &VariantSpec,
) -> Result<(ParamStore<S>, Lm, Frontend)> {
    let paths = Paths::new(&cfg.out_dir);
    let (mut store, lm, frontend) = assemble_vl_model::<S>(cfg, vocab, seed, variant)?;
    let stage = variant.vl_stage();
    let vl_ckpt = paths.stage_final(seed, &stage);
    if !vl_ckpt.exists() {
        return Err(PipelineError::MissingArtifact { path: vl_ckpt });
    }
    let ck: Checkpoint<S> =
        Checkpoint::load_matching(&vl_ckpt, &stage_fingerprint(cfg, &stage, seed))?;
    ck.apply(&mut store)?;
    Ok((store, lm, frontend))
}

/// Train all seeds. Seeds are independent — separate parameter streams and
/// separate files — so they run in parallel across the worker pool; each
/// seed's own stages stay sequential.
pub fn train<S: Scalar>(cfg: &RunConfig, seeds: &[u64]) -> Result<()> {
    validate_runnable(cfg)?;
    let vocab = build_vocab();
    let world = build_world(cfg)?;
    let pool = rayon_pool(cfg.threads)?;
    let results: Vec<Result<()>> = pool.install(|| {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&seed| train_seed::<S>(cfg, &vocab, &world, seed))
            .collect()
    });
    for r in results {
        r?;
    }
    Ok(())
}

fn rayon_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::Malformed {
            path: PathBuf::from("<thread pool>"),
            detail: e.to_string(),
        })
}

/// Evaluate every variant over every (dataset, shots) cell for the given
/// seeds, writing one cell file per seed. Cells within a variant run in
/// parallel; results are ordered by construction, not completion.
pub fn eval<S: Scalar>(cfg: &RunConfig, seeds: &[u64]) -> Result<()> {
    validate_runnable(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    let vocab = build_vocab();
    let world = build_world(cfg)?;
    let pool = rayon_pool(cfg.threads)?;

    for &seed in seeds {
        let mut cells: Vec<EvalCell> = Vec::new();
        for variant in variants(cfg) {
            let (store, lm, frontend) = load_vl_model::<S>(cfg, &vocab, seed, &variant)?;
            let label = variant.label();
            let jobs: Vec<(usize, usize)> = (0..world.evals.len())
                .flat_map(|d| cfg.eval.shots.iter().map(move |&k| (d, k)))
                .collect();
            let results: Vec<Result<EvalCell>> = pool.install(|| {
                use rayon::prelude::*;
                jobs.par_iter()
                    .map(|&(d, k)| {
                        let eval_set = &world.evals[d];
                        let res = harness::evaluate(
                            &lm,
                            &frontend,
                            &store,
                            &vocab,
                            eval_set,
                            k,
                            cfg.eval.n_eval,
                            seed,
                            &cfg.eval.induction,
                        )?;
                        Ok(EvalCell {
                            variant: label.clone(),
                            dataset: eval_set.dataset.name().to_string(),
                            k,
                            seed,
                            accuracy: res.accuracy,
                        })
                    })
                    .collect()
            });
            for r in results {
                cells.push(r?);
            }
            log_line(&paths, &format!("seed{seed} eval {label}: done"));
        }
        let json = serde_json::to_string_pretty(&cells).map_err(MetricsError::Json)?;
        write_file(&paths.cells_file(seed), format!("{json}\n").as_bytes())?;
    }
    Ok(())
}

/// Aggregate all per-seed cell files into the final report.
pub fn report(cfg: &RunConfig, seeds: &[u64]) -> Result<metrics::Report> {
    validate_runnable(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    let mut cells: Vec<EvalCell> = Vec::new();
    for &seed in seeds {
        let path = paths.cells_file(seed);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact { path });
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut seed_cells: Vec<EvalCell> =
            serde_json::from_str(&text).map_err(|e| PipelineError::Malformed {
                path: path.clone(),
                detail: e.to_string(),
            })?;
        cells.append(&mut seed_cells);
    }
    let report = metrics::build_report(
        &cfg.fingerprint(),
        cfg.eval.n_eval,
        &cells,
        &trend_spec(cfg),
    );
    write_file(&paths.metrics_json(), metrics::to_json(&report)?.as_bytes())?;
    write_file(&paths.metrics_csv(), metrics::to_csv(&report).as_bytes())?;
    log_line(&paths, "report: wrote metrics.json and metrics.csv");
    Ok(report)
}

/// The seeds of the configured matrix, or a single explicit override.
pub fn seed_list(cfg: &RunConfig, only: Option<u64>) -> Vec<u64> {
    match only {
        Some(s) => vec![s],
        None => (0..cfg.n_seeds).map(|i| cfg.seed_at(i)).collect(),
    }
}

/// prepare + train + eval + report in one call.
pub fn run_all<S: Scalar>(cfg: &RunConfig, only_seed: Option<u64>) -> Result<()> {
    let seeds = seed_list(cfg, only_seed);
    prepare(cfg)?;
    train::<S>(cfg, &seeds)?;
    eval::<S>(cfg, &seeds)?;
    report(cfg, &seeds)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small enough to run the whole matrix in seconds.
    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::toy();
        cfg.out_dir = dir.to_path_buf();
        cfg.n_seeds = 2;
        cfg.checkpoint_every = 3;
        cfg.threads = 1;
        cfg.lm.d_model = 16;
        cfg.lm.n_layers = 1;
        cfg.lm.n_heads = 2;
        cfg.lm.context = 192;
        cfg.pretrain.steps = 4;
        cfg.pretrain.batch = 2;
        cfg.pretrain.seq_len = 12;
        cfg.meta.steps = 5;
        cfg.meta.batch = 2;
        cfg.meta.k_max = 2;
        cfg.vl.steps = 5;
        cfg.vl.batch = 2;
        cfg.world.n_vl_train = 12;
        cfg.world.n_pool_train = 8;
        cfg.world.n_pool_test = 6;
        cfg.eval.n_eval = 4;
        cfg.eval.shots = vec![0, 1];
        cfg
    }

    #[test]
    fn variant_matrix_and_labels() {
        let cfg = RunConfig::toy();
        let vs = variants(&cfg);
        assert_eq!(vs.len(), 8);
        let labels: Vec<String> = vs.iter().map(|v| v.label()).collect();
        assert!(labels.contains(&"meta-frozen-data1".to_string()));
        assert!(labels.contains(&"plain-adapt-data0.5".to_string()));
        let spec = trend_spec(&cfg);
        assert_eq!(spec.meta_variant, "meta-frozen-data1");
        assert_eq!(spec.plain_variant, "plain-frozen-data1");
        assert_eq!((spec.k_lo, spec.k_hi), (0, 3));
    }

    #[test]
    fn paper_scale_reference_profile_is_not_runnable_here() {
        let cfg = RunConfig::paper_scale_reference();
        let err = validate_runnable(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn full_pipeline_produces_consistent_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        run_all::<f32>(&cfg, None).unwrap();
        let paths = Paths::new(&cfg.out_dir);

        // Config file round-trips to the same fingerprint.
        let pairs = crate::config::parse_file(&paths.config_file()).unwrap();
        let mut re = RunConfig::toy();
        re.apply(&pairs).unwrap();
        assert_eq!(re.fingerprint(), cfg.fingerprint());

        // Manifest parses and matches the configured sizes.
        let manifest: WorldManifest = serde_json::from_str(
            &fs::read_to_string(paths.world_manifest()).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest.vl_train, 12);
        assert_eq!(manifest.datasets.len(), 3);

        // One cell per (variant, dataset, k) per seed.
        for i in 0..cfg.n_seeds {
            let seed = cfg.seed_at(i);
            let cells: Vec<EvalCell> = serde_json::from_str(
                &fs::read_to_string(paths.cells_file(seed)).unwrap(),
            )
            .unwrap();
            assert_eq!(cells.len(), 8 * 3 * 2);
            assert!(cells.iter().all(|c| c.seed == seed));
            assert!(cells
                .iter()
                .all(|c| (0.0..=1.0).contains(&c.accuracy)));
        }

        // Report exists, parses, and covers the matrix.
        let report: metrics::Report = serde_json::from_str(
            &fs::read_to_string(paths.metrics_json()).unwrap(),
        )
        .unwrap();
        assert_eq!(report.seeds, vec![1, 2]);
        assert_eq!(report.cells.len(), 8 * 3 * 2);
        assert_eq!(report.config_fingerprint, cfg.fingerprint());

        // Partials are cleaned up; finals remain.
        for i in 0..cfg.n_seeds {
            let seed = cfg.seed_at(i);
            let names: Vec<String> = fs::read_dir(paths.ckpt_dir(seed))
                .unwrap()
                .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect();
            assert!(names.iter().any(|n| n == "pretrain.ckpt"));
            assert!(names.iter().any(|n| n == "meta.ckpt"));
            assert!(names.iter().any(|n| n == "baseline.ckpt"));
            assert_eq!(names.iter().filter(|n| n.contains(".step")).count(), 0);
            assert_eq!(names.iter().filter(|n| n.starts_with("vl-")).count(), 8);
        }

        // The half-fraction audit: floor(12 * 0.5) = 6 distinct examples,
        // and steps*batch = 10 >= 6 so coverage is complete.
        let outcome: VlStageOutcome = serde_json::from_str(
            &fs::read_to_string(paths.outcome_log(1, "vl-meta-frozen-data0.5")).unwrap(),
        )
        .unwrap();
        assert_eq!(outcome.selected_examples, 6);
        assert_eq!(outcome.distinct_consumed, 6);
        let full: VlStageOutcome = serde_json::from_str(
            &fs::read_to_string(paths.outcome_log(1, "vl-meta-frozen-data1")).unwrap(),
        )
        .unwrap();
        assert_eq!(full.selected_examples, 12);

        // Loss logs hold exactly one row per step.
        let loss = fs::read_to_string(paths.loss_log(1, "meta")).unwrap();
        assert_eq!(loss.lines().count(), 1 + cfg.meta.steps);
    }

    #[test]
    fn identical_configs_produce_byte_identical_reports() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg_a = tiny_cfg(dir_a.path());
        let mut cfg_b = tiny_cfg(dir_b.path());
        // Different checkpoint cadence and thread count must not change
        // results - only the out_dir differs in where bytes land.
        cfg_a.checkpoint_every = 2;
        cfg_b.checkpoint_every = 100;
        cfg_b.threads = 2;
        // Keep fingerprints equal: cadence/threads are not fingerprinted.
        assert_eq!(cfg_a.fingerprint(), cfg_b.fingerprint());
        run_all::<f32>(&cfg_a, None).unwrap();
        run_all::<f32>(&cfg_b, None).unwrap();
        let pa = Paths::new(&cfg_a.out_dir);
        let pb = Paths::new(&cfg_b.out_dir);
        let json_a = fs::read_to_string(pa.metrics_json()).unwrap();
        let json_b = fs::read_to_string(pb.metrics_json()).unwrap();
        assert_eq!(json_a, json_b);
        assert_eq!(
            fs::read_to_string(pa.metrics_csv()).unwrap(),
            fs::read_to_string(pb.metrics_csv()).unwrap()
        );
        // Checkpoints are bitwise identical too, despite different cadence.
        assert_eq!(
            fs::read(pa.stage_final(1, "meta")).unwrap(),
            fs::read(pb.stage_final(1, "meta")).unwrap()
        );
        assert_eq!(
            fs::read(pa.stage_final(2, "vl-meta-adapt-data1")).unwrap(),
            fs::read(pb.stage_final(2, "vl-meta-adapt-data1")).unwrap()
        );
    }

    #[test]
    fn interrupted_stage_resumes_from_partial() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let paths = Paths::new(&cfg.out_dir);
        let vocab = build_vocab();
        let lmcfg = lm_config(&cfg, &vocab);
        let seed = 9;
        let fp = stage_fingerprint(&cfg, "pretrain", seed);
        let tcfg = TextTrainConfig {
            steps: 6,
            batch: 2,
            k_max: 0,
            seq_len: 12,
        };

        // Interrupt after the first chunk of 2 steps.
        let mut store: ParamStore<f32> = ParamStore::new();
        let lm = Lm::register(&mut store, lmcfg.clone(), seed).unwrap();
        let mut opt = Adam::new(single_group("lm", 1e-3, lm.lm_param_ids())).unwrap();
        let mut chunks = 0;
        let err = resume_stage(
            &paths,
            seed,
            "pretrain",
            &fp,
            6,
            2,
            &mut store,
            &mut opt,
            |store, opt, range| {
                if chunks == 1 {
                    return Err(PipelineError::Malformed {
                        path: PathBuf::from("<injected>"),
                        detail: "interrupt".into(),
                    });
                }
                chunks += 1;
                let out =
                    meta::plain_train(&lm, store, opt, &vocab, &tcfg, seed, "pretrain", range)
                        .unwrap();
                Ok(out.losses)
            },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(paths.stage_partial(seed, "pretrain", 2).exists());

        // Second attempt resumes at step 2 and completes.
        let mut store2: ParamStore<f32> = ParamStore::new();
        let lm2 = Lm::register(&mut store2, lmcfg.clone(), seed).unwrap();
        let mut opt2 = Adam::new(single_group("lm", 1e-3, lm2.lm_param_ids())).unwrap();
        let mut starts = Vec::new();
        resume_stage(
            &paths,
            seed,
            "pretrain",
            &fp,
            6,
            2,
            &mut store2,
            &mut opt2,
            |store, opt, range| {
                starts.push(range.start);
                let out =
                    meta::plain_train(&lm2, store, opt, &vocab, &tcfg, seed, "pretrain", range)
                        .unwrap();
                Ok(out.losses)
            },
        )
        .unwrap();
        assert_eq!(starts, vec![2, 4]);
        assert!(!paths.stage_partial(seed, "pretrain", 2).exists());

        // Uninterrupted reference run matches bit for bit.
        let mut store3: ParamStore<f32> = ParamStore::new();
        let lm3 = Lm::register(&mut store3, lmcfg, seed).unwrap();
        let mut opt3 = Adam::new(single_group("lm", 1e-3, lm3.lm_param_ids())).unwrap();
        meta::plain_train(&lm3, &mut store3, &mut opt3, &vocab, &tcfg, seed, "pretrain", 0..6)
            .unwrap();
        for id in lm3.lm_param_ids() {
            assert!(store2.value(id).bit_eq(store3.value(id)));
        }
        // Loss log holds all six steps despite the interruption.
        let loss = fs::read_to_string(paths.loss_log(seed, "pretrain")).unwrap();
        assert_eq!(loss.lines().count(), 7);
    }

    #[test]
    fn missing_artifacts_map_to_exit_code_3() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        // Eval before train: the text-branch checkpoint is missing.
        let err = eval::<f32>(&cfg, &[1]).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
        // Report before eval: the cells file is missing.
        let err = report(&cfg, &[1]).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }

    #[test]
    fn checkpoints_from_other_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let vocab = build_vocab();
        let world = build_world(&cfg).unwrap();
        train_seed::<f32>(&cfg, &vocab, &world, 1).unwrap();
        // Same artifacts, different config: fingerprints no longer match.
        let mut other = cfg.clone();
        other.meta.k_max = 1;
        let err = eval::<f32>(&other, &[1]).unwrap_err();
        assert!(matches!(err, PipelineError::Checkpoint(_)), "{err}");
    }
}
