//! Run configuration: a flat dotted-key/value format with file includes,
//! two built-in profiles, and a canonical fingerprint.
//!
//! Files hold `key = value` lines, `#` comments, and `include <path>`
//! directives resolved relative to the including file. Later assignments
//! win. The `toy` profile runs the full pipeline on a desk CPU; the
//! `paper-scale-reference` profile records the source hyperparameters for
//! provenance and is far too large to execute here.
//!
//! Only the output directory and thread count may come from the
//! environment (`VICL_OUT_DIR`, `VICL_THREADS`); everything else is file
//! or flag driven so the fingerprint fully determines a run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Dtype;

pub const ENV_OUT_DIR: &str = "VICL_OUT_DIR";
pub const ENV_THREADS: &str = "VICL_THREADS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {detail}")]
    BadValue { key: String, detail: String },
    #[error("include cycle through {0}")]
    IncludeCycle(PathBuf),
    #[error("unknown profile {0:?} (expected toy or paper-scale-reference)")]
    UnknownProfile(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaSection {
    pub steps: usize,
    pub batch: usize,
    pub k_max: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlSection {
    pub steps: usize,
    pub batch: usize,
    pub lr_prefix: f64,
    pub lr_encoder: f64,
    pub lr_adaptor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendSection {
    pub img: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_vision: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSection {
    pub n_vl_train: usize,
    pub n_pool_train: usize,
    pub n_pool_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub n_eval: usize,
    pub shots: Vec<usize>,
    pub induction: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub n_seeds: usize,
    pub out_dir: PathBuf,
    /// 0 means one worker per available core.
    pub threads: usize,
    pub dtype: Dtype,
    pub checkpoint_every: usize,
    pub lm: LmSection,
    pub pretrain: PretrainSection,
    pub meta: MetaSection,
    pub vl: VlSection,
    pub frontend: FrontendSection,
    pub world: WorldSection,
    pub eval: EvalSection,
    pub fractions: Vec<f64>,
}

impl RunConfig {
    /// Desk-scale defaults; the whole default matrix finishes on a CPU.
    pub fn toy() -> RunConfig {
        RunConfig {
            profile: "toy".into(),
            seed: 1,
            n_seeds: 5,
            out_dir: PathBuf::from("runs/toy"),
            threads: 0,
            dtype: Dtype::F32,
            checkpoint_every: 400,
            lm: LmSection {
                d_model: 48,
                n_layers: 3,
                n_heads: 4,
                context: 256,
            },
            pretrain: PretrainSection {
                steps: 300,
                batch: 8,
                seq_len: 32,
                lr: 3e-4,
            },
            meta: MetaSection {
                steps: 800,
                batch: 8,
                k_max: 4,
                lr: 3e-4,
            },
            vl: VlSection {
                steps: 300,
                batch: 8,
                lr_prefix: 2e-3,
                lr_encoder: 1e-3,
                lr_adaptor: 1e-3,
            },
            frontend: FrontendSection {
                img: 32,
                channels: 3,
                patch: 8,
                d_vision: 48,
            },
            world: WorldSection {
                n_vl_train: 400,
                n_pool_train: 500,
                n_pool_test: 500,
            },
            eval: EvalSection {
                n_eval: 250,
                shots: vec![0, 1, 3],
                induction: "please answer the question .".into(),
            },
            fractions: vec![1.0, 0.5],
        }
    }

    /// The source experiment's hyperparameters, recorded for provenance.
    /// GPT2-Medium meta-trained for 80k steps at lr 1e-5 (batch 8); VL
    /// training at lr 5e-5 (prefix) and 2e-6 (encoder), batch 32, roughly 8
    /// epochs over a large caption corpus; CLIP-RN50x16 features on a 12x12
    /// grid of 3072-wide vectors. Not executable at desk scale.
    pub fn paper_scale_reference() -> RunConfig {
        RunConfig {
            profile: "paper-scale-reference".into(),
            seed: 1,
            n_seeds: 5,
            out_dir: PathBuf::from("runs/paper-scale-reference"),
            threads: 0,
            dtype: Dtype::F32,
            checkpoint_every: 1000,
            lm: LmSection {
                d_model: 1024,
                n_layers: 24,
                n_heads: 16,
                context: 1024,
            },
            pretrain: PretrainSection {
                // The source starts from an already pretrained LM.
                steps: 0,
                batch: 8,
                seq_len: 1024,
                lr: 1e-5,
            },
            meta: MetaSection {
                steps: 80_000,
                batch: 8,
                k_max: 16,
                lr: 1e-5,
            },
            vl: VlSection {
                // ~8 epochs over ~83k captions at batch 32.
                steps: 20_800,
                batch: 32,
                lr_prefix: 5e-5,
                lr_encoder: 2e-6,
                lr_adaptor: 5e-5,
            },
            frontend: FrontendSection {
                img: 384,
                channels: 3,
                patch: 32,
                d_vision: 3072,
            },
            world: WorldSection {
                n_vl_train: 83_000,
                n_pool_train: 5000,
                n_pool_test: 5000,
            },
            eval: EvalSection {
                n_eval: 5000,
                shots: vec![0, 1, 2, 3],
                induction: "please answer the question .".into(),
            },
            fractions: vec![1.0, 0.5],
        }
    }

    pub fn for_profile(name: &str) -> Result<RunConfig, ConfigError> {
        match name {
            "toy" => Ok(RunConfig::toy()),
            "paper-scale-reference" => Ok(RunConfig::paper_scale_reference()),
            other => Err(ConfigError::UnknownProfile(other.to_string())),
        }
    }

    /// Assign one dotted key. Unknown keys are rejected so typos cannot
    /// silently fall back to defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                detail: format!("{v:?}: {e}"),
            })
        }
        match key {
            "profile" => {
                // Re-seat every default, then keep applying overrides.
                *self = RunConfig::for_profile(value)?;
            }
            "seed" => self.seed = num(key, value)?,
            "n_seeds" => self.n_seeds = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "threads" => self.threads = num(key, value)?,
            "dtype" => {
                self.dtype = match value {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            detail: format!("{other:?} is not f32 or f64"),
                        })
                    }
                }
            }
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "lm.d_model" => self.lm.d_model = num(key, value)?,
            "lm.n_layers" => self.lm.n_layers = num(key, value)?,
            "lm.n_heads" => self.lm.n_heads = num(key, value)?,
            "lm.context" => self.lm.context = num(key, value)?,
            "pretrain.steps" => self.pretrain.steps = num(key, value)?,
            "pretrain.batch" => self.pretrain.batch = num(key, value)?,
            "pretrain.seq_len" => self.pretrain.seq_len = num(key, value)?,
            "pretrain.lr" => self.pretrain.lr = num(key, value)?,
            "meta.steps" => self.meta.steps = num(key, value)?,
            "meta.batch" => self.meta.batch = num(key, value)?,
            "meta.k_max" => self.meta.k_max = num(key, value)?,
            "meta.lr" => self.meta.lr = num(key, value)?,
            "vl.steps" => self.vl.steps = num(key, value)?,
            "vl.batch" => self.vl.batch = num(key, value)?,
            "vl.lr_prefix" => self.vl.lr_prefix = num(key, value)?,
            "vl.lr_encoder" => self.vl.lr_encoder = num(key, value)?,
            "vl.lr_adaptor" => self.vl.lr_adaptor = num(key, value)?,
            "frontend.img" => self.frontend.img = num(key, value)?,
            "frontend.channels" => self.frontend.channels = num(key, value)?,
            "frontend.patch" => self.frontend.patch = num(key, value)?,
            "frontend.d_vision" => self.frontend.d_vision = num(key, value)?,
            "world.n_vl_train" => self.world.n_vl_train = num(key, value)?,
            "world.n_pool_train" => self.world.n_pool_train = num(key, value)?,
            "world.n_pool_test" => self.world.n_pool_test = num(key, value)?,
            "eval.n_eval" => self.eval.n_eval = num(key, value)?,
            "eval.shots" => {
                self.eval.shots = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "eval.induction" => self.eval.induction = value.to_string(),
            "fractions" => {
                self.fractions = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Environment may override only the output location and parallelism.
    pub fn apply_env_from(
        &mut self,
        get: impl Fn(&str) -> Option<String>,
    ) -> Result<(), ConfigError> {
        if let Some(dir) = get(ENV_OUT_DIR) {
            self.out_dir = PathBuf::from(dir);
        }
        if let Some(threads) = get(ENV_THREADS) {
            self.threads = threads.parse().map_err(|e| ConfigError::BadValue {
                key: ENV_THREADS.to_string(),
                detail: format!("{threads:?}: {e}"),
            })?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        self.apply_env_from(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.n_seeds == 0 {
            return bad("n_seeds must be at least 1".into());
        }
        if self.lm.d_model == 0 || self.lm.n_heads == 0 || self.lm.d_model % self.lm.n_heads != 0
        {
            return bad(format!(
                "lm.d_model {} must be a positive multiple of lm.n_heads {}",
                self.lm.d_model, self.lm.n_heads
            ));
        }
        if self.lm.n_layers == 0 || self.lm.context == 0 {
            return bad("lm.n_layers and lm.context must be positive".into());
        }
        for (name, steps, batch) in [
            ("pretrain", self.pretrain.steps, self.pretrain.batch),
            ("meta", self.meta.steps, self.meta.batch),
            ("vl", self.vl.steps, self.vl.batch),
        ] {
            if batch == 0 {
                return bad(format!("{name}.batch must be positive"));
            }
            if name != "pretrain" && steps == 0 {
                return bad(format!("{name}.steps must be positive"));
            }
        }
        if self.frontend.patch == 0 || self.frontend.img % self.frontend.patch != 0 {
            return bad(format!(
                "frontend.patch {} must tile frontend.img {}",
                self.frontend.patch, self.frontend.img
            ));
        }
        if self.eval.shots.is_empty() {
            return bad("eval.shots must list at least one shot count".into());
        }
        if self.fractions.is_empty()
            || self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return bad(format!(
                "fractions {:?} must be non-empty with every value in (0, 1]",
                self.fractions
            ));
        }
        if self.eval.n_eval == 0 || self.eval.n_eval > self.world.n_pool_test {
            return bad(format!(
                "eval.n_eval {} must be in 1..=world.n_pool_test {}",
                self.eval.n_eval, self.world.n_pool_test
            ));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        Ok(())
    }

    /// Every semantic field as a `key = value` listing, profile first and
    /// the rest sorted. This is the canonical form: replaying it through
    /// [`RunConfig::set`] reproduces the config (profile leads because
    /// assigning it re-seats all defaults), and it is the fingerprint
    /// input. Operational knobs that cannot change what gets computed —
    /// `out_dir`, `threads`, `checkpoint_every` — are excluded.
    pub fn canonical(&self) -> String {
        let join_usize =
            |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let join_f64 =
            |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut entries: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("n_seeds".into(), self.n_seeds.to_string()),
            ("dtype".into(), self.dtype.name().into()),
            ("lm.d_model".into(), self.lm.d_model.to_string()),
            ("lm.n_layers".into(), self.lm.n_layers.to_string()),
            ("lm.n_heads".into(), self.lm.n_heads.to_string()),
            ("lm.context".into(), self.lm.context.to_string()),
            ("pretrain.steps".into(), self.pretrain.steps.to_string()),
            ("pretrain.batch".into(), self.pretrain.batch.to_string()),
            ("pretrain.seq_len".into(), self.pretrain.seq_len.to_string()),
            ("pretrain.lr".into(), self.pretrain.lr.to_string()),
            ("meta.steps".into(), self.meta.steps.to_string()),
            ("meta.batch".into(), self.meta.batch.to_string()),
            ("meta.k_max".into(), self.meta.k_max.to_string()),
            ("meta.lr".into(), self.meta.lr.to_string()),
            ("vl.steps".into(), self.vl.steps.to_string()),
            ("vl.batch".into(), self.vl.batch.to_string()),
            ("vl.lr_prefix".into(), self.vl.lr_prefix.to_string()),
            ("vl.lr_encoder".into(), self.vl.lr_encoder.to_string()),
            ("vl.lr_adaptor".into(), self.vl.lr_adaptor.to_string()),
            ("frontend.img".into(), self.frontend.img.to_string()),
            ("frontend.channels".into(), self.frontend.channels.to_string()),
            ("frontend.patch".into(), self.frontend.patch.to_string()),
            ("frontend.d_vision".into(), self.frontend.d_vision.to_string()),
            ("world.n_vl_train".into(), self.world.n_vl_train.to_string()),
            ("world.n_pool_train".into(), self.world.n_pool_train.to_string()),
            ("world.n_pool_test".into(), self.world.n_pool_test.to_string()),
            ("eval.n_eval".into(), self.eval.n_eval.to_string()),
            ("eval.shots".into(), join_usize(&self.eval.shots)),
            ("eval.induction".into(), self.eval.induction.clone()),
            ("fractions".into(), join_f64(&self.fractions)),
        ];
        entries.sort();
        let mut out = String::new();
        let _ = writeln!(out, "profile = {}", self.profile);
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of the canonical form. Deliberately excludes `out_dir`,
    /// `threads`, and `checkpoint_every`: where results land, how many
    /// workers computed them, and how often they were snapshotted must not
    /// change what gets computed.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// The master seed for run index `i` of the seed matrix.
    pub fn seed_at(&self, i: usize) -> u64 {
        self.seed + i as u64
    }
}

/// Read a config file, expanding `include` directives depth-first.
pub fn parse_file(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let mut seen = BTreeSet::new();
    parse_file_inner(path, &mut seen)
}

fn parse_file_inner(
    path: &Path,
    seen: &mut BTreeSet<PathBuf>,
) -> Result<Vec<(String, String)>, ConfigError> {
    let canon = path.canonicalize().map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if !seen.insert(canon.clone()) {
        return Err(ConfigError::IncludeCycle(canon));
    }
    let text = fs::read_to_string(&canon).map_err(|source| ConfigError::Io {
        path: canon.clone(),
        source,
    })?;
    let dir = canon.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("include ") {
            let inc = dir.join(rest.trim());
            pairs.extend(parse_file_inner(&inc, seen)?);
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => {
                return Err(ConfigError::Parse {
                    path: canon.clone(),
                    line: idx + 1,
                    detail: format!("expected `key = value` or `include <path>`, got {line:?}"),
                })
            }
        }
    }
    seen.remove(&canon);
    Ok(pairs)
}
