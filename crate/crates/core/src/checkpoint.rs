//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"VICLCKP1"
//! dtype   u8            1 = f32, 2 = f64
//! fp_len  u32           config fingerprint length
//! fp      fp_len bytes  utf-8
//! step    u64
//! three sections (params, adam_m, adam_v), each:
//!   count u32
//!   count entries of: name_len u32, name bytes, ndim u32, dims u64*, data
//! ```
//!
//! Tensor data is the raw little-endian bit pattern, so save/load roundtrips
//! are bit-exact. Every read is labelled, so truncated or corrupt files fail
//! with the name of the field that broke.

use crate::optim::{Adam, ParamStore};
use crate::tensor::{Dtype, Scalar, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"VICLCKP1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("file truncated while reading {field}")]
    Truncated { field: String },
    #[error("malformed {field}: {detail}")]
    Malformed { field: String, detail: String },
    #[error("checkpoint dtype is {found}, this binary was built for {expected}")]
    DtypeMismatch { expected: &'static str, found: String },
    #[error("config fingerprint mismatch: checkpoint {found:?}, run {expected:?}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("checkpoint tensor {name:?} not present in the parameter store")]
    UnknownTensor { name: String },
    #[error("tensor {name:?} shape {found:?} does not match store shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub fingerprint: String,
    pub step: u64,
    pub params: Vec<(String, Tensor<S>)>,
    pub adam_m: Vec<(String, Tensor<S>)>,
    pub adam_v: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Snapshot every parameter in the store, plus optimizer moments when an
    /// optimizer is supplied (pass `None` for final/export checkpoints).
    pub fn capture(
        store: &ParamStore<S>,
        opt: Option<&Adam<S>>,
        fingerprint: &str,
        step: u64,
    ) -> Checkpoint<S> {
        let params = store
            .ids()
            .into_iter()
            .map(|id| (store.name(id).to_string(), store.value(id).clone()))
            .collect();
        let (adam_m, adam_v) = match opt {
            Some(opt) => {
                let mut ms = Vec::new();
                let mut vs = Vec::new();
                for (name, m, v) in opt.export_moments(store) {
                    ms.push((name.clone(), m));
                    vs.push((name, v));
                }
                (ms, vs)
            }
            None => (Vec::new(), Vec::new()),
        };
        Checkpoint {
            fingerprint: fingerprint.to_string(),
            step,
            params,
            adam_m,
            adam_v,
        }
    }

    /// Copy checkpoint tensors into the store. Every checkpoint tensor must
    /// exist in the store with a matching shape; store parameters the file
    /// does not mention are left alone (a language-model checkpoint loads
    /// cleanly into a store that also holds visual parameters).
    pub fn apply(&self, store: &mut ParamStore<S>) -> Result<()> {
        for (name, tensor) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| CheckpointError::UnknownTensor { name: name.clone() })?;
            if store.value(id).shape() != tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: store.value(id).shape().to_vec(),
                    found: tensor.shape().to_vec(),
                });
            }
            store.set_value(id, tensor.clone());
        }
        Ok(())
    }

    /// Restore optimizer moments and step counter captured alongside params.
    pub fn apply_moments(&self, store: &ParamStore<S>, opt: &mut Adam<S>) -> Result<()> {
        let mut triples = Vec::new();
        for ((mn, m), (vn, v)) in self.adam_m.iter().zip(self.adam_v.iter()) {
            if mn != vn {
                return Err(CheckpointError::Malformed {
                    field: "adam moments".into(),
                    detail: format!("m entry {mn:?} paired with v entry {vn:?}"),
                });
            }
            if store.find(mn).is_none() {
                return Err(CheckpointError::UnknownTensor { name: mn.clone() });
            }
            triples.push((mn.clone(), m.clone(), v.clone()));
        }
        opt.import_moments(store, self.step, &triples)
            .map_err(|_| CheckpointError::Malformed {
                field: "adam moments".into(),
                detail: "import rejected by optimizer".into(),
            })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut w = BufWriter::new(file);
        let io_err = |e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        };
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&[S::DTYPE.tag()]).map_err(io_err)?;
        write_bytes(&mut w, self.fingerprint.as_bytes(), path)?;
        w.write_all(&self.step.to_le_bytes()).map_err(io_err)?;
        for section in [&self.params, &self.adam_m, &self.adam_v] {
            w.write_all(&(section.len() as u32).to_le_bytes())
                .map_err(io_err)?;
            for (name, tensor) in section {
                write_bytes(&mut w, name.as_bytes(), path)?;
                w.write_all(&(tensor.shape().len() as u32).to_le_bytes())
                    .map_err(io_err)?;
                for &d in tensor.shape() {
                    w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
                }
                let mut buf = Vec::with_capacity(tensor.numel() * S::BYTE_WIDTH);
                for &x in tensor.data() {
                    buf.extend_from_slice(&x.to_le_bytes_vec());
                }
                w.write_all(&buf).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Checkpoint<S>> {
        let file = File::open(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag, "dtype tag")?;
        let dtype = Dtype::from_tag(tag[0]).ok_or_else(|| CheckpointError::Malformed {
            field: "dtype tag".into(),
            detail: format!("unknown tag {}", tag[0]),
        })?;
        if dtype != S::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                expected: S::DTYPE.name(),
                found: dtype.name().to_string(),
            });
        }
        let fingerprint = read_string(&mut r, "fingerprint")?;
        let step = read_u64(&mut r, "step")?;

        let mut sections = Vec::with_capacity(3);
        for section_name in ["params", "adam_m", "adam_v"] {
            let count = read_u32(&mut r, &format!("{section_name} count"))? as usize;
            let mut entries = Vec::with_capacity(count);
            for i in 0..count {
                let label = format!("{section_name}[{i}]");
                let name = read_string(&mut r, &format!("{label} name"))?;
                let ndim = read_u32(&mut r, &format!("{label} ndim"))? as usize;
                if ndim > 4 {
                    return Err(CheckpointError::Malformed {
                        field: format!("{label} ndim"),
                        detail: format!("{ndim} dims is not plausible"),
                    });
                }
                let mut shape = Vec::with_capacity(ndim);
                for d in 0..ndim {
                    shape.push(read_u64(&mut r, &format!("{label} dim {d}"))? as usize);
                }
                let numel: usize = shape.iter().product();
                let mut buf = vec![0u8; numel * S::BYTE_WIDTH];
                read_exact(&mut r, &mut buf, &format!("{label} data"))?;
                let data: Vec<S> = buf
                    .chunks_exact(S::BYTE_WIDTH)
                    .map(S::from_le_slice)
                    .collect();
                let tensor =
                    Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Malformed {
                        field: format!("{label} data"),
                        detail: e.to_string(),
                    })?;
                entries.push((name, tensor));
            }
            sections.push(entries);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })? != 0
        {
            return Err(CheckpointError::Malformed {
                field: "end of file".into(),
                detail: "trailing bytes after last section".into(),
            });
        }
        let adam_v = sections.pop().unwrap();
        let adam_m = sections.pop().unwrap();
        let params = sections.pop().unwrap();
        Ok(Checkpoint {
            fingerprint,
            step,
            params,
            adam_m,
            adam_v,
        })
    }

    /// Load and insist the stored fingerprint matches this run's config.
    pub fn load_matching(path: &Path, fingerprint: &str) -> Result<Checkpoint<S>> {
        let ckpt = Self::load(path)?;
        if ckpt.fingerprint != fingerprint {
            return Err(CheckpointError::FingerprintMismatch {
                expected: fingerprint.to_string(),
                found: ckpt.fingerprint,
            });
        }
        Ok(ckpt)
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8], path: &Path) -> Result<()> {
    let io_err = |e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(bytes).map_err(io_err)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], field: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| CheckpointError::Truncated {
        field: field.to_string(),
    })
}

fn read_u32<R: Read>(r: &mut R, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, field: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, field)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, field: &str) -> Result<String> {
    let len = read_u32(r, field)? as usize;
    if len > 1 << 20 {
        return Err(CheckpointError::Malformed {
            field: field.to_string(),
            detail: format!("length {len} is not plausible"),
        });
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, field)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Malformed {
        field: field.to_string(),
        detail: "invalid utf-8".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use tempfile::tempdir;

    fn random_store(seed: u64) -> ParamStore<f32> {
        let mut rng = rng_for(seed, "ckpt-test", &[]);
        let mut store = ParamStore::new();
        store
            .register("lm.wte", Tensor::randn(&[7, 4], 0.3, &mut rng))
            .unwrap();
        store
            .register("lm.head", Tensor::randn(&[4, 7], 1.0, &mut rng))
            .unwrap();
        store
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let store = random_store(11);
        let ckpt = Checkpoint::capture(&store, None, "fp:test", 42);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(loaded.fingerprint, "fp:test");
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.params.len(), 2);
        for ((an, at), (bn, bt)) in ckpt.params.iter().zip(loaded.params.iter()) {
            assert_eq!(an, bn);
            assert!(at.bit_eq(bt));
        }
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let store = random_store(3);
        Checkpoint::capture(&store, None, "fp", 0).save(&path).unwrap();
        let err = Checkpoint::<f64>::load(&path).unwrap_err();
        assert!(matches!(err, CheckpointError::DtypeMismatch { .. }));
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        Checkpoint::capture(&random_store(5), None, "fp:one", 0)
            .save(&path)
            .unwrap();
        let err = Checkpoint::<f32>::load_matching(&path, "fp:two").unwrap_err();
        assert!(matches!(err, CheckpointError::FingerprintMismatch { .. }));
    }

    #[test]
    fn truncated_file_names_the_failing_field() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        Checkpoint::capture(&random_store(7), None, "fp", 9)
            .save(&path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 13]).unwrap();
        let err = Checkpoint::<f32>::load(&cut).unwrap_err();
        match err {
            CheckpointError::Truncated { field } => {
                assert!(field.contains("data"), "unexpected field {field:?}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn apply_rejects_shape_drift() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        Checkpoint::capture(&random_store(1), None, "fp", 0)
            .save(&path)
            .unwrap();
        let ckpt = Checkpoint::<f32>::load(&path).unwrap();
        let mut other = ParamStore::new();
        other.register("lm.wte", Tensor::zeros(&[7, 5])).unwrap();
        other.register("lm.head", Tensor::zeros(&[4, 7])).unwrap();
        let err = ckpt.apply(&mut other).unwrap_err();
        assert!(matches!(err, CheckpointError::ShapeMismatch { name, .. } if name == "lm.wte"));
    }
}
