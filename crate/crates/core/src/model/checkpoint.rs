//! Binary checkpoint format.
//!
//! Layout: magic `ASFM`, format version u32, the architecture fields
//! (six u32s, then three f64s), a parameter count u32, then every parameter
//! as `name_len u32 | name bytes | rows u32 | cols u32 | rows*cols f32`.
//! All integers and floats are little-endian; values are stored in f32
//! regardless of the scalar type the model runs with.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::scalar::Scalar;

const MAGIC: [u8; 4] = *b"ASFM";
const FORMAT_VERSION: u32 = 1;
// Guards against absurd allocations when reading a corrupt file.
const MAX_NAME_LEN: u32 = 4096;
const MAX_VALUES: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}; not a checkpoint file")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: u64, needed: usize },
    #[error("corrupt checkpoint at offset {offset}: {message}")]
    Corrupt { offset: u64, message: String },
    #[error("checkpoint names unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint stores parameter {0:?} twice")]
    DuplicateParam(String),
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
    #[error("parameter {name:?} has shape {got:?} in the checkpoint, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Writes the model's configuration and every parameter tensor to `path`.
/// Parameters go out in canonical order, so the bytes are a pure function
/// of the model state.
pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;

    let config = model.config();
    for field in [
        config.num_blocks,
        config.num_decoders,
        config.feature_dim,
        config.model_dim,
        config.num_classes,
        config.window_base,
    ] {
        write_u32(&mut w, field as u32)?;
    }
    for field in [config.input_dropout, config.alpha_decay, config.lambda] {
        w.write_all(&field.to_le_bytes())?;
    }

    let params = model.parameters();
    write_u32(&mut w, params.len() as u32)?;
    for (name, tensor) in &params {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, tensor.rows() as u32)?;
        write_u32(&mut w, tensor.cols() as u32)?;
        for &v in tensor.values().iter() {
            w.write_all(&v.to_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a fresh model. Every parameter the
/// architecture defines must be present with the right shape; extra or
/// repeated entries are rejected.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.read_u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }

    let num_blocks = r.read_u32()? as usize;
    let num_decoders = r.read_u32()? as usize;
    let feature_dim = r.read_u32()? as usize;
    let model_dim = r.read_u32()? as usize;
    let num_classes = r.read_u32()? as usize;
    let window_base = r.read_u32()? as usize;
    let input_dropout = r.read_f64()?;
    let alpha_decay = r.read_f64()?;
    let lambda = r.read_f64()?;
    let config = ModelConfig {
        num_blocks,
        num_decoders,
        feature_dim,
        model_dim,
        num_classes,
        input_dropout,
        alpha_decay,
        lambda,
        window_base,
    };
    config.validate()?;

    // Weights are overwritten below; the seed only fills placeholders.
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let model = Model::<S>::init(config, &mut rng)?;
    let params: std::collections::HashMap<String, crate::tensor::Tensor<S>> =
        model.parameters().into_iter().collect();
    let mut seen = std::collections::HashSet::new();

    let count = r.read_u32()? as usize;
    for _ in 0..count {
        let name_len = r.read_u32()?;
        if name_len > MAX_NAME_LEN {
            return Err(CheckpointError::Corrupt {
                offset: r.offset,
                message: format!("parameter name length {name_len} exceeds {MAX_NAME_LEN}"),
            });
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::Corrupt {
            offset: r.offset,
            message: "parameter name is not UTF-8".to_string(),
        })?;
        let rows = r.read_u32()? as usize;
        let cols = r.read_u32()? as usize;
        if (rows as u64) * (cols as u64) > MAX_VALUES {
            return Err(CheckpointError::Corrupt {
                offset: r.offset,
                message: format!("parameter {name:?} claims {rows}x{cols} values"),
            });
        }
        let tensor = params
            .get(&name)
            .ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateParam(name));
        }
        if tensor.shape() != (rows, cols) {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: tensor.shape(),
                got: (rows, cols),
            });
        }
        let mut values = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 4];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            values.push(S::from_f32(f32::from_le_bytes(buf)));
        }
        tensor.set_values(&values);
    }

    if seen.len() != params.len() {
        let missing = params
            .keys()
            .find(|name| !seen.contains(*name))
            .expect("some parameter is unaccounted for");
        return Err(CheckpointError::MissingParam(missing.clone()));
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(CheckpointError::Corrupt {
            offset: r.offset,
            message: "trailing bytes after the last parameter".to_string(),
        });
    }
    Ok(model)
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

struct Reader {
    inner: BufReader<File>,
    offset: u64,
}

impl Reader {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(CheckpointError::Truncated {
                    offset: self.offset,
                    needed: buf.len(),
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn read_f64(&mut self) -> Result<f64> {
        let mut buf = [0u8; 8];
        self.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }
}
