use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::TrainError;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"RSNMTCKP";
const VERSION: u32 = 1;

/// Self-describing parameter snapshot. Values are held as f64 in memory
/// (exact for f32 sources) and written back in their declared dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<CkptTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkptTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(params: &ModelParams<T>, step: u64) -> Self {
        let tensors = params
            .entries()
            .iter()
            .map(|e| CkptTensor {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                dtype: T::DTYPE,
                data: e.tensor.data().iter().map(|v| v.to_f64()).collect(),
            })
            .collect();
        Checkpoint {
            config: params.config.clone(),
            step,
            tensors,
        }
    }

    /// Rebuild a parameter store; names and shapes are validated against
    /// the embedded config's inventory.
    pub fn to_params<T: Scalar>(&self) -> Result<ModelParams<T>, TrainError> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let data = t.data.iter().map(|&v| T::from_f64(v)).collect();
                Ok((
                    t.name.clone(),
                    Tensor::new(t.shape.clone(), data).map_err(crate::model::ModelError::from)?,
                ))
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(ModelParams::from_tensors(&self.config, tensors)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
        })
        .expect("config serializes");
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        for t in &self.tensors {
            f.write_all(&(t.name.len() as u64).to_le_bytes())?;
            f.write_all(t.name.as_bytes())?;
            f.write_all(&(t.shape.len() as u64).to_le_bytes())?;
            for &d in &t.shape {
                f.write_all(&(d as u64).to_le_bytes())?;
            }
            match t.dtype {
                Dtype::F32 => {
                    f.write_all(&[0u8])?;
                    for &v in &t.data {
                        f.write_all(&(v as f32).to_le_bytes())?;
                    }
                }
                Dtype::F64 => {
                    f.write_all(&[1u8])?;
                    for &v in &t.data {
                        f.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut f = BufReader::new(std::fs::File::open(path)?);
        let bad = |msg: String| TrainError::BadCheckpoint {
            path: path.to_path_buf(),
            reason: msg,
        };

        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| bad("file too short for magic bytes".into()))?;
        if &magic != MAGIC {
            return Err(bad("magic bytes do not match".into()));
        }
        let version = read_u32(&mut f)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = read_u64(&mut f)? as usize;
        let mut header = vec![0u8; header_len];
        f.read_exact(&mut header)?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| bad(format!("bad header: {e}")))?;

        let mut tensors = Vec::new();
        loop {
            let mut len_buf = [0u8; 8];
            match f.read(&mut len_buf)? {
                0 => break,
                8 => {}
                n => {
                    f.read_exact(&mut len_buf[n..])
                        .map_err(|_| bad("truncated tensor record".into()))?;
                }
            }
            let name_len = u64::from_le_bytes(len_buf) as usize;
            if name_len > 1 << 16 {
                return Err(bad(format!("implausible tensor name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let rank = read_u64(&mut f)? as usize;
            if rank > 8 {
                return Err(bad(format!("implausible rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut f)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut tag = [0u8; 1];
            f.read_exact(&mut tag)?;
            let (dtype, width) = match tag[0] {
                0 => (Dtype::F32, 4),
                1 => (Dtype::F64, 8),
                t => return Err(bad(format!("unknown dtype tag {t} for {name}"))),
            };
            let mut raw = vec![0u8; numel * width];
            f.read_exact(&mut raw)
                .map_err(|_| bad(format!("truncated values for {name}")))?;
            let data = match dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            tensors.push(CkptTensor {
                name,
                shape,
                dtype,
                data,
            });
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            tensors,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    step: u64,
) -> Result<(), TrainError> {
    Checkpoint::from_params(params, step).save(path)
}

/// Elementwise mean over checkpoints with identical tensor inventories;
/// the result carries the highest step and the first file's config.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Checkpoint, TrainError> {
    if paths.is_empty() {
        return Err(TrainError::NoCheckpoints);
    }
    let mut out = Checkpoint::load(&paths[0])?;
    let k = paths.len() as f64;
    for path in &paths[1..] {
        let next = Checkpoint::load(path)?;
        if next.tensors.len() != out.tensors.len() {
            return Err(TrainError::InventoryMismatch {
                expected: format!("{} tensors as in {}", out.tensors.len(), paths[0].display()),
                found: format!("{} tensors in {}", next.tensors.len(), path.display()),
            });
        }
        for (acc, t) in out.tensors.iter_mut().zip(&next.tensors) {
            if acc.name != t.name || acc.shape != t.shape || acc.dtype != t.dtype {
                return Err(TrainError::InventoryMismatch {
                    expected: format!("{} {:?} {:?}", acc.name, acc.shape, acc.dtype),
                    found: format!(
                        "{} {:?} {:?} in {}",
                        t.name,
                        t.shape,
                        t.dtype,
                        path.display()
                    ),
                });
            }
            for (a, b) in acc.data.iter_mut().zip(&t.data) {
                *a += b;
            }
        }
        out.step = out.step.max(next.step);
    }
    for t in &mut out.tensors {
        for v in &mut t.data {
            *v /= k;
        }
    }
    Ok(out)
}

pub fn checkpoint_filename(step: u64) -> String {
    format!("ckpt-{step:08}.ckpt")
}

/// Checkpoints in a directory, sorted by ascending step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>, TrainError> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(step) = name
            .strip_prefix("ckpt-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            found.push((step, path));
        }
    }
    found.sort();
    Ok(found)
}
