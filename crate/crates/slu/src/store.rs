//! Binary files: feature store (`SLUF`), CMVN statistics (`SLUC`) and
//! model checkpoints (`SLUM`). All numbers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use slu_core::features::CmvnStats;
use slu_core::model::{Model, ModelConfig};
use slu_core::Tensor;

use crate::error::{Error, IoContext, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SLUF";
pub const FEATURE_VERSION: u32 = 1;
pub const CMVN_MAGIC: &[u8; 4] = b"SLUC";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLUM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Longest string or tensor rank accepted when reading, to fail fast on
/// corrupt files instead of allocating absurd buffers.
const MAX_NAME: u32 = 1 << 16;
const MAX_RANK: u32 = 8;

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).at(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).at(path)?))
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4], path: &Path) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got).at(path)?;
    if &got != magic {
        return Err(Error::format(
            path,
            format!("expected magic {:?}, found {:?}", String::from_utf8_lossy(magic), String::from_utf8_lossy(&got)),
        ));
    }
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read, path: &Path) -> Result<String> {
    let n = r.read_u32::<LE>().at(path)?;
    if n > MAX_NAME {
        return Err(Error::format(path, format!("string length {n} too large")));
    }
    let mut buf = vec![0u8; n as usize];
    r.read_exact(&mut buf).at(path)?;
    String::from_utf8(buf).map_err(|_| Error::format(path, "string is not UTF-8"))
}

fn write_f32s(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    for &v in data {
        w.write_f32::<LE>(v as f32)?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0f32; n];
    r.read_f32_into::<LE>(&mut buf).at(path)?;
    Ok(buf.into_iter().map(f64::from).collect())
}

/// Writes `(id, T'×dim features)` records, stored as 32-bit floats.
pub fn write_features<'a, I>(path: &Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut w = create(path)?;
    let body = || -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_u32::<LE>(FEATURE_VERSION)?;
        for (id, t) in records {
            write_str(&mut w, id)?;
            w.write_u32::<LE>(t.rows() as u32)?;
            w.write_u32::<LE>(t.cols() as u32)?;
            write_f32s(&mut w, t.data())?;
        }
        w.flush()
    };
    body().at(path)
}

/// Reads every record of a feature store, in file order.
pub fn read_features(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = open(path)?;
    check_magic(&mut r, FEATURE_MAGIC, path)?;
    let version = r.read_u32::<LE>().at(path)?;
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported feature store version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut probe = [0u8; 1];
        if r.read(&mut probe).at(path)? == 0 {
            break;
        }
        let mut chained = (&probe[..]).chain(&mut r);
        let id = read_str(&mut chained, path)?;
        let rows = chained.read_u32::<LE>().at(path)? as usize;
        let cols = chained.read_u32::<LE>().at(path)? as usize;
        let data = read_f32s(&mut chained, rows * cols, path)?;
        let t = Tensor::new(&[rows, cols], data).map_err(|e| Error::format(path, format!("{id}: {e}")))?;
        out.push((id, t));
    }
    Ok(out)
}

pub fn write_cmvn(path: &Path, stats: &CmvnStats) -> Result<()> {
    let mut w = create(path)?;
    let mut body = || -> std::io::Result<()> {
        w.write_all(CMVN_MAGIC)?;
        w.write_u32::<LE>(stats.dim() as u32)?;
        for &v in stats.mean.iter().chain(&stats.variance) {
            w.write_f64::<LE>(v)?;
        }
        w.flush()
    };
    body().at(path)
}

/// Reads CMVN statistics; the file does not record the frame count, so it
/// comes back as zero.
pub fn read_cmvn(path: &Path) -> Result<CmvnStats> {
    let mut r = open(path)?;
    check_magic(&mut r, CMVN_MAGIC, path)?;
    let dim = r.read_u32::<LE>().at(path)? as usize;
    let mut values = vec![0f64; 2 * dim];
    r.read_f64_into::<LE>(&mut values).at(path)?;
    let variance = values.split_off(dim);
    if variance.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite or negative statistics"));
    }
    Ok(CmvnStats {
        mean: values,
        variance,
        frame_count: 0,
    })
}

/// Writes the model config as JSON followed by every named parameter
/// tensor as 32-bit floats.
pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let config = serde_json::to_string(model.config()).map_err(|e| Error::format(path, e.to_string()))?;
    let mut w = create(path)?;
    let mut body = || -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LE>(CHECKPOINT_VERSION)?;
        write_str(&mut w, &config)?;
        for (name, t) in model.named_params() {
            write_str(&mut w, name)?;
            w.write_u32::<LE>(t.rank() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LE>(d as u32)?;
            }
            write_f32s(&mut w, t.data())?;
        }
        w.flush()
    };
    body().at(path)
}

/// Config and raw named tensors of a checkpoint, in file order.
pub fn read_checkpoint_parts(path: &Path) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let mut r = open(path)?;
    check_magic(&mut r, CHECKPOINT_MAGIC, path)?;
    let version = r.read_u32::<LE>().at(path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let mut config_bytes = vec![0u8; r.read_u32::<LE>().at(path)? as usize];
    r.read_exact(&mut config_bytes).at(path)?;
    let config: ModelConfig =
        serde_json::from_slice(&config_bytes).map_err(|e| Error::format(path, format!("config: {e}")))?;
    let mut tensors = Vec::new();
    loop {
        let mut probe = [0u8; 1];
        if r.read(&mut probe).at(path)? == 0 {
            break;
        }
        let mut chained = (&probe[..]).chain(&mut r);
        let name = read_str(&mut chained, path)?;
        let rank = chained.read_u32::<LE>().at(path)?;
        if rank > MAX_RANK {
            return Err(Error::format(path, format!("{name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(chained.read_u32::<LE>().at(path)? as usize);
        }
        let n = shape.iter().product();
        let data = read_f32s(&mut chained, n, path)?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    Ok((config, tensors))
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let (config, tensors) = read_checkpoint_parts(path)?;
    Model::from_named(config, tensors).map_err(|e| Error::format(path, e.to_string()))
}

/// Number of scalars stored in a checkpoint.
pub fn checkpoint_census(path: &Path) -> Result<usize> {
    Ok(read_checkpoint_parts(path)?.1.iter().map(|(_, t)| t.numel()).sum())
}
