//! Binary checkpoint: magic, format version, embedded JSON config, then each
//! named tensor as `(name, rows, cols, row-major f64 LE)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ASTROSEQ";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&params.config)?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    let named = params.named();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, m) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_bytes<R: Read>(r: &mut R, len: u64, what: &str) -> Result<Vec<u8>> {
    if len > 1 << 32 {
        return Err(Error::Checkpoint(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    if &read_array::<8, _>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let config_len = read_u64(&mut r)?;
    let config: ModelConfig = serde_json::from_slice(&read_bytes(&mut r, config_len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let mut params = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = read_u32(&mut r)? as usize;
    let expected = params.named().len();
    if count != expected {
        return Err(Error::Checkpoint(format!("{count} tensors stored, model has {expected}")));
    }
    let mut slots = params.named_mut();
    for (i, (name, slot)) in slots.iter_mut().enumerate() {
        let name_len = read_u32(&mut r)? as u64;
        let stored = String::from_utf8(read_bytes(&mut r, name_len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} has a non-UTF-8 name")))?;
        if &stored != name {
            return Err(Error::Checkpoint(format!("tensor {i} is `{stored}`, expected `{name}`")));
        }
        let (rows, cols) = (read_u64(&mut r)? as usize, read_u64(&mut r)? as usize);
        if (rows, cols) != slot.shape() {
            return Err(Error::Checkpoint(format!("`{name}` is {rows}x{cols}, expected {:?}", slot.shape())));
        }
        for v in slot.data_mut() {
            *v = f64::from_le_bytes(read_array(&mut r)?);
        }
    }
    drop(slots);
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
