//! Checkpoint file: magic `AQNETCKP`, version u32, architecture, init seed,
//! the resolved training config as TOML, then the raw f32 parameters.
//! Little-endian throughout; any size mismatch is an error.

use std::path::Path;

use crate::binio::{write_atomic, Reader, Writer};
use crate::embednet::{ArchSpec, Parameters, CONV_BLOCKS};
use crate::error::{Error, Result};

use super::TrainConfig;

const MAGIC: &[u8; 8] = b"AQNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(params: &Parameters<f32>, config: &TrainConfig) -> Result<Vec<u8>> {
    let toml = toml::to_string(config).map_err(|e| Error::Domain(format!("serializing config: {e}")))?;
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let a = &params.arch;
    w.u32(a.input_size as u32);
    for c in a.conv_channels {
        w.u32(c as u32);
    }
    w.u32(a.embed_dim as u32);
    w.u8(a.two_digit_guard as u8);
    w.u64(params.seed);
    w.str(&toml);
    w.u64(params.values.len() as u64);
    for &v in &params.values {
        w.f32(v);
    }
    Ok(w.buf)
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<(Parameters<f32>, TrainConfig)> {
    let mut r = Reader::new(bytes, path);
    if r.take(8)? != MAGIC {
        return Err(r.err("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let input_size = r.u32()? as usize;
    let mut conv_channels = [0; CONV_BLOCKS];
    for c in conv_channels.iter_mut() {
        *c = r.u32()? as usize;
    }
    let arch = ArchSpec {
        input_size,
        conv_channels,
        embed_dim: r.u32()? as usize,
        two_digit_guard: r.u8()? != 0,
    };
    let seed = r.u64()?;
    let toml = r.str()?;
    let config: TrainConfig = toml::from_str(&toml).map_err(|e| r.err(format!("embedded config: {e}")))?;
    if config.arch != arch {
        return Err(r.err("embedded config disagrees with the stored architecture"));
    }
    let count = r.u64()? as usize;
    // Check the length before allocating.
    let raw = r.take(count.checked_mul(4).ok_or_else(|| r.err("parameter count overflow"))?)?;
    r.finish()?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    let params = Parameters::from_values(arch, seed, values).map_err(|e| r.err(e.to_string()))?;
    Ok((params, config))
}

pub fn save_checkpoint(params: &Parameters<f32>, config: &TrainConfig, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(params, config)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters<f32>, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, path)
}
