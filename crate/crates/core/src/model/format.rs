//! Binary model files.
//!
//! Layout (little-endian): magic `NLNS`, `u32` format version, hyperparameter
//! block of seven `u32` (`num_values`, `width`, `heads`, `blocks`, `max_len`,
//! `ff_width`, flags with bit 0 = positional, bit 1 = conflict feature), then
//! every tensor in declaration order as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, RepairModel};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NLNS";
pub const FORMAT_VERSION: u32 = 1;

const MAX_DIM: usize = 1 << 16;

pub fn save_model<W: Write>(model: &RepairModel, mut sink: W) -> Result<()> {
    let cfg = model.config();
    sink.write_all(&MAGIC)?;
    sink.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let flags = u32::from(cfg.positional) | (u32::from(cfg.conflict_feature) << 1);
    for v in [cfg.num_values, cfg.width, cfg.heads, cfg.blocks, cfg.max_len, cfg.ff_width] {
        sink.write_all(&(v as u32).to_le_bytes())?;
    }
    sink.write_all(&flags.to_le_bytes())?;
    let mut buf = Vec::with_capacity(model.num_params() * 4);
    for &p in model.params() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

fn read_u32<R: Read>(source: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    source
        .read_exact(&mut b)
        .map_err(|_| Error::Format(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_model<R: Read>(mut source: R) -> Result<RepairModel> {
    let mut magic = [0u8; 4];
    source
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut source, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut dims = [0usize; 6];
    for (slot, name) in dims
        .iter_mut()
        .zip(["num_values", "width", "heads", "blocks", "max_len", "ff_width"])
    {
        let v = read_u32(&mut source, name)? as usize;
        if v == 0 || v > MAX_DIM {
            return Err(Error::Format(format!("{name} = {v} out of range")));
        }
        *slot = v;
    }
    let flags = read_u32(&mut source, "flags")?;
    if flags & !0b11 != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#x}")));
    }
    let config = ModelConfig {
        num_values: dims[0],
        width: dims[1],
        heads: dims[2],
        blocks: dims[3],
        max_len: dims[4],
        ff_width: dims[5],
        positional: flags & 1 != 0,
        conflict_feature: flags & 2 != 0,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("inconsistent dimensions: {e}")))?;
    let count = RepairModel::zeros(config)?.num_params();
    let mut bytes = vec![0u8; count * 4];
    source
        .read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated tensor data (expected {count} values)")))?;
    let mut rest = [0u8; 1];
    if source.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Format("non-finite parameter".into()));
    }
    RepairModel::from_parts(config, params)
}

pub fn save_model_file(model: &RepairModel, path: impl AsRef<Path>) -> Result<()> {
    save_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<RepairModel> {
    load_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TokenInput;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(max_len: usize) -> RepairModel {
        let mut cfg = ModelConfig::desk(4);
        cfg.width = 16;
        cfg.ff_width = 32;
        cfg.max_len = max_len;
        RepairModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    fn bytes(m: &RepairModel) -> Vec<u8> {
        let mut out = Vec::new();
        save_model(m, &mut out).unwrap();
        out
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let first = bytes(&model(16));
        assert_eq!(&first[..4], b"NLNS");
        let loaded = load_model(first.as_slice()).unwrap();
        assert_eq!(bytes(&loaded), first);
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let data = bytes(&model(16));
        for cut in [0, 3, 7, 20, data.len() / 2, data.len() - 1] {
            assert!(matches!(load_model(&data[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = data.clone();
        bad[4] = 9;
        assert!(matches!(load_model(bad.as_slice()), Err(Error::Format(_))));
        let mut bad = data.clone();
        bad[0] = b'X';
        assert!(load_model(bad.as_slice()).is_err());
        let mut long = data;
        long.push(0);
        assert!(load_model(long.as_slice()).is_err());
    }

    #[test]
    fn loaded_model_respects_capacity() {
        let loaded = load_model(bytes(&model(16)).as_slice()).unwrap();
        let run = |n: usize| {
            let v = vec![0; n];
            let m = vec![true; n];
            let c = vec![0.0; n];
            loaded.forward_tokens(TokenInput { values: &v, mask: &m, conflicts: &c })
        };
        assert!(run(16).is_ok());
        assert!(matches!(run(17), Err(Error::Capacity { len: 17, capacity: 16 })));
    }
}
