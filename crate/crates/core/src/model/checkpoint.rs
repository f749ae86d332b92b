//! `model.bin` holds the parameters, `model.json` the metadata needed to
//! rebuild the network.
//!
//! Binary layout, little-endian: magic `TTCK`, format version `u32`, count
//! `u32`, then per parameter: name length `u16`, UTF-8 name, group `u8`,
//! rank `u8`, dims as `u32`, values as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NetConfig, ParamGroup, ParamStore, TrackerNet};

const MAGIC: &[u8; 4] = b"TTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: NetConfig,
    pub seed: u64,
    pub steps: u64,
    pub checksum: String,
    #[serde(default)]
    pub note: String,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_params(w: &mut impl Write, store: &ParamStore) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for p in store.params() {
        w.write_u16::<LittleEndian>(p.name.len() as u16)?;
        w.write_all(p.name.as_bytes())?;
        w.write_u8(p.group.code())?;
        w.write_u8(p.value.ndim() as u8)?;
        for &d in p.value.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in p.value.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_params(r: &mut impl Read) -> Result<ParamStore> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let group = ParamGroup::from_code(r.read_u8().map_err(io)?).ok_or_else(|| bad("unknown parameter group"))?;
        let rank = r.read_u8().map_err(io)? as usize;
        let dims = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let n: usize = dims.iter().product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
        store.push(&name, group, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap());
    }
    Ok(store)
}

pub fn save_checkpoint(dir: &Path, net: &TrackerNet, seed: u64, steps: u64, note: &str) -> Result<CheckpointMeta> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bin = dir.join("model.bin");
    let mut w = BufWriter::new(File::create(&bin).map_err(io_err(&bin))?);
    write_params(&mut w, &net.params).map_err(io_err(&bin))?;
    w.flush().map_err(io_err(&bin))?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config: net.config.clone(),
        seed,
        steps,
        checksum: net.params.checksum(),
        note: note.to_string(),
    };
    let json = dir.join("model.json");
    std::fs::write(&json, serde_json::to_string_pretty(&meta)?).map_err(io_err(&json))?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrackerNet, CheckpointMeta)> {
    let json = dir.join("model.json");
    let text = std::fs::read_to_string(&json).map_err(io_err(&json))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    let bin = dir.join("model.bin");
    let mut r = BufReader::new(File::open(&bin).map_err(io_err(&bin))?);
    let store = read_params(&mut r)?;
    let net = TrackerNet::from_params(meta.config.clone(), store)?;
    if net.params.checksum() != meta.checksum {
        return Err(Error::Checkpoint("checksum does not match model.json".into()));
    }
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetConfig {
            channels: 8,
            input_size: 64,
            ..NetConfig::default()
        };
        let net = TrackerNet::new(cfg, 11).unwrap();
        let meta = save_checkpoint(dir.path(), &net, 11, 7, "test").unwrap();
        let (back, m2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta, m2);

        let bin = dir.path().join("model.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&bin, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
        std::fs::write(&bin, &bytes[..20]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
