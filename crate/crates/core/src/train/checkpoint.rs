//! Checkpoint files: `"ARTP"`, u32 version, u32 block count, then per block
//! u32 name length, UTF-8 name, u32 rows, u32 cols and `rows·cols` f64
//! values in column-major order, all little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::model::{ForwardMode, Model, ModelParams, ModelSpec, Standardizer};
use super::{Anchor, TrainConfig};
use crate::error::{Error, Result};
use crate::numcore::ParamSet;

pub const ARTP_MAGIC: &[u8; 4] = b"ARTP";
pub const ARTP_VERSION: u32 = 1;

fn named_blocks(model: &Model) -> Vec<(String, DMatrix<f64>)> {
    let mut out: Vec<(String, DMatrix<f64>)> =
        model.params.block_names().into_iter().zip(model.params.blocks().into_iter().cloned()).collect();
    let n = &model.norm;
    out.push(("norm.x_mean".into(), DMatrix::from_row_slice(1, n.x_mean.len(), &n.x_mean)));
    out.push(("norm.x_std".into(), DMatrix::from_row_slice(1, n.x_std.len(), &n.x_std)));
    out.push(("norm.y".into(), DMatrix::from_row_slice(1, 2, &[n.y_mean, n.y_std])));
    let s = &model.spec;
    let anchor = match s.anchor {
        Anchor::End => 0.0,
        Anchor::Start => 1.0,
    };
    let meta = [s.window_len as f64, s.sde_steps as f64, anchor, s.mode.code(), s.eval_paths as f64];
    out.push(("meta.spec".into(), DMatrix::from_row_slice(1, meta.len(), &meta)));
    out
}

pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ARTP_MAGIC);
    buf.extend_from_slice(&ARTP_VERSION.to_le_bytes());
    let blocks = named_blocks(model);
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, m) in &blocks {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn get<'a>(map: &'a BTreeMap<String, DMatrix<f64>>, name: &str) -> Result<&'a DMatrix<f64>> {
    map.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks block `{name}`")))
}

fn count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(Error::Format(format!("checkpoint {what} is not a count: {v}")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != ARTP_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint", path.display())));
    }
    let version = c.u32()?;
    if version != ARTP_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = c.u32()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("block name is not UTF-8".into()))?
            .to_string();
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let k = rows.checked_mul(cols).and_then(|k| k.checked_mul(8)).ok_or_else(|| Error::Format("block too large".into()))?;
        let data: Vec<f64> =
            c.take(k)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        if map.insert(name.clone(), DMatrix::from_vec(rows, cols, data)).is_some() {
            return Err(Error::Format(format!("duplicate block `{name}`")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint blocks".into()));
    }

    let cfg = TrainConfig {
        dz: get(&map, "head.w")?.ncols(),
        n_pairs: get(&map, "encoder.kernel.pair_raw")?.nrows(),
        n_real: get(&map, "encoder.kernel.real_raw")?.nrows(),
        n_freq: get(&map, "encoder.freq_raw")?.len(),
        hidden: get(&map, "encoder.bias.w1")?.nrows(),
        ..TrainConfig::default()
    };
    let dx = get(&map, "encoder.kernel.res_re")?.nrows();
    let mut params = ModelParams::init(dx, &cfg);
    let names = params.block_names();
    for (name, block) in names.iter().zip(params.blocks_mut()) {
        let v = get(&map, name)?;
        if v.shape() != block.shape() {
            return Err(Error::Format(format!("block `{name}` has shape {:?}, expected {:?}", v.shape(), block.shape())));
        }
        block.copy_from(v);
    }
    let x_mean = get(&map, "norm.x_mean")?;
    let x_std = get(&map, "norm.x_std")?;
    let y = get(&map, "norm.y")?;
    if x_mean.len() != dx || x_std.len() != dx || y.len() != 2 {
        return Err(Error::Format("normalization blocks do not match the input width".into()));
    }
    let norm = Standardizer { x_mean: x_mean.iter().copied().collect(), x_std: x_std.iter().copied().collect(), y_mean: y[0], y_std: y[1] };
    let meta = get(&map, "meta.spec")?;
    if meta.len() != 5 {
        return Err(Error::Format("meta.spec must hold 5 values".into()));
    }
    let anchor = match meta[2] {
        0.0 => Anchor::End,
        1.0 => Anchor::Start,
        v => return Err(Error::Format(format!("unknown anchor code {v}"))),
    };
    let spec = ModelSpec {
        window_len: count(meta[0], "window length")?,
        sde_steps: count(meta[1], "step count")?,
        anchor,
        mode: ForwardMode::from_code(meta[3])?,
        eval_paths: count(meta[4], "path count")?,
    };
    if spec.window_len == 0 || spec.sde_steps == 0 || spec.eval_paths == 0 {
        return Err(Error::Format("checkpoint counts must be positive".into()));
    }
    Ok(Model { params, norm, spec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::testutil::toy_dataset;

    #[test]
    fn round_trip_is_exact() {
        let ds = toy_dataset(6, 5, 3, 31);
        let cfg = TrainConfig { dz: 3, hidden: 4, n_freq: 2, n_pairs: 2, n_real: 1, sde_steps: 6, ..TrainConfig::default() };
        let model = Model::new(&ds, &cfg, ForwardMode::Ode).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.artp");
        write_checkpoint(&model, &p).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back, model);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"ARTP");
        write_checkpoint(&back, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let ds = toy_dataset(6, 5, 2, 32);
        let cfg = TrainConfig { dz: 2, hidden: 3, n_freq: 1, n_pairs: 1, n_real: 0, ..TrainConfig::default() };
        let model = Model::new(&ds, &cfg, ForwardMode::Sde).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.artp");
        write_checkpoint(&model, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format(_))));
        std::fs::write(&p, b"ARTW\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(&dir.path().join("missing")), Err(Error::Io(_))));
    }
}
