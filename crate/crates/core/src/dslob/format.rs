//! Binary window files: `"ARTW"`, u32 version, u64 n, L, dx, then `n·L·dx`
//! window values (window, time, channel order) and `n` targets, all LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{contract, Error, Result};

pub const ARTW_MAGIC: &[u8; 4] = b"ARTW";
pub const ARTW_VERSION: u32 = 1;

/// `n` windows of shape `L × dx` with one scalar target each.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub window_len: usize,
    pub dx: usize,
    values: Vec<f64>,
    pub targets: Vec<f64>,
}

impl WindowedDataset {
    pub fn new(window_len: usize, dx: usize, values: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if window_len == 0 || dx == 0 {
            return contract("windows need positive length and channel count");
        }
        if values.len() != targets.len() * window_len * dx {
            return contract(format!(
                "{} values do not fill {} windows of {window_len}×{dx}",
                values.len(),
                targets.len()
            ));
        }
        Ok(Self { window_len, dx, values, targets })
    }

    /// Every `window_len` run of rows in `features` whose index is below `n`.
    pub fn from_series(features: &DMatrix<f64>, window_len: usize, targets: Vec<f64>) -> Result<Self> {
        let dx = features.ncols();
        let n = targets.len();
        if n + window_len - 1 > features.nrows() {
            return contract("not enough rows for the requested windows");
        }
        let mut values = Vec::with_capacity(n * window_len * dx);
        for s in 0..n {
            for t in s..s + window_len {
                values.extend(features.row(t).iter());
            }
        }
        Self::new(window_len, dx, values, targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn window_slice(&self, i: usize) -> &[f64] {
        let k = self.window_len * self.dx;
        &self.values[i * k..(i + 1) * k]
    }

    pub fn window(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.window_len, self.dx, self.window_slice(i))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Subset in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.window_len * self.dx);
        for &i in idx {
            values.extend_from_slice(self.window_slice(i));
        }
        Self { window_len: self.window_len, dx: self.dx, values, targets: idx.iter().map(|&i| self.targets[i]).collect() }
    }

    /// The exact bytes [`write_artw`](Self::write_artw) produces.
    pub fn artw_bytes(&self) -> Vec<u8> {
        let mut w = Vec::with_capacity(32 + 8 * (self.values.len() + self.targets.len()));
        w.extend_from_slice(ARTW_MAGIC);
        w.extend_from_slice(&ARTW_VERSION.to_le_bytes());
        for v in [self.len(), self.window_len, self.dx] {
            w.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in self.values.iter().chain(&self.targets) {
            w.extend_from_slice(&v.to_le_bytes());
        }
        w
    }

    pub fn write_artw(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.artw_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_artw(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ARTW_MAGIC {
            return Err(Error::Format(format!("{}: not a window file", path.display())));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != ARTW_VERSION {
            return Err(Error::Format(format!("{}: unsupported version {version}", path.display())));
        }
        let mut b8 = [0u8; 8];
        let mut header = [0usize; 3];
        for h in &mut header {
            r.read_exact(&mut b8)?;
            *h = usize::try_from(u64::from_le_bytes(b8)).map_err(|_| Error::Format("header overflow".into()))?;
        }
        let [n, l, dx] = header;
        let total = n
            .checked_mul(l)
            .and_then(|v| v.checked_mul(dx))
            .ok_or_else(|| Error::Format("header overflow".into()))?;
        let mut read_f64s = |k: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; k * 8];
            r.read_exact(&mut buf).map_err(|_| Error::Format(format!("{}: truncated", path.display())))?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };
        let values = read_f64s(total)?;
        let targets = read_f64s(n)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{}: trailing bytes", path.display())));
        }
        Self::new(l, dx, values, targets)
    }
}

/// Seed CSV: header row, one row per second, numeric columns.
pub fn read_seed_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let width = rdr.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Format(format!("row {} has {} fields, expected {width}", rows + 1, rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Format(format!("row {}: `{field}` is not a number", rows + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, width, &data))
}
