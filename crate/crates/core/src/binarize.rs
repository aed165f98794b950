//! Per-unit quantile thresholding of real codes into bits with fixed
//! marginal rate `β` (bit = 1 means "above threshold").

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::bits::{bytes_for, BitCode};
use crate::error::{Error, Result};
use crate::{util, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub count: usize,
    pub hash: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizerModel {
    pub thresholds: Vec<f64>,
    pub beta: f64,
    pub fitted_on: Fingerprint,
    /// Units whose fitting values were all equal.
    pub degenerate: Vec<bool>,
}

/// Lower (type-1) empirical quantile of already sorted values.
pub fn lower_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    // small slack so that e.g. 0.8 * 100 does not round up to 81
    let rank = ((n as f64 * p) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

impl BinarizerModel {
    /// Fit on a `K × N` code matrix (one column per example).
    pub fn fit(codes: &Matrix, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid(format!("beta {beta} not in (0,1)")));
        }
        let (k, n) = codes.shape();
        if n < 10 {
            return Err(Error::invalid(format!("need at least 10 codes to fit, got {n}")));
        }
        let mut thresholds = Vec::with_capacity(k);
        let mut degenerate = Vec::with_capacity(k);
        for row in codes.row_iter() {
            let mut vals: Vec<f64> = row.iter().copied().collect();
            vals.sort_by(f64::total_cmp);
            let constant = vals[0] == vals[n - 1];
            thresholds.push(if constant { vals[0] } else { lower_quantile(&vals, 1.0 - beta) });
            degenerate.push(constant);
        }
        Ok(Self {
            thresholds,
            beta,
            fitted_on: Fingerprint {
                count: n,
                hash: util::fingerprint_f64s(codes.iter()),
            },
            degenerate,
        })
    }

    pub fn k(&self) -> usize {
        self.thresholds.len()
    }

    pub fn binarize(&self, code: &[f64]) -> Result<BitCode> {
        if code.len() != self.k() {
            return Err(Error::dims(self.k(), code.len(), "code length"));
        }
        let mut out = BitCode::zeros(self.k());
        for (i, (v, t)) in code.iter().zip(&self.thresholds).enumerate() {
            if v > t {
                out.set(i, true);
            }
        }
        Ok(out)
    }

    /// Binarize every column of a `K × N` matrix.
    pub fn binarize_batch(&self, codes: &Matrix) -> Result<Vec<BitCode>> {
        if codes.nrows() != self.k() {
            return Err(Error::dims(self.k(), codes.nrows(), "code rows"));
        }
        codes
            .column_iter()
            .map(|c| self.binarize(c.as_slice()))
            .collect()
    }

    /// Per-unit fraction of ones over the columns of `codes`.
    pub fn positive_rates(&self, codes: &Matrix) -> Result<Vec<f64>> {
        if codes.nrows() != self.k() {
            return Err(Error::dims(self.k(), codes.nrows(), "code rows"));
        }
        let n = codes.ncols() as f64;
        Ok(codes
            .row_iter()
            .zip(&self.thresholds)
            .map(|(row, t)| row.iter().filter(|v| *v > t).count() as f64 / n)
            .collect())
    }

    /// Allowed deviation of a fitted unit's rate from `β`.
    pub fn calibration_bound(&self) -> f64 {
        let n = self.fitted_on.count as f64;
        (3.0 * (self.beta * (1.0 - self.beta) / n).sqrt()).max(0.02)
    }
}

// ---- codes file ----------------------------------------------------------

const CODES_MAGIC: &[u8; 4] = b"ORDC";
pub const CODES_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CodesFile {
    pub beta: f64,
    pub thresholds: Vec<f64>,
    pub codes: Vec<BitCode>,
}

impl CodesFile {
    pub fn k(&self) -> usize {
        self.thresholds.len()
    }

    /// Layout (little-endian): `"ORDC"`, u32 version, u64 N, u64 K, f64 β,
    /// K × f64 thresholds, then N rows of `ceil(K/8)` packed bytes.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let k = self.k();
        w.write_all(CODES_MAGIC)?;
        w.write_all(&CODES_VERSION.to_le_bytes())?;
        w.write_all(&(self.codes.len() as u64).to_le_bytes())?;
        w.write_all(&(k as u64).to_le_bytes())?;
        w.write_all(&self.beta.to_le_bytes())?;
        for t in &self.thresholds {
            w.write_all(&t.to_le_bytes())?;
        }
        for c in &self.codes {
            if c.len() != k {
                return Err(Error::dims(k, c.len(), "code length"));
            }
            w.write_all(c.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODES_MAGIC {
            return Err(Error::Format("not a codes file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CODES_VERSION {
            return Err(Error::Format(format!("unsupported codes version {version}")));
        }
        let n = read_u64(&mut r)? as usize;
        let k = read_u64(&mut r)? as usize;
        let beta = read_f64(&mut r)?;
        let thresholds = (0..k).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let width = bytes_for(k);
        let mut codes = Vec::with_capacity(n);
        for _ in 0..n {
            let mut buf = vec![0u8; width];
            r.read_exact(&mut buf)?;
            codes.push(BitCode::from_bytes(k, buf)?);
        }
        Ok(Self {
            beta,
            thresholds,
            codes,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}
