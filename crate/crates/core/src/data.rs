//! Datasets: synthetic generators, ingestion and normalization.
//!
//! Examples are stored as the columns of a `D × N` matrix, matching the
//! network's batch layout.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binarize::read_u64;
use crate::error::{Error, Result};
use crate::numerics::seeded_rng;
use crate::pca::canonical_signs;
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    /// Population variance before scaling. Constant dimensions (variance 0)
    /// are only centered.
    pub variance: Vec<f64>,
}

impl Normalization {
    fn scale(&self, i: usize) -> f64 {
        let v = self.variance[i];
        if v > 0.0 {
            v.sqrt()
        } else {
            1.0
        }
    }

    /// Apply to new data (e.g. a held-out split).
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.nrows() != self.mean.len() {
            return Err(Error::dims(self.mean.len(), m.nrows(), "normalization dim"));
        }
        Ok(Matrix::from_fn(m.nrows(), m.ncols(), |r, c| (m[(r, c)] - self.mean[r]) / self.scale(r)))
    }

    pub fn invert(&self, m: &Matrix) -> Result<Matrix> {
        if m.nrows() != self.mean.len() {
            return Err(Error::dims(self.mean.len(), m.nrows(), "normalization dim"));
        }
        Ok(Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] * self.scale(r) + self.mean[r]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    normalization: Option<Normalization>,
    provenance: String,
}

impl Dataset {
    pub fn new(x: Matrix, provenance: impl Into<String>) -> Self {
        Self {
            x,
            normalization: None,
            provenance: provenance.into(),
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.x
    }

    pub fn into_matrix(self) -> Matrix {
        self.x
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Center each dimension and scale it to unit variance; the statistics
    /// are recorded so the transform can be inverted.
    pub fn normalize(&mut self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.normalization.is_some() {
            return Ok(());
        }
        let n = self.len() as f64;
        let mut mean = Vec::with_capacity(self.dim());
        let mut variance = Vec::with_capacity(self.dim());
        for row in self.x.row_iter() {
            let m = row.sum() / n;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            variance.push(v);
        }
        let norm = Normalization { mean, variance };
        self.x = norm.apply(&self.x)?;
        self.normalization = Some(norm);
        Ok(())
    }

    /// First `n` examples and the rest.
    pub fn split(&self, n: usize) -> (Matrix, Matrix) {
        let n = n.min(self.len());
        (
            self.x.columns(0, n).into_owned(),
            self.x.columns(n, self.len() - n).into_owned(),
        )
    }

    /// SHA-256 over the shape and the raw f64 bits, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for v in self.x.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Packed rows: `u64 N`, `u64 D`, then `N·D` little-endian f64, row-major.
    pub fn write_packed<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for col in self.x.column_iter() {
            for v in col.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_packed<R: Read>(mut r: R, provenance: impl Into<String>) -> Result<Self> {
        let n = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        if d == 0 {
            return Err(Error::Format("packed rows with D = 0".into()));
        }
        let total = n
            .checked_mul(d)
            .and_then(|t| t.checked_mul(8))
            .ok_or_else(|| Error::Format("packed header overflows".into()))?;
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() != total {
            return Err(Error::Format(format!("expected {total} payload bytes, found {}", buf.len())));
        }
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self::new(Matrix::from_vec(d, n, values), provenance))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.x.len());
        self.write_packed(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        Self::read_packed(std::io::BufReader::new(f), format!("file:{}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinwheelParams {
    pub num_arms: usize,
    pub points_per_arm: usize,
    pub radial_std: f64,
    pub tangential_std: f64,
    pub rate: f64,
}

impl Default for PinwheelParams {
    fn default() -> Self {
        Self {
            num_arms: 5,
            points_per_arm: 200,
            radial_std: 0.3,
            tangential_std: 0.05,
            rate: 0.25,
        }
    }
}

/// Gaussian blobs at radius 1 on `num_arms` evenly spaced rays, each point
/// rotated by an extra angle `rate · exp(radius)`.
pub fn gen_pinwheel(p: &PinwheelParams, seed: u64) -> Result<Dataset> {
    if p.num_arms == 0 {
        return Err(Error::invalid("num_arms must be >= 1"));
    }
    if p.radial_std < 0.0 || p.tangential_std < 0.0 {
        return Err(Error::invalid("pinwheel standard deviations must be >= 0"));
    }
    let mut rng = seeded_rng(seed);
    let n = p.num_arms * p.points_per_arm;
    let mut x = Matrix::zeros(2, n);
    for arm in 0..p.num_arms {
        let base = 2.0 * std::f64::consts::PI * arm as f64 / p.num_arms as f64;
        for i in 0..p.points_per_arm {
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            let f0 = 1.0 + p.radial_std * z0;
            let f1 = p.tangential_std * z1;
            let angle = base + p.rate * f0.exp();
            let (s, c) = angle.sin_cos();
            let col = arm * p.points_per_arm + i;
            x[(0, col)] = f0 * c - f1 * s;
            x[(1, col)] = f0 * s + f1 * c;
        }
    }
    Ok(Dataset::new(
        x,
        format!(
            "pinwheel(arms={},points={},radial={},tangential={},rate={},seed={seed})",
            p.num_arms, p.points_per_arm, p.radial_std, p.tangential_std, p.rate
        ),
    ))
}

/// Haar-distributed orthogonal matrix.
pub fn random_orthogonal(d: usize, seed: u64) -> Matrix {
    let mut rng = seeded_rng(seed);
    let g = Matrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// `Y = Qₚ Λ^{1/2} Z` with a random orthogonal `Qₚ`. Returns the data and
/// `Qₚ` with its columns in spectrum order. Dimensions past the spectrum get
/// zero variance.
pub fn gen_gaussian_with_basis(d: usize, n: usize, spectrum: &[f64], seed: u64) -> Result<(Dataset, Matrix)> {
    if spectrum.is_empty() || spectrum.len() > d {
        return Err(Error::invalid(format!("spectrum length {} must be in 1..={d}", spectrum.len())));
    }
    if spectrum.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("spectrum entries must be positive"));
    }
    let mut basis = random_orthogonal(d, seed ^ 0x5eed_0f0f);
    canonical_signs(&mut basis);
    let mut rng = seeded_rng(seed);
    let z = Matrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
    let scale = Vector::from_fn(d, |i, _| spectrum.get(i).copied().unwrap_or(0.0).sqrt());
    let x = &basis * Matrix::from_diagonal(&scale) * z;
    let spec: Vec<String> = spectrum.iter().map(|s| s.to_string()).collect();
    Ok((
        Dataset::new(x, format!("gaussian(d={d},n={n},spectrum=[{}],seed={seed})", spec.join(";"))),
        basis,
    ))
}

pub fn gen_gaussian(d: usize, n: usize, spectrum: &[f64], seed: u64) -> Result<Dataset> {
    gen_gaussian_with_basis(d, n, spectrum, seed).map(|(ds, _)| ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IngestFormat {
    PackedF64Rows,
    PngDir,
}

impl FromStr for IngestFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "packed-f64-rows" => Ok(Self::PackedF64Rows),
            "png-dir" => Ok(Self::PngDir),
            other => Err(Error::invalid(format!("unknown data format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub dataset: Dataset,
    pub skipped: usize,
}

/// Load and normalize a dataset. Unreadable images, or images whose shape
/// differs from the first one, are skipped and counted.
pub fn ingest_image_dataset(path: &Path, format: IngestFormat) -> Result<Ingested> {
    let (mut dataset, skipped) = match format {
        IngestFormat::PackedF64Rows => (Dataset::load(path)?, 0),
        IngestFormat::PngDir => ingest_png_dir(path)?,
    };
    dataset.normalize()?;
    Ok(Ingested { dataset, skipped })
}

fn ingest_png_dir(dir: &Path) -> Result<(Dataset, usize)> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut shape = None;
    let mut values = Vec::new();
    let mut skipped = 0;
    for f in &files {
        let img = match image::open(f) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping {}: {e}", f.display());
                skipped += 1;
                continue;
            }
        };
        let dims = img.dimensions();
        if *shape.get_or_insert(dims) != dims {
            log::warn!("skipping {}: size {:?} differs from {:?}", f.display(), dims, shape);
            skipped += 1;
            continue;
        }
        values.extend(img.as_raw().iter().map(|&b| b as f64));
    }
    let Some((w, h)) = shape else {
        return Err(Error::EmptyDataset);
    };
    let d = (w * h * 3) as usize;
    let n = values.len() / d;
    if skipped > 0 {
        log::warn!("{skipped} of {} files skipped", files.len());
    }
    Ok((Dataset::new(Matrix::from_vec(d, n, values), format!("png-dir:{}", dir.display())), skipped))
}
