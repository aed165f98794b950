//! Distribution `p_B` over truncation indices `1..=K`.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DistKind {
    /// `p(b) ∝ ρ^(b−1) (1−ρ)`, renormalized over `1..=K`.
    Geometric { rho: f64 },
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationDistribution {
    kind: DistKind,
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl TruncationDistribution {
    pub fn geometric(rho: f64, k: usize) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::invalid(format!("geometric rate {rho} not in (0,1)")));
        }
        if k == 0 {
            return Err(Error::invalid("K must be >= 1"));
        }
        let mut raw: Vec<f64> = (0..k).map(|i| rho.powi(i as i32) * (1.0 - rho)).collect();
        let z = 1.0 - rho.powi(k as i32);
        for p in &mut raw {
            *p /= z;
        }
        Ok(Self::build(DistKind::Geometric { rho }, raw))
    }

    /// Explicit table. Entries may be zero (a point mass at `K` recovers the
    /// order-free autoencoder); see [`TruncationDistribution::has_full_support`].
    pub fn explicit(table: &[f64]) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::invalid("explicit table is empty"));
        }
        if table.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("explicit probabilities must be finite and >= 0"));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("explicit table sums to {total}, not 1")));
        }
        Ok(Self::build(DistKind::Explicit, table.iter().map(|p| p / total).collect()))
    }

    pub fn point_mass(b: usize, k: usize) -> Result<Self> {
        if b == 0 || b > k {
            return Err(Error::OutOfRange { index: b, max: k });
        }
        let mut t = vec![0.0; k];
        t[b - 1] = 1.0;
        Self::explicit(&t)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::explicit(&vec![1.0 / k as f64; k])
    }

    fn build(kind: DistKind, pmf: Vec<f64>) -> Self {
        // 1 − (backward tail sum): monotone, and cdf(K) is exactly one.
        let mut cdf = vec![1.0; pmf.len()];
        let mut tail = 0.0;
        for b in (0..pmf.len().saturating_sub(1)).rev() {
            tail += pmf[b + 1];
            cdf[b] = (1.0 - tail).max(0.0);
        }
        Self { kind, pmf, cdf }
    }

    pub fn k(&self) -> usize {
        self.pmf.len()
    }

    pub fn kind(&self) -> &DistKind {
        &self.kind
    }

    pub fn pmf_table(&self) -> &[f64] {
        &self.pmf
    }

    /// Every index has positive mass, which is what makes the ordering strict.
    pub fn has_full_support(&self) -> bool {
        self.pmf.iter().all(|p| *p > 0.0)
    }

    fn check(&self, b: usize) -> Result<()> {
        if b == 0 || b > self.k() {
            return Err(Error::OutOfRange { index: b, max: self.k() });
        }
        Ok(())
    }

    pub fn pmf(&self, b: usize) -> Result<f64> {
        self.check(b)?;
        Ok(self.pmf[b - 1])
    }

    pub fn cdf(&self, b: usize) -> Result<f64> {
        self.check(b)?;
        Ok(self.cdf[b - 1])
    }

    /// `P[B ≥ b]`, with `tail(1) = 1`.
    fn tail(&self, b: usize) -> f64 {
        if b <= 1 {
            1.0
        } else {
            self.pmf[b - 1..].iter().sum()
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sample_above(0, rng)
    }

    /// Sample from `p_B(· | b > floor)`. With `floor = 0` this is plain
    /// sampling; unit sweeping uses it to skip indices that are frozen.
    pub fn sample_above<R: Rng + ?Sized>(&self, floor: usize, rng: &mut R) -> usize {
        let k = self.k();
        let floor = floor.min(k - 1);
        let base = if floor == 0 { 0.0 } else { self.cdf[floor - 1] };
        let mass = 1.0 - base;
        let u: f64 = rng.random();
        let target = base + u * mass;
        // first index whose cdf exceeds target
        let idx = self.cdf[floor..].partition_point(|c| *c <= target) + floor;
        let mut b = idx.min(k - 1);
        // never land on a zero-mass index
        while self.pmf[b] == 0.0 && b + 1 < k {
            b += 1;
        }
        b + 1
    }

    /// `F_B(K) − F_B(b−1)` for `b = 1..=K`.
    pub fn telescoping_coefficients(&self) -> Vec<f64> {
        (1..=self.k()).map(|b| self.tail(b)).collect()
    }

    /// `P[b ≥ max(i,j) | b ≥ min(i,j)]` from the pmf table.
    pub fn conditional_reach(&self, i: usize, j: usize) -> Result<f64> {
        self.check(i)?;
        self.check(j)?;
        let (lo, hi) = (i.min(j), i.max(j));
        let denom = self.tail(lo);
        if denom == 0.0 {
            return Err(Error::invalid(format!("no mass at or above index {lo}")));
        }
        Ok(self.tail(hi) / denom)
    }
}

/// `Σ_b p_B(b) C^(b)` from per-truncation costs.
pub fn mixture_from_costs(dist: &TruncationDistribution, costs: &[f64]) -> Result<f64> {
    if costs.len() != dist.k() {
        return Err(Error::dims(dist.k(), costs.len(), "per-truncation costs"));
    }
    Ok(dist.pmf.iter().zip(costs).map(|(p, c)| p * c).sum())
}

/// The same mixture written as a telescoping sum over marginal gains
/// `C^(b) − C^(b−1)` (with `C^(0) = 0`).
pub fn telescoped_cost(dist: &TruncationDistribution, costs: &[f64]) -> Result<f64> {
    if costs.len() != dist.k() {
        return Err(Error::dims(dist.k(), costs.len(), "per-truncation costs"));
    }
    let coef = dist.telescoping_coefficients();
    let mut prev = 0.0;
    let mut total = 0.0;
    for (c, w) in costs.iter().zip(coef) {
        total += w * (c - prev);
        prev = *c;
    }
    Ok(total)
}

/// Closed-form `P[B > b] = ρ^b` of the untruncated geometric.
pub fn geometric_tail_unnormalized(rho: f64, b: usize) -> f64 {
    rho.powi(b as i32)
}

/// Closed-form `ρ^(b−1)(1−ρ)` of the untruncated geometric.
pub fn geometric_pmf_unnormalized(rho: f64, b: usize) -> f64 {
    rho.powi(b as i32 - 1) * (1.0 - rho)
}

impl std::str::FromStr for TruncationDistribution {
    type Err = Error;

    /// `geometric:RHO:K` or `explicit:p1,p2,...,pK`.
    ///
    /// A bare `geometric:RHO` needs a `K` from elsewhere; use
    /// [`DistSpec`] for that form.
    fn from_str(s: &str) -> Result<Self> {
        let spec: DistSpec = s.parse()?;
        match spec {
            DistSpec::Geometric { rho, k: Some(k) } => Self::geometric(rho, k),
            DistSpec::Geometric { k: None, .. } => {
                Err(Error::invalid("geometric spec needs K: use geometric:RHO:K"))
            }
            DistSpec::Explicit(t) => Self::explicit(&t),
        }
    }
}

/// Textual distribution spec as it appears in config files.
#[derive(Debug, Clone, PartialEq)]
pub enum DistSpec {
    Geometric { rho: f64, k: Option<usize> },
    Explicit(Vec<f64>),
}

impl DistSpec {
    pub fn build(&self, k: usize) -> Result<TruncationDistribution> {
        match self {
            DistSpec::Geometric { rho, k: spec_k } => {
                if let Some(sk) = spec_k {
                    if *sk != k {
                        return Err(Error::dims(k, *sk, "distribution K vs model K"));
                    }
                }
                TruncationDistribution::geometric(*rho, k)
            }
            DistSpec::Explicit(t) => {
                if t.len() != k {
                    return Err(Error::dims(k, t.len(), "explicit table length vs K"));
                }
                TruncationDistribution::explicit(t)
            }
        }
    }
}

impl std::str::FromStr for DistSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("bad distribution spec `{s}`")))?;
        let num = |t: &str| -> Result<f64> {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad number `{t}`: {e}")))
        };
        match kind.trim() {
            "geometric" => {
                let mut parts = rest.split(':');
                let rho = num(parts.next().unwrap_or_default())?;
                let k = match parts.next() {
                    Some(t) => Some(
                        t.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::invalid(format!("bad K `{t}`: {e}")))?,
                    ),
                    None => None,
                };
                Ok(DistSpec::Geometric { rho, k })
            }
            "explicit" => Ok(DistSpec::Explicit(
                rest.split(',').map(num).collect::<Result<Vec<_>>>()?,
            )),
            other => Err(Error::invalid(format!("unknown distribution kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for DistSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DistSpec::Geometric { rho, k: None } => write!(f, "geometric:{rho}"),
            DistSpec::Geometric { rho, k: Some(k) } => write!(f, "geometric:{rho}:{k}"),
            DistSpec::Explicit(t) => {
                let parts: Vec<String> = t.iter().map(|p| p.to_string()).collect();
                write!(f, "explicit:{}", parts.join(","))
            }
        }
    }
}

impl Serialize for DistSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DistSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
