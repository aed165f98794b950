//! Truncation-based adaptive compression: encode once, decode any prefix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bits::BitCode;
use crate::error::{Error, Result};
use crate::numerics::{loss_l2_batch, Network, TruncationMask};
use crate::truncation::TruncationDistribution;
use crate::{util, Matrix, Vector};

/// Identity of the parameters a code was produced with.
pub fn model_fingerprint(net: &Network) -> u64 {
    util::fingerprint_f64s(net.params_flat().iter())
}

#[derive(Debug, Clone, PartialEq)]
pub enum CodeValues {
    Real(Vec<f64>),
    Bits(BitCode),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderedCode {
    values: CodeValues,
    model: u64,
}

impl OrderedCode {
    pub fn real(values: Vec<f64>, model: u64) -> Self {
        Self {
            values: CodeValues::Real(values),
            model,
        }
    }

    pub fn bits(bits: BitCode, model: u64) -> Self {
        Self {
            values: CodeValues::Bits(bits),
            model,
        }
    }

    pub fn k(&self) -> usize {
        match &self.values {
            CodeValues::Real(v) => v.len(),
            CodeValues::Bits(b) => b.len(),
        }
    }

    pub fn model(&self) -> u64 {
        self.model
    }

    pub fn values(&self) -> &CodeValues {
        &self.values
    }

    /// `x↓b`: units past `b` set to zero.
    pub fn truncated(&self, b: usize) -> Self {
        let values = match &self.values {
            CodeValues::Real(v) => {
                CodeValues::Real(v.iter().enumerate().map(|(i, x)| if i < b { *x } else { 0.0 }).collect())
            }
            CodeValues::Bits(bits) => CodeValues::Bits(bits.truncated(b)),
        };
        Self {
            values,
            model: self.model,
        }
    }

    fn as_reals(&self) -> Vec<f64> {
        match &self.values {
            CodeValues::Real(v) => v.clone(),
            CodeValues::Bits(b) => b.to_bits().into_iter().map(|x| if x { 1.0 } else { 0.0 }).collect(),
        }
    }
}

pub fn encode(net: &Network, y: &[f64]) -> Result<OrderedCode> {
    let code = net.forward(y, TruncationMask::full(net.code_dim()))?.code;
    Ok(OrderedCode::real(code.iter().copied().collect(), model_fingerprint(net)))
}

/// `g(x↓b)`. Bit-identical to the reconstruction of a forward pass under
/// truncation mask `b`.
pub fn decode_prefix(net: &Network, code: &OrderedCode, b: usize) -> Result<Vector> {
    let k = net.code_dim();
    if code.k() != k {
        return Err(Error::dims(k, code.k(), "code length"));
    }
    if b == 0 || b > k {
        return Err(Error::OutOfRange { index: b, max: k });
    }
    if code.model != model_fingerprint(net) {
        return Err(Error::invalid("code was produced by a different model"));
    }
    let column = Matrix::from_vec(k, 1, code.truncated(b).as_reals());
    let out = net.decode_batch(&column, Some(b))?;
    Ok(out.column(0).into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    NestedDropout,
    Plain,
    AblationGreedy,
}

impl Ordering {
    pub fn label(self) -> &'static str {
        match self {
            Ordering::NestedDropout => "nested_dropout",
            Ordering::Plain => "plain",
            Ordering::AblationGreedy => "ablation_greedy",
        }
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nested" | "nested_dropout" => Ok(Ordering::NestedDropout),
            "plain" => Ok(Ordering::Plain),
            "ablation" | "ablation_greedy" => Ok(Ordering::AblationGreedy),
            other => Err(Error::invalid(format!("unknown ordering '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RdPoint {
    pub b: usize,
    pub bits: usize,
    pub mean_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateDistortionCurve {
    pub ordering: Ordering,
    pub points: Vec<RdPoint>,
}

impl RateDistortionCurve {
    pub fn loss_at(&self, b: usize) -> Option<f64> {
        self.points.iter().find(|p| p.b == b).map(|p| p.mean_l2)
    }
}

/// Bits per real code unit in the rate column.
pub const REAL_UNIT_BITS: usize = 64;

pub fn curves_csv(curves: &[RateDistortionCurve]) -> String {
    let mut out = String::from("ordering,b,bits,mean_l2\n");
    for c in curves {
        for p in &c.points {
            out.push_str(&format!("{},{},{},{}\n", c.ordering, p.b, p.bits, p.mean_l2));
        }
    }
    out
}

fn sorted_b_list(b_list: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut bs = b_list.to_vec();
    bs.sort_unstable();
    bs.dedup();
    if let Some(&b) = bs.iter().find(|&&b| b == 0 || b > k) {
        return Err(Error::OutOfRange { index: b, max: k });
    }
    Ok(bs)
}

/// Mean L2 loss when only the units in `keep` survive.
fn masked_loss(net: &Network, data: &Matrix, code: &Matrix, keep: &[bool]) -> Result<f64> {
    let mut masked = code.clone();
    for (r, &k) in keep.iter().enumerate() {
        if !k {
            masked.row_mut(r).fill(0.0);
        }
    }
    let recon = net.decode_batch(&masked, None)?;
    Ok(loss_l2_batch(data, &recon) / data.ncols() as f64)
}

/// Rate-distortion curve over `b_list`. Nested-dropout and plain orderings
/// keep units in stored order; greedy ablation reorders them first.
pub fn rd_curve(net: &Network, data: &Matrix, b_list: &[usize], ordering: Ordering) -> Result<RateDistortionCurve> {
    let perm = match ordering {
        Ordering::AblationGreedy => Some(ablation_greedy_ordering(net, data)?),
        _ => None,
    };
    rd_curve_with(net, data, b_list, ordering, perm.as_deref())
}

/// Same as [`rd_curve`] with an explicit importance order (0-based units,
/// most important first). `None` keeps the stored order.
pub fn rd_curve_with(
    net: &Network,
    data: &Matrix,
    b_list: &[usize],
    ordering: Ordering,
    importance: Option<&[usize]>,
) -> Result<RateDistortionCurve> {
    if data.ncols() == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = net.code_dim();
    let bs = sorted_b_list(b_list, k)?;
    let code = net.encode_batch(data)?;
    let n = data.ncols() as f64;
    let mut points = Vec::with_capacity(bs.len());
    for b in bs {
        let mean_l2 = match importance {
            None => loss_l2_batch(data, &net.decode_batch(&code, Some(b))?) / n,
            Some(order) => {
                if order.len() != k {
                    return Err(Error::dims(k, order.len(), "importance order"));
                }
                let mut keep = vec![false; k];
                for &u in &order[..b] {
                    keep[u] = true;
                }
                masked_loss(net, data, &code, &keep)?
            }
        };
        points.push(RdPoint {
            b,
            bits: b * REAL_UNIT_BITS,
            mean_l2,
        });
    }
    Ok(RateDistortionCurve { ordering, points })
}

/// Importance order from exact greedy ablation: repeatedly zero the remaining
/// unit whose removal raises the mean loss least (lowest index on ties); the
/// reversed removal sequence is the importance order.
pub fn ablation_greedy_ordering(net: &Network, data: &Matrix) -> Result<Vec<usize>> {
    if data.ncols() == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = net.code_dim();
    let code = net.encode_batch(data)?;
    let mut keep = vec![true; k];
    let mut removed = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for u in 0..k {
            if !keep[u] {
                continue;
            }
            keep[u] = false;
            let loss = masked_loss(net, data, &code, &keep)?;
            keep[u] = true;
            if best.is_none_or(|(_, l)| loss < l) {
                best = Some((u, loss));
            }
        }
        let (u, _) = best.expect("a unit remains");
        keep[u] = false;
        removed.push(u);
    }
    removed.reverse();
    Ok(removed)
}

/// `E_b[L(y, ŷ↓b)]` under `dist`; the same quantity as the nested dropout
/// mixture cost.
pub fn expected_distortion(net: &Network, data: &Matrix, dist: &TruncationDistribution) -> Result<f64> {
    let k = net.code_dim();
    if dist.k() != k {
        return Err(Error::dims(k, dist.k(), "distribution K"));
    }
    let pmf = dist.pmf_table();
    let support: Vec<usize> = (1..=k).filter(|&b| pmf[b - 1] > 0.0).collect();
    let curve = rd_curve_with(net, data, &support, Ordering::NestedDropout, None)?;
    let mut total = 0.0;
    let mut next = curve.points.iter().peekable();
    for b in 1..=k {
        let c = match next.peek() {
            Some(p) if p.b == b => next.next().map(|p| p.mean_l2).unwrap_or(0.0),
            _ => 0.0,
        };
        total += pmf[b - 1] * c;
    }
    Ok(total)
}
