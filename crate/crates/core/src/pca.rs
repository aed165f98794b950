//! PCA and the structure of optimal linear nested dropout solutions.
//!
//! Data matrices are `D × N` (one example per column). With the centered data
//! `Y = Q Σ Rᵀ`, an optimal linear autoencoder has decoder `Γ = Q T⁻¹` and
//! code `X = T Σ Rᵀ` for some invertible `T`; nested dropout forces `T` to be
//! commutative in truncation and inversion, and an orthonormal decoder pins it
//! to a signed identity.

use nalgebra::SymmetricEigen;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Layer, LayerSpec, Network};
use crate::trainer::{TrainConfig, Trainer};
use crate::truncation::TruncationDistribution;
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaDecomposition {
    /// Per-dimension mean removed before decomposition.
    pub mean: Vector,
    /// `D × K`, orthonormal columns, largest-magnitude entry of each positive.
    pub q: Matrix,
    /// Singular values of the centered data, nonincreasing.
    pub sigma: Vec<f64>,
    /// `N × K`, `R_k = Yᵀ Q_k / σ_k` (zero column where `σ_k = 0`).
    pub r: Matrix,
    /// Every eigenvalue of `Y Yᵀ` in nonincreasing order (length `D`).
    pub eigenvalues: Vec<f64>,
    /// Set when fewer than `K` singular values are numerically nonzero.
    pub rank_deficient: bool,
}

pub fn center(data: &Matrix) -> (Matrix, Vector) {
    let n = data.ncols().max(1) as f64;
    let mean = data.column_sum() / n;
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    (centered, mean)
}

/// Flip each column so its largest-magnitude entry is positive.
pub fn canonical_signs(m: &mut Matrix) {
    for mut col in m.column_iter_mut() {
        let mut best = 0.0f64;
        for v in col.iter() {
            if v.abs() > best.abs() {
                best = *v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

pub fn pca(data: &Matrix, k: usize) -> Result<PcaDecomposition> {
    let (d, n) = data.shape();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if k == 0 || k > d.min(n) {
        return Err(Error::invalid(format!("K={k} must be in 1..=min(D={d}, N={n})")));
    }
    let (y, mean) = center(data);
    let cov = &y * y.transpose();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut q = Matrix::zeros(d, k);
    for (c, &i) in order.iter().take(k).enumerate() {
        q.set_column(c, &eig.eigenvectors.column(i));
    }
    canonical_signs(&mut q);

    let floor = 1e-12 * eigenvalues[0].max(f64::MIN_POSITIVE) * d as f64;
    let mut rank_deficient = false;
    let mut sigma = Vec::with_capacity(k);
    let mut r = Matrix::zeros(n, k);
    let yt_q = y.transpose() * &q;
    for c in 0..k {
        if eigenvalues[c] <= floor {
            rank_deficient = true;
            sigma.push(0.0);
            continue;
        }
        let s = eigenvalues[c].sqrt();
        sigma.push(s);
        r.set_column(c, &(yt_q.column(c) / s));
    }
    if rank_deficient {
        log::warn!("data rank below K={k}; trailing singular values set to 0");
    }
    Ok(PcaDecomposition {
        mean,
        q,
        sigma,
        r,
        eigenvalues,
        rank_deficient,
    })
}

impl PcaDecomposition {
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// `Σ_{k > b} σ_k²`: the optimal total squared error of a rank-`b` linear
    /// code over the whole dataset.
    pub fn tail_energy(&self, b: usize) -> f64 {
        self.eigenvalues.iter().skip(b).sum()
    }

    /// Linear autoencoder with `Γ = Q`, `Ω = Qᵀ` and biases undoing the mean.
    pub fn planted_network(&self, seed: u64) -> Result<Network> {
        let (d, k) = self.q.shape();
        let omega = self.q.transpose();
        let enc_bias = -(&omega * &self.mean);
        let enc = Layer::new(LayerSpec::new(d, k, Activation::Linear)?, omega, enc_bias)?;
        let dec = Layer::new(LayerSpec::new(k, d, Activation::Linear)?, self.q.clone(), self.mean.clone())?;
        Network::from_layers(vec![enc], vec![dec], false, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationCommutativityReport {
    #[serde(skip)]
    pub t: Matrix,
    pub tol: f64,
    /// `minor_invertible[b-1]` for the `b × b` leading principal minor.
    pub minor_invertible: Vec<bool>,
    /// `||J T⁻¹ Jᵀ − (J T Jᵀ)⁻¹||_F`; infinite where the minor is singular.
    pub defects: Vec<f64>,
    pub passed: bool,
}

impl TruncationCommutativityReport {
    pub fn max_defect(&self) -> f64 {
        self.defects.iter().copied().fold(0.0, f64::max)
    }
}

fn try_invert(m: &Matrix) -> Option<Matrix> {
    let sv = m.clone().svd(false, false).singular_values;
    let (lo, hi) = (sv.min(), sv.max());
    if !(lo > 1e-12 * hi.max(1.0)) {
        return None;
    }
    m.clone().try_inverse()
}

pub fn check_commutativity(t: &Matrix, tol: f64) -> Result<TruncationCommutativityReport> {
    if !t.is_square() || t.nrows() == 0 {
        return Err(Error::invalid("T must be a nonempty square matrix"));
    }
    let t_inv = try_invert(t).ok_or_else(|| Error::Singular("T is singular".into()))?;
    let k = t.nrows();
    let mut minor_invertible = Vec::with_capacity(k);
    let mut defects = Vec::with_capacity(k);
    for b in 1..=k {
        let minor = t.view((0, 0), (b, b)).into_owned();
        match try_invert(&minor) {
            Some(inv) => {
                minor_invertible.push(true);
                defects.push((t_inv.view((0, 0), (b, b)) - inv).norm());
            }
            None => {
                minor_invertible.push(false);
                defects.push(f64::INFINITY);
            }
        }
    }
    let passed = minor_invertible.iter().all(|&x| x) && defects.iter().all(|&d| d < tol);
    Ok(TruncationCommutativityReport {
        t: t.clone(),
        tol,
        minor_invertible,
        defects,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Witness {
    pub b: usize,
    pub diagonal: f64,
    /// Norm of column `b` above the diagonal.
    pub above: f64,
    /// Norm of row `b` left of the diagonal.
    pub left: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub passed: bool,
    pub witnesses: Vec<Lemma1Witness>,
    /// Indices `b` (1-based) that violate the structure.
    pub violations: Vec<usize>,
}

/// Each diagonal entry nonzero, and for every `b ≥ 2` either the part of
/// column `b` above the diagonal or the part of row `b` left of it vanishes.
pub fn lemma1_structure_check(t: &Matrix, tol: f64) -> Result<Lemma1Report> {
    if !t.is_square() {
        return Err(Error::invalid("T must be square"));
    }
    let k = t.nrows();
    let mut witnesses = Vec::with_capacity(k);
    let mut violations = Vec::new();
    for b in 1..=k {
        let i = b - 1;
        let above = t.view((0, i), (i, 1)).norm();
        let left = t.view((i, 0), (1, i)).norm();
        let diagonal = t[(i, i)];
        let ok = diagonal.abs() > tol && (b == 1 || above.min(left) < tol);
        if !ok {
            violations.push(b);
        }
        witnesses.push(Lemma1Witness { b, diagonal, above, left });
    }
    Ok(Lemma1Report {
        passed: violations.is_empty(),
        witnesses,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractedT {
    #[serde(skip)]
    pub t: Matrix,
    #[serde(skip)]
    pub t_inv: Matrix,
    /// `||Γ − Q T⁻¹||_F`
    pub decoder_residual: f64,
    /// `||X − T Σ Rᵀ||_F / ||X||_F` on the data used for the decomposition.
    pub code_residual: f64,
    pub condition: f64,
    pub reliable: bool,
}

fn single_linear(net: &Network) -> Result<()> {
    let ok = net.encoder().len() == 1
        && net.decoder().len() == 1
        && net.encoder()[0].spec().activation == Activation::Linear
        && net.decoder()[0].spec().activation == Activation::Linear;
    if ok {
        Ok(())
    } else {
        Err(Error::invalid("expected a single-layer linear encoder and decoder"))
    }
}

/// Recover `T` from a trained linear network via `T⁻¹ = Qᵀ Γ`. `data` must be
/// the matrix `pca` was computed from; the code is evaluated on centered data.
pub fn extract_t(net: &Network, pca: &PcaDecomposition, data: &Matrix) -> Result<ExtractedT> {
    single_linear(net)?;
    let gamma = net.decoder()[0].weights();
    if gamma.shape() != pca.q.shape() {
        return Err(Error::dims(pca.q.ncols(), gamma.ncols(), "decoder vs PCA shape"));
    }
    let t_inv = pca.q.transpose() * gamma;
    let sv = t_inv.clone().svd(false, false).singular_values;
    let condition = sv.max() / sv.min();
    let reliable = condition.is_finite() && condition < 1e8;
    let t = t_inv
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("QᵀΓ singular (condition {condition:e})")))?;
    let decoder_residual = (gamma - &pca.q * &t_inv).norm();

    let (centered, _) = center(data);
    let x = net.encoder()[0].weights() * &centered;
    let sigma = Matrix::from_diagonal(&Vector::from_vec(pca.sigma.clone()));
    let predicted = &t * sigma * pca.r.transpose();
    let code_residual = (&x - predicted).norm() / x.norm().max(f64::MIN_POSITIVE);
    Ok(ExtractedT {
        t,
        t_inv,
        decoder_residual,
        code_residual,
        condition,
        reliable,
    })
}

/// Orthonormalize columns via QR, choosing signs so `diag(R) ≥ 0`.
/// Returns `None` if the columns are (numerically) linearly dependent.
pub fn orthonormal_retraction(gamma: &Matrix) -> Option<Matrix> {
    let qr = gamma.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    let scale = r.diagonal().amax().max(f64::MIN_POSITIVE);
    for c in 0..gamma.ncols() {
        let d = r[(c, c)];
        if d.abs() <= 1e-10 * scale {
            return None;
        }
        if d < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    Some(q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalRun {
    pub net: Network,
    pub restarts: usize,
    /// Largest `||ΓᵀΓ − I||_max` observed after any retraction.
    pub max_orthonormality_error: f64,
}

/// Train a single-layer linear autoencoder with the decoder retracted onto
/// the Stiefel manifold after every step. `steps` full passes are taken with
/// minibatches as configured. Rank collapse triggers a restart from a new seed
/// (at most five).
pub fn train_orthonormal(
    widths: (usize, usize),
    data: &Matrix,
    dist: &TruncationDistribution,
    config: &TrainConfig,
    steps: usize,
) -> Result<OrthonormalRun> {
    let (d, k) = widths;
    if dist.k() != k {
        return Err(Error::dims(k, dist.k(), "distribution K"));
    }
    let n = data.ncols();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let bs = config.minibatch_size.min(n);
    'restart: for restart in 0..=5 {
        let seed = config.rng_seed.wrapping_add(restart as u64 * 0x9e37_79b9);
        let mut net = Network::autoencoder(&[d, k], Activation::Linear, Activation::Linear, false, seed)?;
        let start = orthonormal_retraction(net.decoder()[0].weights())
            .ok_or_else(|| Error::Singular("initial decoder rank deficient".into()))?;
        net.set_decoder_weights(0, start)?;
        let mut cfg = config.clone();
        cfg.dist = dist.clone();
        cfg.rng_seed = seed;
        let mut trainer = Trainer::new(net, cfg)?;
        let mut max_err = 0.0f64;
        let mut cursor = 0;
        for _ in 0..steps {
            let idx: Vec<usize> = (0..bs).map(|i| (cursor + i) % n).collect();
            cursor = (cursor + bs) % n;
            let batch = if bs == n { data.clone() } else { data.select_columns(idx.iter()) };
            trainer.train_step(&batch)?;
            let Some(q) = orthonormal_retraction(trainer.net().decoder()[0].weights()) else {
                log::warn!("decoder rank collapsed; restarting ({restart})");
                continue 'restart;
            };
            let err = (q.transpose() * &q - Matrix::identity(k, k)).amax();
            max_err = max_err.max(err);
            trainer.set_decoder_weights(0, q)?;
        }
        return Ok(OrthonormalRun {
            net: trainer.into_net(),
            restarts: restart,
            max_orthonormality_error: max_err,
        });
    }
    Err(Error::Singular("decoder rank collapsed in every restart".into()))
}

/// `|cos|` between decoder column `k` and eigenvector `k`, for every `k`.
pub fn column_cosines(gamma: &Matrix, q: &Matrix) -> Vec<f64> {
    (0..q.ncols().min(gamma.ncols()))
        .map(|c| {
            let g = gamma.column(c);
            let e = q.column(c);
            (g.dot(&e) / (g.norm() * e.norm()).max(f64::MIN_POSITIVE)).abs()
        })
        .collect()
}
