//! Independent oracles used by the integration tests. Nothing here calls into
//! the algorithms under test except to read or write parameters.

#![allow(dead_code)]

use ordrep_core::numerics::{ForwardOptions, Network};
use ordrep_core::{Matrix, Vector};

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix. Returns
/// eigenvalues in nonincreasing order and eigenvectors as columns.
pub fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n, n);
    let scale = a.norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() < 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let vals = idx.iter().map(|&i| m[(i, i)]).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        vecs.set_column(c, &v.column(i));
    }
    (vals, vecs)
}

/// Sample covariance numerator `Σ (y−ȳ)(y−ȳ)ᵀ` with plain loops.
pub fn scatter(data: &Matrix) -> Matrix {
    let (d, n) = data.shape();
    let mut mean = vec![0.0; d];
    for c in 0..n {
        for r in 0..d {
            mean[r] += data[(r, c)];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut s = Matrix::zeros(d, d);
    for c in 0..n {
        for i in 0..d {
            for j in 0..d {
                s[(i, j)] += (data[(i, c)] - mean[i]) * (data[(j, c)] - mean[j]);
            }
        }
    }
    s
}

/// Σ_n ||y_n − ŷ_n||² under a single truncation `b`.
pub fn batch_loss(net: &Network, inputs: &Matrix, b: usize) -> f64 {
    let cache = net
        .forward_batch(inputs, &[b], &mut ForwardOptions::default())
        .unwrap();
    let r = cache.reconstruction();
    let mut s = 0.0;
    for c in 0..inputs.ncols() {
        for i in 0..inputs.nrows() {
            let d = inputs[(i, c)] - r[(i, c)];
            s += d * d;
        }
    }
    s
}

/// Which parameter to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Param {
    EncW(usize, usize, usize),
    EncB(usize, usize),
    DecW(usize, usize, usize),
    DecB(usize, usize),
}

fn perturbed(net: &Network, p: Param, delta: f64) -> Network {
    let mut n = net.clone();
    match p {
        Param::EncW(l, r, c) => {
            let mut w = n.encoder()[l].weights().clone();
            w[(r, c)] += delta;
            n.set_encoder_weights(l, w).unwrap();
        }
        Param::EncB(l, r) => {
            let mut b = n.encoder()[l].bias().clone();
            b[r] += delta;
            n.set_encoder_bias(l, b).unwrap();
        }
        Param::DecW(l, r, c) => {
            let mut w = n.decoder()[l].weights().clone();
            w[(r, c)] += delta;
            n.set_decoder_weights(l, w).unwrap();
        }
        Param::DecB(l, r) => {
            let mut b = n.decoder()[l].bias().clone();
            b[r] += delta;
            n.set_decoder_bias(l, b).unwrap();
        }
    }
    n
}

/// Every free parameter. With tied weights the decoder matrices are not free.
pub fn free_params(net: &Network) -> Vec<Param> {
    let mut out = Vec::new();
    for (l, layer) in net.encoder().iter().enumerate() {
        let w = layer.weights();
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                out.push(Param::EncW(l, r, c));
            }
        }
        for r in 0..layer.bias().len() {
            out.push(Param::EncB(l, r));
        }
    }
    for (l, layer) in net.decoder().iter().enumerate() {
        if !net.tied() {
            let w = layer.weights();
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(Param::DecW(l, r, c));
                }
            }
        }
        for r in 0..layer.bias().len() {
            out.push(Param::DecB(l, r));
        }
    }
    out
}

pub fn central_difference(net: &Network, inputs: &Matrix, b: usize, p: Param, h: f64) -> f64 {
    let up = batch_loss(&perturbed(net, p, h), inputs, b);
    let down = batch_loss(&perturbed(net, p, -h), inputs, b);
    (up - down) / (2.0 * h)
}

/// Relative error with the denominator floored at `floor`, so that entries
/// that are (analytically) zero compare on an absolute scale.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Plain autoencoder written with scalar loops: dense layers
/// `a = act(W x + b)`, loss `||y − ŷ||²`, momentum SGD.
#[derive(Clone, Debug)]
pub struct PlainLayer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub act: &'static str,
}

pub fn act(kind: &str, z: f64) -> f64 {
    match kind {
        "linear" => z,
        "relu" => z.max(0.0),
        "sigmoid" => 1.0 / (1.0 + (-z).exp()),
        _ => unreachable!(),
    }
}

pub fn act_grad(kind: &str, z: f64) -> f64 {
    match kind {
        "linear" => 1.0,
        "relu" => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        "sigmoid" => {
            let s = 1.0 / (1.0 + (-z).exp());
            s * (1.0 - s)
        }
        _ => unreachable!(),
    }
}

pub struct PlainAutoencoder {
    pub layers: Vec<PlainLayer>,
    pub vel_w: Vec<Vec<Vec<f64>>>,
    pub vel_b: Vec<Vec<f64>>,
}

impl PlainAutoencoder {
    pub fn from_network(net: &Network) -> Self {
        let mut layers = Vec::new();
        for l in net.encoder().iter().chain(net.decoder()) {
            let w = l.weights();
            layers.push(PlainLayer {
                w: (0..w.nrows()).map(|r| (0..w.ncols()).map(|c| w[(r, c)]).collect()).collect(),
                b: l.bias().iter().copied().collect(),
                act: match l.spec().activation {
                    ordrep_core::Activation::Linear => "linear",
                    ordrep_core::Activation::Relu => "relu",
                    ordrep_core::Activation::Sigmoid => "sigmoid",
                },
            });
        }
        let vel_w = layers.iter().map(|l| l.w.iter().map(|r| vec![0.0; r.len()]).collect()).collect();
        let vel_b = layers.iter().map(|l| vec![0.0; l.b.len()]).collect();
        Self { layers, vel_w, vel_b }
    }

    /// One SGD step on a single example; returns the loss before the step.
    pub fn step(&mut self, y: &[f64], lr: f64, momentum: f64) -> f64 {
        let mut zs: Vec<Vec<f64>> = Vec::new();
        let mut acts: Vec<Vec<f64>> = vec![y.to_vec()];
        for l in &self.layers {
            let x = acts.last().unwrap();
            let z: Vec<f64> = l
                .w
                .iter()
                .zip(&l.b)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect();
            acts.push(z.iter().map(|&v| act(l.act, v)).collect());
            zs.push(z);
        }
        let out = acts.last().unwrap();
        let loss: f64 = out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum();
        let mut delta: Vec<f64> = out.iter().zip(y).map(|(o, t)| 2.0 * (o - t)).collect();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let dz: Vec<f64> = delta.iter().zip(&zs[li]).map(|(d, &z)| d * act_grad(l.act, z)).collect();
            let x = &acts[li];
            let mut dx = vec![0.0; x.len()];
            for (r, row) in l.w.iter().enumerate() {
                for (c, w) in row.iter().enumerate() {
                    dx[c] += w * dz[r];
                }
            }
            for r in 0..l.w.len() {
                for c in 0..x.len() {
                    let g = dz[r] * x[c];
                    self.vel_w[li][r][c] = momentum * self.vel_w[li][r][c] - lr * g;
                }
                self.vel_b[li][r] = momentum * self.vel_b[li][r] - lr * dz[r];
            }
            delta = dx;
        }
        for (li, l) in self.layers.iter_mut().enumerate() {
            for r in 0..l.w.len() {
                for c in 0..l.w[r].len() {
                    l.w[r][c] += self.vel_w[li][r][c];
                }
                l.b[r] += self.vel_b[li][r];
            }
        }
        loss
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for row in &l.w {
                out.extend(row);
            }
            out.extend(&l.b);
        }
        out
    }
}

/// Lloyd's k-means with k-means++-style deterministic seeding (farthest
/// point). Returns the labels.
pub fn kmeans(points: &Matrix, k: usize, iters: usize) -> Vec<usize> {
    let n = points.ncols();
    let mut centers: Vec<Vector> = vec![points.column(0).into_owned()];
    while centers.len() < k {
        let far = (0..n)
            .max_by(|&a, &b| {
                let da = centers.iter().map(|c| (points.column(a) - c).norm_squared()).fold(f64::MAX, f64::min);
                let db = centers.iter().map(|c| (points.column(b) - c).norm_squared()).fold(f64::MAX, f64::min);
                da.total_cmp(&db)
            })
            .unwrap();
        centers.push(points.column(far).into_owned());
    }
    let mut labels = vec![0; n];
    for _ in 0..iters {
        for (i, label) in labels.iter_mut().enumerate() {
            *label = (0..k)
                .min_by(|&a, &b| {
                    (points.column(i) - &centers[a])
                        .norm_squared()
                        .total_cmp(&(points.column(i) - &centers[b]).norm_squared())
                })
                .unwrap();
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if !members.is_empty() {
                let mut s = Vector::zeros(points.nrows());
                for &i in &members {
                    s += points.column(i);
                }
                *center = s / members.len() as f64;
            }
        }
    }
    labels
}

/// Mean silhouette coefficient.
pub fn silhouette(points: &Matrix, labels: &[usize], k: usize) -> f64 {
    let n = points.ncols();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += (points.column(i) - points.column(j)).norm();
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::MAX, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// Spearman rank correlation (no tie correction needed for continuous data).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}
