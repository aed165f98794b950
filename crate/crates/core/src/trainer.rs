//! Nested dropout training.
//!
//! Every example in a minibatch gets its own truncation index `b ~ p_B`; the
//! step follows the gradient of the mean truncated reconstruction loss, plus
//! optional code-invariance and per-unit L1 terms. Units can be frozen in
//! index order once their incident weights stop moving (unit sweeping); while
//! units `1..f` are frozen, indices are drawn from `p_B(· | b > f)`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binarize::lower_quantile;
use crate::error::{Error, Result};
use crate::numerics::{corrupt_matrix, loss_l2_batch, seeded_rng, ForwardOptions, Gradients, LayerGrad, Network, SeededRng};
use crate::truncation::TruncationDistribution;
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub enabled: bool,
    /// Consecutive steps a unit must stay below `convergence_tol`.
    pub convergence_window: usize,
    /// Relative L2 change of the unit's incident weights per step.
    pub convergence_tol: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            convergence_window: 20,
            convergence_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dist: TruncationDistribution,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub input_corruption_prob: f64,
    pub hidden_dropout_prob: f64,
    /// Target ratio of per-unit L1 gradient norm to reconstruction gradient norm.
    pub weight_decay_ratio: f64,
    pub invariance_weight: f64,
    /// Variance of the isotropic Gaussian input perturbation.
    pub invariance_noise_scale: f64,
    /// Threshold the code in the forward pass at the running `β` quantile and
    /// pass gradients straight through.
    pub binarize_forward: Option<f64>,
    /// Multiplicative learning-rate decay applied after every epoch of `fit`.
    pub lr_decay: f64,
    /// Replace per-example sampling by the exact expectation over `b`
    /// (one decoder pass per supported truncation). Deterministic; meant for
    /// small verification problems.
    pub expected_gradient: bool,
    pub sweep: SweepConfig,
    pub rng_seed: u64,
}

impl TrainConfig {
    /// Plain momentum SGD with nested dropout and nothing else switched on.
    pub fn new(dist: TruncationDistribution) -> Self {
        Self {
            dist,
            minibatch_size: 100,
            epochs: 10,
            learning_rate: 0.01,
            momentum: 0.9,
            input_corruption_prob: 0.0,
            hidden_dropout_prob: 0.0,
            weight_decay_ratio: 0.0,
            invariance_weight: 0.0,
            invariance_noise_scale: 0.01,
            binarize_forward: None,
            lr_decay: 1.0,
            expected_gradient: false,
            sweep: SweepConfig::default(),
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {p} not in [0,1]")))
            }
        };
        prob("input_corruption_prob", self.input_corruption_prob)?;
        prob("hidden_dropout_prob", self.hidden_dropout_prob)?;
        if self.hidden_dropout_prob >= 1.0 {
            return Err(Error::invalid("hidden_dropout_prob must be < 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0,1)"));
        }
        if self.minibatch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("minibatch_size and epochs must be >= 1"));
        }
        if self.weight_decay_ratio < 0.0 || self.invariance_weight < 0.0 || self.invariance_noise_scale < 0.0 {
            return Err(Error::invalid("regularization weights must be >= 0"));
        }
        if self.invariance_weight > 0.0 && self.invariance_noise_scale <= 0.0 {
            return Err(Error::invalid("invariance penalty needs a positive noise scale"));
        }
        if let Some(beta) = self.binarize_forward {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::invalid("binarize_forward beta must be in (0,1)"));
            }
        }
        if self.sweep.convergence_window == 0 || !(self.sweep.convergence_tol >= 0.0) {
            return Err(Error::invalid("sweep window must be >= 1 and tol >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepState {
    frozen_prefix: usize,
    below: usize,
    /// Relative changes of the unit currently being watched, most recent last.
    history: Vec<f64>,
}

impl SweepState {
    pub fn frozen_prefix(&self) -> usize {
        self.frozen_prefix
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Record the relative change of unit `frozen_prefix + 1`; freeze it once
    /// the change has stayed below tolerance for a full window.
    pub fn sweep_update(&mut self, cfg: &SweepConfig, relative_change: f64, k: usize) {
        if !cfg.enabled || self.frozen_prefix >= k {
            return;
        }
        self.history.push(relative_change);
        if self.history.len() > cfg.convergence_window {
            self.history.remove(0);
        }
        if relative_change < cfg.convergence_tol {
            self.below += 1;
        } else {
            self.below = 0;
        }
        if self.below >= cfg.convergence_window {
            self.frozen_prefix += 1;
            self.below = 0;
            self.history.clear();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub step: u64,
    /// Mean truncated reconstruction loss of the minibatch.
    pub loss: f64,
    pub invariance: f64,
    pub recon_grad_norm: f64,
    pub reg_grad_norm: f64,
    pub frozen_prefix: usize,
    /// `histogram[b-1]` = examples that drew truncation `b`.
    pub index_histogram: Vec<usize>,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub mixture_cost: f64,
    pub recon_grad_norm: f64,
    pub reg_grad_norm: f64,
    pub frozen_prefix: usize,
    pub wall_ms: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,mixture_cost,recon_grad_norm,reg_grad_norm,frozen_prefix,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.step, r.mixture_cost, r.recon_grad_norm, r.reg_grad_norm, r.frozen_prefix, r.wall_ms
        ));
    }
    out
}

/// `C^(b)` (mean L2 loss under truncation `b`) for every `b` with `wanted(b)`;
/// other entries are left at zero.
pub fn truncation_costs_where(net: &Network, data: &Matrix, mut wanted: impl FnMut(usize) -> bool) -> Result<Vec<f64>> {
    if data.ncols() == 0 {
        return Err(Error::EmptyDataset);
    }
    let code = net.encode_batch(data)?;
    let n = data.ncols() as f64;
    let k = net.code_dim();
    let mut costs = vec![0.0; k];
    for b in 1..=k {
        if wanted(b) {
            let recon = net.decode_batch(&code, Some(b))?;
            costs[b - 1] = loss_l2_batch(data, &recon) / n;
        }
    }
    Ok(costs)
}

pub fn truncation_costs(net: &Network, data: &Matrix) -> Result<Vec<f64>> {
    truncation_costs_where(net, data, |_| true)
}

/// `Σ_b p_B(b) C^(b)` with corruption and dropout disabled.
pub fn mixture_cost(net: &Network, data: &Matrix, dist: &TruncationDistribution) -> Result<f64> {
    if dist.k() != net.code_dim() {
        return Err(Error::dims(net.code_dim(), dist.k(), "distribution K"));
    }
    let pmf = dist.pmf_table();
    let costs = truncation_costs_where(net, data, |b| pmf[b - 1] > 0.0)?;
    Ok(pmf.iter().zip(&costs).map(|(p, c)| p * c).sum())
}

/// `λ_k = r ||recon_k|| / ||reg_k||`, zero where either norm is zero.
pub fn adaptive_reg_coefficients(recon_norms: &[f64], reg_norms: &[f64], ratio: f64) -> Vec<f64> {
    recon_norms
        .iter()
        .zip(reg_norms)
        .map(|(&g, &h)| if h > 0.0 && g > 0.0 { ratio * g / h } else { 0.0 })
        .collect()
}

/// Stochastic code-invariance penalty
/// `(1/N) Σ ||f(y+ε) − f(y)||² / ||ε||²` with `ε ~ N(0, ε̄ I)`, and its
/// gradient with respect to the encoder layers.
pub fn invariance_penalty<R: Rng + ?Sized>(
    net: &Network,
    minibatch: &Matrix,
    noise_scale: f64,
    rng: &mut R,
) -> Result<(f64, Vec<LayerGrad>)> {
    if !(noise_scale > 0.0) {
        return Err(Error::invalid("invariance noise scale must be > 0"));
    }
    let (d, n) = minibatch.shape();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let normal = Normal::new(0.0, noise_scale.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut noise = Matrix::zeros(d, n);
    let mut sq_norms = Vec::with_capacity(n);
    for mut col in noise.column_iter_mut() {
        loop {
            for v in col.iter_mut() {
                *v = normal.sample(rng);
            }
            let s = col.norm_squared();
            if s > 0.0 {
                sq_norms.push(s);
                break;
            }
        }
    }
    let perturbed = minibatch + &noise;
    let f_clean = net.encode_batch(minibatch)?;
    let f_pert = net.encode_batch(&perturbed)?;
    let diff = &f_pert - &f_clean;
    let mut penalty = 0.0;
    let mut upstream = diff.clone();
    for (i, mut col) in upstream.column_iter_mut().enumerate() {
        penalty += diff.column(i).norm_squared() / sq_norms[i];
        col *= 2.0 / (n as f64 * sq_norms[i]);
    }
    penalty /= n as f64;
    let mut grads = net.encoder_backward(&perturbed, upstream.clone());
    let neg = net.encoder_backward(minibatch, -upstream);
    for (g, h) in grads.iter_mut().zip(&neg) {
        g.weights += &h.weights;
        g.bias += &h.bias;
    }
    Ok((penalty, grads))
}

/// Parameters incident to code unit `unit` (0-based): its row of the last
/// encoder layer, its encoder bias, and its column of the first decoder layer.
pub fn unit_params(net: &Network, unit: usize) -> Vec<f64> {
    let enc = net.encoder().last().expect("non-empty encoder");
    let dec = &net.decoder()[0];
    let mut out: Vec<f64> = enc.weights().row(unit).iter().copied().collect();
    out.push(enc.bias()[unit]);
    out.extend(dec.weights().column(unit).iter());
    out
}

fn zero_unit(g: &mut Gradients, unit: usize) {
    let last = g.encoder.len() - 1;
    g.encoder[last].weights.row_mut(unit).fill(0.0);
    g.encoder[last].bias[unit] = 0.0;
    g.decoder[0].weights.column_mut(unit).fill(0.0);
}

pub struct Trainer {
    net: Network,
    config: TrainConfig,
    sweep: SweepState,
    velocity: Gradients,
    rng: SeededRng,
    step: u64,
    running_thresholds: Option<Vec<f64>>,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.dist.k() != net.code_dim() {
            return Err(Error::dims(net.code_dim(), config.dist.k(), "distribution K"));
        }
        Ok(Self {
            velocity: Gradients::zeros_like(&net),
            rng: seeded_rng(config.rng_seed),
            net,
            config,
            sweep: SweepState::default(),
            step: 0,
            running_thresholds: None,
        })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn into_net(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn sweep_state(&self) -> &SweepState {
        &self.sweep
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Replace a decoder weight matrix between steps (e.g. a retraction).
    pub fn set_decoder_weights(&mut self, layer: usize, weights: Matrix) -> Result<()> {
        self.net.set_decoder_weights(layer, weights)
    }

    pub fn reset_velocity(&mut self) {
        self.velocity = Gradients::zeros_like(&self.net);
    }

    /// One momentum-SGD step on a `D × B` minibatch.
    pub fn train_step(&mut self, minibatch: &Matrix) -> Result<StepDiagnostics> {
        let k = self.net.code_dim();
        let batch = minibatch.ncols();
        if batch == 0 {
            return Err(Error::EmptyDataset);
        }
        if minibatch.nrows() != self.net.input_dim() {
            return Err(Error::dims(self.net.input_dim(), minibatch.nrows(), "minibatch rows"));
        }
        self.step += 1;
        let frozen = self.sweep.frozen_prefix;
        if frozen >= k {
            // every unit converged: nothing left to train
            return Ok(StepDiagnostics {
                step: self.step,
                loss: f64::NAN,
                invariance: 0.0,
                recon_grad_norm: 0.0,
                reg_grad_norm: 0.0,
                frozen_prefix: frozen,
                index_histogram: vec![0; k],
                lambdas: vec![0.0; k],
            });
        }

        let mut inputs = minibatch.clone();
        corrupt_matrix(&mut inputs, self.config.input_corruption_prob, &mut self.rng);

        if let Some(beta) = self.config.binarize_forward {
            let code = self.net.encode_batch(&inputs)?;
            let batch_t: Vec<f64> = code
                .row_iter()
                .map(|row| {
                    let mut v: Vec<f64> = row.iter().copied().collect();
                    v.sort_by(f64::total_cmp);
                    lower_quantile(&v, 1.0 - beta)
                })
                .collect();
            self.running_thresholds = Some(match self.running_thresholds.take() {
                None => batch_t,
                Some(prev) => prev.iter().zip(&batch_t).map(|(p, b)| 0.9 * p + 0.1 * b).collect(),
            });
        }

        let floor = if self.config.sweep.enabled { frozen } else { 0 };
        let mut histogram = vec![0usize; k];
        let (loss, mut grads) = if self.config.expected_gradient {
            let pmf = self.config.dist.pmf_table().to_vec();
            let mass: f64 = pmf[floor..].iter().sum();
            let weights: Vec<(usize, f64)> = if mass > 0.0 {
                (floor + 1..=k).map(|b| (b, pmf[b - 1] / mass)).filter(|(_, w)| *w > 0.0).collect()
            } else {
                vec![(k, 1.0)]
            };
            for &(b, _) in &weights {
                histogram[b - 1] = batch;
            }
            let drop_p = self.config.hidden_dropout_prob;
            let mut opts = ForwardOptions {
                dropout: if drop_p > 0.0 { Some((drop_p, &mut self.rng)) } else { None },
                thresholds: self.running_thresholds.as_deref(),
            };
            let (loss, mut grads) = self.net.expected_loss_and_grad(&inputs, minibatch, &weights, &mut opts)?;
            grads.scale(1.0 / batch as f64);
            (loss / batch as f64, grads)
        } else {
            let mut truncations = Vec::with_capacity(batch);
            for _ in 0..batch {
                let b = self.config.dist.sample_above(floor, &mut self.rng);
                histogram[b - 1] += 1;
                truncations.push(b);
            }
            self.truncated_loss_and_grad(&inputs, minibatch, &truncations)?
        };
        if self.net.tied() {
            grads.tie();
        }

        let mut invariance = 0.0;
        if self.config.invariance_weight > 0.0 {
            let (pen, inv_grads) =
                invariance_penalty(&self.net, minibatch, self.config.invariance_noise_scale, &mut self.rng)?;
            invariance = pen;
            for (g, h) in grads.encoder.iter_mut().zip(&inv_grads) {
                let w = self.config.invariance_weight;
                g.weights.zip_apply(&h.weights, |x, y| *x += w * y);
                g.bias.axpy(w, &h.bias, 1.0);
            }
            if self.net.tied() {
                self.resync_tied_grads(&mut grads);
            }
        }
        let recon_grad_norm = grads.norm();

        let (lambdas, reg_grad_norm) = self.add_adaptive_l1(&mut grads);

        for unit in 0..frozen {
            zero_unit(&mut grads, unit);
            zero_unit(&mut self.velocity, unit);
        }

        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                dump: format!(
                    "loss={loss} invariance={invariance} frozen_prefix={frozen} grad_norm={recon_grad_norm} \
                     param_norm={:.6e} truncations={histogram:?}",
                    self.net.params_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
                ),
            });
        }

        let watched = frozen;
        let before = unit_params(&self.net, watched);

        self.velocity.scale(self.config.momentum);
        self.velocity.add_scaled(&grads, -self.config.learning_rate);
        self.net.apply_delta(&self.velocity)?;

        if self.config.sweep.enabled {
            let after = unit_params(&self.net, watched);
            let delta: f64 = before.iter().zip(&after).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let base: f64 = before.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            self.sweep.sweep_update(&self.config.sweep, delta / base, k);
        }

        Ok(StepDiagnostics {
            step: self.step,
            loss,
            invariance,
            recon_grad_norm,
            reg_grad_norm,
            frozen_prefix: self.sweep.frozen_prefix,
            index_histogram: histogram,
            lambdas,
        })
    }

    /// Mean loss and mean gradient for the given per-example truncations.
    fn truncated_loss_and_grad(
        &mut self,
        inputs: &Matrix,
        targets: &Matrix,
        truncations: &[usize],
    ) -> Result<(f64, Gradients)> {
        let batch = targets.ncols() as f64;
        let drop_p = self.config.hidden_dropout_prob;
        let cache = {
            let mut opts = ForwardOptions {
                dropout: if drop_p > 0.0 { Some((drop_p, &mut self.rng)) } else { None },
                thresholds: self.running_thresholds.as_deref(),
            };
            self.net.forward_batch(inputs, truncations, &mut opts)?
        };
        let loss = loss_l2_batch(targets, cache.reconstruction()) / batch;
        let mut grads = self.net.backward(&cache, targets)?;
        grads.scale(1.0 / batch);
        Ok((loss, grads))
    }

    fn resync_tied_grads(&self, grads: &mut Gradients) {
        let n = grads.encoder.len();
        for i in 0..n {
            grads.decoder[n - 1 - i].weights = grads.encoder[i].weights.transpose();
        }
    }

    /// Add `Σ_k λ_k ||Ω_k||_1` gradients on the last encoder layer with
    /// adaptively chosen `λ_k`. Returns the coefficients and the norm of the
    /// added gradient.
    fn add_adaptive_l1(&self, grads: &mut Gradients) -> (Vec<f64>, f64) {
        let k = self.net.code_dim();
        let ratio = self.config.weight_decay_ratio;
        if ratio == 0.0 {
            return (vec![0.0; k], 0.0);
        }
        let last = grads.encoder.len() - 1;
        let omega = self.net.encoder()[last].weights();
        let sign = omega.map(|w| if w > 0.0 { 1.0 } else if w < 0.0 { -1.0 } else { 0.0 });
        let recon: Vec<f64> = (0..k).map(|u| grads.encoder[last].weights.row(u).norm()).collect();
        let reg: Vec<f64> = (0..k).map(|u| sign.row(u).norm()).collect();
        let lambdas = adaptive_reg_coefficients(&recon, &reg, ratio);
        let mut total = 0.0;
        for (u, lam) in lambdas.iter().enumerate() {
            if *lam == 0.0 {
                continue;
            }
            let row = sign.row(u) * *lam;
            total += row.norm_squared();
            let mut g = grads.encoder[last].weights.row_mut(u);
            g += &row;
        }
        if self.net.tied() {
            self.resync_tied_grads(grads);
        }
        (lambdas, total.sqrt())
    }

    /// Run `config.epochs` epochs over the columns of `data`, shuffling each
    /// epoch. A metrics row is emitted every `log_every` steps (and at the end)
    /// with the mixture cost on up to 512 leading columns.
    pub fn fit(&mut self, data: &Matrix, log_every: usize) -> Result<Vec<MetricsRow>> {
        let n = data.ncols();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let eval = data.columns(0, n.min(512)).into_owned();
        let start = Instant::now();
        let mut rows = Vec::new();
        let mut order: Vec<usize> = (0..n).collect();
        let bs = self.config.minibatch_size.min(n);
        let mut last = None;
        for _ in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(bs) {
                let batch = data.select_columns(chunk.iter());
                let diag = self.train_step(&batch)?;
                if log_every > 0 && diag.step % log_every as u64 == 0 {
                    rows.push(self.metrics_row(&diag, &eval, &start)?);
                }
                last = Some(diag);
            }
            self.config.learning_rate *= self.config.lr_decay;
        }
        if let Some(diag) = last {
            if rows.last().map(|r| r.step) != Some(diag.step) {
                rows.push(self.metrics_row(&diag, &eval, &start)?);
            }
        }
        Ok(rows)
    }

    fn metrics_row(&self, diag: &StepDiagnostics, eval: &Matrix, start: &Instant) -> Result<MetricsRow> {
        Ok(MetricsRow {
            step: diag.step,
            mixture_cost: mixture_cost(&self.net, eval, &self.config.dist)?,
            recon_grad_norm: diag.recon_grad_norm,
            reg_grad_norm: diag.reg_grad_norm,
            frozen_prefix: diag.frozen_prefix,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Helper for tests and diagnostics: `Vector` view of a code column.
pub fn column(m: &Matrix, i: usize) -> Vector {
    m.column(i).into_owned()
}
