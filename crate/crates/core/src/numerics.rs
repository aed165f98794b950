//! Dense autoencoder engine.
//!
//! Activations are stored column-per-example (`dim × batch`). Weight matrices
//! are `out × in`. The reconstruction loss is the squared Euclidean distance
//! without a `1/2` factor, so `d loss / d ŷ = 2 (ŷ − y)`.
//!
//! A truncation `b` zeroes code units `b+1..K` before the decoder sees them.
//! When every example in a batch shares one truncation the first decoder
//! layer multiplies only the leading `b` columns of its weight matrix, which
//! makes a masked forward pass bit-identical to running a sub-network whose
//! decoder has those columns physically removed.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Deterministic, portable RNG used for every stochastic component.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative evaluated from the pre-activation `z` and output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::invalid("layer dims must be >= 1"));
        }
        Ok(Self {
            input_dim,
            output_dim,
            activation,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    weights: Matrix,
    bias: Vector,
}

impl Layer {
    pub fn new(spec: LayerSpec, weights: Matrix, bias: Vector) -> Result<Self> {
        if weights.nrows() != spec.output_dim || weights.ncols() != spec.input_dim {
            return Err(Error::invalid(format!(
                "weight shape {}x{} does not match spec {}x{}",
                weights.nrows(),
                weights.ncols(),
                spec.output_dim,
                spec.input_dim
            )));
        }
        if bias.len() != spec.output_dim {
            return Err(Error::dims(spec.output_dim, bias.len(), "bias length"));
        }
        Ok(Self {
            spec,
            weights,
            bias,
        })
    }

    /// Glorot-uniform weights in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let limit = (6.0 / (spec.input_dim + spec.output_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite init range");
        // Row-major fill so the draw order matches the serialized layout.
        let mut weights = Matrix::zeros(spec.output_dim, spec.input_dim);
        for r in 0..spec.output_dim {
            for c in 0..spec.input_dim {
                weights[(r, c)] = dist.sample(rng);
            }
        }
        Self {
            spec,
            weights,
            bias: Vector::zeros(spec.output_dim),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        self.spec
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }
}

/// Keep units `1..=b` of a `K`-unit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncationMask {
    b: usize,
}

impl TruncationMask {
    pub fn new(b: usize, k: usize) -> Result<Self> {
        if b == 0 || b > k {
            return Err(Error::OutOfRange { index: b, max: k });
        }
        Ok(Self { b })
    }

    pub fn full(k: usize) -> Self {
        Self { b: k.max(1) }
    }

    pub fn b(self) -> usize {
        self.b
    }

    /// Zero units `b+1..` in place.
    pub fn apply(self, code: &mut [f64]) {
        for v in code.iter_mut().skip(self.b) {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    tied: bool,
    rng_seed: u64,
    generation: u64,
}

impl Network {
    /// Build a network with Glorot-initialized weights drawn from `seed`.
    pub fn new(
        encoder_specs: &[LayerSpec],
        decoder_specs: &[LayerSpec],
        tied: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let encoder: Vec<Layer> = encoder_specs
            .iter()
            .map(|s| Layer::glorot(*s, &mut rng))
            .collect();
        let decoder: Vec<Layer> = decoder_specs
            .iter()
            .map(|s| Layer::glorot(*s, &mut rng))
            .collect();
        let mut net = Self::from_layers(encoder, decoder, false, seed)?;
        if tied {
            net.validate_tied_shapes()?;
            net.tied = true;
            net.sync_tied();
        }
        Ok(net)
    }

    /// Symmetric autoencoder `widths[0] - ... - widths[last] - ... - widths[0]`.
    ///
    /// Hidden layers use `hidden`, the code layer uses `code`, the output layer
    /// is linear.
    pub fn autoencoder(
        widths: &[usize],
        hidden: Activation,
        code: Activation,
        tied: bool,
        seed: u64,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("autoencoder needs at least input and code widths"));
        }
        let depth = widths.len() - 1;
        let mut enc = Vec::with_capacity(depth);
        for i in 0..depth {
            let act = if i + 1 == depth { code } else { hidden };
            enc.push(LayerSpec::new(widths[i], widths[i + 1], act)?);
        }
        let mut dec = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            let act = if i == 0 { Activation::Linear } else { hidden };
            dec.push(LayerSpec::new(widths[i + 1], widths[i], act)?);
        }
        Self::new(&enc, &dec, tied, seed)
    }

    /// Assemble a network from explicit layers.
    pub fn from_layers(
        encoder: Vec<Layer>,
        decoder: Vec<Layer>,
        tied: bool,
        rng_seed: u64,
    ) -> Result<Self> {
        if encoder.is_empty() || decoder.is_empty() {
            return Err(Error::invalid("encoder and decoder need at least one layer"));
        }
        for pair in encoder.windows(2).chain(decoder.windows(2)) {
            if pair[0].spec.output_dim != pair[1].spec.input_dim {
                return Err(Error::dims(
                    pair[0].spec.output_dim,
                    pair[1].spec.input_dim,
                    "adjacent layer dims",
                ));
            }
        }
        let k = encoder.last().map(|l| l.spec.output_dim).unwrap_or(0);
        if decoder[0].spec.input_dim != k {
            return Err(Error::dims(k, decoder[0].spec.input_dim, "decoder input vs code dim"));
        }
        let d = encoder[0].spec.input_dim;
        let out = decoder.last().map(|l| l.spec.output_dim).unwrap_or(0);
        if out != d {
            return Err(Error::dims(d, out, "decoder output vs input dim"));
        }
        let net = Self {
            encoder,
            decoder,
            tied,
            rng_seed,
            generation: 0,
        };
        if tied {
            net.validate_tied_shapes()?;
            net.check_tied()?;
        }
        Ok(net)
    }

    fn validate_tied_shapes(&self) -> Result<()> {
        let n = self.encoder.len();
        if self.decoder.len() != n {
            return Err(Error::invalid("tied weights need mirrored encoder/decoder depth"));
        }
        for (i, enc) in self.encoder.iter().enumerate() {
            let dec = &self.decoder[n - 1 - i];
            if dec.spec.input_dim != enc.spec.output_dim || dec.spec.output_dim != enc.spec.input_dim {
                return Err(Error::invalid("tied weights need mirrored layer shapes"));
            }
        }
        Ok(())
    }

    /// Overwrite decoder weights with the transposed mirrored encoder weights.
    fn sync_tied(&mut self) {
        let n = self.encoder.len();
        for i in 0..n {
            let t = self.encoder[i].weights.transpose();
            self.decoder[n - 1 - i].weights = t;
        }
    }

    /// Structural check that tied decoder matrices equal mirrored encoder transposes.
    pub fn check_tied(&self) -> Result<()> {
        if !self.tied {
            return Ok(());
        }
        let n = self.encoder.len();
        for i in 0..n {
            let enc = &self.encoder[i].weights;
            let dec = &self.decoder[n - 1 - i].weights;
            if dec.nrows() != enc.ncols() || dec.ncols() != enc.nrows() {
                return Err(Error::invalid("tied shapes diverged"));
            }
            for r in 0..enc.nrows() {
                for c in 0..enc.ncols() {
                    if enc[(r, c)].to_bits() != dec[(c, r)].to_bits() {
                        return Err(Error::invalid(format!(
                            "tied weight mismatch at encoder layer {i} ({r},{c})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].spec.input_dim
    }

    /// Representation size `K`.
    pub fn code_dim(&self) -> usize {
        self.decoder[0].spec.input_dim
    }

    pub fn encoder(&self) -> &[Layer] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[Layer] {
        &self.decoder
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Bumped on every parameter mutation; forward caches remember it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn set_encoder_weights(&mut self, layer: usize, weights: Matrix) -> Result<()> {
        check_shape(&self.encoder[layer].weights, &weights)?;
        self.encoder[layer].weights = weights;
        if self.tied {
            self.sync_tied();
        }
        self.generation += 1;
        Ok(())
    }

    /// Replace a decoder weight matrix. For tied networks the mirrored encoder
    /// matrix is updated to its transpose.
    pub fn set_decoder_weights(&mut self, layer: usize, weights: Matrix) -> Result<()> {
        check_shape(&self.decoder[layer].weights, &weights)?;
        if self.tied {
            let n = self.encoder.len();
            self.encoder[n - 1 - layer].weights = weights.transpose();
        }
        self.decoder[layer].weights = weights;
        self.generation += 1;
        Ok(())
    }

    pub fn set_encoder_bias(&mut self, layer: usize, bias: Vector) -> Result<()> {
        if bias.len() != self.encoder[layer].bias.len() {
            return Err(Error::dims(self.encoder[layer].bias.len(), bias.len(), "bias"));
        }
        self.encoder[layer].bias = bias;
        self.generation += 1;
        Ok(())
    }

    pub fn set_decoder_bias(&mut self, layer: usize, bias: Vector) -> Result<()> {
        if bias.len() != self.decoder[layer].bias.len() {
            return Err(Error::dims(self.decoder[layer].bias.len(), bias.len(), "bias"));
        }
        self.decoder[layer].bias = bias;
        self.generation += 1;
        Ok(())
    }

    /// `θ += delta` for every parameter, then re-check the tie.
    pub fn apply_delta(&mut self, delta: &Gradients) -> Result<()> {
        for (layer, g) in self.encoder.iter_mut().zip(&delta.encoder) {
            layer.weights += &g.weights;
            layer.bias += &g.bias;
        }
        for (layer, g) in self.decoder.iter_mut().zip(&delta.decoder) {
            layer.weights += &g.weights;
            layer.bias += &g.bias;
        }
        self.generation += 1;
        self.check_tied()
    }

    pub fn param_count(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters in serialization order: per layer (encoder first),
    /// row-major weights followed by bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.encoder.iter().chain(&self.decoder) {
            push_row_major(&layer.weights, &mut out);
            out.extend(layer.bias.iter());
        }
        out
    }

    /// Inverse of [`Network::params_flat`]. Does not re-synchronize tied
    /// weights; callers perturbing a tied network must move both copies.
    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dims(self.param_count(), params.len(), "flat params"));
        }
        let mut it = params.iter().copied();
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            for r in 0..layer.weights.nrows() {
                for c in 0..layer.weights.ncols() {
                    layer.weights[(r, c)] = it.next().unwrap_or_default();
                }
            }
            for v in layer.bias.iter_mut() {
                *v = it.next().unwrap_or_default();
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Single-example forward pass under a truncation mask.
    pub fn forward(&self, y: &[f64], mask: TruncationMask) -> Result<Forward> {
        if y.len() != self.input_dim() {
            return Err(Error::dims(self.input_dim(), y.len(), "forward input"));
        }
        if mask.b > self.code_dim() {
            return Err(Error::OutOfRange {
                index: mask.b,
                max: self.code_dim(),
            });
        }
        let input = Matrix::from_column_slice(y.len(), 1, y);
        let cache = self.forward_batch(&input, &[mask.b], &mut ForwardOptions::default())?;
        Ok(Forward {
            code: cache.code().column(0).into_owned(),
            reconstruction: cache.reconstruction().column(0).into_owned(),
            cache,
        })
    }

    /// Encoder only, no dropout. Returns the `K × batch` code matrix.
    pub fn encode_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.nrows() != self.input_dim() {
            return Err(Error::dims(self.input_dim(), inputs.nrows(), "encode input"));
        }
        let (_, mut outs) = run_layers(&self.encoder, inputs, &[]);
        Ok(outs.pop().unwrap_or_else(|| inputs.clone()))
    }

    /// Decoder only. `code` is `K × batch`; units past `b` must already be
    /// zero or are ignored when `b` is given.
    pub fn decode_batch(&self, code: &Matrix, b: Option<usize>) -> Result<Matrix> {
        if code.nrows() != self.code_dim() {
            return Err(Error::dims(self.code_dim(), code.nrows(), "decode input"));
        }
        let (_, mut outs) = run_decoder(&self.decoder, code, b, &[]);
        Ok(outs.pop().unwrap_or_else(|| code.clone()))
    }

    /// Batched forward pass. `truncations[n]` is the truncation of column `n`;
    /// a single entry applies to every column.
    pub fn forward_batch(
        &self,
        inputs: &Matrix,
        truncations: &[usize],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<ForwardCache> {
        let d = self.input_dim();
        let k = self.code_dim();
        if inputs.nrows() != d {
            return Err(Error::dims(d, inputs.nrows(), "forward input"));
        }
        let batch = inputs.ncols();
        let truncations: Vec<usize> = match truncations.len() {
            1 => vec![truncations[0]; batch],
            n if n == batch => truncations.to_vec(),
            n => return Err(Error::dims(batch, n, "truncation count")),
        };
        for &b in &truncations {
            if b == 0 || b > k {
                return Err(Error::OutOfRange { index: b, max: k });
            }
        }

        let mut enc_drop = Vec::new();
        let mut dec_drop = Vec::new();
        if let Some((p, rng)) = opts.dropout.as_mut() {
            for layer in &self.encoder[..self.encoder.len() - 1] {
                enc_drop.push(dropout_matrix(layer.spec.output_dim, batch, *p, &mut **rng)?);
            }
            for layer in &self.decoder[..self.decoder.len() - 1] {
                dec_drop.push(dropout_matrix(layer.spec.output_dim, batch, *p, &mut **rng)?);
            }
        }

        let (enc_pre, enc_out) = run_layers(&self.encoder, inputs, &enc_drop);
        let code = enc_out.last().expect("non-empty encoder");
        let mut code_in = match opts.thresholds {
            Some(t) => {
                if t.len() != k {
                    return Err(Error::dims(k, t.len(), "thresholds"));
                }
                Matrix::from_fn(k, batch, |r, c| if code[(r, c)] > t[r] { 1.0 } else { 0.0 })
            }
            None => code.clone(),
        };
        let uniform = truncations.iter().all(|&b| b == truncations[0]);
        for (n, &b) in truncations.iter().enumerate() {
            for r in b..k {
                code_in[(r, n)] = 0.0;
            }
        }
        let lead = if uniform { Some(truncations[0]) } else { None };
        let (dec_pre, dec_out) = run_decoder(&self.decoder, &code_in, lead, &dec_drop);

        Ok(ForwardCache {
            generation: self.generation,
            input: inputs.clone(),
            enc_pre,
            enc_out,
            code_in,
            dec_pre,
            dec_out,
            truncations,
            enc_drop,
            dec_drop,
        })
    }

    /// Gradient of `Σ_n ||y_n − ŷ_n||²` over the batch held in `cache`.
    pub fn backward(&self, cache: &ForwardCache, targets: &Matrix) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache {
                cache: cache.generation,
                network: self.generation,
            });
        }
        let recon = cache.reconstruction();
        if targets.shape() != recon.shape() {
            return Err(Error::dims(recon.len(), targets.len(), "backward targets"));
        }
        let d_out = (recon - targets) * 2.0;
        let (dec_grads, mut d_code) =
            backprop_layers(&self.decoder, &cache.dec_pre, &cache.dec_out, &cache.code_in, &cache.dec_drop, d_out);
        // Dropped units receive no gradient; the threshold (if any) is passed
        // straight through.
        let k = self.code_dim();
        for (n, &b) in cache.truncations.iter().enumerate() {
            for r in b..k {
                d_code[(r, n)] = 0.0;
            }
        }
        let (enc_grads, _) =
            backprop_layers(&self.encoder, &cache.enc_pre, &cache.enc_out, &cache.input, &cache.enc_drop, d_code);
        Ok(Gradients {
            encoder: enc_grads,
            decoder: dec_grads,
        })
    }

    /// Weighted sum over truncations of the summed batch loss and its
    /// gradient, `Σ_b w_b (Σ_n ||y_n − ŷ_n↓b||², ∇)`. The encoder runs once
    /// and its backward pass receives the weighted code gradient, so this is
    /// far cheaper than one full pass per truncation.
    pub fn expected_loss_and_grad(
        &self,
        inputs: &Matrix,
        targets: &Matrix,
        weights: &[(usize, f64)],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<(f64, Gradients)> {
        let k = self.code_dim();
        if inputs.nrows() != self.input_dim() {
            return Err(Error::dims(self.input_dim(), inputs.nrows(), "forward input"));
        }
        if targets.shape() != inputs.shape() {
            return Err(Error::dims(inputs.len(), targets.len(), "targets"));
        }
        let batch = inputs.ncols();
        let mut enc_drop = Vec::new();
        let mut dec_drop = Vec::new();
        if let Some((p, rng)) = opts.dropout.as_mut() {
            for layer in &self.encoder[..self.encoder.len() - 1] {
                enc_drop.push(dropout_matrix(layer.spec.output_dim, batch, *p, &mut **rng)?);
            }
            for layer in &self.decoder[..self.decoder.len() - 1] {
                dec_drop.push(dropout_matrix(layer.spec.output_dim, batch, *p, &mut **rng)?);
            }
        }
        let (enc_pre, enc_out) = run_layers(&self.encoder, inputs, &enc_drop);
        let code = enc_out.last().expect("non-empty encoder");
        let code = match opts.thresholds {
            Some(t) => {
                if t.len() != k {
                    return Err(Error::dims(k, t.len(), "thresholds"));
                }
                Matrix::from_fn(k, batch, |r, c| if code[(r, c)] > t[r] { 1.0 } else { 0.0 })
            }
            None => code.clone(),
        };

        let mut loss = 0.0;
        let mut d_code = Matrix::zeros(k, batch);
        let mut dec_total: Option<Vec<LayerGrad>> = None;
        for &(b, w) in weights {
            if b == 0 || b > k {
                return Err(Error::OutOfRange { index: b, max: k });
            }
            let mut code_in = code.clone();
            code_in.rows_mut(b, k - b).fill(0.0);
            let (dec_pre, dec_out) = run_decoder(&self.decoder, &code_in, Some(b), &dec_drop);
            let recon = dec_out.last().expect("non-empty decoder");
            loss += w * loss_l2_batch(targets, recon);
            let d_out = (recon - targets) * (2.0 * w);
            let (grads, d_in) = backprop_layers(&self.decoder, &dec_pre, &dec_out, &code_in, &dec_drop, d_out);
            d_code.rows_mut(0, b).zip_apply(&d_in.rows(0, b), |x, y| *x += y);
            match dec_total.as_mut() {
                None => dec_total = Some(grads),
                Some(total) => {
                    for (t, g) in total.iter_mut().zip(&grads) {
                        t.weights += &g.weights;
                        t.bias += &g.bias;
                    }
                }
            }
        }
        let decoder = dec_total.ok_or_else(|| Error::invalid("no truncations given"))?;
        let (encoder, _) = backprop_layers(&self.encoder, &enc_pre, &enc_out, inputs, &enc_drop, d_code);
        Ok((loss, Gradients { encoder, decoder }))
    }

    /// Encoder gradient given an upstream gradient on the code (no dropout).
    pub(crate) fn encoder_backward(&self, inputs: &Matrix, d_code: Matrix) -> Vec<LayerGrad> {
        let (pre, out) = run_layers(&self.encoder, inputs, &[]);
        backprop_layers(&self.encoder, &pre, &out, inputs, &[], d_code).0
    }
}

fn check_shape(current: &Matrix, new: &Matrix) -> Result<()> {
    if current.shape() != new.shape() {
        return Err(Error::invalid(format!(
            "expected {:?} matrix, got {:?}",
            current.shape(),
            new.shape()
        )));
    }
    Ok(())
}

pub(crate) fn push_row_major(m: &Matrix, out: &mut Vec<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
}

fn affine(layer: &Layer, input: &Matrix) -> Matrix {
    let mut z = &layer.weights * input;
    for mut col in z.column_iter_mut() {
        col += &layer.bias;
    }
    z
}

fn activate(layer: &Layer, z: &Matrix, drop: Option<&Matrix>) -> Matrix {
    let act = layer.spec.activation;
    let mut a = z.map(|v| act.apply(v));
    if let Some(m) = drop {
        a.component_mul_assign(m);
    }
    a
}

/// Forward through a stack. `drops[i]` (if present) scales the output of layer `i`.
fn run_layers(layers: &[Layer], input: &Matrix, drops: &[Matrix]) -> (Vec<Matrix>, Vec<Matrix>) {
    let mut pre = Vec::with_capacity(layers.len());
    let mut out: Vec<Matrix> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let prev = if i == 0 { input } else { &out[i - 1] };
        let z = affine(layer, prev);
        let a = activate(layer, &z, drops.get(i));
        pre.push(z);
        out.push(a);
    }
    (pre, out)
}

/// Decoder forward. With `lead = Some(b)` the first layer only reads the
/// leading `b` code units.
fn run_decoder(
    layers: &[Layer],
    code: &Matrix,
    lead: Option<usize>,
    drops: &[Matrix],
) -> (Vec<Matrix>, Vec<Matrix>) {
    let first = &layers[0];
    let mut z = match lead {
        Some(b) => first.weights.columns(0, b) * code.rows(0, b),
        None => &first.weights * code,
    };
    for mut col in z.column_iter_mut() {
        col += &first.bias;
    }
    let a = activate(first, &z, drops.first());
    let (mut pre, mut out) = (vec![z], vec![a]);
    for (i, layer) in layers.iter().enumerate().skip(1) {
        let z = affine(layer, &out[i - 1]);
        let a = activate(layer, &z, drops.get(i));
        pre.push(z);
        out.push(a);
    }
    (pre, out)
}

fn backprop_layers(
    layers: &[Layer],
    pre: &[Matrix],
    out: &[Matrix],
    input: &Matrix,
    drops: &[Matrix],
    mut d_a: Matrix,
) -> (Vec<LayerGrad>, Matrix) {
    let mut grads = vec![None; layers.len()];
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let act = layer.spec.activation;
        if let Some(m) = drops.get(i) {
            d_a.component_mul_assign(m);
        }
        // Use the unscaled activation for the derivative.
        let z = &pre[i];
        let d_z = Matrix::from_fn(z.nrows(), z.ncols(), |r, c| {
            let zv = z[(r, c)];
            d_a[(r, c)] * act.derivative(zv, act.apply(zv))
        });
        let prev = if i == 0 { input } else { &out[i - 1] };
        let weights = &d_z * prev.transpose();
        let bias = d_z.column_sum();
        d_a = layer.weights.tr_mul(&d_z);
        grads[i] = Some(LayerGrad { weights, bias });
    }
    (grads.into_iter().map(|g| g.expect("every layer visited")).collect(), d_a)
}

fn dropout_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Result<Matrix> {
    let mut m = Matrix::zeros(rows, cols);
    for c in 0..cols {
        let mask = hidden_dropout_mask(rows, p, rng)?;
        for (r, keep) in mask.keep.iter().enumerate() {
            if *keep {
                m[(r, c)] = mask.scale;
            }
        }
    }
    Ok(m)
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Standard dropout on hidden (non-code, non-output) layers.
    pub dropout: Option<(f64, &'a mut SeededRng)>,
    /// Threshold the code (bit = code > t_k) in the forward pass; the
    /// backward pass treats the threshold as identity.
    pub thresholds: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    input: Matrix,
    enc_pre: Vec<Matrix>,
    enc_out: Vec<Matrix>,
    code_in: Matrix,
    dec_pre: Vec<Matrix>,
    dec_out: Vec<Matrix>,
    truncations: Vec<usize>,
    enc_drop: Vec<Matrix>,
    dec_drop: Vec<Matrix>,
}

impl ForwardCache {
    /// Encoder output before truncation (`K × batch`).
    pub fn code(&self) -> &Matrix {
        self.enc_out.last().expect("non-empty encoder")
    }

    /// What the decoder actually saw: thresholded (if enabled) and truncated.
    pub fn decoder_input(&self) -> &Matrix {
        &self.code_in
    }

    pub fn reconstruction(&self) -> &Matrix {
        self.dec_out.last().expect("non-empty decoder")
    }

    pub fn truncations(&self) -> &[usize] {
        &self.truncations
    }

    /// Encoder-layer outputs, code last.
    pub fn encoder_activations(&self) -> &[Matrix] {
        &self.enc_out
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub code: Vector,
    pub reconstruction: Vector,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vector,
}

/// Gradient (or update) with the same layout as a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<LayerGrad>,
    pub decoder: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        let z = |l: &Layer| LayerGrad {
            weights: Matrix::zeros(l.weights.nrows(), l.weights.ncols()),
            bias: Vector::zeros(l.bias.len()),
        };
        Self {
            encoder: net.encoder.iter().map(z).collect(),
            decoder: net.decoder.iter().map(z).collect(),
        }
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerGrad> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    fn layers(&self) -> impl Iterator<Item = &LayerGrad> {
        self.encoder.iter().chain(self.decoder.iter())
    }

    pub fn scale(&mut self, a: f64) {
        for g in self.layers_mut() {
            g.weights *= a;
            g.bias *= a;
        }
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, other: &Gradients, a: f64) {
        for (g, o) in self.layers_mut().zip(other.layers()) {
            g.weights.zip_apply(&o.weights, |x, y| *x += a * y);
            g.bias.axpy(a, &o.bias, 1.0);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers()
            .map(|g| g.weights.norm_squared() + g.bias.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|g| g.weights.iter().chain(g.bias.iter()).all(|v| v.is_finite()))
    }

    /// Combine gradients of tied matrices: both roles receive the sum.
    pub fn tie(&mut self) {
        let n = self.encoder.len();
        for i in 0..n {
            let dec_t = self.decoder[n - 1 - i].weights.transpose();
            self.encoder[i].weights += dec_t;
            self.decoder[n - 1 - i].weights = self.encoder[i].weights.transpose();
        }
    }

    /// Same ordering as [`Network::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.layers() {
            push_row_major(&g.weights, &mut out);
            out.extend(g.bias.iter());
        }
        out
    }
}

pub fn loss_l2(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::dims(y.len(), y_hat.len(), "loss operands"));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Column-wise `Σ_n ||y_n − ŷ_n||²`.
pub(crate) fn loss_l2_batch(y: &Matrix, y_hat: &Matrix) -> f64 {
    y.column_iter()
        .zip(y_hat.column_iter())
        .map(|(a, b)| (a - b).norm_squared())
        .sum()
}

/// Independently zero each element with probability `corruption_prob`.
pub fn corrupt_input<R: Rng + ?Sized>(y: &[f64], corruption_prob: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&corruption_prob) {
        return Err(Error::invalid(format!("corruption probability {corruption_prob} not in [0,1]")));
    }
    Ok(y.iter()
        .map(|&v| if rng.random::<f64>() < corruption_prob { 0.0 } else { v })
        .collect())
}

pub(crate) fn corrupt_matrix<R: Rng + ?Sized>(m: &mut Matrix, corruption_prob: f64, rng: &mut R) {
    if corruption_prob <= 0.0 {
        return;
    }
    // Column-major walk: one example at a time.
    for v in m.iter_mut() {
        if rng.random::<f64>() < corruption_prob {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    /// Multiplier for kept activations, `1 / (1 − p)`.
    pub scale: f64,
}

/// Inverted dropout: keep each unit with probability `1 − drop_prob`.
pub fn hidden_dropout_mask<R: Rng + ?Sized>(layer_width: usize, drop_prob: f64, rng: &mut R) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::invalid(format!("dropout probability {drop_prob} not in [0,1)")));
    }
    let keep = (0..layer_width)
        .map(|_| rng.random::<f64>() >= drop_prob)
        .collect();
    Ok(DropoutMask {
        keep,
        scale: 1.0 / (1.0 - drop_prob),
    })
}

// ---- model file ----------------------------------------------------------

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    #[serde(flatten)]
    spec: LayerSpec,
    /// Row-major, `output_dim × input_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    k: usize,
    tied_weights: bool,
    rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    encoder: Vec<LayerRecord>,
    decoder: Vec<LayerRecord>,
}

fn layer_record(layer: &Layer) -> LayerRecord {
    let mut weights = Vec::with_capacity(layer.weights.len());
    push_row_major(&layer.weights, &mut weights);
    LayerRecord {
        spec: layer.spec,
        weights,
        bias: layer.bias.iter().copied().collect(),
    }
}

fn layer_from_record(rec: LayerRecord) -> Result<Layer> {
    let spec = LayerSpec::new(rec.spec.input_dim, rec.spec.output_dim, rec.spec.activation)?;
    if rec.weights.len() != spec.input_dim * spec.output_dim {
        return Err(Error::Format("weight array length does not match layer spec".into()));
    }
    let weights = Matrix::from_row_slice(spec.output_dim, spec.input_dim, &rec.weights);
    let bias = Vector::from_vec(rec.bias);
    Layer::new(spec, weights, bias)
}

impl Network {
    /// Versioned JSON model file. `config_hash` is recorded verbatim when given.
    pub fn to_model_json(&self, config_hash: Option<&str>) -> Result<String> {
        let file = ModelFile {
            version: MODEL_FILE_VERSION,
            k: self.code_dim(),
            tied_weights: self.tied,
            rng_seed: self.rng_seed,
            config_hash: config_hash.map(str::to_owned),
            encoder: self.encoder.iter().map(layer_record).collect(),
            decoder: self.decoder.iter().map(layer_record).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_model_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.version != MODEL_FILE_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", file.version)));
        }
        let encoder = file.encoder.into_iter().map(layer_from_record).collect::<Result<Vec<_>>>()?;
        let decoder = file.decoder.into_iter().map(layer_from_record).collect::<Result<Vec<_>>>()?;
        let net = Self::from_layers(encoder, decoder, file.tied_weights, file.rng_seed)?;
        if net.code_dim() != file.k {
            return Err(Error::Format(format!("K={} does not match layers ({})", file.k, net.code_dim())));
        }
        Ok(net)
    }

    pub fn save(&self, path: &std::path::Path, config_hash: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_model_json(config_hash)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_model_json(&std::fs::read_to_string(path)?)
    }
}
