//! Feed-forward classifier head: linear layers with batch normalization and
//! Mish on the hidden stack, a sigmoid output layer, binary cross-entropy
//! averaged over batch and surfaces, and plain step-decayed SGD.
//!
//! Hidden widths follow a floor-halving chain from the input dimension
//! (196 -> 98 -> 49 -> 24 -> 12 -> 6 for the 5-linear-layer configuration,
//! 25,735 linear parameters plus 366 batch-norm affine parameters).
//! All arithmetic is f64; the model is small enough that reproducibility
//! is worth more than speed.

use crate::matrix::Matrix;
use crate::rng::seeded_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid layer dimensions: {0}")]
    InvalidDims(String),
    #[error("train-mode forward needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cache does not match the model's current parameters")]
    StaleCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Linear {
    w: Matrix, // out x in
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchNorm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            // small enough that normalized columns sit within 1e-4 of unit
            // variance even for weak pre-activations
            eps: 1e-8,
        }
    }
}

/// Overflow-safe softplus `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mish activation `x * tanh(softplus(x))`.
pub fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

/// Derivative of Mish.
fn mish_deriv(x: f64) -> f64 {
    let t = softplus(x).tanh();
    let sigmoid = 1.0 / (1.0 + (-x).exp());
    t + x * (1.0 - t * t) * sigmoid
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const BCE_CLAMP: f64 = 1e-7;

/// Mean over batch and outputs of `-[y ln p + (1-y) ln(1-p)]` with scores
/// clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(scores: &Matrix, labels: &Matrix) -> Result<f64, NnError> {
    if scores.rows() != labels.rows() || scores.cols() != labels.cols() {
        return Err(NnError::ShapeMismatch(format!(
            "scores {}x{} vs labels {}x{}",
            scores.rows(),
            scores.cols(),
            labels.rows(),
            labels.cols()
        )));
    }
    let mut total = 0.0;
    for (p, y) in scores.data().iter().zip(labels.data()) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(total / scores.data().len() as f64)
}

/// Step-decayed learning-rate schedule and the training hyperparameters the
/// experiment uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            base_lr: 5.0,
            decay_factor: 0.5,
            decay_every: 10,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.epochs == 0 || self.decay_every == 0 || self.batch_size == 0 {
            return Err(NnError::InvalidDims(
                "epochs, decay_every and batch_size must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0) {
            return Err(NnError::InvalidDims("base_lr must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(NnError::InvalidDims("decay_factor must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Learning rate at a 0-based epoch: `base_lr * decay^floor(epoch / every)`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    config.base_lr * config.decay_factor.powi((epoch / config.decay_every) as i32)
}

/// In-place SGD update `p <- p - lr * g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NnError> {
    if params.len() != grads.len() {
        return Err(NnError::ShapeMismatch(format!(
            "params {} vs grads {}",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// The classifier: `n_linear` linear layers; every hidden layer is followed
/// by batch norm and Mish, the final layer by a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    linears: Vec<Linear>,
    bns: Vec<BatchNorm>,
    #[serde(skip, default)]
    mode: Mode,
    #[serde(skip, default)]
    version: u64,
}

/// Intermediates of one train-mode forward pass, consumed by `backward`.
#[derive(Debug)]
pub struct ForwardCache {
    version: u64,
    train_mode: bool,
    /// Input to each linear layer.
    xs: Vec<Matrix>,
    /// Per hidden layer: normalized activations, batch means/vars, and the
    /// post-affine pre-activation (input of Mish).
    xhats: Vec<Matrix>,
    vars: Vec<Vec<f64>>,
    ys: Vec<Matrix>,
    scores: Matrix,
}

impl ForwardCache {
    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    /// Per hidden layer, the batch-normalized activations before the
    /// affine rescale (each column has zero mean and unit variance in
    /// train mode).
    pub fn normalized_activations(&self) -> &[Matrix] {
        &self.xhats
    }
}

/// Gradients for every trainable tensor of an [`Mlp`], in model order.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    dw: Vec<Matrix>,
    db: Vec<Vec<f64>>,
    dgamma: Vec<Vec<f64>>,
    dbeta: Vec<Vec<f64>>,
}

impl Mlp {
    /// Seeded initialization: hidden widths floor-halve from `input_dim`,
    /// weights uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero,
    /// batch-norm gamma 1 / beta 0.
    pub fn init(
        input_dim: usize,
        output_dim: usize,
        n_linear: usize,
        seed: u64,
    ) -> Result<Self, NnError> {
        if output_dim < 1 || input_dim < output_dim {
            return Err(NnError::InvalidDims(format!(
                "need input_dim >= output_dim >= 1, got {input_dim} -> {output_dim}"
            )));
        }
        if n_linear < 1 {
            return Err(NnError::InvalidDims("need at least one linear layer".into()));
        }
        let mut dims = vec![input_dim];
        let mut d = input_dim;
        for _ in 0..n_linear - 1 {
            d /= 2;
            if d < 1 {
                return Err(NnError::InvalidDims(format!(
                    "halving chain from {input_dim} hits zero width before {n_linear} layers"
                )));
            }
            dims.push(d);
        }
        dims.push(output_dim);

        let mut rng = seeded_rng(seed, &[0x1417]);
        let mut linears = Vec::with_capacity(n_linear);
        for l in 0..n_linear {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            linears.push(Linear {
                w: Matrix::from_vec(fan_out, fan_in, data),
                b: vec![0.0; fan_out],
            });
        }
        let bns = dims[1..n_linear].iter().map(|&d| BatchNorm::new(d)).collect();
        Ok(Mlp {
            dims,
            linears,
            bns,
            mode: Mode::Eval,
            version: 0,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Trainable parameter count: weights, biases, and batch-norm affine
    /// terms (running statistics are state, not parameters).
    pub fn param_count(&self) -> usize {
        let linear: usize = self.linears.iter().map(|l| l.w.data().len() + l.b.len()).sum();
        let affine: usize = self.bns.iter().map(|bn| bn.gamma.len() + bn.beta.len()).sum();
        linear + affine
    }

    fn linear_forward(linear: &Linear, x: &Matrix) -> Matrix {
        let mut z = x.matmul_nt(&linear.w);
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&linear.b) {
                *v += b;
            }
        }
        z
    }

    fn check_input(&self, batch: &Matrix) -> Result<(), NnError> {
        if batch.cols() != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "batch width {} vs input dim {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass honouring the current mode. Train mode normalizes with
    /// batch statistics and updates running statistics; eval mode uses the
    /// stored running statistics and mutates nothing.
    pub fn forward(&mut self, batch: &Matrix) -> Result<(Matrix, ForwardCache), NnError> {
        self.check_input(batch)?;
        let train = self.mode == Mode::Train;
        let b = batch.rows();
        if train && b < 2 {
            return Err(NnError::BatchTooSmall(b));
        }
        if b == 0 {
            return Err(NnError::BatchTooSmall(0));
        }

        let n_hidden = self.bns.len();
        let mut xs = Vec::with_capacity(self.linears.len());
        let mut xhats = Vec::with_capacity(n_hidden);
        let mut vars = Vec::with_capacity(n_hidden);
        let mut ys = Vec::with_capacity(n_hidden);
        let mut x = batch.clone();

        for l in 0..n_hidden {
            let z = Self::linear_forward(&self.linears[l], &x);
            xs.push(x);
            let dim = z.cols();
            let mut mean = vec![0.0; dim];
            let mut var = vec![0.0; dim];
            if train {
                for i in 0..b {
                    for (m, v) in mean.iter_mut().zip(z.row(i)) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= b as f64;
                }
                for i in 0..b {
                    for j in 0..dim {
                        let d = z[(i, j)] - mean[j];
                        var[j] += d * d;
                    }
                }
                for v in &mut var {
                    *v /= b as f64;
                }
                let bn = &mut self.bns[l];
                // running stats keep the unbiased variance, normalization
                // uses the biased one
                let unbias = b as f64 / (b as f64 - 1.0);
                for j in 0..dim {
                    bn.running_mean[j] =
                        (1.0 - bn.momentum) * bn.running_mean[j] + bn.momentum * mean[j];
                    bn.running_var[j] =
                        (1.0 - bn.momentum) * bn.running_var[j] + bn.momentum * var[j] * unbias;
                }
            } else {
                mean.copy_from_slice(&self.bns[l].running_mean);
                var.copy_from_slice(&self.bns[l].running_var);
            }

            let bn = &self.bns[l];
            let mut xhat = Matrix::zeros(b, dim);
            let mut y = Matrix::zeros(b, dim);
            for j in 0..dim {
                let inv_std = 1.0 / (var[j] + bn.eps).sqrt();
                for i in 0..b {
                    let h = (z[(i, j)] - mean[j]) * inv_std;
                    xhat[(i, j)] = h;
                    y[(i, j)] = bn.gamma[j] * h + bn.beta[j];
                }
            }

            let mut a = Matrix::zeros(b, dim);
            for (dst, src) in a.data_mut().iter_mut().zip(y.data()) {
                *dst = mish(*src);
            }
            xhats.push(xhat);
            vars.push(var);
            ys.push(y);
            x = a;
        }

        let z = Self::linear_forward(&self.linears[n_hidden], &x);
        xs.push(x);
        let mut scores = z;
        for v in scores.data_mut() {
            *v = sigmoid(*v);
        }

        let cache = ForwardCache {
            version: self.version,
            train_mode: train,
            xs,
            xhats,
            vars,
            ys,
            scores: scores.clone(),
        };
        Ok((scores, cache))
    }

    /// Eval-mode forward without cache; never mutates the model.
    pub fn forward_eval(&self, batch: &Matrix) -> Result<Matrix, NnError> {
        self.check_input(batch)?;
        let b = batch.rows();
        let n_hidden = self.bns.len();
        let mut x = batch.clone();
        for l in 0..n_hidden {
            let z = Self::linear_forward(&self.linears[l], &x);
            let bn = &self.bns[l];
            let dim = z.cols();
            let mut a = Matrix::zeros(b, dim);
            for j in 0..dim {
                let inv_std = 1.0 / (bn.running_var[j] + bn.eps).sqrt();
                for i in 0..b {
                    let h = (z[(i, j)] - bn.running_mean[j]) * inv_std;
                    a[(i, j)] = mish(bn.gamma[j] * h + bn.beta[j]);
                }
            }
            x = a;
        }
        let mut scores = Self::linear_forward(&self.linears[n_hidden], &x);
        for v in scores.data_mut() {
            *v = sigmoid(*v);
        }
        Ok(scores)
    }

    /// Exact gradients of [`bce_loss`] for every parameter plus the
    /// gradient with respect to the input batch (which is what chains the
    /// head into the quantum feature extractor).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        labels: &Matrix,
    ) -> Result<(MlpGrads, Matrix), NnError> {
        if cache.version != self.version || !cache.train_mode {
            return Err(NnError::StaleCache);
        }
        let scores = &cache.scores;
        if labels.rows() != scores.rows() || labels.cols() != scores.cols() {
            return Err(NnError::ShapeMismatch(format!(
                "labels {}x{} vs scores {}x{}",
                labels.rows(),
                labels.cols(),
                scores.rows(),
                scores.cols()
            )));
        }
        let b = scores.rows();
        let n_out = scores.cols();
        let n_hidden = self.bns.len();
        let denom = (b * n_out) as f64;

        // d loss / d logit of the sigmoid output layer
        let mut dz = Matrix::zeros(b, n_out);
        for (d, (p, y)) in dz
            .data_mut()
            .iter_mut()
            .zip(scores.data().iter().zip(labels.data()))
        {
            *d = (p - y) / denom;
        }

        let mut dw = vec![Matrix::zeros(0, 0); self.linears.len()];
        let mut db = vec![Vec::new(); self.linears.len()];
        let mut dgamma = vec![Vec::new(); n_hidden];
        let mut dbeta = vec![Vec::new(); n_hidden];

        // output layer
        let last = n_hidden;
        dw[last] = dz.matmul_tn(&cache.xs[last]);
        db[last] = column_sums(&dz);
        let mut dx = dz.matmul_nn(&self.linears[last].w);

        for l in (0..n_hidden).rev() {
            let dim = self.dims[l + 1];
            // through Mish
            let mut dy = dx;
            for (d, y) in dy.data_mut().iter_mut().zip(cache.ys[l].data()) {
                *d *= mish_deriv(*y);
            }
            // through the batch-norm affine and normalization
            let bn = &self.bns[l];
            let xhat = &cache.xhats[l];
            let mut dg = vec![0.0; dim];
            let mut dbeta_l = vec![0.0; dim];
            for i in 0..b {
                for j in 0..dim {
                    dg[j] += dy[(i, j)] * xhat[(i, j)];
                    dbeta_l[j] += dy[(i, j)];
                }
            }
            // dxhat = dy * gamma; fold the batch-statistics terms
            let mut dz_l = Matrix::zeros(b, dim);
            for j in 0..dim {
                let inv_std = 1.0 / (cache.vars[l][j] + bn.eps).sqrt();
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for i in 0..b {
                    let dxh = dy[(i, j)] * bn.gamma[j];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat[(i, j)];
                }
                let bf = b as f64;
                for i in 0..b {
                    let dxh = dy[(i, j)] * bn.gamma[j];
                    dz_l[(i, j)] =
                        inv_std / bf * (bf * dxh - sum_dxhat - xhat[(i, j)] * sum_dxhat_xhat);
                }
            }
            dgamma[l] = dg;
            dbeta[l] = dbeta_l;
            dw[l] = dz_l.matmul_tn(&cache.xs[l]);
            db[l] = column_sums(&dz_l);
            dx = dz_l.matmul_nn(&self.linears[l].w);
        }

        Ok((MlpGrads { dw, db, dgamma, dbeta }, dx))
    }

    /// One SGD step over every tensor, in model order.
    pub fn apply_sgd(&mut self, grads: &MlpGrads, lr: f64) -> Result<(), NnError> {
        if grads.dw.len() != self.linears.len() || grads.dgamma.len() != self.bns.len() {
            return Err(NnError::ShapeMismatch("gradient layer count".into()));
        }
        for (linear, (dw, db)) in self.linears.iter_mut().zip(grads.dw.iter().zip(&grads.db)) {
            sgd_step(linear.w.data_mut(), dw.data(), lr)?;
            sgd_step(&mut linear.b, db, lr)?;
        }
        for (bn, (dg, dbeta)) in self.bns.iter_mut().zip(grads.dgamma.iter().zip(&grads.dbeta)) {
            sgd_step(&mut bn.gamma, dg, lr)?;
            sgd_step(&mut bn.beta, dbeta, lr)?;
        }
        self.version += 1;
        Ok(())
    }

    /// Flattens every trainable parameter in model order (per linear layer
    /// the row-major weights then biases, then per batch-norm gamma then
    /// beta).
    pub fn params_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.linears {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        for bn in &self.bns {
            out.extend_from_slice(&bn.gamma);
            out.extend_from_slice(&bn.beta);
        }
        out
    }

    /// Flattens gradients in the same order as [`Mlp::params_vec`].
    pub fn grads_vec(&self, grads: &MlpGrads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (dw, db) in grads.dw.iter().zip(&grads.db) {
            out.extend_from_slice(dw.data());
            out.extend_from_slice(db);
        }
        for (dg, dbeta) in grads.dgamma.iter().zip(&grads.dbeta) {
            out.extend_from_slice(dg);
            out.extend_from_slice(dbeta);
        }
        out
    }

    /// Overwrites every trainable parameter from a flat vector in
    /// [`Mlp::params_vec`] order.
    pub fn set_params_vec(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.param_count() {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for l in &mut self.linears {
            let wn = l.w.data().len();
            l.w.data_mut().copy_from_slice(&flat[offset..offset + wn]);
            offset += wn;
            let bn_len = l.b.len();
            l.b.copy_from_slice(&flat[offset..offset + bn_len]);
            offset += bn_len;
        }
        for bn in &mut self.bns {
            let glen = bn.gamma.len();
            bn.gamma.copy_from_slice(&flat[offset..offset + glen]);
            offset += glen;
            let blen = bn.beta.len();
            bn.beta.copy_from_slice(&flat[offset..offset + blen]);
            offset += blen;
        }
        self.version += 1;
        Ok(())
    }

    /// Adds `delta` to the parameter at flat index `idx` (params_vec
    /// order).
    pub fn nudge_param(&mut self, idx: usize, delta: f64) {
        let mut i = idx;
        for l in &mut self.linears {
            let wn = l.w.data().len();
            if i < wn {
                l.w.data_mut()[i] += delta;
                self.version += 1;
                return;
            }
            i -= wn;
            if i < l.b.len() {
                l.b[i] += delta;
                self.version += 1;
                return;
            }
            i -= l.b.len();
        }
        for bn in &mut self.bns {
            if i < bn.gamma.len() {
                bn.gamma[i] += delta;
                self.version += 1;
                return;
            }
            i -= bn.gamma.len();
            if i < bn.beta.len() {
                bn.beta[i] += delta;
                self.version += 1;
                return;
            }
            i -= bn.beta.len();
        }
        panic!("parameter index {idx} out of range");
    }

    /// Structural consistency check used after deserialization.
    pub fn validate_shapes(&self) -> Result<(), NnError> {
        if self.dims.len() != self.linears.len() + 1 {
            return Err(NnError::InvalidDims("dims vs linear layers".into()));
        }
        if self.bns.len() + 1 != self.linears.len() {
            return Err(NnError::InvalidDims("batch-norm layer count".into()));
        }
        for (l, linear) in self.linears.iter().enumerate() {
            if !linear.w.shape_consistent()
                || linear.w.rows() != self.dims[l + 1]
                || linear.w.cols() != self.dims[l]
                || linear.b.len() != self.dims[l + 1]
            {
                return Err(NnError::InvalidDims(format!("linear layer {l} shape")));
            }
        }
        for (l, bn) in self.bns.iter().enumerate() {
            let d = self.dims[l + 1];
            if bn.gamma.len() != d
                || bn.beta.len() != d
                || bn.running_mean.len() != d
                || bn.running_var.len() != d
            {
                return Err(NnError::InvalidDims(format!("batch-norm layer {l} shape")));
            }
            if bn.running_var.iter().any(|&v| !(v > 0.0)) {
                return Err(NnError::InvalidDims(format!(
                    "batch-norm layer {l} running variance must stay positive"
                )));
            }
            if !(bn.eps > 0.0) || !(bn.momentum > 0.0 && bn.momentum <= 1.0) {
                return Err(NnError::InvalidDims(format!("batch-norm layer {l} constants")));
            }
        }
        Ok(())
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}
