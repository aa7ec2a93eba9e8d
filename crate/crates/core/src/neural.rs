//! Single-layer LSTM with a two-layer MLP head, trained on MSE with
//! backpropagation through time and Adam.
//!
//! All parameters live in one flat `f64` vector so that the optimizer and
//! the finite-difference checker can treat them uniformly; [`ParamLayout`]
//! maps tensor names to ranges. Gate blocks are stacked in the order
//! input, forget, cell, output.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_HIDDEN: usize = 12;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    Tanh,
    /// Linear head, used for gradient-check ablations.
    Identity,
}

impl HeadActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            HeadActivation::Tanh => x.tanh(),
            HeadActivation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            HeadActivation::Tanh => 1.0 - y * y,
            HeadActivation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub mlp_hidden: usize,
    pub activation: HeadActivation,
}

impl ModelShape {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: DEFAULT_HIDDEN,
            mlp_hidden: DEFAULT_HIDDEN,
            activation: HeadActivation::Tanh,
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    /// `4H × D`
    pub w_x: Range<usize>,
    /// `4H × H`
    pub w_h: Range<usize>,
    /// `4H`
    pub b: Range<usize>,
    /// `h1 × H`
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    /// `h1`
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

impl ParamLayout {
    fn new(shape: &ModelShape) -> Self {
        let (d, h, h1) = (shape.input_dim, shape.hidden_dim, shape.mlp_hidden);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            w_x: take(4 * h * d),
            w_h: take(4 * h * h),
            b: take(4 * h),
            w1: take(h1 * h),
            b1: take(h1),
            w2: take(h1),
            b2: take(1),
        }
    }

    pub fn len(&self) -> usize {
        self.b2.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub shape: ModelShape,
    pub params: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    steps: usize,
    /// Per step `[i, f, g, o]` activations, `4H` each.
    gates: Vec<f64>,
    /// Cell states `c_0..=c_T`, `H` each.
    cells: Vec<f64>,
    /// Hidden states `h_0..=h_T`.
    hidden: Vec<f64>,
    /// MLP hidden activations.
    head: Vec<f64>,
}

/// One training example: a row-major `steps × input_dim` window and its
/// target.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub target: f64,
}

impl LstmModel {
    pub fn zeros(shape: ModelShape) -> Self {
        let n = shape.layout().len();
        Self {
            shape,
            params: vec![0.0; n],
        }
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) per tensor, forget-gate bias 1.
    pub fn init(shape: ModelShape, rng: &mut ChaCha8Rng) -> Self {
        let mut model = Self::zeros(shape);
        let layout = shape.layout();
        let (d, h, h1) = (shape.input_dim, shape.hidden_dim, shape.mlp_hidden);
        let tensors = [
            (layout.w_x.clone(), d),
            (layout.w_h.clone(), h),
            (layout.b.clone(), d + h),
            (layout.w1.clone(), h),
            (layout.b1.clone(), h),
            (layout.w2.clone(), h1),
            (layout.b2.clone(), h1),
        ];
        for (range, fan_in) in tensors {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for p in &mut model.params[range] {
                *p = rng.random_range(-bound..bound);
            }
        }
        for p in &mut model.params[layout.b.start + h..layout.b.start + 2 * h] {
            *p = 1.0;
        }
        model
    }

    pub fn layout(&self) -> ParamLayout {
        self.shape.layout()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn steps_of(&self, features: &[f64]) -> Result<usize, NeuralError> {
        let d = self.shape.input_dim;
        if d == 0 || features.is_empty() || !features.len().is_multiple_of(d) {
            return Err(NeuralError::ShapeMismatch(format!(
                "window of {} values is not a whole number of {d}-wide rows",
                features.len()
            )));
        }
        Ok(features.len() / d)
    }

    /// Prediction for one window, from zero initial state.
    pub fn predict(&self, features: &[f64]) -> Result<f64, NeuralError> {
        self.forward(features).map(|(y, _)| y)
    }

    pub fn forward(&self, features: &[f64]) -> Result<(f64, ForwardCache), NeuralError> {
        let steps = self.steps_of(features)?;
        let (d, h, h1) = (self.shape.input_dim, self.shape.hidden_dim, self.shape.mlp_hidden);
        let l = self.layout();
        let w_x = &self.params[l.w_x.clone()];
        let w_h = &self.params[l.w_h.clone()];
        let b = &self.params[l.b.clone()];

        let mut gates = vec![0.0; steps * 4 * h];
        let mut cells = vec![0.0; (steps + 1) * h];
        let mut hidden = vec![0.0; (steps + 1) * h];
        let mut z = vec![0.0; 4 * h];
        for t in 0..steps {
            let x = &features[t * d..(t + 1) * d];
            let h_prev = &hidden[t * h..(t + 1) * h];
            for (r, zr) in z.iter_mut().enumerate() {
                let wx = &w_x[r * d..(r + 1) * d];
                let wh = &w_h[r * h..(r + 1) * h];
                let mut acc = b[r];
                acc += wx.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                acc += wh.iter().zip(h_prev).map(|(w, v)| w * v).sum::<f64>();
                *zr = acc;
            }
            let g = &mut gates[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                g[j] = sigmoid(z[j]);
                g[h + j] = sigmoid(z[h + j]);
                g[2 * h + j] = z[2 * h + j].tanh();
                g[3 * h + j] = sigmoid(z[3 * h + j]);
            }
            for j in 0..h {
                let c = g[h + j] * cells[t * h + j] + g[j] * g[2 * h + j];
                cells[(t + 1) * h + j] = c;
                hidden[(t + 1) * h + j] = g[3 * h + j] * c.tanh();
            }
        }

        let h_last = &hidden[steps * h..];
        let w1 = &self.params[l.w1.clone()];
        let b1 = &self.params[l.b1.clone()];
        let head: Vec<f64> = (0..h1)
            .map(|r| {
                let a = b1[r] + w1[r * h..(r + 1) * h].iter().zip(h_last).map(|(w, v)| w * v).sum::<f64>();
                self.shape.activation.apply(a)
            })
            .collect();
        let w2 = &self.params[l.w2.clone()];
        let y = self.params[l.b2.start] + w2.iter().zip(&head).map(|(w, u)| w * u).sum::<f64>();
        Ok((
            y,
            ForwardCache {
                steps,
                gates,
                cells,
                hidden,
                head,
            },
        ))
    }

    /// Accumulates `d_out · ∂y/∂θ` into `grad`.
    fn backprop(&self, features: &[f64], cache: &ForwardCache, d_out: f64, grad: &mut [f64]) {
        let (d, h, h1) = (self.shape.input_dim, self.shape.hidden_dim, self.shape.mlp_hidden);
        let l = self.layout();
        let steps = cache.steps;
        let h_last = &cache.hidden[steps * h..];

        grad[l.b2.start] += d_out;
        let w2 = &self.params[l.w2.clone()];
        let w1 = &self.params[l.w1.clone()];
        let mut dh = vec![0.0; h];
        for r in 0..h1 {
            let u = cache.head[r];
            grad[l.w2.start + r] += d_out * u;
            let da = d_out * w2[r] * self.shape.activation.grad_from_output(u);
            grad[l.b1.start + r] += da;
            for j in 0..h {
                grad[l.w1.start + r * h + j] += da * h_last[j];
                dh[j] += da * w1[r * h + j];
            }
        }

        let w_h = &self.params[l.w_h.clone()];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..steps).rev() {
            let g = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
            let c_prev = &cache.cells[t * h..(t + 1) * h];
            let c = &cache.cells[(t + 1) * h..(t + 2) * h];
            for j in 0..h {
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = c[j].tanh();
                let d_o = dh[j] * tc;
                let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
                dz[j] = dc * gg * i * (1.0 - i);
                dz[h + j] = dc * c_prev[j] * f * (1.0 - f);
                dz[2 * h + j] = dc * i * (1.0 - gg * gg);
                dz[3 * h + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            let x = &features[t * d..(t + 1) * d];
            let h_prev = &cache.hidden[t * h..(t + 1) * h];
            for (r, &dzr) in dz.iter().enumerate() {
                grad[l.b.start + r] += dzr;
                let gx = &mut grad[l.w_x.start + r * d..l.w_x.start + (r + 1) * d];
                for (gw, xv) in gx.iter_mut().zip(x) {
                    *gw += dzr * xv;
                }
                let gh = &mut grad[l.w_h.start + r * h..l.w_h.start + (r + 1) * h];
                for (gw, hv) in gh.iter_mut().zip(h_prev) {
                    *gw += dzr * hv;
                }
            }
            for (j, dhj) in dh.iter_mut().enumerate() {
                *dhj = dz.iter().enumerate().map(|(r, dzr)| dzr * w_h[r * h + j]).sum();
            }
        }
    }
}

/// Mean of squared errors.
pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64, NeuralError> {
    if preds.len() != targets.len() {
        return Err(NeuralError::ShapeMismatch(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64)
}

/// Batch loss only.
pub fn batch_loss(model: &LstmModel, batch: &[Example<'_>]) -> Result<f64, NeuralError> {
    if batch.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    let preds = batch
        .iter()
        .map(|e| model.predict(e.features))
        .collect::<Result<Vec<_>, _>>()?;
    let targets: Vec<f64> = batch.iter().map(|e| e.target).collect();
    mse_loss(&preds, &targets)
}

/// Loss and its exact gradient over the batch, `(1/B) Σ (y − target)²`.
/// Examples are processed in order so the summation is reproducible.
pub fn backward(model: &LstmModel, batch: &[Example<'_>]) -> Result<(f64, Vec<f64>), NeuralError> {
    if batch.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; model.n_params()];
    let mut loss = 0.0;
    for ex in batch {
        let (y, cache) = model.forward(ex.features)?;
        let err = y - ex.target;
        loss += err * err;
        model.backprop(ex.features, &cache, 2.0 * err * scale, &mut grad);
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(model: &mut LstmModel, grad: &[f64], state: &mut AdamState) -> Result<(), NeuralError> {
    let n = model.n_params();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(NeuralError::ShapeMismatch(format!(
            "{n} parameters, {} gradients, {}/{} moments",
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in model
        .params
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Gradient magnitudes below this are compared in absolute terms. Central
/// differences at step 1e-5 carry roughly 1e-11 of rounding noise per unit
/// loss, which would dominate a pure relative error on vanishing entries.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index of the worst entry.
    pub worst_param: usize,
    /// Error of every parameter, in layout order.
    pub errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_over(&self, range: Range<usize>) -> f64 {
        self.errors[range].iter().fold(0.0, |a, &e| a.max(e))
    }
}

/// Compares [`backward`] against central differences of the batch loss on
/// every parameter. The error of one entry is
/// `|g − ĝ| / max(|g|, |ĝ|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(model: &LstmModel, batch: &[Example<'_>], fd_step: f64) -> Result<GradCheckReport, NeuralError> {
    if fd_step.is_nan() || fd_step <= 0.0 {
        return Err(NeuralError::InvalidStep(fd_step));
    }
    let (_, analytic) = backward(model, batch)?;
    let mut probe = model.clone();
    let mut errors = Vec::with_capacity(analytic.len());
    for (i, &g) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + fd_step;
        let up = batch_loss(&probe, batch)?;
        probe.params[i] = orig - fd_step;
        let down = batch_loss(&probe, batch)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * fd_step);
        errors.push((g - numeric).abs() / g.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR));
    }
    let (worst_param, max_rel_error) = errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_param,
        errors,
    })
}

/// Serialized training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: LstmModel,
    pub adam: AdamState,
    pub config_hash: String,
    pub epoch: usize,
    pub rng: Option<ChaCha8Rng>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, NeuralError> {
        serde_json::to_string(self).map_err(|e| NeuralError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        let cp: Checkpoint = serde_json::from_str(text).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!("unsupported version {}", cp.version)));
        }
        let expected = cp.model.shape.layout().len();
        if cp.model.params.len() != expected || cp.adam.m.len() != expected || cp.adam.v.len() != expected {
            return Err(NeuralError::Checkpoint("tensor sizes do not match the model shape".into()));
        }
        Ok(cp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_window(rng: &mut ChaCha8Rng, steps: usize, dim: usize) -> Vec<f64> {
        (0..steps * dim).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    /// Straight-line LSTM written against nested matrices, independent of
    /// the flat-buffer forward pass.
    fn naive_predict(model: &LstmModel, window: &[f64]) -> f64 {
        let (d, hd, h1) = (model.shape.input_dim, model.shape.hidden_dim, model.shape.mlp_hidden);
        let l = model.layout();
        let p = &model.params;
        let mat = |start: usize, rows: usize, cols: usize| -> Vec<Vec<f64>> {
            (0..rows).map(|r| p[start + r * cols..start + (r + 1) * cols].to_vec()).collect()
        };
        let wx = mat(l.w_x.start, 4 * hd, d);
        let wh = mat(l.w_h.start, 4 * hd, hd);
        let b = p[l.b.clone()].to_vec();
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        for x in window.chunks(d) {
            let pre = |gate: usize, j: usize, h: &[f64]| {
                let r = gate * hd + j;
                let mut s = b[r];
                for k in 0..d {
                    s += wx[r][k] * x[k];
                }
                for k in 0..hd {
                    s += wh[r][k] * h[k];
                }
                s
            };
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let mut h_new = vec![0.0; hd];
            for j in 0..hd {
                let i = sig(pre(0, j, &h));
                let f = sig(pre(1, j, &h));
                let g = pre(2, j, &h).tanh();
                let o = sig(pre(3, j, &h));
                c[j] = f * c[j] + i * g;
                h_new[j] = o * c[j].tanh();
            }
            h = h_new;
        }
        let w1 = mat(l.w1.start, h1, hd);
        let mut y = p[l.b2.start];
        for r in 0..h1 {
            let mut a = p[l.b1.start + r];
            for k in 0..hd {
                a += w1[r][k] * h[k];
            }
            let u = match model.shape.activation {
                HeadActivation::Tanh => a.tanh(),
                HeadActivation::Identity => a,
            };
            y += p[l.w2.start + r] * u;
        }
        y
    }

    #[test]
    fn zero_model_predicts_zero() {
        let model = LstmModel::zeros(ModelShape::new(14));
        let w = random_window(&mut rng(1), 20, 14);
        assert_eq!(model.predict(&w).unwrap(), 0.0);
    }

    #[test]
    fn zero_lstm_with_head_by_hand() {
        let mut model = LstmModel::zeros(ModelShape::new(3));
        let l = model.layout();
        // h_20 = 0, so head layer 1 sees only its bias
        for (r, p) in model.params[l.b1.clone()].iter_mut().enumerate() {
            *p = 0.1 * r as f64;
        }
        for p in &mut model.params[l.w2.clone()] {
            *p = 0.5;
        }
        model.params[l.b2.start] = -0.25;
        let expected = -0.25 + (0..12).map(|r| 0.5 * (0.1 * r as f64).tanh()).sum::<f64>();
        let w = random_window(&mut rng(2), 20, 3);
        assert!((model.predict(&w).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_naive_recurrence() {
        let mut r = rng(3);
        for dim in [14, 28, 42] {
            let model = LstmModel::init(ModelShape::new(dim), &mut r);
            for _ in 0..5 {
                let w = random_window(&mut r, 20, dim);
                let fast = model.predict(&w).unwrap();
                assert!((fast - naive_predict(&model, &w)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ragged_window_is_rejected() {
        let model = LstmModel::zeros(ModelShape::new(4));
        assert!(matches!(model.predict(&[0.0; 7]), Err(NeuralError::ShapeMismatch(_))));
        assert!(matches!(model.predict(&[]), Err(NeuralError::ShapeMismatch(_))));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 12.5);
        assert_eq!(mse_loss(&[], &[]).unwrap_err(), NeuralError::EmptyBatch);
    }

    fn batch_for(model: &LstmModel, r: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let windows: Vec<Vec<f64>> = (0..n).map(|_| random_window(r, 20, model.shape.input_dim)).collect();
        let targets = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        (windows, targets)
    }

    fn examples<'a>(windows: &'a [Vec<f64>], targets: &[f64]) -> Vec<Example<'a>> {
        windows
            .iter()
            .zip(targets)
            .map(|(w, &t)| Example { features: w, target: t })
            .collect()
    }

    #[test]
    fn zero_error_batch_has_zero_gradient() {
        let mut r = rng(4);
        let model = LstmModel::init(ModelShape::new(5), &mut r);
        let (windows, _) = batch_for(&model, &mut r, 3);
        let targets: Vec<f64> = windows.iter().map(|w| model.predict(w).unwrap()).collect();
        let (loss, grad) = backward(&model, &examples(&windows, &targets)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_keeps_gradient() {
        let mut r = rng(5);
        let model = LstmModel::init(ModelShape::new(5), &mut r);
        let (windows, targets) = batch_for(&model, &mut r, 3);
        let (_, g1) = backward(&model, &examples(&windows, &targets)).unwrap();
        let w2: Vec<Vec<f64>> = windows.iter().chain(&windows).cloned().collect();
        let t2: Vec<f64> = targets.iter().chain(&targets).copied().collect();
        let (_, g2) = backward(&model, &examples(&w2, &t2)).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut r = rng(100 + seed);
            let model = LstmModel::init(ModelShape::new(14), &mut r);
            let (windows, targets) = batch_for(&model, &mut r, 2);
            let report = grad_check(&model, &examples(&windows, &targets), 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn linear_head_gradients_are_tighter() {
        // With an identity head the prediction is linear in each head
        // coordinate, so the loss is quadratic along it and central
        // differences carry no truncation error at any step. A wide step
        // keeps rounding (about eps·J/step) under the bound.
        for seed in 0..10 {
            let mut r = rng(200 + seed);
            let shape = ModelShape {
                activation: HeadActivation::Identity,
                ..ModelShape::new(6)
            };
            let model = LstmModel::init(shape, &mut r);
            let (windows, targets) = batch_for(&model, &mut r, 2);
            let batch = examples(&windows, &targets);
            let l = model.layout();
            let head = grad_check(&model, &batch, 1e-3).unwrap().max_over(l.w1.start..l.b2.end);
            assert!(head < 1e-8, "seed {seed}: {head:e}");
            assert!(grad_check(&model, &batch, 1e-5).unwrap().max_rel_error < 1e-6);
        }
    }

    #[test]
    fn grad_check_rejects_zero_step() {
        let model = LstmModel::zeros(ModelShape::new(2));
        let w = vec![0.0; 4];
        let batch = [Example { features: &w, target: 1.0 }];
        assert_eq!(grad_check(&model, &batch, 0.0).unwrap_err(), NeuralError::InvalidStep(0.0));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut r = rng(8);
        let mut model = LstmModel::init(ModelShape::new(3), &mut r);
        let before = model.clone();
        let mut state = AdamState::new(model.n_params(), 0.001);
        let zeros = vec![0.0; model.n_params()];
        adam_step(&mut model, &zeros, &mut state).unwrap();
        assert_eq!(model.params, before.params);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g and v̂ = g² after one step, so Δ = −lr·g/(|g| + ε)
        let mut model = LstmModel::zeros(ModelShape::new(2));
        let n = model.n_params();
        let mut state = AdamState::new(n, 0.001);
        adam_step(&mut model, &vec![0.3; n], &mut state).unwrap();
        let expected = -0.001 * 0.3 / (0.3 + 1e-8);
        assert!(model.params.iter().all(|&p| (p - expected).abs() < 1e-15));
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut r = rng(9);
        let base = LstmModel::init(ModelShape::new(3), &mut r);
        let grad: Vec<f64> = (0..base.n_params()).map(|_| r.random_range(-1.0..1.0)).collect();
        let run = || {
            let mut m = base.clone();
            let mut s = AdamState::new(m.n_params(), 0.001);
            adam_step(&mut m, &grad, &mut s).unwrap();
            adam_step(&mut m, &grad, &mut s).unwrap();
            (m, s)
        };
        assert_eq!(run(), run());
    }

    fn train_steps(seed: u64, steps: usize) -> (f64, f64, LstmModel) {
        let mut r = rng(seed);
        let mut model = LstmModel::init(ModelShape::new(14), &mut r);
        let (windows, _) = batch_for(&model, &mut r, 64);
        let targets: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
        let batch = examples(&windows, &targets);
        let mut adam = AdamState::new(model.n_params(), 0.001);
        let start = batch_loss(&model, &batch).unwrap();
        for _ in 0..steps {
            let (_, grad) = backward(&model, &batch).unwrap();
            adam_step(&mut model, &grad, &mut adam).unwrap();
        }
        (start, batch_loss(&model, &batch).unwrap(), model)
    }

    #[test]
    fn fifty_adam_steps_halve_the_loss() {
        let (start, end, _) = train_steps(12, 50);
        assert!(end <= 0.5 * start, "{start} -> {end}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (_, a, ma) = train_steps(13, 10);
        let (_, b, mb) = train_steps(13, 10);
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(ma.params.iter().zip(&mb.params).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn init_sets_forget_bias() {
        let model = LstmModel::init(ModelShape::new(14), &mut rng(10));
        let l = model.layout();
        let h = model.shape.hidden_dim;
        assert!(model.params[l.b.start + h..l.b.start + 2 * h].iter().all(|&b| b == 1.0));
        let bound = 1.0 / (14f64).sqrt();
        assert!(model.params[l.w_x.clone()].iter().all(|w| w.abs() <= bound));
        assert_eq!(model.n_params(), 4 * 12 * (14 + 12 + 1) + 12 * 12 + 12 + 12 + 1);
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let mut r = rng(11);
        let model = LstmModel::init(ModelShape::new(4), &mut r);
        let mut adam = AdamState::new(model.n_params(), 0.001);
        let grad: Vec<f64> = (0..model.n_params()).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut m = model.clone();
        adam_step(&mut m, &grad, &mut adam).unwrap();
        let cp = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: m,
            adam,
            config_hash: "abc".into(),
            epoch: 3,
            rng: Some(r),
        };
        let back = Checkpoint::from_json(&cp.to_json().unwrap()).unwrap();
        assert_eq!(back, cp);
        for (a, b) in back.model.params.iter().zip(&cp.model.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
