//! Dense float64 math with hand-written gradients.
//!
//! Everything the classifier needs lives here: affine layers, the LSTM cell
//! with its backward step, GELU, inverted dropout, masked binary
//! cross-entropy on logits, Adam, the warmup + cosine learning-rate schedule
//! and a central-difference gradient checker.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                values.len()
            )));
        }
        Ok(Tensor2 { rows, cols, values })
    }

    /// Entries drawn uniformly from `(-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let values = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor2 { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.values[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// `out += self · x`
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), out);
            }
        }
    }

    /// `self += y ⊗ x`
    pub fn outer_acc(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, x, self.row_mut(r));
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor2) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn sum_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn ensure_finite_slice(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Fully connected layer `y = W x + b` with `W` shaped (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Tensor2,
    pub bias: Tensor2,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Affine {
            weight: Tensor2::zeros(output, input),
            bias: Tensor2::zeros(output, 1),
        }
    }

    /// Weights and biases uniform in ±1/√input.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Affine {
            weight: Tensor2::uniform(output, input, bound, rng),
            bias: Tensor2::uniform(output, 1, bound, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.as_slice().to_vec();
        self.weight.matvec_acc(x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grads` and returns dL/dx.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Affine) -> Vec<f64> {
        grads.weight.outer_acc(dy, x);
        for (b, d) in grads.bias.as_mut_slice().iter_mut().zip(dy) {
            *b += d;
        }
        let mut dx = vec![0.0; x.len()];
        self.weight.matvec_t_acc(dy, &mut dx);
        dx
    }
}

/// Weights of one LSTM direction. The 4h gate rows are laid out as
/// `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    /// (4h × d)
    pub w_x: Tensor2,
    /// (4h × h)
    pub w_h: Tensor2,
    /// (4h × 1)
    pub b: Tensor2,
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w_x: Tensor2::zeros(4 * hidden, input),
            w_h: Tensor2::zeros(4 * hidden, hidden),
            b: Tensor2::zeros(4 * hidden, 1),
        }
    }

    /// Weights uniform in ±1/√h, biases zero except the forget gate at 1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut b = Tensor2::zeros(4 * hidden, 1);
        b.as_mut_slice()[hidden..2 * hidden].fill(1.0);
        LstmCellParams {
            w_x: Tensor2::uniform(4 * hidden, input, bound, rng),
            w_h: Tensor2::uniform(4 * hidden, hidden, bound, rng),
            b,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.cols()
    }

    fn check_shapes(&self) -> Result<()> {
        let h = self.hidden_dim();
        if self.w_x.rows() != 4 * h || self.w_h.rows() != 4 * h || self.b.shape() != (4 * h, 1) {
            return Err(Error::Shape(format!(
                "inconsistent LSTM cell: w_x {:?}, w_h {:?}, b {:?}",
                self.w_x.shape(),
                self.w_h.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

/// Activations saved by [`lstm_cell_step`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// One LSTM time step. Returns `(h, c, cache)`.
pub fn lstm_cell_step(
    params: &LstmCellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, LstmStepCache)> {
    params.check_shapes()?;
    let hd = params.hidden_dim();
    if x.len() != params.input_dim() || h_prev.len() != hd || c_prev.len() != hd {
        return Err(Error::Shape(format!(
            "LSTM step got x {}, h {}, c {} for a cell with input {} and hidden {hd}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            params.input_dim()
        )));
    }
    ensure_finite_slice(x, "LSTM input")?;
    ensure_finite_slice(h_prev, "LSTM hidden state")?;
    ensure_finite_slice(c_prev, "LSTM cell state")?;

    let mut pre = params.b.as_slice().to_vec();
    params.w_x.matvec_acc(x, &mut pre);
    params.w_h.matvec_acc(h_prev, &mut pre);

    let i: Vec<f64> = pre[..hd].iter().map(|&z| sigmoid(z)).collect();
    let f: Vec<f64> = pre[hd..2 * hd].iter().map(|&z| sigmoid(z)).collect();
    let g: Vec<f64> = pre[2 * hd..3 * hd].iter().map(|&z| z.tanh()).collect();
    let o: Vec<f64> = pre[3 * hd..].iter().map(|&z| sigmoid(z)).collect();
    let c: Vec<f64> = (0..hd).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..hd).map(|k| o[k] * tanh_c[k]).collect();

    let cache = LstmStepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i,
        f,
        g,
        o,
        tanh_c,
    };
    Ok((h, c, cache))
}

/// Backward through one LSTM step given upstream `dh` and `dc`.
/// Accumulates into `grads` and returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_step_backward(
    params: &LstmCellParams,
    cache: &LstmStepCache,
    dh: &[f64],
    dc: &[f64],
    grads: &mut LstmCellParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = params.hidden_dim();
    let mut da = vec![0.0; 4 * hd];
    let mut dc_prev = vec![0.0; hd];
    for k in 0..hd {
        let (i, f, g, o, tc) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tanh_c[k]);
        let d_o = dh[k] * tc;
        let dc_total = dc[k] + dh[k] * o * (1.0 - tc * tc);
        let d_i = dc_total * g;
        let d_g = dc_total * i;
        let d_f = dc_total * cache.c_prev[k];
        dc_prev[k] = dc_total * f;
        da[k] = d_i * i * (1.0 - i);
        da[hd + k] = d_f * f * (1.0 - f);
        da[2 * hd + k] = d_g * (1.0 - g * g);
        da[3 * hd + k] = d_o * o * (1.0 - o);
    }
    grads.w_x.outer_acc(&da, &cache.x);
    grads.w_h.outer_acc(&da, &cache.h_prev);
    for (b, d) in grads.b.as_mut_slice().iter_mut().zip(&da) {
        *b += d;
    }
    let mut dx = vec![0.0; cache.x.len()];
    params.w_x.matvec_t_acc(&da, &mut dx);
    let mut dh_prev = vec![0.0; hd];
    params.w_h.matvec_t_acc(&da, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &[f64]) -> Result<Vec<f64>> {
    ensure_finite_slice(x, "GELU input")?;
    Ok(x.iter().map(|&v| gelu_scalar(v)).collect())
}

/// Mean binary cross-entropy on logits over the positions where `mask` is 1,
/// with its gradient (zero at masked-out positions).
pub fn masked_bce_with_logits(logits: &[f64], targets: &[u8], mask: &[u8]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() || logits.len() != mask.len() {
        return Err(Error::Shape(format!(
            "BCE got {} logits, {} targets, {} mask entries",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    ensure_finite_slice(logits, "BCE logits")?;
    let count = mask.iter().filter(|&&m| m != 0).count();
    if count == 0 {
        return Err(Error::InvalidArgument("BCE mask has no active position".into()));
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (k, (&z, &y)) in logits.iter().zip(targets).enumerate() {
        if mask[k] == 0 {
            continue;
        }
        let y = f64::from(y);
        // log(1 + e^z) - y z, arranged so saturated correct logits give ~0
        loss += (z.max(0.0) - y * z) + (-z.abs()).exp().ln_1p();
        grad[k] = (sigmoid(z) - y) * scale;
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and, when anything was dropped, the
/// per-entry multiplier (0 or 1/(1-p)) needed for the backward pass.
pub fn dropout_apply<R: Rng + ?Sized>(
    x: &[f64],
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.to_vec(), None));
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = x
        .iter()
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
        .collect();
    let out = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((out, Some(mask)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            config: AdamConfig::default(),
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }
}

/// One bias-corrected Adam update over a list of parameter buffers.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "Adam got {} parameter buffers, {} gradients, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[k].len() {
            return Err(Error::Shape(format!(
                "Adam buffer {k}: {} params, {} grads, {} moments",
                p.len(),
                g.len(),
                state.m[k].len()
            )));
        }
    }
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} is negative")));
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.t as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak`, then cosine decay to `min` at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        CosineSchedule {
            peak: 5e-4,
            min: 5e-5,
            warmup: 2600,
            total: 30000,
        }
    }
}

impl CosineSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup >= self.total && self.total > 0 {
            return Err(Error::InvalidArgument(format!(
                "warmup {} must be below total steps {}",
                self.warmup, self.total
            )));
        }
        if !(self.min > 0.0 && self.min <= self.peak) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < min_lr ({}) <= peak_lr ({})",
                self.min, self.peak
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total {
            return Err(Error::InvalidArgument(format!(
                "step {step} beyond schedule end {}",
                self.total
            )));
        }
        if step < self.warmup {
            return Ok(self.peak * step as f64 / self.warmup as f64);
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        Ok(self.min + (self.peak - self.min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `f` against central
/// differences at every coordinate of `params`; returns the largest
/// relative error. `f` maps parameters to `(loss, gradient)`.
pub fn grad_check<F>(mut f: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    let (loss_a, grad) = f(params)?;
    let (loss_b, grad_b) = f(params)?;
    if loss_a.to_bits() != loss_b.to_bits() || grad != grad_b {
        return Err(Error::InvalidArgument(
            "gradient check closure is not deterministic".into(),
        ));
    }
    if grad.len() != params.len() {
        return Err(Error::Shape(format!(
            "closure returned {} gradient entries for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for k in 0..params.len() {
        probe[k] = params[k] + epsilon;
        let (plus, _) = f(&probe)?;
        probe[k] = params[k] - epsilon;
        let (minus, _) = f(&probe)?;
        probe[k] = params[k];
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(grad[k], numeric));
    }
    Ok(worst)
}
