//! The sequential sentence pair classifier.
//!
//! Sentence vectors pass through a stack of bidirectional LSTM layers; the
//! contextual vectors of every two adjacent sentences are concatenated and a
//! three-layer GELU MLP maps each pair to one boundary logit. Every problem
//! is unrolled at its own length, so there is no padding anywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ChangeLabels;
use crate::error::{Error, Result};
use crate::featurize::SentenceMatrix;
use crate::numerics::{
    dropout_apply, gelu_grad_scalar, gelu_scalar, lstm_cell_step, lstm_cell_step_backward, Affine,
    LstmCellParams, LstmStepCache, Mode, Tensor2,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden size of each LSTM direction.
    pub hidden_dim: usize,
    pub bilstm_layers: usize,
    pub bilstm_dropout: f64,
    pub mlp_hidden_dims: [usize; 2],
    pub mlp_dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 768,
            hidden_dim: 256,
            bilstm_layers: 5,
            bilstm_dropout: 0.2,
            mlp_hidden_dims: [512, 128],
            mlp_dropout: 0.2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.hidden_dim,
            self.bilstm_layers,
            self.mlp_hidden_dims[0],
            self.mlp_hidden_dims[1],
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be at least 1: {self:?}"
            )));
        }
        for p in [self.bilstm_dropout, self.mlp_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLstmLayer {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

/// All learnable tensors. The same type holds gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layers: Vec<BiLstmLayer>,
    /// `4h -> m1 -> m2 -> 1`
    pub mlp: [Affine; 3],
}

pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.hidden_dim;
    let layers = (0..config.bilstm_layers)
        .map(|l| {
            let input = if l == 0 { config.input_dim } else { 2 * h };
            BiLstmLayer {
                forward: LstmCellParams::init(input, h, &mut rng),
                backward: LstmCellParams::init(input, h, &mut rng),
            }
        })
        .collect();
    let [m1, m2] = config.mlp_hidden_dims;
    let mlp = [
        Affine::init(4 * h, m1, &mut rng),
        Affine::init(m1, m2, &mut rng),
        Affine::init(m2, 1, &mut rng),
    ];
    Ok(ModelParams {
        config: config.clone(),
        layers,
        mlp,
    })
}

impl ModelParams {
    /// Zero tensors with the shapes of `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_dim;
        let layers = (0..config.bilstm_layers)
            .map(|l| {
                let input = if l == 0 { config.input_dim } else { 2 * h };
                BiLstmLayer {
                    forward: LstmCellParams::zeros(input, h),
                    backward: LstmCellParams::zeros(input, h),
                }
            })
            .collect();
        let [m1, m2] = config.mlp_hidden_dims;
        ModelParams {
            config: config.clone(),
            layers,
            mlp: [Affine::zeros(4 * h, m1), Affine::zeros(m1, m2), Affine::zeros(m2, 1)],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (dir, cell) in [("fwd", &layer.forward), ("bwd", &layer.backward)] {
                out.push((format!("lstm.{l}.{dir}.w_x"), &cell.w_x));
                out.push((format!("lstm.{l}.{dir}.w_h"), &cell.w_h));
                out.push((format!("lstm.{l}.{dir}.b"), &cell.b));
            }
        }
        for (k, affine) in self.mlp.iter().enumerate() {
            out.push((format!("mlp.{k}.weight"), &affine.weight));
            out.push((format!("mlp.{k}.bias"), &affine.bias));
        }
        out
    }

    /// Same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for cell in [&mut layer.forward, &mut layer.backward] {
                out.push(&mut cell.w_x);
                out.push(&mut cell.w_h);
                out.push(&mut cell.b);
            }
        }
        for affine in &mut self.mlp {
            out.push(&mut affine.weight);
            out.push(&mut affine.bias);
        }
        out
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.named_tensors().iter().map(|(_, t)| t.as_slice().len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensor_sizes().iter().sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.as_slice().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.as_slice().len();
            t.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.named_tensors().iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt()
    }

    /// SHA-256 over the little-endian bytes of every value, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, t) in self.named_tensors() {
            for v in t.as_slice() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Boundary logits of one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLogits {
    pub problem_id: String,
    pub logits: Vec<f64>,
}

impl BoundaryLogits {
    /// `1` where the logit is strictly positive (probability above 0.5).
    pub fn labels(&self) -> ChangeLabels {
        labels_from_logits(&self.logits)
    }
}

pub fn labels_from_logits(logits: &[f64]) -> ChangeLabels {
    ChangeLabels::new(logits.iter().map(|&z| u8::from(z > 0.0)).collect())
        .expect("labels are binary")
}

#[derive(Debug, Clone)]
struct LayerCache {
    fwd: Vec<LstmStepCache>,
    /// In processing order, i.e. time `n-1` first.
    bwd: Vec<LstmStepCache>,
    /// Dropout multipliers applied to this layer's input, if any.
    input_mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct PairCache {
    pair: Vec<f64>,
    z1: Vec<f64>,
    d1: Vec<f64>,
    mask1: Option<Vec<f64>>,
    z2: Vec<f64>,
    d2: Vec<f64>,
    mask2: Option<Vec<f64>>,
}

/// Activations saved by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    input_dim: usize,
    layers: Vec<LayerCache>,
    pairs: Vec<PairCache>,
}

impl ForwardCache {
    pub fn n_sentences(&self) -> usize {
        self.n
    }
}

/// Gradients of a scalar loss with respect to the parameters and the input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ModelParams,
    pub input: Tensor2,
}

fn run_direction(
    cell: &LstmCellParams,
    input: &Tensor2,
    reverse: bool,
    output: &mut Tensor2,
    column: usize,
) -> Result<Vec<LstmStepCache>> {
    let n = input.rows();
    let h = cell.hidden_dim();
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut caches = Vec::with_capacity(n);
    for s in 0..n {
        let t = if reverse { n - 1 - s } else { s };
        let (h_next, c_next, cache) = lstm_cell_step(cell, input.row(t), &h_prev, &c_prev)?;
        output.row_mut(t)[column..column + h].copy_from_slice(&h_next);
        caches.push(cache);
        h_prev = h_next;
        c_prev = c_next;
    }
    Ok(caches)
}

fn mlp_forward<R: Rng + ?Sized>(
    mlp: &[Affine; 3],
    pair: Vec<f64>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, PairCache)> {
    let z1 = mlp[0].forward(&pair);
    let a1: Vec<f64> = z1.iter().map(|&v| gelu_scalar(v)).collect();
    let (d1, mask1) = dropout_apply(&a1, p, mode, rng)?;
    let z2 = mlp[1].forward(&d1);
    let a2: Vec<f64> = z2.iter().map(|&v| gelu_scalar(v)).collect();
    let (d2, mask2) = dropout_apply(&a2, p, mode, rng)?;
    let logit = mlp[2].forward(&d2)[0];
    Ok((
        logit,
        PairCache {
            pair,
            z1,
            d1,
            mask1,
            z2,
            d2,
            mask2,
        },
    ))
}

/// Runs the classifier on one problem. `rng` drives dropout in train mode
/// and is not touched in eval mode.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &SentenceMatrix,
    mode: Mode,
    rng: &mut R,
) -> Result<(BoundaryLogits, ForwardCache)> {
    let cfg = &params.config;
    let n = x.n_sentences();
    if x.dim() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "{}: features have {} columns, model expects {}",
            x.problem_id,
            x.dim(),
            cfg.input_dim
        )));
    }
    if n == 0 {
        return Err(Error::Shape(format!("{}: no sentences", x.problem_id)));
    }
    x.rows.ensure_finite("model input")?;

    let h = cfg.hidden_dim;
    let mut layer_input = x.rows.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut input_mask = None;
        if l > 0 {
            let (dropped, mask) = dropout_apply(layer_input.as_slice(), cfg.bilstm_dropout, mode, rng)?;
            layer_input = Tensor2::from_vec(n, 2 * h, dropped)?;
            input_mask = mask;
        }
        let mut output = Tensor2::zeros(n, 2 * h);
        let fwd = run_direction(&layer.forward, &layer_input, false, &mut output, 0)?;
        let bwd = run_direction(&layer.backward, &layer_input, true, &mut output, h)?;
        layers.push(LayerCache { fwd, bwd, input_mask });
        layer_input = output;
    }

    let contextual = layer_input;
    let mut logits = Vec::with_capacity(n.saturating_sub(1));
    let mut pairs = Vec::with_capacity(n.saturating_sub(1));
    for t in 0..n.saturating_sub(1) {
        let mut pair = Vec::with_capacity(4 * h);
        pair.extend_from_slice(contextual.row(t));
        pair.extend_from_slice(contextual.row(t + 1));
        let (logit, cache) = mlp_forward(&params.mlp, pair, cfg.mlp_dropout, mode, rng)?;
        if !logit.is_finite() {
            return Err(Error::NonFinite("boundary logit"));
        }
        logits.push(logit);
        pairs.push(cache);
    }
    Ok((
        BoundaryLogits {
            problem_id: x.problem_id.clone(),
            logits,
        },
        ForwardCache {
            n,
            input_dim: cfg.input_dim,
            layers,
            pairs,
        },
    ))
}

fn apply_mask(values: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        for (v, m) in values.iter_mut().zip(mask) {
            *v *= m;
        }
    }
}

/// Backpropagates `loss_grad` (dL/dlogit per adjacency) through a cached
/// forward pass.
pub fn backward(params: &ModelParams, cache: &ForwardCache, loss_grad: &[f64]) -> Result<Gradients> {
    let n = cache.n;
    let cfg = &params.config;
    if loss_grad.len() != n.saturating_sub(1)
        || cache.layers.len() != params.layers.len()
        || cache.input_dim != cfg.input_dim
    {
        return Err(Error::Shape(format!(
            "backward got {} logit gradients for a cached pass over {n} sentences",
            loss_grad.len()
        )));
    }
    let h = cfg.hidden_dim;
    let mut grads = params.zeros_like();

    // MLP head, one pair at a time
    let mut d_out = Tensor2::zeros(n, 2 * h);
    for (t, (pc, &g)) in cache.pairs.iter().zip(loss_grad).enumerate() {
        if g == 0.0 {
            continue;
        }
        let mut dd2 = params.mlp[2].backward(&pc.d2, &[g], &mut grads.mlp[2]);
        apply_mask(&mut dd2, &pc.mask2);
        let dz2: Vec<f64> = dd2.iter().zip(&pc.z2).map(|(d, &z)| d * gelu_grad_scalar(z)).collect();
        let mut dd1 = params.mlp[1].backward(&pc.d1, &dz2, &mut grads.mlp[1]);
        apply_mask(&mut dd1, &pc.mask1);
        let dz1: Vec<f64> = dd1.iter().zip(&pc.z1).map(|(d, &z)| d * gelu_grad_scalar(z)).collect();
        let dp = params.mlp[0].backward(&pc.pair, &dz1, &mut grads.mlp[0]);
        for (a, b) in d_out.row_mut(t).iter_mut().zip(&dp[..2 * h]) {
            *a += b;
        }
        for (a, b) in d_out.row_mut(t + 1).iter_mut().zip(&dp[2 * h..]) {
            *a += b;
        }
    }

    // BiLSTM stack, top layer first
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let lc = &cache.layers[l];
        let mut d_in = Tensor2::zeros(n, layer.forward.input_dim());
        let gl = &mut grads.layers[l];

        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..n).rev() {
            let dh: Vec<f64> = d_out.row(t)[..h].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            let (dx, dh_prev, dc_prev) =
                lstm_cell_step_backward(&layer.forward, &lc.fwd[t], &dh, &dc_next, &mut gl.forward);
            for (a, b) in d_in.row_mut(t).iter_mut().zip(&dx) {
                *a += b;
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }

        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for s in (0..n).rev() {
            let t = n - 1 - s;
            let dh: Vec<f64> = d_out.row(t)[h..].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            let (dx, dh_prev, dc_prev) =
                lstm_cell_step_backward(&layer.backward, &lc.bwd[s], &dh, &dc_next, &mut gl.backward);
            for (a, b) in d_in.row_mut(t).iter_mut().zip(&dx) {
                *a += b;
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }

        apply_mask(d_in.as_mut_slice(), &lc.input_mask);
        d_out = d_in;
    }

    Ok(Gradients {
        params: grads,
        input: d_out,
    })
}

/// Eval-mode logits.
pub fn logits(params: &ModelParams, x: &SentenceMatrix) -> Result<BoundaryLogits> {
    // eval mode never draws from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(forward(params, x, Mode::Eval, &mut rng)?.0)
}

/// Hard labels: 1 iff the logit is strictly positive.
pub fn predict(params: &ModelParams, x: &SentenceMatrix) -> Result<ChangeLabels> {
    Ok(logits(params, x)?.labels())
}

/// Predicts several problems; each is unrolled at its own length, so the
/// result for a problem does not depend on the rest of the batch.
pub fn predict_batch(params: &ModelParams, batch: &[SentenceMatrix]) -> Result<Vec<ChangeLabels>> {
    Ok(logits_batch(params, batch)?.iter().map(BoundaryLogits::labels).collect())
}

pub fn logits_batch(params: &ModelParams, batch: &[SentenceMatrix]) -> Result<Vec<BoundaryLogits>> {
    batch.par_iter().map(|x| logits(params, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_dim: 3,
            bilstm_layers: 2,
            bilstm_dropout: 0.0,
            mlp_hidden_dims: [5, 4],
            mlp_dropout: 0.0,
            seed,
        }
    }

    fn random_matrix(n: usize, d: usize, seed: u64) -> SentenceMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SentenceMatrix {
            problem_id: format!("problem-{seed}"),
            rows: Tensor2::uniform(n, d, 1.0, &mut rng),
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = small_config(1);
        assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
        assert_ne!(init_model(&cfg).unwrap(), init_model(&small_config(2)).unwrap());

        let cfg = ModelConfig {
            input_dim: 768,
            hidden_dim: 256,
            bilstm_layers: 2,
            mlp_hidden_dims: [8, 8],
            ..ModelConfig::default()
        };
        let p = init_model(&cfg).unwrap();
        assert_eq!(p.layers[0].forward.w_x.shape(), (1024, 768));
        assert_eq!(p.layers[1].forward.w_x.shape(), (1024, 512));
        assert_eq!(p.mlp[0].weight.shape(), (8, 1024));
        assert!(p.layers[0].forward.b.as_slice()[256..512].iter().all(|&b| b == 1.0));

        let mut bad = small_config(0);
        bad.hidden_dim = 0;
        assert!(init_model(&bad).is_err());
        bad = small_config(0);
        bad.mlp_dropout = 1.0;
        assert!(init_model(&bad).is_err());
    }

    #[test]
    fn single_sentence_gives_no_logits() {
        let p = init_model(&small_config(0)).unwrap();
        let out = logits(&p, &random_matrix(1, 6, 3)).unwrap();
        assert!(out.logits.is_empty());
        assert!(predict(&p, &random_matrix(1, 6, 3)).unwrap().is_empty());
    }

    #[test]
    fn zero_lstm_weights_give_constant_logits() {
        let mut p = init_model(&small_config(0)).unwrap();
        for layer in &mut p.layers {
            for cell in [&mut layer.forward, &mut layer.backward] {
                cell.w_x.fill(0.0);
                cell.w_h.fill(0.0);
                cell.b.fill(0.0);
            }
        }
        let out = logits(&p, &random_matrix(5, 6, 9)).unwrap();
        let expected = {
            let z1: Vec<f64> = p.mlp[0].forward(&[0.0; 12]).iter().map(|&v| gelu_scalar(v)).collect();
            let z2: Vec<f64> = p.mlp[1].forward(&z1).iter().map(|&v| gelu_scalar(v)).collect();
            p.mlp[2].forward(&z2)[0]
        };
        assert!(out.logits.iter().all(|&z| z == expected));
    }

    #[test]
    fn later_sentence_changes_earlier_logit() {
        let p = init_model(&small_config(5)).unwrap();
        let x = random_matrix(3, 6, 1);
        let mut y = x.clone();
        y.rows.row_mut(2).iter_mut().for_each(|v| *v += 0.5);
        let a = logits(&p, &x).unwrap().logits;
        let b = logits(&p, &y).unwrap().logits;
        assert_eq!(a.len(), 2);
        assert!((a[0] - b[0]).abs() > 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = init_model(&small_config(0)).unwrap();
        assert!(matches!(logits(&p, &random_matrix(3, 5, 0)), Err(Error::Shape(_))));
        let mut x = random_matrix(3, 6, 0);
        x.rows.set(1, 1, f64::NAN);
        assert!(matches!(logits(&p, &x), Err(Error::NonFinite(_))));
        let (_, cache) = forward(&p, &random_matrix(3, 6, 0), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(backward(&p, &cache, &[1.0]).is_err());
    }

    #[test]
    fn sign_threshold() {
        assert_eq!(labels_from_logits(&[0.3, -0.2]).as_slice(), &[1, 0]);
        assert_eq!(labels_from_logits(&[0.0]).as_slice(), &[0]);
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradients() {
        let p = init_model(&small_config(2)).unwrap();
        let (_, cache) = forward(&p, &random_matrix(4, 6, 2), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = backward(&p, &cache, &[0.0; 3]).unwrap();
        assert!(g.params.flatten().iter().all(|&v| v == 0.0));
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_mode_without_dropout_equals_eval() {
        let p = init_model(&small_config(4)).unwrap();
        let x = random_matrix(6, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (train, _) = forward(&p, &x, Mode::Train, &mut rng).unwrap();
        assert_eq!(train, logits(&p, &x).unwrap());
    }

    #[test]
    fn dropout_backward_matches_finite_differences() {
        // fixed dropout masks: reseed the generator identically for every evaluation
        let mut cfg = small_config(8);
        cfg.bilstm_dropout = 0.3;
        cfg.mlp_dropout = 0.3;
        let base = init_model(&cfg).unwrap();
        let x = random_matrix(4, 6, 8);
        let targets = [1u8, 0, 1];
        let closure = |flat: &[f64]| {
            let mut p = base.clone();
            p.assign_flat(flat)?;
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (out, cache) = forward(&p, &x, Mode::Train, &mut rng)?;
            let (loss, grad) = crate::numerics::masked_bce_with_logits(&out.logits, &targets, &[1, 1, 1])?;
            Ok((loss, backward(&p, &cache, &grad)?.params.flatten()))
        };
        let err = crate::numerics::grad_check(closure, &base.flatten(), 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn flatten_round_trip_and_checksum() {
        let p = init_model(&small_config(3)).unwrap();
        let mut q = p.zeros_like();
        q.assign_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());
        assert_ne!(p.checksum(), p.zeros_like().checksum());
        assert!(q.assign_flat(&[0.0]).is_err());
    }
}
