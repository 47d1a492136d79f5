//! Fully-connected network with ReLU hidden layers and a linear output,
//! trained by mini-batch Adam on mean squared error.
//!
//! Batches are row-major `(batch, features)` slices. Matrix products go
//! through `matrixmultiply`; the gradient itself is derived by hand below.

use crate::rng::RngStream;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset has {got} rows, need at least {need}")]
    TooSmall { got: usize, need: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (last finite loss {last_finite:?})")]
    NonFinite { epoch: usize, batch: usize, last_finite: Option<f64> },
    #[error("invalid training spec: {0}")]
    Spec(String),
}

/// Dense layer; `weights` is `(n_out, n_in)` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, weights: vec![0.0; n_in * n_out], bias: vec![0.0; n_out] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct Mlp {
    layers: Vec<Dense>,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    sizes: Vec<usize>,
    layers: Vec<Dense>,
}

impl From<Mlp> for MlpRepr {
    fn from(m: Mlp) -> Self {
        MlpRepr { sizes: m.sizes(), layers: m.layers }
    }
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = NnError;
    fn try_from(r: MlpRepr) -> Result<Self, NnError> {
        let m = Mlp::from_layers(r.layers)?;
        if m.sizes() != r.sizes {
            return Err(NnError::Shape(format!("declared sizes {:?} disagree with layers {:?}", r.sizes, m.sizes())));
        }
        Ok(m)
    }
}

/// Gradient with the same layout as the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Dense>,
}

impl Gradient {
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

/// C = A·B + beta·C where A is (m×k), B is (k×n), C is (m×n) row-major
/// and A, B are described by their row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every (row, col)
    // addressed through the given strides; `c` is m×n with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    /// Uniform fan-in initialisation: every weight and bias of a layer with
    /// `n_in` inputs is drawn from U(−1/√n_in, 1/√n_in).
    pub fn new(sizes: &[usize], rng: &mut RngStream) -> Result<Self, NnError> {
        let mut m = Self::zeros(sizes)?;
        for l in &mut m.layers {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Shape("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.n_in * l.n_out || l.bias.len() != l.n_out || l.n_in == 0 || l.n_out == 0 {
                return Err(NnError::Shape(format!("layer {i} buffers do not match {}x{}", l.n_out, l.n_in)));
            }
            if let Some(prev) = i.checked_sub(1).map(|j| &layers[j]) {
                if prev.n_out != l.n_in {
                    return Err(NnError::Shape(format!("layer {i} input {} != previous output {}", l.n_in, prev.n_out)));
                }
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(NnError::Shape(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.param_count() {
            return Err(NnError::Shape(format!("{} parameters given, {} expected", flat.len(), self.param_count())));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.forward_batch(input, 1)
    }

    /// Forward pass over `batch` rows.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>, NnError> {
        self.check_input(inputs, batch)?;
        let acts = self.activations(inputs, batch);
        Ok(acts.into_iter().last().expect("at least one layer"))
    }

    fn check_input(&self, inputs: &[f64], batch: usize) -> Result<(), NnError> {
        if inputs.len() != batch * self.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {} values, expected {batch}x{}",
                inputs.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Post-activation outputs of every layer (the last one is linear).
    fn activations(&self, inputs: &[f64], batch: usize) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let h: &[f64] = if i == 0 { inputs } else { &acts[i - 1] };
            let mut z = Vec::with_capacity(batch * l.n_out);
            for _ in 0..batch {
                z.extend_from_slice(&l.bias);
            }
            // Z (B×out) = H (B×in) · Wᵀ (in×out) + bias
            gemm(batch, l.n_in, l.n_out, h, (l.n_in, 1), &l.weights, (1, l.n_in), 1.0, &mut z);
            if i < last {
                for v in &mut z {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Loss `(1/B) Σ_b ‖f(x_b) − y_b‖²` and its gradient.
    pub fn loss_and_gradient(&self, inputs: &[f64], targets: &[f64], batch: usize) -> Result<(f64, Gradient), NnError> {
        if batch == 0 {
            return Err(NnError::Shape("empty batch".into()));
        }
        self.check_input(inputs, batch)?;
        let n_out = self.output_dim();
        if targets.len() != batch * n_out {
            return Err(NnError::Shape(format!("targets have {} values, expected {batch}x{n_out}", targets.len())));
        }
        let acts = self.activations(inputs, batch);
        let out = acts.last().expect("at least one layer");
        let scale = 1.0 / batch as f64;
        let mut loss = 0.0;
        let mut delta: Vec<f64> = out
            .iter()
            .zip(targets)
            .map(|(y, t)| {
                let r = y - t;
                loss += r * r;
                2.0 * r * scale
            })
            .collect();
        loss *= scale;

        let mut grads: Vec<Dense> = self.layers.iter().map(|l| Dense::zeros(l.n_in, l.n_out)).collect();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let h: &[f64] = if i == 0 { inputs } else { &acts[i - 1] };
            let g = &mut grads[i];
            // dW (out×in) = δᵀ (out×B) · H (B×in)
            gemm(l.n_out, batch, l.n_in, &delta, (1, l.n_out), h, (l.n_in, 1), 0.0, &mut g.weights);
            for row in delta.chunks_exact(l.n_out) {
                for (gb, d) in g.bias.iter_mut().zip(row) {
                    *gb += d;
                }
            }
            if i > 0 {
                // dH (B×in) = δ (B×out) · W (out×in), then ReLU mask
                let mut dh = vec![0.0; batch * l.n_in];
                gemm(batch, l.n_out, l.n_in, &delta, (l.n_out, 1), &l.weights, (l.n_in, 1), 0.0, &mut dh);
                for (d, a) in dh.iter_mut().zip(h) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
                delta = dh;
            }
        }
        Ok((loss, Gradient { layers: grads }))
    }

    /// Mean loss over a whole dataset slice, evaluated in chunks.
    pub fn loss(&self, inputs: &[f64], targets: &[f64], rows: usize) -> Result<f64, NnError> {
        let out = self.forward_batch(inputs, rows)?;
        if targets.len() != out.len() {
            return Err(NnError::Shape("targets do not match outputs".into()));
        }
        let sse: f64 = out.iter().zip(targets).map(|(y, t)| (y - t) * (y - t)).sum();
        Ok(sse / rows.max(1) as f64)
    }
}

/// Supervised regression data, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_in: usize,
    pub n_out: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, inputs: Vec::new(), targets: Vec::new() }
    }

    pub fn push(&mut self, input: &[f64], target: &[f64]) {
        assert_eq!(input.len(), self.n_in, "input width");
        assert_eq!(target.len(), self.n_out, "target width");
        self.inputs.extend_from_slice(input);
        self.targets.extend_from_slice(target);
    }

    pub fn len(&self) -> usize {
        if self.n_in == 0 {
            0
        } else {
            self.inputs.len() / self.n_in
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.inputs[i * self.n_in..(i + 1) * self.n_in], &self.targets[i * self.n_out..(i + 1) * self.n_out])
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * self.n_in);
        let mut y = Vec::with_capacity(idx.len() * self.n_out);
        for &i in idx {
            let (a, b) = self.row(i);
            x.extend_from_slice(a);
            y.extend_from_slice(b);
        }
        (x, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 64, max_epochs: 300, patience: 20, validation_fraction: 0.2, seed: 0 }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(NnError::Spec("validation_fraction must be in (0, 1)".into()));
        }
        if self.max_epochs == 0 {
            return Err(NnError::Spec("max_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::Spec("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Spec("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Loss of the returned parameters on the training split.
    pub train_loss: f64,
    pub train_rows: usize,
    pub val_rows: usize,
    pub val_history: Vec<f64>,
    /// Best validation loss seen up to each epoch.
    pub best_history: Vec<f64>,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(lr: f64, n: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, params: &mut [Dense], grad: &Gradient) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut off = 0;
        for (p, g) in params.iter_mut().zip(&grad.layers) {
            for (w, gw) in p.weights.iter_mut().chain(p.bias.iter_mut()).zip(g.weights.iter().chain(&g.bias)) {
                let m = &mut self.m[off];
                let v = &mut self.v[off];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gw;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gw * gw;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                off += 1;
            }
        }
    }
}

pub const MIN_DATASET_ROWS: usize = 10;

/// Mini-batch Adam with a seeded train/validation split and early stopping.
/// Returns the parameters of the best validation epoch.
pub fn fit(initial: &Mlp, data: &Dataset, spec: &TrainSpec) -> Result<(Mlp, TrainReport), NnError> {
    spec.validate()?;
    if data.n_in != initial.input_dim() || data.n_out != initial.output_dim() {
        return Err(NnError::Shape(format!(
            "dataset is {}→{}, network is {}→{}",
            data.n_in,
            data.n_out,
            initial.input_dim(),
            initial.output_dim()
        )));
    }
    let n = data.len();
    if n < MIN_DATASET_ROWS {
        return Err(NnError::TooSmall { got: n, need: MIN_DATASET_ROWS });
    }

    let mut split_rng = RngStream::derive(spec.seed, &["fit", "split"]).expect("path");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut split_rng);
    let n_val = ((n as f64 * spec.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let (val_x, val_y) = data.gather(val_idx);

    let mut net = initial.clone();
    let mut adam = Adam::new(spec.learning_rate, net.param_count());
    let mut epoch_rng = RngStream::derive(spec.seed, &["fit", "epochs"]).expect("path");

    let mut best = net.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut val_history = Vec::new();
    let mut best_history = Vec::new();
    let mut last_finite = None;

    for epoch in 1..=spec.max_epochs {
        train_idx.shuffle(&mut epoch_rng);
        for (b, chunk) in train_idx.chunks(spec.batch_size).enumerate() {
            let (x, y) = data.gather(chunk);
            let (loss, grad) = net.loss_and_gradient(&x, &y, chunk.len())?;
            if !loss.is_finite() {
                return Err(NnError::NonFinite { epoch, batch: b, last_finite });
            }
            last_finite = Some(loss);
            adam.step(&mut net.layers, &grad);
        }
        let val = net.loss(&val_x, &val_y, val_idx.len())?;
        if !val.is_finite() {
            return Err(NnError::NonFinite { epoch, batch: usize::MAX, last_finite });
        }
        val_history.push(val);
        if val < best_val {
            best_val = val;
            best = net.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        best_history.push(best_val);
        if since_best >= spec.patience {
            break;
        }
    }

    let (tx, ty) = data.gather(&train_idx);
    let train_loss = best.loss(&tx, &ty, train_idx.len())?;
    let report = TrainReport {
        epochs_run: val_history.len(),
        best_epoch,
        best_val_loss: best_val,
        train_loss,
        train_rows: train_idx.len(),
        val_rows: n_val,
        val_history,
        best_history,
    };
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> RngStream {
        RngStream::derive(seed, &["nn-test"]).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = Mlp::zeros(&[3, 64, 64, 4]).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn single_affine_layer() {
        let m = Mlp::from_layers(vec![Dense { n_in: 1, n_out: 1, weights: vec![2.0], bias: vec![1.0] }]).unwrap();
        assert_eq!(m.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = Mlp::zeros(&[3, 4, 2]).unwrap();
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(NnError::Shape(_))));
        assert!(matches!(m.loss_and_gradient(&[1.0, 2.0, 3.0], &[0.0], 1), Err(NnError::Shape(_))));
        assert!(Mlp::zeros(&[3]).is_err());
    }

    #[test]
    fn gradient_zero_at_exact_fit() {
        let m = Mlp::new(&[3, 8, 2], &mut rng(1)).unwrap();
        let x = [0.5, -1.0, 2.0, 1.0, 1.0, 1.0];
        let y = m.forward_batch(&x, 2).unwrap();
        let (loss, g) = m.loss_and_gradient(&x, &y, 2).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn duplicated_batch_gradient_equals_single() {
        let m = Mlp::new(&[3, 8, 8, 2], &mut rng(2)).unwrap();
        let x = [0.3, -0.7, 1.1];
        let y = [0.5, -0.5];
        let (_, g1) = m.loss_and_gradient(&x, &y, 1).unwrap();
        let x4: Vec<f64> = x.iter().cycle().take(12).copied().collect();
        let y4: Vec<f64> = y.iter().cycle().take(8).copied().collect();
        let (_, g4) = m.loss_and_gradient(&x4, &y4, 4).unwrap();
        for (a, b) in g1.flat().iter().zip(g4.flat()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn serde_roundtrip_exact() {
        let m = Mlp::new(&[5, 7, 3], &mut rng(3)).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: Mlp = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let bad = s.replacen("\"sizes\":[5,7,3]", "\"sizes\":[5,7,4]", 1);
        assert!(serde_json::from_str::<Mlp>(&bad).is_err());
    }

    fn toy(n: usize) -> Dataset {
        // y = 0.5·x0 − 0.25·x1 + 0.1 on a grid
        let mut d = Dataset::new(2, 1);
        for i in 0..n {
            let x0 = (i % 17) as f64 / 8.0 - 1.0;
            let x1 = (i / 17) as f64 / 8.0 - 1.0;
            d.push(&[x0, x1], &[0.5 * x0 - 0.25 * x1 + 0.1]);
        }
        d
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let d = toy(50);
        let m = Mlp::new(&[2, 8, 1], &mut rng(4)).unwrap();
        let spec = TrainSpec { patience: 0, ..TrainSpec::default() };
        let (_, r) = fit(&m, &d, &spec).unwrap();
        assert_eq!(r.epochs_run, 1);
    }

    #[test]
    fn too_small_dataset() {
        let d = toy(9);
        let m = Mlp::new(&[2, 8, 1], &mut rng(4)).unwrap();
        assert_eq!(fit(&m, &d, &TrainSpec::default()).unwrap_err(), NnError::TooSmall { got: 9, need: 10 });
    }

    #[test]
    fn invalid_spec_rejected() {
        let d = toy(50);
        let m = Mlp::new(&[2, 8, 1], &mut rng(4)).unwrap();
        let spec = TrainSpec { validation_fraction: 1.0, ..TrainSpec::default() };
        assert!(matches!(fit(&m, &d, &spec), Err(NnError::Spec(_))));
    }

    #[test]
    fn diverging_training_aborts() {
        let mut d = toy(50);
        d.targets[0] = f64::INFINITY;
        let m = Mlp::new(&[2, 8, 1], &mut rng(4)).unwrap();
        let err = fit(&m, &d, &TrainSpec::default()).unwrap_err();
        assert!(matches!(err, NnError::NonFinite { .. }), "{err:?}");
    }

    #[test]
    fn best_history_non_increasing() {
        let d = toy(200);
        let m = Mlp::new(&[2, 16, 1], &mut rng(5)).unwrap();
        let (_, r) = fit(&m, &d, &TrainSpec { max_epochs: 60, ..TrainSpec::default() }).unwrap();
        assert!(r.best_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.best_history.last().copied(), Some(r.best_val_loss));
    }
}
