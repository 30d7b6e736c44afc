//! The embedding network: a rectifier MLP with dropout whose final linear
//! layer is the projection to `h`, plus backpropagation and Adam.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, DwacError, Result};
use crate::heads::{GaussianKernel, HeadKind};
use crate::linalg::{decimal, Matrix};
use crate::rng::{gaussian_sample, SeededRng};

/// Hidden widths of the tabular architecture `(|x|, 32, 8, |h|)`.
pub const TABULAR_HIDDEN: [usize; 2] = [32, 8];

/// Layer widths from input to `h`, and the dropout applied after every hidden
/// layer. Hidden layers use the rectifier, the last layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub dropout_prob: f64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, dropout_prob: f64) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            dropout_prob,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `(input, 32, 8, h_dim)`.
    pub fn tabular(input_dim: usize, h_dim: usize, dropout_prob: f64) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&TABULAR_HIDDEN);
        sizes.push(h_dim);
        Self::new(sizes, dropout_prob)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(invalid("an MLP needs at least input and output sizes"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(invalid(format!(
                "layer sizes must be positive: {:?}",
                self.layer_sizes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(invalid(format!(
                "dropout probability must be in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One affine layer, `z = a · W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    #[serde(
        serialize_with = "decimal::serialize_vec",
        deserialize_with = "decimal::deserialize_vec"
    )]
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weights: Matrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.data().iter().chain(&self.bias)
    }
}

/// Gradients, or Adam moments, shaped exactly like the model's layers.
pub type ParamGrads = Vec<Layer>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

static PARAM_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    PARAM_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// All learned parameters of the embedding `f(x)` and projection to `h`.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    spec: MlpSpec,
    layers: Vec<Layer>,
    head: HeadKind,
    kernel: GaussianKernel,
    // fresh on every parameter change; forward caches remember it
    version: u64,
}

impl PartialEq for EmbeddingModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.layers == other.layers
            && self.head == other.head
            && self.kernel == other.kernel
    }
}

impl EmbeddingModel {
    /// Zero biases, Gaussian weights with std `sqrt(2 / fan_in)`.
    pub fn init(
        spec: MlpSpec,
        head: HeadKind,
        kernel: GaussianKernel,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layer_sizes.len() - 1);
        for w in spec.layer_sizes.windows(2) {
            let scale = (2.0 / w[0] as f64).sqrt();
            layers.push(Layer {
                weights: gaussian_sample(w[0], w[1], scale, rng)?,
                bias: vec![0.0; w[1]],
            });
        }
        Self::from_parts(spec, layers, head, kernel)
    }

    /// Assembles a model from explicit parameters, checking that shapes chain.
    pub fn from_parts(
        spec: MlpSpec,
        layers: Vec<Layer>,
        head: HeadKind,
        kernel: GaussianKernel,
    ) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layer_sizes.len() - 1 {
            return Err(shape(
                "EmbeddingModel",
                format!("{} layers for sizes {:?}", layers.len(), spec.layer_sizes),
            ));
        }
        for (i, (layer, w)) in layers.iter().zip(spec.layer_sizes.windows(2)).enumerate() {
            if layer.weights.shape() != (w[0], w[1]) || layer.bias.len() != w[1] {
                return Err(shape(
                    "EmbeddingModel",
                    format!(
                        "layer {i} has weights {:?} and {} biases, expected ({}, {})",
                        layer.weights.shape(),
                        layer.bias.len(),
                        w[0],
                        w[1]
                    ),
                ));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(DwacError::NonFinite(format!("bias of layer {i}")));
            }
        }
        Ok(Self {
            spec,
            layers,
            head,
            kernel,
            version: next_version(),
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn kernel(&self) -> GaussianKernel {
        self.kernel
    }

    pub fn h_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    /// Runs the network. In [`Mode::Eval`] dropout is the identity and `rng` is
    /// not touched; in [`Mode::Train`] surviving hidden units are scaled by
    /// `1 / (1 - p)`.
    pub fn forward(
        &self,
        x: &Matrix,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(shape(
                "forward",
                format!(
                    "input has {} columns, model expects {}",
                    x.cols(),
                    self.input_dim()
                ),
            ));
        }
        let p = self.spec.dropout_prob;
        let use_dropout = mode == Mode::Train && p > 0.0;
        let keep_scale = 1.0 / (1.0 - p);
        let last = self.layers.len() - 1;

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.matmul(&layer.weights)?;
            z.add_row_vector(&layer.bias);
            inputs.push(a);
            if l == last {
                a = z;
                break;
            }
            let mut act = z.map(|v| v.max(0.0));
            let mask = if use_dropout {
                let m: Vec<f64> = (0..act.data().len())
                    .map(|_| if rng.uniform() < p { 0.0 } else { keep_scale })
                    .collect();
                for (v, &s) in act.data_mut().iter_mut().zip(&m) {
                    *v *= s;
                }
                Some(m)
            } else {
                None
            };
            pre_acts.push(z);
            masks.push(mask);
            a = act;
        }
        let cache = ForwardCache {
            version: self.version,
            batch: x.rows(),
            inputs,
            pre_acts,
            masks,
        };
        Ok((a, cache))
    }

    /// Eval-mode embedding, without a cache.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(shape(
                "embed",
                format!(
                    "input has {} columns, model expects {}",
                    x.cols(),
                    self.input_dim()
                ),
            ));
        }
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.matmul(&layer.weights)?;
            z.add_row_vector(&layer.bias);
            a = if l == last { z } else { z.map(|v| v.max(0.0)) };
        }
        Ok(a)
    }

    /// Gradients of a loss with respect to every weight and bias, given the
    /// loss gradient at the output `H`.
    pub fn backward(&self, cache: &ForwardCache, d_h: &Matrix) -> Result<ParamGrads> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(DwacError::StaleCache);
        }
        if d_h.shape() != (cache.batch, self.h_dim()) {
            return Err(shape(
                "backward",
                format!(
                    "output gradient is {:?}, expected ({}, {})",
                    d_h.shape(),
                    cache.batch,
                    self.h_dim()
                ),
            ));
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut d_z = d_h.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            grads.push(Layer {
                weights: cache.inputs[l].t_matmul(&d_z)?,
                bias: d_z.col_sums(),
            });
            if l == 0 {
                break;
            }
            let mut d_a = d_z.matmul_t(&layer.weights)?;
            let z = &cache.pre_acts[l - 1];
            let mask = cache.masks[l - 1].as_deref();
            for (i, g) in d_a.data_mut().iter_mut().enumerate() {
                let gate = if z.data()[i] > 0.0 { 1.0 } else { 0.0 };
                *g *= gate * mask.map_or(1.0, |m| m[i]);
            }
            d_z = d_a;
        }
        grads.reverse();
        Ok(grads)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        self.version = next_version();
        &mut self.layers
    }

    pub(crate) fn zero_grads(&self) -> ParamGrads {
        self.layers.iter().map(Layer::zeros_like).collect()
    }
}

/// Intermediate values of one [`EmbeddingModel::forward`] call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    batch: usize,
    inputs: Vec<Matrix>,
    pre_acts: Vec<Matrix>,
    masks: Vec<Option<Vec<f64>>>,
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: ParamGrads,
    second: ParamGrads,
}

impl AdamState {
    /// Zeroed moments for `model`, with `beta1 = 0.9`, `beta2 = 0.999`,
    /// `epsilon = 1e-8`.
    pub fn new(model: &EmbeddingModel, learning_rate: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: model.zero_grads(),
            second: model.zero_grads(),
        })
    }

    pub fn first_moments(&self) -> &[Layer] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Layer] {
        &self.second
    }
}

fn same_shapes(a: &[Layer], b: &[Layer]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.weights.shape() == y.weights.shape() && x.bias.len() == y.bias.len())
}

/// One bias-corrected Adam update of `model` in place.
///
/// Gradients containing NaN or infinities are rejected before anything is
/// modified.
pub fn adam_step(model: &mut EmbeddingModel, grads: &[Layer], state: &mut AdamState) -> Result<()> {
    if !same_shapes(model.layers(), grads) || !same_shapes(model.layers(), &state.first) {
        return Err(shape(
            "adam_step",
            "gradient or moment shapes differ from parameters",
        ));
    }
    if grads.iter().flat_map(Layer::values).any(|g| !g.is_finite()) {
        return Err(DwacError::NonFinite("gradient passed to adam_step".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    };

    let AdamState { first, second, .. } = state;
    for (((layer, g), m), v) in model
        .layers_mut()
        .iter_mut()
        .zip(grads)
        .zip(first.iter_mut())
        .zip(second.iter_mut())
    {
        update(
            layer.weights.data_mut(),
            g.weights.data(),
            m.weights.data_mut(),
            v.weights.data_mut(),
        );
        update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(sizes: &[usize], dropout: f64, seed: u64) -> EmbeddingModel {
        let spec = MlpSpec::new(sizes.to_vec(), dropout).unwrap();
        EmbeddingModel::init(
            spec,
            HeadKind::Dwac,
            GaussianKernel::default(),
            &mut SeededRng::new(seed),
        )
        .unwrap()
    }

    fn zeroed(model: &EmbeddingModel) -> EmbeddingModel {
        let layers = model.zero_grads();
        EmbeddingModel::from_parts(model.spec().clone(), layers, model.head(), model.kernel())
            .unwrap()
    }

    /// Sum of `H ⊙ weights`: a linear readout with a known output gradient.
    fn readout(h: &Matrix, w: &Matrix) -> f64 {
        h.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], 0.0).is_err());
        assert!(MlpSpec::new(vec![3, 2], 1.0).is_err());
        assert!(MlpSpec::new(vec![3, 2], -0.1).is_err());
        assert_eq!(
            MlpSpec::tabular(10, 4, 0.2).unwrap().layer_sizes,
            vec![10, 32, 8, 4]
        );
        assert_eq!(
            MlpSpec::new(vec![3, 4, 2], 0.0).unwrap().parameter_count(),
            26
        );
    }

    #[test]
    fn zero_parameters_embed_to_zero() {
        let model = zeroed(&tiny(&[3, 5, 2], 0.0, 1));
        let x = gaussian_sample(4, 3, 1.0, &mut SeededRng::new(2)).unwrap();
        let h = model.embed(&x).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        let (h2, _) = model
            .forward(&x, Mode::Train, &mut SeededRng::new(3))
            .unwrap();
        assert!(h2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = tiny(&[3, 8, 2], 0.5, 4);
        let x = gaussian_sample(6, 3, 1.0, &mut SeededRng::new(5)).unwrap();
        let (a, _) = model
            .forward(&x, Mode::Eval, &mut SeededRng::new(1))
            .unwrap();
        let (b, _) = model
            .forward(&x, Mode::Eval, &mut SeededRng::new(2))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, model.embed(&x).unwrap());
    }

    #[test]
    fn identity_linear_layer() {
        let spec = MlpSpec::new(vec![3, 3], 0.0).unwrap();
        let layers = vec![Layer {
            weights: Matrix::identity(3),
            bias: vec![0.0; 3],
        }];
        let model =
            EmbeddingModel::from_parts(spec, layers, HeadKind::Softmax, GaussianKernel::default())
                .unwrap();
        let x = gaussian_sample(5, 3, 1.0, &mut SeededRng::new(0)).unwrap();
        assert_eq!(model.embed(&x).unwrap(), x);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = tiny(&[3, 2], 0.0, 0);
        assert!(model.embed(&Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let model = tiny(&[3, 4, 2], 0.2, 9);
        let x = gaussian_sample(5, 3, 1.0, &mut SeededRng::new(1)).unwrap();
        let (_, cache) = model
            .forward(&x, Mode::Train, &mut SeededRng::new(2))
            .unwrap();
        let grads = model.backward(&cache, &Matrix::zeros(5, 2)).unwrap();
        assert!(grads.iter().flat_map(Layer::values).all(|&g| g == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut model = tiny(&[3, 4, 2], 0.0, 9);
        let x = gaussian_sample(5, 3, 1.0, &mut SeededRng::new(1)).unwrap();
        let (_, cache) = model
            .forward(&x, Mode::Eval, &mut SeededRng::new(2))
            .unwrap();
        let grads = model.zero_grads();
        let mut state = AdamState::new(&model, 1e-3).unwrap();
        adam_step(&mut model, &grads, &mut state).unwrap();
        assert!(matches!(
            model.backward(&cache, &Matrix::zeros(5, 2)),
            Err(DwacError::StaleCache)
        ));
        let other = tiny(&[3, 4, 2], 0.0, 10);
        assert!(matches!(
            other.backward(&cache, &Matrix::zeros(5, 2)),
            Err(DwacError::StaleCache)
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        // sizes 3 → 4 → 2, batch of 5, a random linear readout of H as the loss
        let model = tiny(&[3, 4, 2], 0.25, 21);
        let x = gaussian_sample(5, 3, 1.0, &mut SeededRng::new(22)).unwrap();
        let readout_w = gaussian_sample(5, 2, 1.0, &mut SeededRng::new(23)).unwrap();
        let mask_rng = SeededRng::new(24);

        let (_, cache) = model
            .forward(&x, Mode::Train, &mut mask_rng.clone())
            .unwrap();
        let grads = model.backward(&cache, &readout_w).unwrap();

        let step = 1e-5;
        let loss_at = |m: &EmbeddingModel| {
            let (h, _) = m.forward(&x, Mode::Train, &mut mask_rng.clone()).unwrap();
            readout(&h, &readout_w)
        };
        for (l, grad) in grads.iter().enumerate() {
            let n_w = model.layers()[l].weights.data().len();
            let n_b = model.layers()[l].bias.len();
            for idx in 0..n_w + n_b {
                let perturb = |delta: f64| {
                    let mut m = model.clone();
                    let layer = &mut m.layers_mut()[l];
                    if idx < n_w {
                        layer.weights.data_mut()[idx] += delta;
                    } else {
                        layer.bias[idx - n_w] += delta;
                    }
                    loss_at(&m)
                };
                let numeric = (perturb(step) - perturb(-step)) / (2.0 * step);
                let analytic = if idx < n_w {
                    grad.weights.data()[idx]
                } else {
                    grad.bias[idx - n_w]
                };
                let denom = analytic.abs().max(numeric.abs()).max(1e-7);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "layer {l} param {idx}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn duplicated_row_doubles_its_contribution() {
        let model = tiny(&[3, 4, 2], 0.0, 31);
        let x = gaussian_sample(1, 3, 1.0, &mut SeededRng::new(32)).unwrap();
        let d1 = gaussian_sample(1, 2, 1.0, &mut SeededRng::new(33)).unwrap();
        let x2 = x.vstack(&x).unwrap();
        let d2 = d1.vstack(&d1).unwrap();
        let mut rng = SeededRng::new(0);
        let (_, c1) = model.forward(&x, Mode::Eval, &mut rng).unwrap();
        let (_, c2) = model.forward(&x2, Mode::Eval, &mut rng).unwrap();
        let g1 = model.backward(&c1, &d1).unwrap();
        let g2 = model.backward(&c2, &d2).unwrap();
        for (a, b) in g1
            .iter()
            .flat_map(Layer::values)
            .zip(g2.iter().flat_map(Layer::values))
        {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_unbiased() {
        // one hidden unit layer followed by identity readout of its activations
        let spec = MlpSpec::new(vec![2, 3, 3], 0.3).unwrap();
        let layers = vec![
            Layer {
                weights: Matrix::from_rows(&[[1.0, -0.5, 0.25], [0.5, 1.0, 2.0]]).unwrap(),
                bias: vec![0.1, 0.2, 0.3],
            },
            Layer {
                weights: Matrix::identity(3),
                bias: vec![0.0; 3],
            },
        ];
        let model =
            EmbeddingModel::from_parts(spec, layers, HeadKind::Dwac, GaussianKernel::default())
                .unwrap();
        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let eval = model.embed(&x).unwrap();
        let mut rng = SeededRng::new(77);
        let trials = 20_000;
        let mut sums = [0.0; 3];
        let mut zeros = [0usize; 3];
        for _ in 0..trials {
            let (h, _) = model.forward(&x, Mode::Train, &mut rng).unwrap();
            for j in 0..3 {
                sums[j] += h.get(0, j);
                if h.get(0, j) == 0.0 {
                    zeros[j] += 1;
                }
            }
        }
        for j in 0..3 {
            let mean = sums[j] / trials as f64;
            assert!(
                (mean - eval.get(0, j)).abs() / eval.get(0, j) < 0.02,
                "unit {j}"
            );
            let drop_rate = zeros[j] as f64 / trials as f64;
            assert!(
                (drop_rate - 0.3).abs() < 0.015,
                "unit {j} drop rate {drop_rate}"
            );
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut model = tiny(&[2, 2], 0.0, 1);
        let before = model.layers().to_vec();
        let mut state = AdamState::new(&model, 1e-3).unwrap();
        // seed the moments with one real step, then feed zeros
        let mut g = model.zero_grads();
        g[0].bias[0] = 1.0;
        adam_step(&mut model, &g, &mut state).unwrap();
        let after_first = model.layers().to_vec();
        let m_before = state.first_moments()[0].bias[0];
        let zeros = model.zero_grads();
        adam_step(&mut model, &zeros, &mut state).unwrap();
        assert!(state.first_moments()[0].bias[0].abs() < m_before.abs());
        // the weights never saw a gradient
        assert_eq!(model.layers()[0].weights, before[0].weights);
        assert_eq!(after_first[0].weights, before[0].weights);

        let mut fresh = tiny(&[2, 2], 0.0, 1);
        let mut st = AdamState::new(&fresh, 1e-3).unwrap();
        adam_step(&mut fresh, &zeros, &mut st).unwrap();
        assert_eq!(fresh.layers(), &before[..]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut model = zeroed(&tiny(&[1, 1], 0.0, 0));
        let mut state = AdamState::new(&model, 1e-3).unwrap();
        let g = 0.37;
        let mut grads = model.zero_grads();
        grads[0].weights.data_mut()[0] = g;
        adam_step(&mut model, &grads, &mut state).unwrap();
        let moved = model.layers()[0].weights.get(0, 0);
        let expected = -1e-3 * g / (g + 1e-8);
        assert!((moved - expected).abs() < 1e-18);
        assert!((moved + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let model = tiny(&[3, 2], 0.0, 3);
        let mut g = model.zero_grads();
        g[0].weights.data_mut()[1] = -0.4;
        let (mut m1, mut m2) = (model.clone(), model.clone());
        let mut s1 = AdamState::new(&model, 1e-3).unwrap();
        let mut s2 = s1.clone();
        adam_step(&mut m1, &g, &mut s1).unwrap();
        adam_step(&mut m2, &g, &mut s2).unwrap();
        assert_eq!(m1, m2);

        g[0].bias[0] = f64::NAN;
        let snapshot = m1.clone();
        assert!(adam_step(&mut m1, &g, &mut s1).is_err());
        assert_eq!(m1, snapshot);
        assert_eq!(s1.step, 1);
    }
}
