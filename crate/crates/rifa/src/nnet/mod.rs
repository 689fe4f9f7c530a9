//! Minimal dense-network substrate.
//!
//! Everything learned in this crate is a stack of fully connected layers
//! built from [`MlpParams`]: forward evaluation, exact backpropagation,
//! optimizer steps, and finite-difference gradient checking. The math is
//! generic over the scalar type; the rest of the crate uses the `f64`
//! aliases exported from the crate root.

mod optim;

pub use optim::{Algorithm, OptimizerState};

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Display;
use std::iter::Sum;

/// Scalar bound for all network math. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + Sum + Display + std::fmt::Debug + Serialize + for<'de> Deserialize<'de> + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        Self::from(v).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, thiserror::Error)]
pub enum NnetError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value encountered at layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
}

pub type Result<T> = std::result::Result<T, NnetError>;

/// Elementwise (or, for softmax, vector-wise) activation applied after the
/// affine part of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    Softmax,
}

impl Activation {
    fn apply<F: Scalar>(self, z: &mut [F]) {
        match self {
            Activation::Identity => {}
            Activation::Tanh => {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            Activation::Relu => {
                for v in z.iter_mut() {
                    if *v < F::zero() {
                        *v = F::zero();
                    }
                }
            }
            Activation::Sigmoid => {
                for v in z.iter_mut() {
                    *v = F::one() / (F::one() + (-*v).exp());
                }
            }
            Activation::Softmax => {
                // max-subtraction keeps exp() in range for |x| up to ~700
                let max = z.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for v in z.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                for v in z.iter_mut() {
                    *v = *v / sum;
                }
            }
        }
    }

    /// Maps the gradient w.r.t. the activation output `y` back to the
    /// gradient w.r.t. the pre-activation.
    fn backward<F: Scalar>(self, y: &[F], grad_y: &[F], grad_z: &mut [F]) {
        match self {
            Activation::Identity => grad_z.copy_from_slice(grad_y),
            Activation::Tanh => {
                for ((gz, &gy), &yv) in grad_z.iter_mut().zip(grad_y).zip(y) {
                    *gz = gy * (F::one() - yv * yv);
                }
            }
            Activation::Relu => {
                for ((gz, &gy), &yv) in grad_z.iter_mut().zip(grad_y).zip(y) {
                    *gz = if yv > F::zero() { gy } else { F::zero() };
                }
            }
            Activation::Sigmoid => {
                for ((gz, &gy), &yv) in grad_z.iter_mut().zip(grad_y).zip(y) {
                    *gz = gy * yv * (F::one() - yv);
                }
            }
            Activation::Softmax => {
                // dz = y ∘ (g − ⟨g, y⟩)
                let dot: F = grad_y.iter().zip(y).map(|(&g, &yv)| g * yv).sum();
                for ((gz, &gy), &yv) in grad_z.iter_mut().zip(grad_y).zip(y) {
                    *gz = yv * (gy - dot);
                }
            }
        }
    }
}

/// One dense layer: `y = act(W x + b)` with `W` stored row-major
/// (`out_dim` rows of `in_dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<F> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
    pub activation: Activation,
}

impl<F: Scalar> Layer<F> {
    fn forward(&self, x: &[F], out: &mut Vec<F>) {
        out.clear();
        for row in 0..self.out_dim {
            let w = &self.weight[row * self.in_dim..(row + 1) * self.in_dim];
            let mut acc = self.bias[row];
            for (wi, xi) in w.iter().zip(x) {
                acc = acc + *wi * *xi;
            }
            out.push(acc);
        }
        self.activation.apply(out);
    }
}

/// A multi-layer perceptron: the parameter object for every learned
/// function in the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams<F> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Scalar> MlpParams<F> {
    /// Builds a network with the given layer sizes and activations,
    /// weights drawn uniformly from ±√(6/(fan_in+fan_out)).
    pub fn init<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        assert_eq!(dims.len() - 1, activations.len(), "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let (in_dim, out_dim) = (d[0], d[1]);
                let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
                let weight = (0..in_dim * out_dim)
                    .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
                    .collect();
                // small positive bias instead of zero: with zero biases
                // an all-negative relu layer emits an exact zero vector,
                // which parks downstream relu units exactly on their
                // kink and breaks gradient checks there
                Layer {
                    in_dim,
                    out_dim,
                    weight,
                    bias: vec![F::from_f64(0.01); out_dim],
                    activation,
                }
            })
            .collect();
        MlpParams { layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(NnetError::InvalidNetwork("no layers".into()));
        }
        for (idx, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(NnetError::InvalidNetwork(format!(
                    "layer {} out_dim {} != layer {} in_dim {}",
                    idx,
                    pair[0].out_dim,
                    idx + 1,
                    pair[1].in_dim
                )));
            }
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.weight.len() != layer.in_dim * layer.out_dim || layer.bias.len() != layer.out_dim {
                return Err(NnetError::InvalidNetwork(format!(
                    "layer {idx} parameter shapes inconsistent"
                )));
            }
            if layer.activation == Activation::Softmax && idx + 1 != self.layers.len() {
                return Err(NnetError::InvalidNetwork(format!(
                    "softmax at layer {idx} is not final"
                )));
            }
            if layer.weight.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(NnetError::NonFinite { layer: idx });
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Forward pass.
    pub fn apply(&self, input: &[F]) -> Result<Vec<F>> {
        Ok(self.forward_trace(input)?.output().to_vec())
    }

    /// Forward pass retaining per-layer outputs for backpropagation.
    pub fn forward_trace(&self, input: &[F]) -> Result<Trace<F>> {
        if input.len() != self.in_dim() {
            return Err(NnetError::DimensionMismatch {
                context: "mlp input",
                expected: self.in_dim(),
                got: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(NnetError::NonFinite { layer: 0 });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(activations.last().unwrap(), &mut out);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NnetError::NonFinite { layer: idx });
            }
            activations.push(out);
        }
        Ok(Trace { activations })
    }

    /// Backpropagates `grad_output` through the trace, accumulating
    /// parameter gradients into `grads` (+=) and returning the gradient
    /// with respect to the network input.
    pub fn backward(&self, trace: &Trace<F>, grad_output: &[F], grads: &mut GradientBundle<F>) -> Vec<F> {
        assert_eq!(grad_output.len(), self.out_dim(), "grad_output shape");
        assert_eq!(grads.layers.len(), self.layers.len(), "gradient bundle shape");
        let mut grad_y = grad_output.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let y = &trace.activations[idx + 1];
            let x = &trace.activations[idx];
            let mut grad_z = vec![F::zero(); layer.out_dim];
            layer.activation.backward(y, &grad_y, &mut grad_z);
            let lg = &mut grads.layers[idx];
            let mut grad_x = vec![F::zero(); layer.in_dim];
            for row in 0..layer.out_dim {
                let gz = grad_z[row];
                lg.bias[row] = lg.bias[row] + gz;
                let w = &layer.weight[row * layer.in_dim..(row + 1) * layer.in_dim];
                let gw = &mut lg.weight[row * layer.in_dim..(row + 1) * layer.in_dim];
                for col in 0..layer.in_dim {
                    gw[col] = gw[col] + gz * x[col];
                    grad_x[col] = grad_x[col] + w[col] * gz;
                }
            }
            grad_y = grad_x;
        }
        grad_y
    }

    /// Analytic gradients of `loss_fn ∘ apply` with respect to every
    /// parameter. `loss_fn` returns the loss value and its gradient
    /// with respect to the network outputs.
    pub fn gradients(
        &self,
        loss_fn: impl Fn(&[F]) -> (F, Vec<F>),
        input: &[F],
    ) -> Result<GradientBundle<F>> {
        let trace = self.forward_trace(input)?;
        let (loss, grad_out) = loss_fn(trace.output());
        let mut grads = GradientBundle::zeros_like(self);
        grads.loss = loss;
        self.backward(&trace, &grad_out, &mut grads);
        for (idx, lg) in grads.layers.iter().enumerate() {
            if lg.weight.iter().chain(&lg.bias).any(|v| !v.is_finite()) {
                return Err(NnetError::NonFinite { layer: idx });
            }
        }
        Ok(grads)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Visits every parameter mutably, in a fixed order (layer by layer,
    /// weights then bias). Used by finite differencing and the optimizer.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut F)) {
        for layer in &mut self.layers {
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                f(v);
            }
        }
    }
}

/// Cached per-layer activations from a forward pass; `activations[0]` is
/// the input, the last entry the network output.
#[derive(Debug, Clone)]
pub struct Trace<F> {
    activations: Vec<Vec<F>>,
}

impl<F: Scalar> Trace<F> {
    pub fn output(&self) -> &[F] {
        self.activations.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrads<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

/// Per-parameter partials mirroring an [`MlpParams`], plus the loss value
/// of the pass that produced them. Accumulates across backward calls
/// until [`GradientBundle::zero`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle<F> {
    pub layers: Vec<LayerGrads<F>>,
    pub loss: F,
}

impl<F: Scalar> GradientBundle<F> {
    pub fn zeros_like(params: &MlpParams<F>) -> Self {
        GradientBundle {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: vec![F::zero(); l.weight.len()],
                    bias: vec![F::zero(); l.bias.len()],
                })
                .collect(),
            loss: F::zero(),
        }
    }

    pub fn zero(&mut self) {
        for lg in &mut self.layers {
            lg.weight.iter_mut().for_each(|v| *v = F::zero());
            lg.bias.iter_mut().for_each(|v| *v = F::zero());
        }
        self.loss = F::zero();
    }

    pub fn for_each(&self, mut f: impl FnMut(F)) {
        for lg in &self.layers {
            for v in lg.weight.iter().chain(&lg.bias) {
                f(*v);
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for lg in &mut self.layers {
            for v in lg.weight.iter_mut().chain(lg.bias.iter_mut()) {
                *v = *v * factor;
            }
        }
    }
}

/// Max relative error between analytic gradients and central finite
/// differences of `loss_fn ∘ apply`, over every parameter.
pub fn grad_check<F: Scalar>(
    params: &MlpParams<F>,
    loss_fn: impl Fn(&[F]) -> (F, Vec<F>),
    input: &[F],
    eps: F,
) -> Result<F> {
    assert!(eps > F::zero(), "eps must be positive");
    let analytic = params.gradients(&loss_fn, input)?;
    let mut flat = Vec::with_capacity(params.param_count());
    analytic.for_each(|g| flat.push(g));

    let mut scratch = params.clone();
    let mut max_err = F::zero();
    for idx in 0..flat.len() {
        let numeric = central_difference(&mut scratch, &loss_fn, input, idx, eps)?;
        let a = flat[idx];
        let denom = F::from_f64(1e-12).max(a.abs() + numeric.abs());
        let err = (a - numeric).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

fn central_difference<F: Scalar>(
    params: &mut MlpParams<F>,
    loss_fn: &impl Fn(&[F]) -> (F, Vec<F>),
    input: &[F],
    param_idx: usize,
    eps: F,
) -> Result<F> {
    let eval_at = |delta: F, params: &mut MlpParams<F>| -> Result<F> {
        let mut i = 0;
        params.for_each_param_mut(|v| {
            if i == param_idx {
                *v = *v + delta;
            }
            i += 1;
        });
        let out = params.apply(input)?;
        let (loss, _) = loss_fn(&out);
        let mut i = 0;
        params.for_each_param_mut(|v| {
            if i == param_idx {
                *v = *v - delta;
            }
            i += 1;
        });
        Ok(loss)
    };
    let plus = eval_at(eps, params)?;
    let minus = eval_at(-eps, params)?;
    Ok((plus - minus) / (F::from_f64(2.0) * eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_layer(weight: Vec<f64>, bias: Vec<f64>, act: Activation, in_dim: usize, out_dim: usize) -> MlpParams<f64> {
        MlpParams {
            layers: vec![Layer { in_dim, out_dim, weight, bias, activation: act }],
        }
    }

    #[test]
    fn identity_layer_is_identity() {
        let net = single_layer(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], Activation::Identity, 2, 2);
        assert_eq!(net.apply(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_tanh_layer_outputs_zero() {
        let net = single_layer(vec![0.0; 6], vec![0.0; 2], Activation::Tanh, 3, 2);
        assert_eq!(net.apply(&[5.0, -3.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_softmax_layer_is_uniform() {
        let net = single_layer(vec![0.0; 16], vec![0.0; 4], Activation::Softmax, 4, 4);
        let out = net.apply(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        for v in out {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = single_layer(vec![1.0], vec![0.0], Activation::Identity, 1, 1);
        assert!(matches!(
            net.apply(&[1.0, 2.0]),
            Err(NnetError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        let net = single_layer(vec![1.0], vec![0.0], Activation::Identity, 1, 1);
        assert!(matches!(net.apply(&[f64::NAN]), Err(NnetError::NonFinite { .. })));
    }

    #[test]
    fn softmax_not_final_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MlpParams::<f64>::init(&[2, 3, 2], &[Activation::Softmax, Activation::Identity], &mut rng);
        assert!(net.validate().is_err());
    }

    #[test]
    fn softmax_sums_to_one_under_large_inputs() {
        let net = single_layer(
            (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
            vec![0.0; 4],
            Activation::Softmax,
            4,
            4,
        );
        for scale in [-50.0, -10.0, 0.0, 10.0, 50.0] {
            let out = net.apply(&[scale, -scale, scale / 2.0, 0.0]).unwrap();
            let sum: f64 = out.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sum = {sum}");
            assert!(out.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn linear_gradients_exact() {
        // 1-layer identity net, loss = output[0], input [3]
        let net = single_layer(vec![2.0], vec![0.5], Activation::Identity, 1, 1);
        let grads = net
            .gradients(|out| (out[0], vec![1.0]), &[3.0])
            .unwrap();
        assert_eq!(grads.layers[0].weight[0], 3.0);
        assert_eq!(grads.layers[0].bias[0], 1.0);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = MlpParams::<f64>::init(&[3, 5, 2], &[Activation::Tanh, Activation::Identity], &mut rng);
        let grads = net
            .gradients(|out| (1.0, vec![0.0; out.len()]), &[0.1, -0.2, 0.3])
            .unwrap();
        grads.for_each(|g| assert_eq!(g, 0.0));
    }

    #[test]
    fn gradient_accumulation_sums() {
        let net = single_layer(vec![1.0], vec![0.0], Activation::Identity, 1, 1);
        let trace = net.forward_trace(&[2.0]).unwrap();
        let mut grads = GradientBundle::zeros_like(&net);
        net.backward(&trace, &[1.0], &mut grads);
        net.backward(&trace, &[1.0], &mut grads);
        assert_eq!(grads.layers[0].weight[0], 4.0);
        assert_eq!(grads.layers[0].bias[0], 2.0);
    }

    fn quadratic_loss(out: &[f64]) -> (f64, Vec<f64>) {
        let loss: f64 = out.iter().map(|v| v * v).sum::<f64>() * 0.5;
        (loss, out.to_vec())
    }

    #[test]
    fn random_three_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::<f64>::init(
            &[4, 8, 8, 3],
            &[Activation::Relu, Activation::Tanh, Activation::Identity],
            &mut rng,
        );
        let input: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(&net, quadratic_loss, &input, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn grad_check_exact_on_linear_network() {
        let net = single_layer(vec![1.5, -0.5], vec![0.25], Activation::Identity, 2, 1);
        let err = grad_check(&net, |out| (out[0], vec![1.0]), &[0.3, 0.7], 1e-3).unwrap();
        assert!(err <= 1e-10, "central differences are exact on linear nets, err = {err}");
    }

    #[test]
    fn corrupted_gradient_detected() {
        // recompute the check with one analytic entry doubled; the doubled
        // entry must push the max relative error far from zero
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = MlpParams::<f64>::init(&[3, 6, 2], &[Activation::Tanh, Activation::Identity], &mut rng);
        let input = [0.4, -0.1, 0.9];
        let analytic = net.gradients(quadratic_loss, &input).unwrap();
        // pick the largest-magnitude gradient to corrupt
        let mut best = (0usize, 0.0f64);
        let mut i = 0;
        analytic.for_each(|g| {
            if g.abs() > best.1 {
                best = (i, g.abs());
            }
            i += 1;
        });
        let mut flat = Vec::new();
        analytic.for_each(|g| flat.push(g));
        flat[best.0] *= 2.0;
        // corrupted relative error at that entry: |2a − a| / (|2a| + |a|) = 1/3
        let numeric = {
            let mut scratch = net.clone();
            super::central_difference(&mut scratch, &quadratic_loss, &input, best.0, 1e-5).unwrap()
        };
        let a = flat[best.0];
        let err = (a - numeric).abs() / 1e-12f64.max(a.abs() + numeric.abs());
        assert!(err > 0.3, "corruption must be detected, err = {err}");
    }

    #[test]
    fn grad_check_100_random_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let depth = rng.gen_range(1..=4);
            let mut dims = vec![rng.gen_range(1..=8)];
            for _ in 0..depth {
                dims.push(rng.gen_range(1..=32));
            }
            let acts: Vec<Activation> = (0..depth)
                .map(|i| {
                    if i + 1 == depth {
                        Activation::Identity
                    } else {
                        [Activation::Tanh, Activation::Relu, Activation::Sigmoid][rng.gen_range(0..3)]
                    }
                })
                .collect();
            let net = MlpParams::<f64>::init(&dims, &acts, &mut rng);
            let input: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = grad_check(&net, quadratic_loss, &input, 1e-5).unwrap();
            assert!(err < 1e-4, "trial {trial}: err {err}");
        }
    }

    #[test]
    fn forward_deterministic_for_same_seed() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            MlpParams::<f64>::init(&[4, 16, 4], &[Activation::Relu, Activation::Softmax], &mut rng)
        };
        let (a, b) = (build(), build());
        assert_eq!(a, b);
        let input = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(a.apply(&input).unwrap(), b.apply(&input).unwrap());
        let ga = a.gradients(quadratic_loss, &input).unwrap();
        let gb = b.gradients(quadratic_loss, &input).unwrap();
        assert_eq!(ga, gb);
    }
}
