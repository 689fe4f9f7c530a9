//! SGD and Adam over a single [`MlpParams`].

use serde::{Deserialize, Serialize};

use super::{GradientBundle, LayerGrads, MlpParams, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
}

/// Optimizer state for one parameter set. Moment accumulators are present
/// iff the algorithm is Adam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState<F> {
    pub algorithm: Algorithm,
    pub learning_rate: F,
    pub step: u64,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
    m: Option<Vec<LayerGrads<F>>>,
    v: Option<Vec<LayerGrads<F>>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn sgd(learning_rate: F) -> Self {
        assert!(learning_rate >= F::zero());
        OptimizerState {
            algorithm: Algorithm::Sgd,
            learning_rate,
            step: 0,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            epsilon: F::from_f64(1e-8),
            m: None,
            v: None,
        }
    }

    pub fn adam(learning_rate: F) -> Self {
        OptimizerState {
            algorithm: Algorithm::Adam,
            ..OptimizerState::sgd(learning_rate)
        }
    }

    /// Applies one update step in place. Accumulators are allocated lazily
    /// on the first Adam step.
    pub fn apply(&mut self, params: &mut MlpParams<F>, grads: &GradientBundle<F>) {
        assert_eq!(params.layers.len(), grads.layers.len(), "shape mismatch");
        for (l, g) in params.layers.iter().zip(&grads.layers) {
            assert_eq!(l.weight.len(), g.weight.len(), "shape mismatch");
            assert_eq!(l.bias.len(), g.bias.len(), "shape mismatch");
        }
        self.step += 1;
        match self.algorithm {
            Algorithm::Sgd => {
                let lr = self.learning_rate;
                let mut flat = Vec::with_capacity(params.param_count());
                grads.for_each(|g| flat.push(g));
                let mut i = 0;
                params.for_each_param_mut(|p| {
                    *p = *p - lr * flat[i];
                    i += 1;
                });
            }
            Algorithm::Adam => {
                if self.m.is_none() {
                    let zeros: Vec<LayerGrads<F>> = grads
                        .layers
                        .iter()
                        .map(|lg| LayerGrads {
                            weight: vec![F::zero(); lg.weight.len()],
                            bias: vec![F::zero(); lg.bias.len()],
                        })
                        .collect();
                    self.m = Some(zeros.clone());
                    self.v = Some(zeros);
                }
                let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
                let t = F::from_f64(self.step as f64);
                let corr1 = F::one() - b1.powf(t);
                let corr2 = F::one() - b2.powf(t);
                let m = self.m.as_mut().unwrap();
                let v = self.v.as_mut().unwrap();
                for ((layer, lg), (lm, lv)) in params
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    let update = |p: &mut F, g: F, m: &mut F, v: &mut F| {
                        *m = b1 * *m + (F::one() - b1) * g;
                        *v = b2 * *v + (F::one() - b2) * g * g;
                        let m_hat = *m / corr1;
                        let v_hat = *v / corr2;
                        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                    };
                    for i in 0..layer.weight.len() {
                        update(&mut layer.weight[i], lg.weight[i], &mut lm.weight[i], &mut lv.weight[i]);
                    }
                    for i in 0..layer.bias.len() {
                        update(&mut layer.bias[i], lg.bias[i], &mut lm.bias[i], &mut lv.bias[i]);
                    }
                }
            }
        }
    }
}
