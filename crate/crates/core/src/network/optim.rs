use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{LayerParams, NetworkParams, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-4)
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate, momentum: 0.8, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        Self { kind: OptimizerKind::SgdMomentum, learning_rate, momentum, ..Self::adam(learning_rate) }
    }
}

/// Accumulators for SGD with momentum (`first` only) or Adam (both moments).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub first: Vec<LayerParams<T>>,
    pub second: Vec<LayerParams<T>>,
    pub step_count: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, params: &NetworkParams<T>) -> Self {
        let zeros = || params.layers.iter().map(LayerParams::zeros_like).collect();
        Self {
            config,
            first: zeros(),
            second: match config.kind {
                OptimizerKind::Adam => zeros(),
                OptimizerKind::SgdMomentum => Vec::new(),
            },
            step_count: 0,
        }
    }

    /// Applies one update in place.
    ///
    /// SGD: `v ← m·v + g; p ← p − lr·v`. Adam: bias-corrected moment
    /// estimates, `p ← p − lr·m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut NetworkParams<T>, grads: &ParamGrads<T>) -> Result<()> {
        if grads.layers.len() != params.layers.len()
            || grads
                .layers
                .iter()
                .zip(&params.layers)
                .any(|(g, p)| g.weights.len() != p.weights.len() || g.bias.len() != p.bias.len())
        {
            return Err(Error::ShapeMismatch {
                expected: "gradients shaped like parameters".into(),
                found: "mismatched gradient layout".into(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                step: self.step_count as usize,
                reason: "non-finite gradient".into(),
            });
        }
        self.step_count += 1;
        let c = self.config;
        let lr = T::lit(c.learning_rate);
        match c.kind {
            OptimizerKind::SgdMomentum => {
                let m = T::lit(c.momentum);
                for ((p, g), v) in params.layers.iter_mut().zip(&grads.layers).zip(&mut self.first) {
                    for (p, g, v) in zip_params(p, g, v) {
                        *v = m * *v + g;
                        *p = *p - lr * *v;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.epsilon));
                let t = self.step_count as i32;
                let corr1 = T::one() - b1.powi(t);
                let corr2 = T::one() - b2.powi(t);
                for (((p, g), m), v) in
                    params.layers.iter_mut().zip(&grads.layers).zip(&mut self.first).zip(&mut self.second)
                {
                    let second: Vec<&mut T> = v.weights.iter_mut().chain(v.bias.iter_mut()).collect();
                    for ((p, g, m), v) in zip_params(p, g, m).zip(second) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let m_hat = *m / corr1;
                        let v_hat = *v / corr2;
                        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn zip_params<'a, T: Scalar>(
    p: &'a mut LayerParams<T>,
    g: &'a LayerParams<T>,
    acc: &'a mut LayerParams<T>,
) -> impl Iterator<Item = (&'a mut T, T, &'a mut T)> {
    p.weights
        .iter_mut()
        .chain(p.bias.iter_mut())
        .zip(g.weights.iter().chain(&g.bias))
        .zip(acc.weights.iter_mut().chain(acc.bias.iter_mut()))
        .map(|((p, &g), a)| (p, g, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureShape;
    use crate::network::{Architecture, LayerSpec};

    fn scalar_net(w: f64) -> NetworkParams<f64> {
        NetworkParams {
            architecture: Architecture::new(FeatureShape::Flat(1), vec![LayerSpec::Dense { in_dim: 1, out_dim: 1 }], 1)
                .unwrap(),
            seed: 0,
            layers: vec![LayerParams { weights: vec![w], bias: vec![0.0] }],
        }
    }

    fn grad(g: f64) -> ParamGrads<f64> {
        ParamGrads { layers: vec![LayerParams { weights: vec![g], bias: vec![0.0] }] }
    }

    #[test]
    fn sgd_first_step_is_plain_gradient_step() {
        let mut p = scalar_net(1.0);
        let mut s = OptimizerState::new(OptimizerConfig::sgd_momentum(0.1, 0.8), &p);
        s.step(&mut p, &grad(1.0)).unwrap();
        assert!((p.layers[0].weights[0] - 0.9).abs() < 1e-15);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn sgd_two_steps_unrolled() {
        // v1 = 1, Δ1 = -0.1; v2 = 0.8 + 1 = 1.8, Δ2 = -0.18
        let mut p = scalar_net(0.0);
        let mut s = OptimizerState::new(OptimizerConfig::sgd_momentum(0.1, 0.8), &p);
        s.step(&mut p, &grad(1.0)).unwrap();
        s.step(&mut p, &grad(1.0)).unwrap();
        assert!((p.layers[0].weights[0] + 0.28).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        for g in [1e-3, 0.5, -3.0, 250.0] {
            let mut p = scalar_net(0.0);
            let mut s = OptimizerState::new(OptimizerConfig::adam(1e-3), &p);
            s.step(&mut p, &grad(g)).unwrap();
            let dp = p.layers[0].weights[0];
            assert!((dp.abs() - 1e-3).abs() < 1e-3 * 1e-4, "g={g} dp={dp}");
            assert_eq!(dp.signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for cfg in [OptimizerConfig::adam(0.1), OptimizerConfig::sgd_momentum(0.1, 0.8)] {
            let mut p = scalar_net(0.7);
            let mut s = OptimizerState::new(cfg, &p);
            s.step(&mut p, &grad(0.0)).unwrap();
            assert_eq!(p.layers[0].weights[0], 0.7);
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = scalar_net(0.0);
        let mut s = OptimizerState::new(OptimizerConfig::adam(0.1), &p);
        assert!(matches!(s.step(&mut p, &grad(f64::NAN)), Err(Error::Divergence { .. })));
        assert_eq!(s.step_count, 0);
    }
}
