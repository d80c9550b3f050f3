use serde::{Deserialize, Serialize};

use super::{Gradients, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one parameter set, stored slice-for-slice.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .param_slices()
            .iter()
            .map(|s| vec![0.0; s.len()])
            .collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub(crate) fn from_parts(
        config: AdamConfig,
        step_count: u64,
        first_moment: Vec<Vec<f64>>,
        second_moment: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let same = first_moment.len() == second_moment.len()
            && first_moment
                .iter()
                .zip(&second_moment)
                .all(|(m, v)| m.len() == v.len());
        if !same {
            return Err(Error::Shape("adam moment shapes disagree".into()));
        }
        Ok(Self {
            config,
            step_count,
            first_moment,
            second_moment,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// One bias-corrected Adam step descending along `grads`.
    ///
    /// Parameters and moments are left untouched if any gradient is non-finite.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &Gradients) -> Result<()> {
        let mut slices = params.param_slices_mut();
        let g = grads.slices();
        if slices.len() != g.len() || slices.len() != self.first_moment.len() {
            return Err(Error::Shape("adam: parameter/gradient layout mismatch".into()));
        }
        for ((p, gs), m) in slices.iter().zip(g).zip(&self.first_moment) {
            if p.len() != gs.len() || p.len() != m.len() {
                return Err(Error::Shape("adam: slice length mismatch".into()));
            }
        }
        if !grads.all_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for (((p, gs), m), v) in slices
            .iter_mut()
            .zip(g)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                let gi = gs[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense, LayerSpec, Mlp};

    fn unit(w: f64, b: f64) -> Mlp {
        let spec = LayerSpec::new(1, 1, Activation::None);
        Mlp::from_layers(vec![Dense::from_parts(spec, vec![w], vec![b]).unwrap()]).unwrap()
    }

    fn grads(w: f64, b: f64) -> Gradients {
        Gradients::from_slices(vec![vec![w], vec![b]])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = unit(0.7, -0.2);
        let mut opt = AdamState::new(&net, AdamConfig::default());
        opt.step(&mut net, &grads(0.0, 0.0)).unwrap();
        assert_eq!(net, unit(0.7, -0.2));
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let lr = 1e-3;
        let mut net = unit(0.0, 0.0);
        let mut opt = AdamState::new(&net, AdamConfig::with_learning_rate(lr));
        opt.step(&mut net, &grads(0.37, -42.0)).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let w = net.layers()[0].weights()[0];
        let b = net.layers()[0].biases()[0];
        assert!((w + lr * 0.37 / (0.37 + 1e-8)).abs() < 1e-15);
        assert!((b - lr * 42.0 / (42.0 + 1e-8)).abs() < 1e-15);
        assert!((w.abs() - lr).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut net = unit(1.0, 1.0);
        let mut opt = AdamState::new(&net, AdamConfig::default());
        let err = opt.step(&mut net, &grads(f64::NAN, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(net, unit(1.0, 1.0));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn identical_calls_are_deterministic() {
        let run = || {
            let mut net = unit(0.3, 0.1);
            let mut opt = AdamState::new(&net, AdamConfig::default());
            for k in 0..5 {
                opt.step(&mut net, &grads(0.1 * k as f64, -0.05)).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn layout_mismatch_is_shape_error() {
        let mut net = unit(0.0, 0.0);
        let mut opt = AdamState::new(&net, AdamConfig::default());
        let bad = Gradients::from_slices(vec![vec![1.0]]);
        assert!(matches!(opt.step(&mut net, &bad), Err(Error::Shape(_))));
    }
}
