use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tensor, TensorError};

/// Iterations between learning-rate halvings.
pub const LR_DECAY_PERIOD: u64 = 2000;
pub const LR_DECAY_FACTOR: f64 = 0.5;

/// Step-decayed learning rate: `lr0 * 0.5^floor(iteration / 2000)`.
pub fn lr_at(iteration: u64, lr0: f64) -> f64 {
    step_decay(iteration, lr0, LR_DECAY_FACTOR, LR_DECAY_PERIOD)
}

pub fn step_decay(iteration: u64, lr0: f64, factor: f64, period: u64) -> f64 {
    lr0 * factor.powi((iteration / period.max(1)) as i32)
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, grad, trainable: true }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        self.value.check_same_shape(&grad, "set_grad")?;
        self.grad = grad;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional L2 penalty folded into the gradient (`g + wd * p`).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    pub t: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for every trainable parameter, in order.
    pub fn new(params: &[Parameter<T>], config: AdamConfig) -> Self {
        let tracked: Vec<&Parameter<T>> = params.iter().filter(|p| p.trainable).collect();
        AdamState {
            config,
            t: 0,
            names: tracked.iter().map(|p| p.name.clone()).collect(),
            m: tracked.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: tracked.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// One bias-corrected Adam update of every trainable parameter from its
    /// `grad` field.
    pub fn step(&mut self, params: &mut [Parameter<T>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(TensorError::contract("adam_step", format!("learning rate must be positive, got {lr}")));
        }
        let mut tracked: Vec<&mut Parameter<T>> = params.iter_mut().filter(|p| p.trainable).collect();
        if tracked.len() != self.names.len() {
            return Err(TensorError::contract(
                "adam_step",
                format!("state tracks {} parameters, got {}", self.names.len(), tracked.len()),
            ));
        }
        for (i, p) in tracked.iter().enumerate() {
            if p.name != self.names[i] || p.value.shape() != self.m[i].shape() {
                return Err(TensorError::shape(
                    "adam_step",
                    format!("parameter {} does not match state entry {}", p.name, self.names[i]),
                ));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in tracked.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let grad = p.grad.data().to_vec();
            for (j, (w, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                let g = g.as_f64() + weight_decay * w.as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * g;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_halves_every_two_thousand() {
        assert_eq!(lr_at(0, 1e-4), 1e-4);
        assert_eq!(lr_at(1999, 1e-4), 1e-4);
        assert!((lr_at(2000, 1e-4) - 5e-5).abs() < 1e-18);
        assert!((lr_at(4000, 1e-4) - 2.5e-5).abs() < 1e-18);
    }

    fn scalar_param(v: f64) -> Parameter<f64> {
        Parameter::new("w", Tensor::new(&[1], vec![v]).unwrap())
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![scalar_param(1.0)];
        p[0].grad = Tensor::new(&[1], vec![0.1]).unwrap();
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.step(&mut p, 1e-4).unwrap();
        let delta = p[0].value.data()[0] - 1.0;
        assert!((delta + 1e-4).abs() < 1e-7, "delta {delta}");
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![scalar_param(0.3)];
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.step(&mut p, 1e-3).unwrap();
        st.step(&mut p, 1e-3).unwrap();
        assert_eq!(p[0].value.data()[0], 0.3);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = vec![scalar_param(2.0)];
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut prev = 4.0;
        for _ in 0..2 {
            let w = p[0].value.data()[0];
            p[0].grad = Tensor::new(&[1], vec![2.0 * w]).unwrap();
            st.step(&mut p, 0.1).unwrap();
            let w = p[0].value.data()[0];
            assert!(w * w < prev);
            prev = w * w;
        }
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut p = vec![scalar_param(1.0), scalar_param(1.0)];
        p[1].name = "frozen".into();
        p[1].trainable = false;
        p[0].grad = Tensor::new(&[1], vec![1.0]).unwrap();
        p[1].grad = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert_eq!(st.names, vec!["w".to_string()]);
        st.step(&mut p, 0.01).unwrap();
        assert!(p[0].value.data()[0] < 1.0);
        assert_eq!(p[1].value.data()[0], 1.0);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = vec![scalar_param(1.0)];
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert!(st.step(&mut p, 0.0).is_err());
    }
}
