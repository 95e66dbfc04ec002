use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

/// One Adam update over `params`, reading each tensor's gradient slot.
///
/// Moments are created on the first call; afterwards the parameter list must
/// keep the same order and shapes.
pub fn adam_step<T: Scalar>(params: &mut [&mut Tensor<T>], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    const OP: &str = "adam_step";
    if state.t == 0 && state.m.is_empty() {
        state.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::shape(
            OP,
            format!("optimizer tracks {} tensors, got {}", state.m.len(), params.len()),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::invalid(OP, format!("parameter {i} has no gradient")));
        }
        if state.m[i].len() != p.numel() {
            return Err(Error::shape(
                OP,
                format!("parameter {i} has {} values, moments have {}", p.numel(), state.m[i].len()),
            ));
        }
    }
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.epsilon);
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let correct1 = T::one() - b1.powi(t);
    let correct2 = T::one() - b2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad().expect("checked above").to_vec();
        for (((x, g), mi), vi) in p.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let m_hat = *mi / correct1;
            let v_hat = *vi / correct2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam bound to the trainable tensors of one model.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState {
                m: Vec::new(),
                v: Vec::new(),
                t: 0,
            },
        }
    }

    pub fn step(&mut self, model: &mut Model<T>) -> Result<()> {
        let mut named = model.named_params_mut();
        for (name, p) in &named {
            if p.is_trainable() && p.tensor.grad().is_none() {
                return Err(Error::invalid("adam_step", format!("missing gradient for {name}")));
            }
        }
        let mut tensors: Vec<&mut Tensor<T>> = named
            .iter_mut()
            .filter(|(_, p)| p.is_trainable())
            .map(|(_, p)| &mut p.tensor)
            .collect();
        adam_step(&mut tensors, &mut self.state, &self.config)
    }
}
