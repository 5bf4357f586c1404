//! Named parameter sets and the adaptive-moment optimizer.

use crate::dtype::Element;
use crate::error::{CoreError, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
///
/// Iteration order is insertion order and never changes, which keeps
/// gradient/moment alignment and checkpoint layout stable across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<E: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>) {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<E> {
        &self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Wrap every parameter as a tape leaf, in set order.
    pub fn vars(&self, tape: &Tape<E>, trainable: bool) -> Vec<Var<E>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // Low first-moment decay, the usual choice for adversarial training.
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<E: Element> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(params: &ParamSet<E>, cfg: AdamConfig) -> Self {
        OptimizerState {
            cfg,
            step: 0,
            m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// One bias-corrected adaptive-moment update, in place.
///
/// `grads` must align with `params` (same order, same shapes). A non-finite
/// gradient aborts with the offending parameter's name before anything is
/// mutated.
pub fn adam_step<E: Element>(
    params: &mut ParamSet<E>,
    grads: &[Tensor<E>],
    state: &mut OptimizerState<E>,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(CoreError::Config(format!(
            "adam_step got {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensor_at(i).shape() {
            return Err(CoreError::ShapeMismatch {
                context: format!("gradient for {}", params.names()[i]),
                left: g.shape().to_vec(),
                right: params.tensor_at(i).shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(CoreError::NonFinite {
                name: format!("gradient of {}", params.names()[i]),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = E::from_f64(state.cfg.beta1);
    let b2 = E::from_f64(state.cfg.beta2);
    let one = E::one();
    let corr1 = E::from_f64(1.0 - state.cfg.beta1.powi(t));
    let corr2 = E::from_f64(1.0 - state.cfg.beta2.powi(t));
    let lr = E::from_f64(state.cfg.lr);
    let eps = E::from_f64(state.cfg.eps);

    for i in 0..params.len() {
        let g = &grads[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.tensors_mut()[i].data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let m_hat = m[k] / corr1;
            let v_hat = v[k] / corr2;
            p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        let n = v.len();
        p.insert("w", Tensor::from_vec(&[n], v).unwrap());
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = one_param(vec![0.0]);
        let mut st = OptimizerState::new(
            &params,
            AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        );
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        adam_step(&mut params, &[g], &mut st).unwrap();
        let w = params.get("w").unwrap().data()[0];
        // Bias correction makes the first step exactly lr * sign(g), up to eps.
        assert!((w + 1e-3).abs() < 1e-6, "w = {w}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(vec![1.5, -2.0]);
        let before = params.clone();
        let mut st = OptimizerState::new(&params, AdamConfig::default());
        let g = Tensor::zeros(&[2]);
        adam_step(&mut params, &[g], &mut st).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize (x - 3)^2 from x0 = 0 with lr 0.1; the expected endpoint
        // below was frozen from running this exact update rule.
        let mut params = one_param(vec![0.0]);
        let mut st = OptimizerState::new(
            &params,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        for _ in 0..100 {
            let x = params.get("w").unwrap().data()[0];
            let g = Tensor::from_vec(&[1], vec![2.0 * (x - 3.0)]).unwrap();
            adam_step(&mut params, &[g], &mut st).unwrap();
        }
        let x = params.get("w").unwrap().data()[0];
        assert!((x - 3.0).abs() < 0.5, "x = {x}");
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut params = one_param(vec![0.0]);
        let mut st = OptimizerState::new(&params, AdamConfig::default());
        let g = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        let err = adam_step(&mut params, &[g], &mut st).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
    }
}
