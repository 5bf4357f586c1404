//! Exponential moving average of parameters.
//!
//! shadow <- decay * shadow + (1 - decay) * params, elementwise. The shadow
//! weights are what sampling uses by default.

use crate::dtype::Element;
use crate::error::{CoreError, Result};
use crate::optim::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<E: Element> {
    pub decay: f64,
    pub shadow: ParamSet<E>,
}

impl<E: Element> EmaState<E> {
    /// Shadow initialized to a copy of the current parameters.
    pub fn new(decay: f64, params: &ParamSet<E>) -> Result<Self> {
        Self::with_shadow(decay, params.clone())
    }

    pub fn with_shadow(decay: f64, shadow: ParamSet<E>) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(CoreError::Config(format!(
                "EMA decay must lie in (0, 1), got {decay}"
            )));
        }
        Ok(EmaState { decay, shadow })
    }
}

pub fn ema_update<E: Element>(ema: &mut EmaState<E>, params: &ParamSet<E>) -> Result<()> {
    if ema.shadow.len() != params.len() {
        return Err(CoreError::Config(format!(
            "EMA shadow tracks {} tensors, update got {}",
            ema.shadow.len(),
            params.len()
        )));
    }
    let d = E::from_f64(ema.decay);
    let one_minus = E::from_f64(1.0 - ema.decay);
    for (i, p) in params.tensors().iter().enumerate() {
        let s = &mut ema.shadow.tensors_mut()[i];
        if s.shape() != p.shape() {
            return Err(CoreError::ShapeMismatch {
                context: format!("EMA shadow for {}", params.names()[i]),
                left: s.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        for (sk, &pk) in s.data_mut().iter_mut().zip(p.data()) {
            *sk = d * *sk + one_minus * pk;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::full(&[2], v));
        p
    }

    #[test]
    fn single_update_from_zero_shadow() {
        let p = params(1.0);
        let mut ema = EmaState::with_shadow(0.999, params(0.0)).unwrap();
        ema_update(&mut ema, &p).unwrap();
        let s = ema.shadow.get("w").unwrap().data()[0];
        assert!((s - 0.001).abs() < 1e-12);
    }

    #[test]
    fn geometric_convergence_to_constant_params() {
        // k steps from shadow 0 toward constant p: shadow = p * (1 - d^k).
        let d = 0.9;
        let pv = 2.5;
        let p = params(pv);
        let mut ema = EmaState::with_shadow(d, params(0.0)).unwrap();
        for _ in 0..17 {
            ema_update(&mut ema, &p).unwrap();
        }
        let expect = pv * (1.0 - d.powi(17));
        let s = ema.shadow.get("w").unwrap().data()[0];
        assert!((s - expect).abs() < 1e-12, "{s} vs {expect}");
    }

    #[test]
    fn fixed_point_when_shadow_equals_params() {
        let p = params(0.7);
        let mut ema = EmaState::new(0.99, &p).unwrap();
        ema_update(&mut ema, &p).unwrap();
        assert_eq!(ema.shadow, p);
    }

    #[test]
    fn decay_outside_unit_interval_rejected() {
        assert!(EmaState::with_shadow(1.0, params(0.0)).is_err());
        assert!(EmaState::with_shadow(0.0, params(0.0)).is_err());
        assert!(EmaState::with_shadow(-0.5, params(0.0)).is_err());
    }
}
