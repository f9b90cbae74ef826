use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Scalar settings of the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

/// Moment buffers mirroring the parameter list, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(config: AdamConfig, params: &[Tensor<R>]) -> Self {
        let zeros = || params.iter().map(|p| p.map(|_| R::zero())).collect();
        AdamState {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn cast<S: Real>(&self) -> AdamState<S> {
        AdamState {
            config: self.config,
            t: self.t,
            m: self.m.iter().map(|t| t.cast()).collect(),
            v: self.v.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// One bias-corrected Adam update. Parameters and state are untouched when
/// any gradient is non-finite or shapes disagree.
pub fn adam_step<R: Real>(params: &mut [Tensor<R>], grads: &[Tensor<R>], state: &mut AdamState<R>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::config(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::config(format!(
                "adam_step: parameter {i} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::numerical(
                "adam_step",
                format!("non-finite gradient for parameter {i}"),
            ));
        }
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (R::lit(beta1), R::lit(beta2));
    let (one_b1, one_b2) = (R::lit(1.0 - beta1), R::lit(1.0 - beta2));
    let (bc1, bc2, lr, eps) = (R::lit(bc1), R::lit(bc2), R::lit(lr), R::lit(eps));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((theta, &gi), (mi, vi)) in it {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(0.5f64)];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s).unwrap();
        assert!((p[0].item() - (0.5 - 1e-4)).abs() < 1e-11);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let init = Tensor::new(&[3], vec![1.0f64, -2.0, 3.0]).unwrap();
        let mut p = vec![init.clone()];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(&[3]).unwrap()], &mut s).unwrap();
        }
        assert_eq!(p[0], init);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut p = vec![Tensor::scalar(1.0f64)];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(s.t, 0);
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut p = vec![Tensor::<f64>::zeros(&[2]).unwrap()];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3]).unwrap()], &mut s).is_err());
    }
}
