use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite or a shape disagrees.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&[f64]], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(Error::dim("adam_step", p.shape(), &[g.len()]));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    state.t += 1;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        eps,
    } = *config;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w = (*w as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::default();
        adam_step(&mut [&mut p], &[&[0.0; 3]], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut s = AdamState::default();
        adam_step(&mut [&mut p], &[&[1.0, 1.0]], &mut s, &cfg).unwrap();
        let expected = (1.0 - 0.1 / (1.0 + 1e-8)) as f32;
        assert_eq!(p.data(), &[expected, expected]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn nan_gradient_is_rejected_without_update() {
        let mut p = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        let mut s = AdamState::default();
        let err = adam_step(&mut [&mut p], &[&[1.0, f64::NAN]], &mut s, &AdamConfig::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(p.data(), &[1.0, 1.0]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn identical_runs_match() {
        let run = || {
            let mut p = Tensor::new([2], vec![0.3, -0.2]).unwrap();
            let mut s = AdamState::default();
            for k in 0..20 {
                let g = [(k as f64).sin(), p.data()[0] as f64];
                adam_step(&mut [&mut p], &[&g], &mut s, &AdamConfig::default()).unwrap();
            }
            p
        };
        assert!(run().bitwise_eq(&run()));
    }
}
