//! Adam with bias correction.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::GradientMap;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update of every parameter that has a gradient entry.
///
/// A non-finite gradient aborts the step before anything is modified.
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &GradientMap<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::Invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    for (id, g) in grads.iter() {
        let p = params.tensors().get(id).ok_or_else(|| {
            Error::Invalid(format!("gradient for unknown parameter {id}"))
        })?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of {}",
                params.name(id)
            )));
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (S::from_f64(cfg.beta1), S::from_f64(cfg.beta2));
    let c1 = 1.0 - libm::pow(cfg.beta1, t);
    let c2 = 1.0 - libm::pow(cfg.beta2, t);
    let step_size = S::from_f64(cfg.lr / c1);
    let c2_sqrt = S::from_f64(libm::sqrt(c2));
    let eps = S::from_f64(cfg.eps);

    for (id, g) in grads.iter() {
        let p = params.tensor_mut(id).data_mut();
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data())
        {
            *mi = b1 * *mi + (S::ONE - b1) * gi;
            *vi = b2 * *vi + (S::ONE - b2) * gi * gi;
            *pi -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use alloc::vec;

    fn setup(vals: &[f64]) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::from_f64(&[vals.len()], vals).unwrap());
        ps
    }

    fn grads_for(ps: &ParamSet<f64>, coeffs: &[f64]) -> GradientMap<f64> {
        // loss = Σ c_i·w_i has gradient c
        let g = Graph::new();
        let w = g.param(0, ps.tensor(0));
        let c = g.constant(&Tensor::from_f64(&[coeffs.len()], coeffs).unwrap());
        let loss = g.sum(g.mul(w, c).unwrap());
        g.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut ps = setup(&[1.0, -2.0]);
        let mut st = AdamState::new(&ps);
        st.m[0] = Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap();
        st.v[0] = Tensor::from_f64(&[2], &[0.1, 0.1]).unwrap();
        let grads = grads_for(&ps, &[0.0, 0.0]);
        let cfg = AdamConfig::default();
        let before = ps.tensor(0).clone();
        adam_step(&mut ps, &grads, &mut st, &cfg).unwrap();
        // moments decay; the parameter still moves along the old momentum
        assert!((st.m[0].data()[0] - 0.45).abs() < 1e-12);
        assert!((st.v[0].data()[0] - 0.0999).abs() < 1e-12);

        let mut fresh = setup(&[1.0, -2.0]);
        let mut fresh_state = AdamState::new(&fresh);
        adam_step(&mut fresh, &grads, &mut fresh_state, &cfg).unwrap();
        assert_eq!(fresh.tensor(0), &before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = setup(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&ps);
        let grads = grads_for(&ps, &[3.0, -0.02, 50.0]);
        let cfg = AdamConfig::with_lr(0.01);
        adam_step(&mut ps, &grads, &mut st, &cfg).unwrap();
        // at t=1: m̂ = g, v̂ = g², update = lr·g/(|g|+ε)
        for (p, g) in ps.tensor(0).data().iter().zip([3.0f64, -0.02, 50.0]) {
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
        }
    }

    #[test]
    fn identical_calls_are_deterministic() {
        let run = || {
            let mut ps = setup(&[0.3, -0.1]);
            let mut st = AdamState::new(&ps);
            for _ in 0..5 {
                let grads = grads_for(&ps, &[0.7, -1.3]);
                adam_step(&mut ps, &grads, &mut st, &AdamConfig::default()).unwrap();
            }
            (ps, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_aborts_without_modification() {
        let mut ps = setup(&[1.0]);
        let mut st = AdamState::new(&ps);
        let grads = GradientMap::from_entries(vec![Some(Tensor::from_f64(&[1], &[f64::NAN]).unwrap())]);
        let err = adam_step(&mut ps, &grads, &mut st, &AdamConfig::default());
        assert!(err.is_err());
        assert_eq!(st.step, 0);
        assert_eq!(ps.tensor(0).data(), &[1.0]);
    }
}
