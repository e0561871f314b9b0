//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// First/second moment estimates per parameter plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
    pub t: u64,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            moments: BTreeMap::new(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        AdamConfig {
            lr: lit(0.001),
            beta1: lit(0.9),
            beta2: lit(0.999),
            eps: lit(1e-8),
        }
    }
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// One bias-corrected Adam update over every parameter in the store, using
/// the gradients currently held in `Parameter::grad`.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig<T>) {
    assert!(
        cfg.beta1 > T::zero() && cfg.beta1 < T::one() && cfg.beta2 > T::zero() && cfg.beta2 < T::one(),
        "betas must lie in (0, 1)"
    );
    state.t += 1;
    let t = state.t as i32;
    let bc1 = T::one() - cfg.beta1.powi(t);
    let bc2 = T::one() - cfg.beta2.powi(t);
    let one = T::one();
    for p in store.iter_mut() {
        let (m, v) = state.moments.entry(p.name.clone()).or_insert_with(|| {
            (
                Tensor::zeros(p.value.shape().to_vec()).unwrap(),
                Tensor::zeros(p.value.shape().to_vec()).unwrap(),
            )
        });
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = p.grad.data();
        let pd = p.value.data_mut();
        for i in 0..pd.len() {
            let g = gd[i];
            md[i] = cfg.beta1 * md[i] + (one - cfg.beta1) * g;
            vd[i] = cfg.beta2 * vd[i] + (one - cfg.beta2) * g * g;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] = pd[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
